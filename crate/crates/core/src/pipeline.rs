//! End-to-end assembly: map, path, encoder and codebook from one config.

use rayon::prelude::*;

use crate::codebook::{build_codebook, enumerate_grid, BuildOptions, Codebook, PathSpec};
use crate::config::RunConfig;
use crate::encoder::{train_linear_encoder, LinearEncoder};
use crate::error::{Error, Result};
use crate::eval::{run_experiment, RunResult};
use crate::image::Image;
use crate::map_synth::{generate_map, render_view, MapRaster};

/// Everything the online stage needs, built from a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Prepared {
    pub map: MapRaster,
    pub path: PathSpec,
    pub encoder: LinearEncoder<f64>,
    pub codebook: Codebook<f64>,
}

/// Reference views at evenly spaced grid indices, at most `limit` of them.
pub fn training_images(
    map: &MapRaster,
    path: &PathSpec,
    config: &RunConfig,
    limit: usize,
) -> Result<Vec<Image>> {
    let points = enumerate_grid(path, &config.grid)?;
    let take = points.len().min(limit.max(1));
    (0..take)
        .into_par_iter()
        .map(|k| {
            let idx = k * points.len() / take;
            render_view(
                map,
                &points[idx].pose,
                &config.camera,
                &config.reference_light,
            )
            .map_err(|e| Error::GridPose {
                index: idx,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Train an encoder on reference views of `path` and build its codebook.
pub fn prepare_reference(map: MapRaster, path: PathSpec, config: &RunConfig) -> Result<Prepared> {
    let images = training_images(&map, &path, config, config.encoder.max_training_images)?;
    let encoder = train_linear_encoder::<f64>(&images, config.encoder.dim, &config.encoder.pca())?;
    drop(images);
    let codebook = build_codebook(
        &map,
        &path,
        &config.grid,
        &config.camera,
        &encoder,
        &config.reference_light,
        &BuildOptions::default(),
    )?;
    Ok(Prepared {
        map,
        path,
        encoder,
        codebook,
    })
}

/// Generate the map described by `config` and prepare its reference data.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let map = generate_map(&config.map.scene(), config.map.seed)?;
    let path = config.path.resolve(&map)?;
    prepare_reference(map, path, config)
}

/// Run every configured lighting condition against prepared data.
pub fn evaluate(prepared: &Prepared, config: &RunConfig) -> Result<Vec<RunResult>> {
    run_experiment(
        &prepared.map,
        &prepared.path,
        &prepared.codebook,
        &prepared.encoder,
        &config.conditions,
        &config.experiment(),
    )
}
