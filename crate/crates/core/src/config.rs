//! Run configuration shared by the library entry points and the CLI.
//!
//! Defaults reproduce the reference configuration: a 0.5 m grid out to 5 m
//! each side, a +-4 m search window, 5 m sigma gating and a +-5 degree
//! heading sweep in 1 degree steps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codebook::{GridSpec, PathSpec};
use crate::encoder::PcaConfig;
use crate::error::{Error, Result};
use crate::eval::{ExperimentConfig, LightingCondition, TrajectorySpec};
use crate::localizer::LocalizerConfig;
use crate::map_synth::{CameraSpec, LightingSpec, MapRaster, SceneParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub seed: u64,
    pub width_px: usize,
    pub height_px: usize,
    pub meters_per_pixel: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            seed: 7,
            width_px: 1024,
            height_px: 1024,
            meters_per_pixel: 0.25,
        }
    }
}

impl MapConfig {
    pub fn scene(&self) -> SceneParams {
        SceneParams::with_density(self.width_px, self.height_px, self.meters_per_pixel)
    }
}

/// Either explicit waypoints or a straight line through the map center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub waypoints: Option<Vec<[f64; 2]>>,
    pub length: f64,
    pub heading: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            waypoints: None,
            length: 100.0,
            heading: 0.0,
        }
    }
}

impl PathConfig {
    pub fn resolve(&self, map: &MapRaster) -> Result<PathSpec> {
        match &self.waypoints {
            Some(w) => PathSpec::new(w.iter().map(|p| (p[0], p[1])).collect()),
            None => {
                let (cx, cy) = map.center();
                let (s, c) = self.heading.to_radians().sin_cos();
                let half = self.length / 2.0;
                PathSpec::straight((cx + s * half, cy - c * half), self.heading, self.length)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    /// Upper bound on reference views used for training; the grid is
    /// subsampled evenly when it holds more.
    pub max_training_images: usize,
    pub seed: u64,
    pub oversampling: usize,
    pub power_iterations: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            max_training_images: 600,
            seed: 0,
            oversampling: 10,
            power_iterations: 2,
        }
    }
}

impl EncoderConfig {
    pub fn pca(&self) -> PcaConfig {
        PcaConfig {
            oversampling: self.oversampling,
            power_iterations: self.power_iterations,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub map: MapConfig,
    pub path: PathConfig,
    pub grid: GridSpec,
    pub camera: CameraSpec,
    pub reference_light: LightingSpec,
    pub encoder: EncoderConfig,
    pub localizer: LocalizerConfig,
    pub trajectory: TrajectorySpec,
    pub align_fraction: f64,
    pub align_seed: u64,
    pub conditions: Vec<LightingCondition>,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            map: MapConfig::default(),
            path: PathConfig::default(),
            grid: GridSpec::default(),
            camera: CameraSpec::default(),
            reference_light: LightingSpec::reference(),
            encoder: EncoderConfig::default(),
            localizer: LocalizerConfig::default(),
            trajectory: TrajectorySpec::default(),
            align_fraction: 0.10,
            align_seed: 0,
            conditions: vec![LightingCondition::matched(), LightingCondition::flipped()],
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            camera: self.camera,
            localizer: self.localizer,
            trajectory: self.trajectory.clone(),
            align_fraction: self.align_fraction,
            align_seed: self.align_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_constants() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.grid.images_per_meter(), 42.0);
        assert_eq!(cfg.localizer.half_window, 4.0);
        assert_eq!(cfg.localizer.sigma_threshold, 5.0);
        assert_eq!(cfg.localizer.heading_sweep.values().len(), 11);
        assert_eq!(cfg.align_fraction, 0.10);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = RunConfig::from_toml_str("[localizer]\nhalf_window = 2.5\n").unwrap();
        assert_eq!(partial.localizer.half_window, 2.5);
        assert_eq!(partial.grid, GridSpec::default());
        assert!(RunConfig::from_toml_str("[grid]\nalong_spacing = \"x\"").is_err());
    }
}
