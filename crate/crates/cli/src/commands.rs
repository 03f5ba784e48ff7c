//! Subcommand bodies. Each one resolves the effective config, does its
//! work through the `satloc` library and records outputs in the run dir.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use satloc::codebook::{enumerate_grid, Codebook, PathSpec};
use satloc::config::RunConfig;
use satloc::encoder::{Encoder, LinearEncoder, LookupEncoder};
use satloc::eval::{
    make_trajectory, mix_seed, prior_for, run_experiment, write_error_plot_csv, write_frames_csv,
    LightingCondition,
};
use satloc::image::{read_sidecar, sidecar_path, write_sidecar, Sidecar};
use satloc::localizer::{compute_weights, write_frame_row, LocalizationEstimate, FRAME_CSV_HEADER};
use satloc::map_synth::{
    generate_map, render_view, CameraSpec, LightingSpec, MapRaster, PlanarPose,
};
use satloc::{export_embeddings, import_embeddings, pipeline, rotate_image, Error, Image};
use serde_json::json;

use crate::run_dir::RunDir;
use crate::{
    usage, BenchArgs, BuildCodebookArgs, EvaluateArgs, Global, LocalizeArgs, MapArgs, PathArgs,
    RenderArgs,
};

pub const MAP_STEM: &str = "map";
pub const CODEBOOK_FILE: &str = "codebook.klcb";
pub const ENCODER_FILE: &str = "encoder.lenc";
pub const EXPORT_FILE: &str = "codebook.embx";
pub const FRAMES_CSV: &str = "frames.csv";
pub const GRID_CSV: &str = "grid.csv";
pub const ESTIMATES_CSV: &str = "estimates.csv";
pub const FRAMES_CSV_HEADER: &str =
    "frame_id,file,arc_length,truth_x,truth_y,truth_heading,prior_x,prior_y,prior_heading";

/// Cap rayon's global pool. Later calls in the same process are ignored.
fn init_threads(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn setup(g: &Global) -> Result<RunConfig> {
    let cfg = g.load_config()?;
    init_threads(cfg.threads);
    Ok(cfg)
}

fn apply_path(cfg: &mut RunConfig, a: &PathArgs) {
    if let Some(l) = a.path_length {
        cfg.path.length = l;
        cfg.path.waypoints = None;
    }
    if let Some(h) = a.path_heading {
        cfg.path.heading = h;
        cfg.path.waypoints = None;
    }
}

fn load_map(dir: &Path) -> Result<MapRaster> {
    MapRaster::load(dir, MAP_STEM).with_context(|| format!("loading map from {}", dir.display()))
}

/// Explicit waypoints need no map; the default straight path is laid
/// through the map center.
fn resolve_path(cfg: &RunConfig, map_dir: &Path) -> Result<PathSpec> {
    match &cfg.path.waypoints {
        Some(w) => Ok(PathSpec::new(w.iter().map(|p| (p[0], p[1])).collect())?),
        None => Ok(cfg.path.resolve(&load_map(map_dir)?)?),
    }
}

fn resolve_condition(cfg: &RunConfig, name: &str) -> Result<LightingCondition> {
    cfg.conditions
        .iter()
        .find(|c| c.label == name)
        .cloned()
        .or_else(|| LightingCondition::by_name(name))
        .ok_or_else(|| usage(format!("unknown lighting condition '{name}'")))
}

enum Lighting {
    Fixed(LightingSpec),
    Condition(LightingCondition),
}

impl Lighting {
    fn resolve(cfg: &RunConfig, name: &str) -> Result<Self> {
        if name == "reference" {
            Ok(Lighting::Fixed(cfg.reference_light))
        } else {
            resolve_condition(cfg, name).map(Lighting::Condition)
        }
    }

    fn for_frame(&self, id: u64) -> LightingSpec {
        match self {
            Lighting::Fixed(l) => *l,
            Lighting::Condition(c) => c.frame_lighting(id),
        }
    }
}

fn view_sidecar(cam: &CameraSpec, pose: &PlanarPose, light: &LightingSpec) -> Sidecar {
    Sidecar {
        width_px: cam.out_width_px,
        height_px: cam.out_height_px,
        meters_per_pixel: cam.footprint_width / cam.out_width_px as f64,
        origin_x: pose.x,
        origin_y: pose.y,
        heading_deg: Some(pose.heading),
        seed: None,
        extra: json!({ "camera": cam, "lighting": light }),
    }
}

/// Render, save with sidecar and optionally save the sweep rotations.
/// Rotations are taken from the 8-bit image so they match what
/// `localize` computes after loading the PNG.
fn write_view(
    map: &MapRaster,
    pose: &PlanarPose,
    cfg: &RunConfig,
    light: &LightingSpec,
    png: &Path,
    sweep: bool,
) -> Result<()> {
    let img = render_view(map, pose, &cfg.camera, light)?;
    img.save_png(png)?;
    write_sidecar(png, &view_sidecar(&cfg.camera, pose, light))?;
    if sweep {
        let q = Image::from_u8(img.width(), img.height(), &img.to_u8())?;
        let stem = png.with_extension("");
        for d in cfg.localizer.heading_sweep.values() {
            let rotated = rotate_image(&q, d)?;
            rotated.save_png(format!("{}_rot{d:+}.png", stem.display()))?;
        }
    }
    Ok(())
}

pub fn build_map(g: &Global, a: &MapArgs, name: &str, argv: &[String]) -> Result<()> {
    let mut cfg = setup(g)?;
    let m = &mut cfg.map;
    if let Some(s) = a.seed {
        m.seed = s;
    }
    if let Some(s) = a.size {
        m.width_px = s;
        m.height_px = s;
    }
    if let Some(w) = a.width {
        m.width_px = w;
    }
    if let Some(h) = a.height {
        m.height_px = h;
    }
    if let Some(mpp) = a.mpp {
        m.meters_per_pixel = mpp;
    }
    // Generate before touching the disk so a bad parameter leaves nothing.
    let map = generate_map(&cfg.map.scene(), cfg.map.seed)?;
    let mut run = RunDir::new(&g.out, name);
    map.save(run.root(), MAP_STEM)?;
    for f in ["map.png", "map.json", "map_occluders.png"] {
        run.record(f)?;
    }
    say!(
        "map {}x{} px at {} m/px ({:.0} x {:.0} m), seed {} -> {}",
        map.width_px(),
        map.height_px(),
        map.meters_per_pixel,
        map.width_m(),
        map.height_m(),
        cfg.map.seed,
        run.root().display()
    );
    run.finish(&cfg, argv)
}

pub fn render(g: &Global, a: &RenderArgs, argv: &[String]) -> Result<()> {
    let mut cfg = setup(g)?;
    apply_path(&mut cfg, &a.path);
    let lighting = Lighting::resolve(&cfg, &a.lighting)?;
    let map_dir = a.map.clone().unwrap_or_else(|| g.out.clone());
    let map = load_map(&map_dir)?;
    let mut run = RunDir::new(&g.out, "render");
    run.create()?;

    if let Some(pose) = &a.pose {
        let light = lighting.for_frame(a.frame_id);
        let png = run.path("view.png");
        write_view(&map, pose, &cfg, &light, &png, a.sweep)?;
        run.record("view.png")?;
        run.record("view.json")?;
        if a.sweep {
            for d in cfg.localizer.heading_sweep.values() {
                run.record(format!("view_rot{d:+}.png"))?;
            }
        }
        say!(
            "rendered {} at ({}, {}, {})",
            png.display(),
            pose.x,
            pose.y,
            pose.heading
        );
    } else if a.grid {
        let path = cfg.path.resolve(&map)?;
        let points = enumerate_grid(&path, &cfg.grid)?;
        fs::create_dir_all(run.path("grid"))?;
        points.par_iter().enumerate().try_for_each(|(i, p)| {
            let png = run.path(format!("grid/ref_{i:06}.png"));
            write_view(
                &map,
                &p.pose,
                &cfg,
                &lighting.for_frame(i as u64),
                &png,
                a.sweep,
            )
        })?;
        let mut csv = String::from("id,file,arc_length,x,y,heading\n");
        for (i, p) in points.iter().enumerate() {
            writeln!(
                csv,
                "{i},grid/ref_{i:06}.png,{},{},{},{}",
                p.arc_length, p.pose.x, p.pose.y, p.pose.heading
            )?;
        }
        run.write(GRID_CSV, csv)?;
        run.record("grid")?;
        say!(
            "rendered {} grid views -> {}",
            points.len(),
            run.path("grid").display()
        );
    } else {
        let path = cfg.path.resolve(&map)?;
        let truth = make_trajectory(&path, &cfg.trajectory)?;
        fs::create_dir_all(run.path("frames"))?;
        truth.par_iter().try_for_each(|t| {
            let png = run.path(format!("frames/frame_{:05}.png", t.id));
            write_view(
                &map,
                &t.pose,
                &cfg,
                &lighting.for_frame(t.id),
                &png,
                a.sweep,
            )
        })?;
        let mut csv = format!("{FRAMES_CSV_HEADER}\n");
        for (i, t) in truth.iter().enumerate() {
            let prior = prior_for(&path, &truth, i);
            writeln!(
                csv,
                "{},frames/frame_{:05}.png,{},{},{},{},{},{},{}",
                t.id,
                t.id,
                t.arc_length,
                t.pose.x,
                t.pose.y,
                t.pose.heading,
                prior.x,
                prior.y,
                prior.heading
            )?;
        }
        run.write(FRAMES_CSV, csv)?;
        run.record("frames")?;
        say!(
            "rendered {} frames -> {}",
            truth.len(),
            run.path(FRAMES_CSV).display()
        );
    }
    run.finish(&cfg, argv)
}

pub fn build_codebook(g: &Global, a: &BuildCodebookArgs, argv: &[String]) -> Result<()> {
    let mut cfg = setup(g)?;
    apply_path(&mut cfg, &a.path);
    if let Some(d) = a.dim {
        cfg.encoder.dim = d;
    }
    let map_dir = a.map.clone().unwrap_or_else(|| g.out.clone());
    let mut run = RunDir::new(&g.out, "build-codebook");

    let codebook = match &a.import_embeddings {
        Some(file) => {
            let path = resolve_path(&cfg, &map_dir)?;
            let (meta, records) = import_embeddings::<f64>(file)
                .with_context(|| format!("importing {}", file.display()))?;
            Codebook::from_embeddings(&path, &cfg.grid, meta.dim, records, a.encoder_id.clone())?
        }
        None => {
            let map = load_map(&map_dir)?;
            let path = cfg.path.resolve(&map)?;
            let prepared = pipeline::prepare_reference(map, path, &cfg)?;
            run.create()?;
            prepared.encoder.save(run.path(ENCODER_FILE))?;
            run.record(ENCODER_FILE)?;
            prepared.codebook
        }
    };
    run.create()?;
    codebook.save(run.path(CODEBOOK_FILE))?;
    run.record(CODEBOOK_FILE)?;
    if a.export_embeddings {
        let records: Vec<(u64, Vec<f64>)> = (0..codebook.len())
            .map(|i| (i as u64, codebook.column(i).to_vec()))
            .collect();
        export_embeddings(run.path(EXPORT_FILE), codebook.dim(), &records)?;
        run.record(EXPORT_FILE)?;
    }
    say!(
        "codebook: {} columns x {} dims, encoder '{}', {} bytes -> {}",
        codebook.len(),
        codebook.dim(),
        codebook.encoder_id(),
        codebook.serialized_len(),
        run.path(CODEBOOK_FILE).display()
    );
    run.finish(&cfg, argv)
}

/// One row of a `render` frames.csv.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    pub id: u64,
    pub file: PathBuf,
    pub truth: PlanarPose,
    pub prior: PlanarPose,
}

pub fn read_frames_csv(path: &Path) -> Result<Vec<FrameRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == FRAMES_CSV_HEADER => {}
        _ => bail!("{}: expected header '{FRAMES_CSV_HEADER}'", path.display()),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || format!("{}: malformed row {}", path.display(), n + 2);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                bail!(bad());
            }
            let num = |i: usize| f[i].trim().parse::<f64>().with_context(bad);
            Ok(FrameRow {
                id: f[0].trim().parse().with_context(bad)?,
                file: base.join(f[1].trim()),
                truth: PlanarPose::new(num(3)?, num(4)?, num(5)?),
                prior: PlanarPose::new(num(6)?, num(7)?, num(8)?),
            })
        })
        .collect()
}

pub fn localize(g: &Global, a: &LocalizeArgs, argv: &[String]) -> Result<()> {
    let mut cfg = setup(g)?;
    if let Some(w) = a.window {
        cfg.localizer.half_window = w;
    }
    if let Some(s) = a.sigma_threshold {
        cfg.localizer.sigma_threshold = s;
    }
    let cb_path = a
        .codebook
        .clone()
        .unwrap_or_else(|| g.out.join(CODEBOOK_FILE));
    let codebook = Codebook::<f64>::load(&cb_path)
        .with_context(|| format!("loading codebook {}", cb_path.display()))?;
    let encoder: Box<dyn Encoder<f64>> = match &a.embeddings {
        Some(file) => Box::new(
            LookupEncoder::<f64>::from_file(file, codebook.encoder_id())
                .with_context(|| format!("loading embeddings {}", file.display()))?,
        ),
        None => {
            let p = a
                .encoder
                .clone()
                .unwrap_or_else(|| g.out.join(ENCODER_FILE));
            Box::new(
                LinearEncoder::<f64>::load(&p)
                    .with_context(|| format!("loading encoder {}", p.display()))?,
            )
        }
    };
    if encoder.id() != codebook.encoder_id() {
        bail!(
            "codebook was built with encoder '{}', not '{}'",
            codebook.encoder_id(),
            encoder.id()
        );
    }

    let mut run = RunDir::new(&g.out, "localize");
    let mut csv = Vec::new();
    writeln!(csv, "{FRAME_CSV_HEADER}")?;
    if let (Some(image), Some(prior)) = (&a.image, &a.prior) {
        let live = Image::load_png(image)?;
        // Views rendered by this tool carry their true pose.
        let truth = sidecar_path(image)
            .exists()
            .then(|| read_sidecar(image).ok())
            .flatten()
            .and_then(|s| {
                s.heading_deg
                    .map(|h| PlanarPose::new(s.origin_x, s.origin_y, h))
            });
        let est = satloc::localize(&codebook, prior, &live, encoder.as_ref(), &cfg.localizer)?;
        write_frame_row(&mut csv, 0, truth.as_ref(), &est)?;
        say!(
            "{}",
            serde_json::to_string_pretty(&json!({ "prior": prior, "estimate": est }))?
        );
    } else if let Some(frames_path) = &a.frames {
        let rows = read_frames_csv(frames_path)?;
        let estimates = rows
            .par_iter()
            .map(|r| {
                let live = Image::load_png(&r.file)?;
                Ok(
                    match satloc::localize(
                        &codebook,
                        &r.prior,
                        &live,
                        encoder.as_ref(),
                        &cfg.localizer,
                    ) {
                        Ok(e) => e,
                        Err(e @ (Error::Io { .. } | Error::Image { .. })) => return Err(e.into()),
                        Err(e) => {
                            eprintln!("frame {}: {e}", r.id);
                            LocalizationEstimate::failed(&r.prior)
                        }
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        for (r, est) in rows.iter().zip(&estimates) {
            write_frame_row(&mut csv, r.id, Some(&r.truth), est)?;
        }
        let accepted = estimates.iter().filter(|e| e.accepted).count();
        say!("localized {} frames, {accepted} accepted", rows.len());
    }
    run.create()?;
    run.write(ESTIMATES_CSV, csv)?;
    run.finish(&cfg, argv)
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn evaluate(g: &Global, a: &EvaluateArgs, argv: &[String]) -> Result<()> {
    let mut cfg = setup(g)?;
    apply_path(&mut cfg, &a.path);
    if !a.conditions.is_empty() {
        cfg.conditions = a
            .conditions
            .iter()
            .map(|n| resolve_condition(&cfg, n.trim()))
            .collect::<Result<_>>()?;
    }
    let results = match &a.from {
        Some(dir) => {
            let map = load_map(dir)?;
            let path = cfg.path.resolve(&map)?;
            let cb_path = dir.join(CODEBOOK_FILE);
            let codebook = Codebook::<f64>::load(&cb_path)
                .with_context(|| format!("loading codebook {}", cb_path.display()))?;
            let enc_path = dir.join(ENCODER_FILE);
            let encoder = LinearEncoder::<f64>::load(&enc_path)
                .with_context(|| format!("loading encoder {}", enc_path.display()))?;
            run_experiment(
                &map,
                &path,
                &codebook,
                &encoder,
                &cfg.conditions,
                &cfg.experiment(),
            )?
        }
        None => {
            let prepared = pipeline::prepare(&cfg)?;
            pipeline::evaluate(&prepared, &cfg)?
        }
    };

    let mut run = RunDir::new(&g.out, "evaluate");
    run.create()?;
    let config_json = serde_json::to_value(&cfg)?;
    for r in &results {
        let label = file_label(&r.report.condition);
        run.write_json(
            format!("report_{label}.json"),
            &json!({ "report": r.report, "config": config_json }),
        )?;
        let mut frames = Vec::new();
        write_frames_csv(&mut frames, &r.frames)?;
        run.write(format!("frames_{label}.csv"), frames)?;
        let mut errors = Vec::new();
        write_error_plot_csv(&mut errors, &r.frames, r.report.offset)?;
        run.write(format!("errors_{label}.csv"), errors)?;

        let rep = &r.report;
        let s = rep.rmse_success.as_ref().unwrap_or(&rep.rmse_all);
        say!(
            "{}: {}/{} accepted ({:.1}%), rmse x {:.3} m, y {:.3} m, heading {:.3} deg, {:.2} ms/frame",
            rep.condition,
            rep.accepted,
            rep.frames,
            rep.success_rate,
            s.x,
            s.y,
            s.heading_deg,
            rep.accounting.latency.mean_total_ms
        );
    }
    run.finish(&cfg, argv)
}

/// Deterministic values in [-1, 1).
fn bench_values(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    (0..n as u64)
        .map(|i| {
            let bits = mix_seed(mix_seed(seed, stream), i) >> 11;
            bits as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

pub fn bench(g: &Global, a: &BenchArgs, argv: &[String]) -> Result<()> {
    let cfg = setup(g)?;
    if a.dim == 0 || a.window == 0 || a.iters == 0 {
        return Err(usage("--dim, --window and --iters must be positive"));
    }
    let cols = bench_values(a.seed, 0, a.dim * a.window);
    let live = bench_values(a.seed, 1, a.dim);
    let reference = compute_weights(&cols, a.dim, &live)?;
    let checksum: f64 = reference.iter().sum();
    let mut sink = 0.0;
    for _ in 0..a.warmup {
        sink += compute_weights(&cols, a.dim, &live)?[0];
    }
    let mut times = Vec::with_capacity(a.iters);
    for _ in 0..a.iters {
        let t = Instant::now();
        let w = compute_weights(&cols, a.dim, &live)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        sink += w[a.window - 1];
    }
    std::hint::black_box(sink);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let pct = |q: f64| times[((times.len() - 1) as f64 * q).round() as usize];

    let mut run = RunDir::new(&g.out, "bench");
    run.create()?;
    run.write_json(
        "bench.json",
        &json!({
            "dim": a.dim,
            "window": a.window,
            "iters": a.iters,
            "warmup": a.warmup,
            "seed": a.seed,
            "mean_ms": mean,
            "min_ms": times[0],
            "p50_ms": pct(0.5),
            "p95_ms": pct(0.95),
            "max_ms": times[times.len() - 1],
            "checksum": checksum,
            "config": cfg,
        }),
    )?;
    say!(
        "kernel {} x {}: mean {:.4} ms, p50 {:.4} ms, p95 {:.4} ms over {} iterations (checksum {checksum:.12e})",
        a.dim,
        a.window,
        mean,
        pct(0.5),
        pct(0.95),
        a.iters
    );
    run.finish(&cfg, argv)
}
