//! Shared implementation of the `satloc` and `map-synth` binaries.
//!
//! Every command reads an optional TOML config, applies its flags on top,
//! writes its outputs under the run directory (`--out`) and appends an entry
//! to `manifest.json` there. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use satloc::config::RunConfig;
use satloc::PlanarPose;

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub mod commands;
pub mod run_dir;

/// A problem with the invocation that clap could not catch, such as an
/// unknown lighting condition name. Exits with code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parse `x,y,heading` (meters, meters, degrees).
pub fn parse_pose(s: &str) -> Result<PlanarPose, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,heading, got '{s}'"));
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("'{p}' is not a finite number"))?;
    }
    Ok(PlanarPose::new(v[0], v[1], v[2]))
}

#[derive(Args, Clone, Debug)]
pub struct Global {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Run directory receiving all outputs and the manifest.
    #[arg(
        short = 'o',
        long = "out",
        global = true,
        value_name = "DIR",
        default_value = "run"
    )]
    pub out: PathBuf,
}

impl Global {
    /// Config file (or defaults) with the global overrides applied.
    pub fn load_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(n) = self.threads {
            cfg.threads = n;
        }
        Ok(cfg)
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct MapArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Raster width in pixels.
    #[arg(long)]
    pub width: Option<usize>,
    /// Raster height in pixels.
    #[arg(long)]
    pub height: Option<usize>,
    /// Square raster, sets both width and height.
    #[arg(long, conflicts_with_all = ["width", "height"])]
    pub size: Option<usize>,
    /// Meters per pixel.
    #[arg(long)]
    pub mpp: Option<f64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct PathArgs {
    /// Length of the straight path through the map center, meters.
    #[arg(long)]
    pub path_length: Option<f64>,
    /// Heading of the straight path, degrees counter-clockwise from +y.
    #[arg(long)]
    pub path_heading: Option<f64>,
}

#[derive(Args, Clone, Debug)]
pub struct RenderArgs {
    /// Directory holding map.png (defaults to the run directory).
    #[arg(long, value_name = "DIR")]
    pub map: Option<PathBuf>,

    /// Render one view at x,y,heading instead of a trajectory.
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true, conflicts_with = "grid")]
    pub pose: Option<PlanarPose>,

    /// Render every reference grid pose (ids are grid column indices).
    #[arg(long)]
    pub grid: bool,

    /// `reference` or a lighting condition name (matched, flipped, noiseless
    /// or one defined in the config).
    #[arg(long, default_value = "reference")]
    pub lighting: String,

    /// Frame id seeding the per-frame lighting jitter in single-pose mode.
    #[arg(long, default_value_t = 0)]
    pub frame_id: u64,

    /// Also write the heading-sweep rotations of each view, for external
    /// encoders that must embed them.
    #[arg(long)]
    pub sweep: bool,

    #[command(flatten)]
    pub path: PathArgs,
}

#[derive(Args, Clone, Debug)]
pub struct BuildCodebookArgs {
    /// Directory holding map.png (defaults to the run directory).
    #[arg(long, value_name = "DIR")]
    pub map: Option<PathBuf>,

    /// Embedding dimension of the trained encoder.
    #[arg(long)]
    pub dim: Option<usize>,

    /// Build from an EMBX file whose ids are grid column indices instead of
    /// training the linear encoder.
    #[arg(long, value_name = "FILE")]
    pub import_embeddings: Option<PathBuf>,

    /// Encoder id recorded for imported embeddings.
    #[arg(long, requires = "import_embeddings", default_value = "external")]
    pub encoder_id: String,

    /// Also write the codebook columns as codebook.embx.
    #[arg(long)]
    pub export_embeddings: bool,

    #[command(flatten)]
    pub path: PathArgs,
}

#[derive(Args, Clone, Debug)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["image", "frames"]))]
pub struct LocalizeArgs {
    /// Codebook file (defaults to <out>/codebook.klcb).
    #[arg(long, value_name = "FILE")]
    pub codebook: Option<PathBuf>,

    /// Linear encoder file (defaults to <out>/encoder.lenc).
    #[arg(long, value_name = "FILE")]
    pub encoder: Option<PathBuf>,

    /// Look live embeddings up by image fingerprint in this EMBX file
    /// instead of running the linear encoder.
    #[arg(long, value_name = "FILE", conflicts_with = "encoder")]
    pub embeddings: Option<PathBuf>,

    /// Single live image (PNG).
    #[arg(long, value_name = "PNG", requires = "prior")]
    pub image: Option<PathBuf>,

    /// Prior pose x,y,heading for --image.
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub prior: Option<PlanarPose>,

    /// frames.csv written by `render`; one estimate per row.
    #[arg(long, value_name = "CSV")]
    pub frames: Option<PathBuf>,

    /// Search window half-width along the path, meters.
    #[arg(long)]
    pub window: Option<f64>,

    /// Reject estimates whose position sigma exceeds this, meters.
    #[arg(long)]
    pub sigma_threshold: Option<f64>,
}

#[derive(Args, Clone, Debug)]
pub struct EvaluateArgs {
    /// Comma-separated lighting conditions (default: those in the config).
    #[arg(long, value_delimiter = ',')]
    pub conditions: Vec<String>,

    /// Reuse map.png, codebook.klcb and encoder.lenc from this directory
    /// instead of building them from the config.
    #[arg(long, value_name = "DIR")]
    pub from: Option<PathBuf>,

    #[command(flatten)]
    pub path: PathArgs,
}

#[derive(Args, Clone, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1000)]
    pub dim: usize,
    /// Codebook columns per kernel evaluation.
    #[arg(long, default_value_t = 336)]
    pub window: usize,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Parser, Debug)]
#[command(
    name = "satloc",
    version,
    about = "Localize nadir UAV imagery against a satellite-view codebook"
)]
pub struct SatlocCli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: SatlocCommand,
}

#[derive(Subcommand, Debug)]
pub enum SatlocCommand {
    /// Generate a synthetic orthomosaic with occluders.
    BuildMap(MapArgs),
    /// Render nadir views: one pose, the reference grid or a trajectory.
    Render(RenderArgs),
    /// Train the encoder and build the reference codebook.
    BuildCodebook(BuildCodebookArgs),
    /// Localize one image or a rendered trajectory.
    Localize(LocalizeArgs),
    /// Closed-loop evaluation under one or more lighting conditions.
    Evaluate(EvaluateArgs),
    /// Time the inner-product kernel on random data.
    Bench(BenchArgs),
}

#[derive(Parser, Debug)]
#[command(
    name = "map-synth",
    version,
    about = "Synthetic orthomosaics and nadir views"
)]
pub struct MapSynthCli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: MapSynthCommand,
}

#[derive(Subcommand, Debug)]
pub enum MapSynthCommand {
    /// Generate a synthetic orthomosaic with occluders.
    Generate(MapArgs),
    /// Render nadir views from a generated map.
    Render(RenderArgs),
}

pub fn run_satloc(cli: SatlocCli, argv: &[String]) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        SatlocCommand::BuildMap(a) => commands::build_map(g, &a, "build-map", argv),
        SatlocCommand::Render(a) => commands::render(g, &a, argv),
        SatlocCommand::BuildCodebook(a) => commands::build_codebook(g, &a, argv),
        SatlocCommand::Localize(a) => commands::localize(g, &a, argv),
        SatlocCommand::Evaluate(a) => commands::evaluate(g, &a, argv),
        SatlocCommand::Bench(a) => commands::bench(g, &a, argv),
    }
}

pub fn run_map_synth(cli: MapSynthCli, argv: &[String]) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        MapSynthCommand::Generate(a) => commands::build_map(g, &a, "generate", argv),
        MapSynthCommand::Render(a) => commands::render(g, &a, argv),
    }
}

/// The error chain joined with `: `, skipping causes whose text an outer
/// message already includes.
pub fn error_message(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if !msg.contains(&s) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&s);
        }
    }
    msg
}

/// Parse, run and map the outcome to the process exit code.
pub fn main_with<P, I, T>(args: I, run: fn(P, &[String]) -> Result<()>) -> ExitCode
where
    P: Parser,
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let cli = match P::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_message(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
