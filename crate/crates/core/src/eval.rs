//! Full-path experiments against synthetic ground truth.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, PathSpec};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::localizer::{
    localize, write_frame_row, LocalizationEstimate, LocalizerConfig, StageTimings,
    FRAME_CSV_HEADER,
};
use crate::map_synth::{
    normalize_deg, render_view, CameraSpec, LightingSpec, MapRaster, PlanarPose,
};
use crate::scalar::Scalar;

/// Minimum accepted frames needed to estimate the frame offset.
pub const MIN_ALIGNMENT_SUCCESSES: usize = 10;

/// SplitMix64 step, used to derive independent per-frame seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// How live frames are placed and perturbed around the path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub frame_spacing: f64,
    pub start_arc: f64,
    /// Uniform lateral offset in `[-l, l]` meters.
    pub lateral_jitter: f64,
    /// Uniform heading offset in `[-h, h]` degrees.
    pub heading_jitter: f64,
    /// Uniform along-track offset in `[-a, a]` meters.
    pub along_jitter: f64,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            frame_spacing: 1.0,
            start_arc: 0.0,
            lateral_jitter: 2.0,
            heading_jitter: 3.0,
            along_jitter: 0.0,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFrame {
    pub id: u64,
    pub arc_length: f64,
    pub pose: PlanarPose,
}

/// Ground-truth poses along `path`.
pub fn make_trajectory(path: &PathSpec, spec: &TrajectorySpec) -> Result<Vec<TruthFrame>> {
    path.validate()?;
    if !(spec.frame_spacing > 0.0) {
        return Err(Error::InvalidArgument(
            "frame spacing must be positive".into(),
        ));
    }
    let len = path.length();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sym = |r: f64| {
        if r > 0.0 {
            rng.random_range(-r..=r)
        } else {
            0.0
        }
    };
    let mut frames = Vec::new();
    let mut k = 0u64;
    loop {
        let s = spec.start_arc + k as f64 * spec.frame_spacing;
        if s >= len {
            break;
        }
        let along = sym(spec.along_jitter);
        let lateral = sym(spec.lateral_jitter);
        let dh = sym(spec.heading_jitter);
        let arc = (s + along).clamp(0.0, len);
        let ((px, py), (dx, dy), heading) = path.frame_at(arc);
        frames.push(TruthFrame {
            id: k,
            arc_length: arc,
            pose: PlanarPose::new(px + lateral * dy, py - lateral * dx, heading + dh),
        });
        k += 1;
    }
    Ok(frames)
}

/// A named live-imagery condition: base lighting plus per-frame jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LightingCondition {
    pub label: String,
    pub base: LightingSpec,
    pub gain_range: (f64, f64),
    pub gamma_range: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for LightingCondition {
    fn default() -> Self {
        LightingCondition::matched()
    }
}

impl LightingCondition {
    /// Shadows on the same side as the reference imagery, photometric jitter.
    pub fn matched() -> Self {
        LightingCondition {
            label: "matched".into(),
            base: LightingSpec::reference(),
            gain_range: (0.8, 1.25),
            gamma_range: (0.8, 1.25),
            noise_sigma: 0.02,
            seed: 11,
        }
    }

    /// Sun on the opposite side of the reference imagery.
    pub fn flipped() -> Self {
        LightingCondition {
            label: "flipped".into(),
            base: LightingSpec::reference().flipped(),
            ..LightingCondition::matched()
        }
    }

    /// Exactly the reference lighting.
    pub fn noiseless() -> Self {
        LightingCondition {
            label: "noiseless".into(),
            base: LightingSpec::reference(),
            gain_range: (1.0, 1.0),
            gamma_range: (1.0, 1.0),
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "matched" => Some(LightingCondition::matched()),
            "flipped" => Some(LightingCondition::flipped()),
            "noiseless" => Some(LightingCondition::noiseless()),
            _ => None,
        }
    }

    /// Lighting for one frame.
    pub fn frame_lighting(&self, frame_id: u64) -> LightingSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, frame_id));
        let mut pick = |(lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let gain = pick(self.gain_range);
        let gamma = pick(self.gamma_range);
        LightingSpec {
            brightness_gain: self.base.brightness_gain * gain,
            gamma: self.base.gamma * gamma,
            noise_sigma: self.noise_sigma,
            noise_seed: mix_seed(self.seed ^ 0x5eed, frame_id),
            ..self.base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub camera: CameraSpec,
    pub localizer: LocalizerConfig,
    pub trajectory: TrajectorySpec,
    pub align_fraction: f64,
    pub align_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            camera: CameraSpec::default(),
            localizer: LocalizerConfig::default(),
            trajectory: TrajectorySpec::default(),
            align_fraction: 0.10,
            align_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: u64,
    pub arc_length: f64,
    pub truth: PlanarPose,
    pub prior: PlanarPose,
    pub estimate: LocalizationEstimate,
    /// Used for frame alignment and left out of error statistics.
    pub excluded: bool,
}

/// Seeded sample of `ceil(fraction * successes)` accepted frames; marks
/// them excluded and returns the mean `truth - estimate` offset over them.
pub fn align_frames(frames: &mut [FrameResult], fraction: f64, seed: u64) -> Result<(f64, f64)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alignment fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let accepted: Vec<usize> = frames
        .iter()
        .enumerate()
        .filter(|(_, f)| f.estimate.accepted)
        .map(|(i, _)| i)
        .collect();
    if accepted.len() < MIN_ALIGNMENT_SUCCESSES {
        return Err(Error::TooFewSuccesses {
            required: MIN_ALIGNMENT_SUCCESSES,
            actual: accepted.len(),
        });
    }
    let count = ((fraction * accepted.len() as f64) - 1e-9).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, accepted.len(), count)
        .into_iter()
        .map(|j| accepted[j])
        .collect();
    picked.sort_unstable();
    let (mut dx, mut dy) = (0.0, 0.0);
    for &i in &picked {
        let f = &mut frames[i];
        f.excluded = true;
        dx += f.truth.x - f.estimate.x;
        dy += f.truth.y - f.estimate.y;
    }
    Ok((dx / count as f64, dy / count as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisRmse {
    /// Longitude (map x), meters.
    pub x: f64,
    /// Latitude (map y), meters.
    pub y: f64,
    pub heading_deg: f64,
    pub frames: usize,
}

impl AxisRmse {
    pub fn planar(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub all: AxisRmse,
    /// `None` when no evaluated frame was accepted.
    pub success: Option<AxisRmse>,
}

fn rmse_over<'a>(frames: impl Iterator<Item = &'a FrameResult>, offset: (f64, f64)) -> AxisRmse {
    let (mut sx, mut sy, mut sh, mut n) = (0.0, 0.0, 0.0, 0usize);
    for f in frames {
        let ex = f.estimate.x + offset.0 - f.truth.x;
        let ey = f.estimate.y + offset.1 - f.truth.y;
        let eh = normalize_deg(f.estimate.heading - f.truth.heading);
        sx += ex * ex;
        sy += ey * ey;
        sh += eh * eh;
        n += 1;
    }
    let n_f = n.max(1) as f64;
    AxisRmse {
        x: (sx / n_f).sqrt(),
        y: (sy / n_f).sqrt(),
        heading_deg: (sh / n_f).sqrt(),
        frames: n,
    }
}

/// Per-axis RMSE over every non-excluded frame and over accepted ones.
pub fn compute_rmse(frames: &[FrameResult], offset: (f64, f64)) -> Result<ErrorStats> {
    let evaluated = || frames.iter().filter(|f| !f.excluded);
    if evaluated().next().is_none() {
        return Err(Error::EmptyEvaluation);
    }
    let all = rmse_over(evaluated(), offset);
    let success = evaluated()
        .any(|f| f.estimate.accepted)
        .then(|| rmse_over(evaluated().filter(|f| f.estimate.accepted), offset));
    Ok(ErrorStats { all, success })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_total_ms: f64,
    pub p50_total_ms: f64,
    pub p95_total_ms: f64,
    pub mean_encode_ms: f64,
    pub mean_kernel_ms: f64,
    pub mean_heading_ms: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StorageAccounting {
    /// Pose record plus half-precision embedding.
    pub bytes_per_image: u64,
    pub header_bytes: u64,
    pub images_per_meter: f64,
    pub bytes_per_meter: f64,
    /// Encoder model carried alongside the codebook.
    pub fixed_bytes: u64,
    pub codebook_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub storage: StorageAccounting,
    pub latency: LatencyStats,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

pub fn latency_stats<'a>(timings: impl Iterator<Item = &'a StageTimings>) -> LatencyStats {
    let timings: Vec<&StageTimings> = timings.collect();
    if timings.is_empty() {
        return LatencyStats::default();
    }
    let n = timings.len() as f64;
    let mean = |f: fn(&StageTimings) -> f64| timings.iter().map(|t| f(t)).sum::<f64>() / n / 1e3;
    let mut totals: Vec<f64> = timings.iter().map(|t| t.total_us / 1e3).collect();
    totals.sort_by(|a, b| a.total_cmp(b));
    LatencyStats {
        mean_total_ms: mean(|t| t.total_us),
        p50_total_ms: percentile(&totals, 0.5),
        p95_total_ms: percentile(&totals, 0.95),
        mean_encode_ms: mean(|t| t.encode_us),
        mean_kernel_ms: mean(|t| t.kernel_us),
        mean_heading_ms: mean(|t| t.heading_us),
    }
}

/// Storage cost of the codebook and encoder, and latency over `frames`.
pub fn account_storage_and_runtime<T: Scalar>(
    cb: &Codebook<T>,
    encoder_bytes: u64,
    frames: &[FrameResult],
) -> Accounting {
    let codebook_bytes = cb.serialized_len() as u64;
    let header_bytes = (cb.header_len() + 4) as u64;
    let bytes_per_image = if cb.is_empty() {
        cb.bytes_per_image() as u64
    } else {
        (codebook_bytes - header_bytes) / cb.len() as u64
    };
    let images_per_meter = cb.grid().images_per_meter();
    Accounting {
        storage: StorageAccounting {
            bytes_per_image,
            header_bytes,
            images_per_meter,
            bytes_per_meter: bytes_per_image as f64 * images_per_meter,
            fixed_bytes: encoder_bytes,
            codebook_bytes,
            total_bytes: codebook_bytes + encoder_bytes,
        },
        latency: latency_stats(frames.iter().map(|f| &f.estimate.timing)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: String,
    pub frames: usize,
    pub evaluated: usize,
    pub excluded: usize,
    pub accepted: usize,
    /// Accepted frames over all frames, percent.
    pub success_rate: f64,
    pub offset: (f64, f64),
    /// False when too few frames were accepted to estimate the offset.
    pub aligned: bool,
    pub rmse_all: AxisRmse,
    pub rmse_success: Option<AxisRmse>,
    pub accounting: Accounting,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub condition: LightingCondition,
    pub frames: Vec<FrameResult>,
    pub report: EvalReport,
}

/// Run every lighting condition over the same trajectory.
pub fn run_experiment<T: Scalar, E: Encoder<T> + ?Sized>(
    map: &MapRaster,
    path: &PathSpec,
    cb: &Codebook<T>,
    encoder: &E,
    conditions: &[LightingCondition],
    config: &ExperimentConfig,
) -> Result<Vec<RunResult>> {
    if encoder.dim() != cb.dim() {
        return Err(Error::DimensionMismatch {
            expected: cb.dim(),
            actual: encoder.dim(),
        });
    }
    if encoder.id() != cb.encoder_id() {
        return Err(Error::InvalidArgument(format!(
            "codebook was built with encoder '{}', not '{}'",
            cb.encoder_id(),
            encoder.id()
        )));
    }
    if conditions.is_empty() {
        return Ok(Vec::new());
    }
    let truth = make_trajectory(path, &config.trajectory)?;
    conditions
        .iter()
        .map(|cond| run_condition(map, path, cb, encoder, &truth, cond, config))
        .collect()
}

/// Prior for frame `i`: the previous frame's truth, or the centerline pose
/// for the first frame.
pub fn prior_for(path: &PathSpec, truth: &[TruthFrame], i: usize) -> PlanarPose {
    if i > 0 {
        truth[i - 1].pose
    } else {
        let ((x, y), _, heading) = path.frame_at(truth[0].arc_length);
        PlanarPose::new(x, y, heading)
    }
}

fn run_condition<T: Scalar, E: Encoder<T> + ?Sized>(
    map: &MapRaster,
    path: &PathSpec,
    cb: &Codebook<T>,
    encoder: &E,
    truth: &[TruthFrame],
    cond: &LightingCondition,
    config: &ExperimentConfig,
) -> Result<RunResult> {
    let mut frames = truth
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let prior = prior_for(path, truth, i);
            let light = cond.frame_lighting(t.id);
            let live = render_view(map, &t.pose, &config.camera, &light)?;
            let estimate = match localize(cb, &prior, &live, encoder, &config.localizer) {
                Ok(e) => e,
                Err(Error::Io { .. }) | Err(Error::Image { .. }) => unreachable!(),
                Err(_) => LocalizationEstimate::failed(&prior),
            };
            Ok(FrameResult {
                frame_id: t.id,
                arc_length: t.arc_length,
                truth: t.pose,
                prior,
                estimate,
                excluded: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (offset, aligned) =
        match align_frames(&mut frames, config.align_fraction, config.align_seed) {
            Ok(o) => (o, true),
            Err(Error::TooFewSuccesses { .. }) => ((0.0, 0.0), false),
            Err(e) => return Err(e),
        };
    let stats = compute_rmse(&frames, offset)?;
    let accepted = frames.iter().filter(|f| f.estimate.accepted).count();
    let excluded = frames.iter().filter(|f| f.excluded).count();
    let report = EvalReport {
        condition: cond.label.clone(),
        frames: frames.len(),
        evaluated: frames.len() - excluded,
        excluded,
        accepted,
        success_rate: 100.0 * accepted as f64 / frames.len() as f64,
        offset,
        aligned,
        rmse_all: stats.all,
        rmse_success: stats.success,
        accounting: account_storage_and_runtime(cb, encoder.model_bytes(), &frames),
    };
    Ok(RunResult {
        condition: cond.clone(),
        frames,
        report,
    })
}

/// Per-frame CSV in the localizer schema.
pub fn write_frames_csv<W: Write>(out: &mut W, frames: &[FrameResult]) -> std::io::Result<()> {
    writeln!(out, "{FRAME_CSV_HEADER}")?;
    for f in frames {
        write_frame_row(out, f.frame_id, Some(&f.truth), &f.estimate)?;
    }
    Ok(())
}

/// Error-versus-arc-length series with 3-sigma envelopes.
pub fn write_error_plot_csv<W: Write>(
    out: &mut W,
    frames: &[FrameResult],
    offset: (f64, f64),
) -> std::io::Result<()> {
    writeln!(
        out,
        "frame_id,arc_length,err_x,err_y,err_heading,bound3_x,bound3_y,accepted,excluded"
    )?;
    for f in frames {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            f.frame_id,
            f.arc_length,
            f.estimate.x + offset.0 - f.truth.x,
            f.estimate.y + offset.1 - f.truth.y,
            normalize_deg(f.estimate.heading - f.truth.heading),
            3.0 * f.estimate.sigma_long,
            3.0 * f.estimate.sigma_lat,
            u8::from(f.estimate.accepted),
            u8::from(f.excluded)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localizer::EstimateStatus;

    fn frame(id: u64, truth: (f64, f64, f64), est: (f64, f64, f64), accepted: bool) -> FrameResult {
        let mut e = LocalizationEstimate::failed(&PlanarPose::new(est.0, est.1, est.2));
        e.status = EstimateStatus::Ok;
        e.accepted = accepted;
        e.sigma_long = 0.5;
        e.sigma_lat = 0.5;
        FrameResult {
            frame_id: id,
            arc_length: id as f64,
            truth: PlanarPose::new(truth.0, truth.1, truth.2),
            prior: PlanarPose::new(truth.0, truth.1, truth.2),
            estimate: e,
            excluded: false,
        }
    }

    #[test]
    fn alignment_recovers_constant_offset() {
        let mut frames: Vec<FrameResult> = (0..40)
            .map(|i| {
                frame(
                    i,
                    (i as f64, 2.0 * i as f64, 0.0),
                    (i as f64 - 1.0, 2.0 * i as f64 - 2.0, 0.0),
                    true,
                )
            })
            .collect();
        let (dx, dy) = align_frames(&mut frames, 0.1, 3).unwrap();
        assert!((dx - 1.0).abs() < 1e-12 && (dy - 2.0).abs() < 1e-12);
        assert_eq!(frames.iter().filter(|f| f.excluded).count(), 4);
        let stats = compute_rmse(&frames, (dx, dy)).unwrap();
        assert!(stats.all.x < 1e-12 && stats.all.y < 1e-12);
        assert_eq!(stats.all.frames, 36);
    }

    #[test]
    fn alignment_counts_and_errors() {
        let mut frames: Vec<FrameResult> = (0..200)
            .map(|i| frame(i, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), true))
            .collect();
        let off = align_frames(&mut frames, 0.1, 9).unwrap();
        assert_eq!(off, (0.0, 0.0));
        assert_eq!(frames.iter().filter(|f| f.excluded).count(), 20);
        let mut few: Vec<FrameResult> = (0..9)
            .map(|i| frame(i, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), true))
            .collect();
        assert!(matches!(
            align_frames(&mut few, 0.1, 0),
            Err(Error::TooFewSuccesses { .. })
        ));
    }

    #[test]
    fn rmse_formulas() {
        let frames = vec![
            frame(0, (0.0, 0.0, 0.0), (3.0, 0.0, 0.0), true),
            frame(1, (0.0, 0.0, 0.0), (4.0, 0.0, 0.0), true),
        ];
        let s = compute_rmse(&frames, (0.0, 0.0)).unwrap();
        assert!((s.all.x - 12.5f64.sqrt()).abs() < 1e-12);

        let mixed = vec![
            frame(0, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), true),
            frame(1, (0.0, 0.0, 0.0), (100.0, 0.0, 0.0), false),
        ];
        let s = compute_rmse(&mixed, (0.0, 0.0)).unwrap();
        assert!((s.success.unwrap().x - 1.0).abs() < 1e-12);
        assert!((s.all.x - 5000.5f64.sqrt()).abs() < 1e-9);

        let exact = vec![frame(0, (1.0, 2.0, 30.0), (1.0, 2.0, 30.0), true)];
        let s = compute_rmse(&exact, (0.0, 0.0)).unwrap();
        assert_eq!((s.all.x, s.all.y, s.all.heading_deg), (0.0, 0.0, 0.0));

        let mut none = exact.clone();
        none[0].excluded = true;
        assert!(matches!(
            compute_rmse(&none, (0.0, 0.0)),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn heading_errors_wrap() {
        let frames = vec![frame(0, (0.0, 0.0, 179.0), (0.0, 0.0, -179.0), true)];
        let s = compute_rmse(&frames, (0.0, 0.0)).unwrap();
        assert!((s.all.heading_deg - 2.0).abs() < 1e-9);
    }

    #[test]
    fn trajectory_stays_within_jitter() {
        let path = PathSpec::straight((0.0, 0.0), 0.0, 50.0).unwrap();
        let spec = TrajectorySpec::default();
        let frames = make_trajectory(&path, &spec).unwrap();
        assert_eq!(frames.len(), 50);
        for f in &frames {
            assert!(f.pose.x.abs() <= 2.0);
            assert!((f.pose.y - f.arc_length).abs() < 1e-12);
            assert!(f.pose.heading.abs() <= 3.0);
        }
        assert_eq!(frames, make_trajectory(&path, &spec).unwrap());
    }

    #[test]
    fn frame_lighting_respects_ranges() {
        let c = LightingCondition::matched();
        for id in 0..50 {
            let l = c.frame_lighting(id);
            assert!((0.8..=1.25).contains(&l.brightness_gain));
            assert!((0.8..=1.25).contains(&l.gamma));
            assert_eq!(l.sun_azimuth, c.base.sun_azimuth);
        }
        assert_eq!(c.frame_lighting(3), c.frame_lighting(3));
        let f = LightingCondition::flipped();
        assert_eq!(
            normalize_deg(f.base.sun_azimuth - c.base.sun_azimuth).abs(),
            180.0
        );
    }
}
