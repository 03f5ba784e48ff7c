//! Online localization against a codebook window.
//!
//! Stages, in order: window selection, live-image encoding, inner-product
//! kernel weights, max-minus-std thresholding, weighted-mean position,
//! weight covariance, heading sweep against the best reference, and
//! covariance gating.

use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::{rotate_image, Image};
use crate::map_synth::{normalize_deg, PlanarPose};
use crate::scalar::{dot, Scalar};

/// How sweep scores become weights over the grid values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepWeighting {
    /// Scores clamped at zero and normalized to sum 1.
    Normalized,
    /// The max-minus-std cutoff used for position, then normalized. Sweep
    /// scores are nearly flat across the grid, so the plain normalized mean
    /// collapses toward zero; the cutoff keeps only the near-peak angles.
    #[default]
    Thresholded,
}

/// Regular 1-D grid of perturbation values, e.g. heading offsets in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
    pub weighting: SweepWeighting,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            min: -5.0,
            max: 5.0,
            step: 1.0,
            weighting: SweepWeighting::Thresholded,
        }
    }
}

impl SweepGrid {
    pub fn values(&self) -> Vec<f64> {
        if !(self.step > 0.0) || self.max < self.min {
            return vec![self.min];
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.min + i as f64 * self.step).collect()
    }
}

/// Which weights enter the position covariance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceWeighting {
    /// Raw kernel weights clamped at zero and normalized to sum 1.
    #[default]
    RectifiedNormalized,
    /// Raw signed kernel weights, unnormalized.
    Raw,
    /// The thresholded, normalized weights used for the mean.
    Thresholded,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    /// Window half-width along the path, meters.
    pub half_window: f64,
    /// Reject when either position sigma exceeds this, meters.
    pub sigma_threshold: f64,
    pub heading_sweep: SweepGrid,
    pub covariance_weights: CovarianceWeighting,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            half_window: 4.0,
            sigma_threshold: 5.0,
            heading_sweep: SweepGrid::default(),
            covariance_weights: CovarianceWeighting::default(),
        }
    }
}

/// Inner products of each window column with the live embedding.
///
/// `columns` holds `M` embeddings of length `dim`, column-major.
pub fn compute_weights<T: Scalar>(columns: &[T], dim: usize, live: &[T]) -> Result<Vec<T>> {
    if live.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: live.len(),
        });
    }
    if dim == 0 || columns.is_empty() || !columns.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "window of {} values is not a positive number of {dim}-dim columns",
            columns.len()
        )));
    }
    Ok(columns.chunks_exact(dim).map(|c| dot(c, live)).collect())
}

/// Zero every weight below `max - std` (population std over the window),
/// drop non-positive survivors and normalize the rest to sum 1.
pub fn threshold_and_normalize<T: Scalar>(raw: &[T]) -> Result<Vec<T>> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("empty weight vector".into()));
    }
    if raw.iter().all(|w| w.is_zero()) {
        return Err(Error::NoSignal);
    }
    let m = T::from_usize(raw.len()).unwrap();
    let mean = raw.iter().copied().sum::<T>() / m;
    let var = raw.iter().map(|&w| (w - mean) * (w - mean)).sum::<T>() / m;
    let max = raw.iter().copied().fold(T::neg_infinity(), T::max);
    let t = max - var.sqrt();
    let keep = |w: T| w >= t && w > T::zero();
    let total: T = raw.iter().copied().filter(|&w| keep(w)).sum();
    if !(total > T::zero()) {
        return Err(Error::NoSignal);
    }
    Ok(raw
        .iter()
        .map(|&w| if keep(w) { w / total } else { T::zero() })
        .collect())
}

/// Weighted mean of the window positions.
pub fn estimate_position<T: Scalar>(weights: &[T], poses: &[PlanarPose]) -> Result<[T; 2]> {
    if weights.len() != poses.len() {
        return Err(Error::DimensionMismatch {
            expected: poses.len(),
            actual: weights.len(),
        });
    }
    let mut acc = [T::zero(); 2];
    for (&w, p) in weights.iter().zip(poses) {
        acc[0] += w * T::from_f64_lossy(p.x);
        acc[1] += w * T::from_f64_lossy(p.y);
    }
    Ok(acc)
}

/// 2x2 position covariance and its axis standard deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionCovariance<T> {
    pub matrix: [[T; 2]; 2],
    /// Square root of the x (longitude) variance.
    pub sigma_long: T,
    /// Square root of the y (latitude) variance.
    pub sigma_lat: T,
}

/// Covariance weights for the chosen scheme.
pub fn covariance_weights<T: Scalar>(
    raw: &[T],
    thresholded: &[T],
    scheme: CovarianceWeighting,
) -> Result<Vec<T>> {
    match scheme {
        CovarianceWeighting::RectifiedNormalized => {
            let total: T = raw.iter().map(|&w| w.max(T::zero())).sum();
            if !(total > T::zero()) {
                return Err(Error::NoSignal);
            }
            Ok(raw.iter().map(|&w| w.max(T::zero()) / total).collect())
        }
        CovarianceWeighting::Raw => Ok(raw.to_vec()),
        CovarianceWeighting::Thresholded => Ok(thresholded.to_vec()),
    }
}

/// `P = sum_i v_i (x_i - mean)(x_i - mean)^T`.
pub fn estimate_covariance<T: Scalar>(
    weights: &[T],
    poses: &[PlanarPose],
    mean: [T; 2],
) -> Result<PositionCovariance<T>> {
    if weights.len() != poses.len() {
        return Err(Error::DimensionMismatch {
            expected: poses.len(),
            actual: weights.len(),
        });
    }
    let mut p = [[T::zero(); 2]; 2];
    for (&v, pose) in weights.iter().zip(poses) {
        let dx = T::from_f64_lossy(pose.x) - mean[0];
        let dy = T::from_f64_lossy(pose.y) - mean[1];
        p[0][0] += v * dx * dx;
        p[0][1] += v * dx * dy;
        p[1][1] += v * dy * dy;
    }
    p[1][0] = p[0][1];
    Ok(PositionCovariance {
        matrix: p,
        sigma_long: p[0][0].max(T::zero()).sqrt(),
        sigma_lat: p[1][1].max(T::zero()).sqrt(),
    })
}

/// Index of the largest weight; ties go to the smaller index.
pub fn best_reference<T: Scalar>(raw: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &w) in raw.iter().enumerate() {
        if best.is_none_or(|(_, b)| w > b) {
            best = Some((i, w));
        }
    }
    best.map(|(i, _)| i)
}

/// Weighted mean of `values` under `weights` clamped at zero and normalized.
/// `None` when no weight is positive.
pub fn sweep_mean<T: Scalar>(
    values: &[f64],
    weights: &[T],
    weighting: SweepWeighting,
) -> Option<T> {
    if weighting == SweepWeighting::Thresholded {
        let w = threshold_and_normalize(weights).ok()?;
        return Some(
            values
                .iter()
                .zip(&w)
                .map(|(&v, &w)| T::from_f64_lossy(v) * w)
                .sum(),
        );
    }
    let total: T = weights.iter().map(|&w| w.max(T::zero())).sum();
    if !(total > T::zero()) {
        return None;
    }
    Some(
        values
            .iter()
            .zip(weights)
            .map(|(&v, &w)| T::from_f64_lossy(v) * (w.max(T::zero()) / total))
            .sum(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepEstimate<T> {
    pub value: T,
    pub weights: Vec<T>,
    /// No positive weight: the estimate fell back to zero.
    pub fallback: bool,
}

/// Encode one perturbed copy of the live image per grid value, score each
/// against `reference`, and take the weighted mean of the grid values.
pub fn perturbation_sweep<T, E, F>(
    values: &[f64],
    weighting: SweepWeighting,
    reference: &[T],
    encoder: &E,
    perturb: F,
) -> Result<SweepEstimate<T>>
where
    T: Scalar,
    E: Encoder<T> + ?Sized,
    F: Fn(f64) -> Result<Image> + Sync,
{
    let images = values
        .par_iter()
        .map(|&v| perturb(v))
        .collect::<Result<Vec<_>>>()?;
    let encoded = encoder.encode_batch(&images)?;
    let mut weights = Vec::with_capacity(encoded.len());
    for e in &encoded {
        if e.len() != reference.len() {
            return Err(Error::DimensionMismatch {
                expected: reference.len(),
                actual: e.len(),
            });
        }
        weights.push(dot(e, reference));
    }
    Ok(match sweep_mean(values, &weights, weighting) {
        Some(value) => SweepEstimate {
            value,
            weights,
            fallback: false,
        },
        None => SweepEstimate {
            value: T::zero(),
            weights,
            fallback: true,
        },
    })
}

/// Relative heading of the live image with respect to the reference whose
/// embedding is `best_ref`, from rotations of the uncompressed live image.
pub fn estimate_heading<T: Scalar, E: Encoder<T> + ?Sized>(
    live: &Image,
    best_ref: &[T],
    encoder: &E,
    sweep: &SweepGrid,
) -> Result<SweepEstimate<T>> {
    perturbation_sweep(&sweep.values(), sweep.weighting, best_ref, encoder, |d| {
        rotate_image(live, d)
    })
}

/// Wall-clock duration of each stage in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub window_us: f64,
    pub encode_us: f64,
    pub kernel_us: f64,
    pub estimate_us: f64,
    pub heading_us: f64,
    pub total_us: f64,
}

fn micros(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e6
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateStatus {
    Ok,
    /// No positive kernel weight; position and heading echo the prior.
    NoSignal,
    /// The localizer returned an error; the estimate echoes the prior.
    Failed,
}

/// Per-frame localization output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationEstimate {
    pub x: f64,
    pub y: f64,
    /// Global heading: best reference heading plus the sweep offset.
    pub heading: f64,
    /// Sweep offset relative to the best reference, degrees.
    pub heading_offset: f64,
    pub heading_fallback: bool,
    pub covariance: [[f64; 2]; 2],
    pub sigma_long: f64,
    pub sigma_lat: f64,
    pub accepted: bool,
    pub best_ref_index: Option<usize>,
    pub window: Range<usize>,
    pub status: EstimateStatus,
    pub timing: StageTimings,
}

impl LocalizationEstimate {
    /// Placeholder for a frame the localizer could not process.
    pub fn failed(prior: &PlanarPose) -> Self {
        LocalizationEstimate {
            x: prior.x,
            y: prior.y,
            heading: prior.heading,
            heading_offset: 0.0,
            heading_fallback: true,
            covariance: [[f64::INFINITY, 0.0], [0.0, f64::INFINITY]],
            sigma_long: f64::INFINITY,
            sigma_lat: f64::INFINITY,
            accepted: false,
            best_ref_index: None,
            window: 0..0,
            status: EstimateStatus::Failed,
            timing: StageTimings::default(),
        }
    }

    pub fn pose(&self) -> PlanarPose {
        PlanarPose::new(self.x, self.y, self.heading)
    }
}

/// Accept only when both position sigmas are within the threshold.
pub fn gate(sigma_long: f64, sigma_lat: f64, threshold: f64) -> bool {
    sigma_long <= threshold && sigma_lat <= threshold
}

/// Localize one live image given a prior pose.
pub fn localize<T: Scalar, E: Encoder<T> + ?Sized>(
    cb: &Codebook<T>,
    prior: &PlanarPose,
    live: &Image,
    encoder: &E,
    config: &LocalizerConfig,
) -> Result<LocalizationEstimate> {
    if encoder.dim() != cb.dim() {
        return Err(Error::DimensionMismatch {
            expected: cb.dim(),
            actual: encoder.dim(),
        });
    }
    let start = Instant::now();
    let mut timing = StageTimings::default();

    let t = Instant::now();
    let window = cb.select_window(prior, config.half_window)?;
    timing.window_us = micros(t);

    let t = Instant::now();
    let y = encoder.encode(live)?;
    timing.encode_us = micros(t);

    let t = Instant::now();
    let raw = compute_weights(cb.columns(window.columns.clone()), cb.dim(), &y)?;
    timing.kernel_us = micros(t);

    let t = Instant::now();
    let poses = &cb.poses()[window.columns.clone()];
    let thresholded = match threshold_and_normalize(&raw) {
        Ok(w) => w,
        Err(Error::NoSignal) => {
            timing.estimate_us = micros(t);
            timing.total_us = micros(start);
            return Ok(LocalizationEstimate {
                x: prior.x,
                y: prior.y,
                heading: prior.heading,
                heading_offset: 0.0,
                heading_fallback: true,
                covariance: [[f64::INFINITY, 0.0], [0.0, f64::INFINITY]],
                sigma_long: f64::INFINITY,
                sigma_lat: f64::INFINITY,
                accepted: false,
                best_ref_index: None,
                window: window.columns,
                status: EstimateStatus::NoSignal,
                timing,
            });
        }
        Err(e) => return Err(e),
    };
    let mean = estimate_position(&thresholded, poses)?;
    let v = covariance_weights(&raw, &thresholded, config.covariance_weights)?;
    let cov = estimate_covariance(&v, poses, mean)?;
    timing.estimate_us = micros(t);

    let t = Instant::now();
    let best_local = best_reference(&raw).expect("window is non-empty");
    let best = window.columns.start + best_local;
    let sweep = estimate_heading(live, cb.column(best), encoder, &config.heading_sweep)?;
    timing.heading_us = micros(t);

    let sigma_long = cov.sigma_long.to_f64_lossy();
    let sigma_lat = cov.sigma_lat.to_f64_lossy();
    let offset = sweep.value.to_f64_lossy();
    let m = cov.matrix.map(|row| row.map(|v| v.to_f64_lossy()));
    timing.total_us = micros(start);
    Ok(LocalizationEstimate {
        x: mean[0].to_f64_lossy(),
        y: mean[1].to_f64_lossy(),
        heading: normalize_deg(cb.poses()[best].heading + offset),
        heading_offset: offset,
        heading_fallback: sweep.fallback,
        covariance: m,
        sigma_long,
        sigma_lat,
        accepted: gate(sigma_long, sigma_lat, config.sigma_threshold),
        best_ref_index: Some(best),
        window: window.columns,
        status: EstimateStatus::Ok,
        timing,
    })
}

/// Column header of the per-frame CSV.
pub const FRAME_CSV_HEADER: &str = "frame_id,truth_x,truth_y,truth_heading,est_x,est_y,est_heading,\
sigma_long,sigma_lat,accepted,best_ref_index,window_us,encode_us,kernel_us,estimate_us,heading_us,total_us";

/// Write one per-frame CSV row. Unknown truth fields are left empty.
pub fn write_frame_row<W: Write>(
    out: &mut W,
    frame_id: u64,
    truth: Option<&PlanarPose>,
    est: &LocalizationEstimate,
) -> std::io::Result<()> {
    let truth = match truth {
        Some(p) => format!("{},{},{}", p.x, p.y, p.heading),
        None => ",,".to_string(),
    };
    let best = est
        .best_ref_index
        .map(|i| i.to_string())
        .unwrap_or_default();
    let t = &est.timing;
    writeln!(
        out,
        "{frame_id},{truth},{},{},{},{},{},{},{best},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
        est.x,
        est.y,
        est.heading,
        est.sigma_long,
        est.sigma_lat,
        u8::from(est.accepted),
        t.window_us,
        t.encode_us,
        t.kernel_us,
        t.estimate_us,
        t.heading_us,
        t.total_us
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(x: f64, y: f64) -> PlanarPose {
        PlanarPose::new(x, y, 0.0)
    }

    #[test]
    fn weights_by_hand() {
        let cols = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0];
        assert_eq!(
            compute_weights(&cols, 3, &[3.0, 4.0, 0.0]).unwrap(),
            vec![3.0, 8.0]
        );
        assert_eq!(
            compute_weights(&cols, 3, &[0.0; 3]).unwrap(),
            vec![0.0, 0.0]
        );
        let live = [0.5, -1.5, 2.0];
        let w = compute_weights(&live, 3, &live).unwrap();
        assert_eq!(w, vec![0.25 + 2.25 + 4.0]);
        assert!(compute_weights(&cols, 3, &[1.0, 2.0]).is_err());
        assert!(compute_weights::<f64>(&[], 3, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn threshold_by_hand() {
        let w = threshold_and_normalize(&[10.0f64, 9.0, 1.0]).unwrap();
        assert!((w[0] - 10.0 / 19.0).abs() < 1e-15);
        assert!((w[1] - 9.0 / 19.0).abs() < 1e-15);
        assert_eq!(w[2], 0.0);
        let uniform = threshold_and_normalize(&[2.5f64; 4]).unwrap();
        assert!(uniform.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(threshold_and_normalize(&[7.0]).unwrap(), vec![1.0]);
        assert!(matches!(
            threshold_and_normalize(&[0.0, 0.0]),
            Err(Error::NoSignal)
        ));
        assert!(matches!(
            threshold_and_normalize(&[-1.0, -2.0]),
            Err(Error::NoSignal)
        ));
    }

    #[test]
    fn negative_survivors_are_dropped() {
        // std is 3, so the threshold (-2) would admit the negative entry.
        let w = threshold_and_normalize(&[1.0, -5.0]).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn position_by_hand() {
        assert_eq!(
            estimate_position(&[1.0], &[pose(3.0, 4.0)]).unwrap(),
            [3.0, 4.0]
        );
        assert_eq!(
            estimate_position(&[0.5, 0.5], &[pose(0.0, 0.0), pose(2.0, 0.0)]).unwrap(),
            [1.0, 0.0]
        );
        assert!(estimate_position(&[1.0], &[]).is_err());
    }

    #[test]
    fn covariance_by_hand() {
        let poses = [pose(0.0, 0.0), pose(2.0, 0.0)];
        let c = estimate_covariance(&[0.5, 0.5], &poses, [1.0, 0.0]).unwrap();
        assert_eq!(c.matrix, [[1.0, 0.0], [0.0, 0.0]]);
        assert_eq!((c.sigma_long, c.sigma_lat), (1.0, 0.0));
        let point = estimate_covariance(&[1.0, 0.0], &poses, [0.0, 0.0]).unwrap();
        assert_eq!(point.matrix, [[0.0; 2]; 2]);
        let wide = [pose(-4.0, 0.0), pose(4.0, 0.0)];
        let spread = estimate_covariance(&[0.5, 0.5], &wide, [0.0, 0.0]).unwrap();
        assert!(spread.sigma_long > c.sigma_long);
    }

    #[test]
    fn rectified_covariance_weights() {
        let v = covariance_weights(
            &[3.0, -1.0, 1.0],
            &[],
            CovarianceWeighting::RectifiedNormalized,
        )
        .unwrap();
        assert_eq!(v, vec![0.75, 0.0, 0.25]);
        assert!(
            covariance_weights(&[-3.0], &[], CovarianceWeighting::RectifiedNormalized).is_err()
        );
    }

    #[test]
    fn best_reference_ties_go_low() {
        assert_eq!(best_reference(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(best_reference::<f64>(&[]), None);
    }

    #[test]
    fn sweep_mean_cases() {
        let grid = SweepGrid::default().values();
        assert_eq!(grid.len(), 11);
        assert_eq!(grid[0], -5.0);
        assert_eq!(grid[10], 5.0);
        let symmetric: Vec<f64> = grid.iter().map(|v| 10.0 - v.abs()).collect();
        let n = SweepWeighting::Normalized;
        let th = SweepWeighting::Thresholded;
        assert!(sweep_mean(&grid, &symmetric, n).unwrap().abs() < 1e-12);
        assert!(sweep_mean(&grid, &symmetric, th).unwrap().abs() < 1e-12);
        let mut peak = vec![0.0; 11];
        peak[8] = 4.2;
        assert_eq!(sweep_mean(&grid, &peak, n).unwrap(), 3.0);
        assert_eq!(sweep_mean(&grid, &peak, th).unwrap(), 3.0);
        assert_eq!(sweep_mean(&grid, &[0.0; 11], n), None);
        assert_eq!(sweep_mean(&grid, &[0.0; 11], th), None);

        // Flat scores with a mild tilt: the plain mean is pulled toward 0,
        // the thresholded one keeps only the near-peak values.
        let tilted: Vec<f64> = grid.iter().map(|v| 100.0 - (v - 2.0).powi(2)).collect();
        let plain = sweep_mean(&grid, &tilted, n).unwrap();
        let cut = sweep_mean(&grid, &tilted, th).unwrap();
        assert!(plain > 0.0 && plain < 0.5);
        assert!((cut - 2.0).abs() < (plain - 2.0).abs());
    }

    #[test]
    fn gate_is_inclusive() {
        assert!(gate(5.0, 5.0, 5.0));
        assert!(!gate(5.1, 0.0, 5.0));
        assert!(!gate(0.0, 5.1, 5.0));
    }

    #[test]
    fn csv_row_has_header_arity() {
        let est = LocalizationEstimate {
            x: 1.0,
            y: 2.0,
            heading: 3.0,
            heading_offset: 0.0,
            heading_fallback: false,
            covariance: [[0.0; 2]; 2],
            sigma_long: 0.1,
            sigma_lat: 0.2,
            accepted: true,
            best_ref_index: Some(4),
            window: 0..10,
            status: EstimateStatus::Ok,
            timing: StageTimings::default(),
        };
        let mut buf = Vec::new();
        write_frame_row(&mut buf, 0, None, &est).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(
            line.trim_end().split(',').count(),
            FRAME_CSV_HEADER.split(',').count()
        );
    }
}
