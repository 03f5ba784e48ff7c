//! Helpers shared by the integration test binaries: a direct-summation
//! oracle for the localizer stages and a cached small reference setup.
#![allow(dead_code)]

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satloc::codebook::PathSpec;
use satloc::config::RunConfig;
use satloc::localizer::{
    compute_weights, covariance_weights, estimate_covariance, estimate_position, sweep_mean,
    threshold_and_normalize, CovarianceWeighting, SweepWeighting,
};
use satloc::pipeline::{prepare_reference, Prepared};
use satloc::{generate_map, Error, PlanarPose};

/// One random localizer instance: `m` columns of dimension `d`.
#[derive(Clone, Debug)]
pub struct Instance {
    pub d: usize,
    pub columns: Vec<Vec<f64>>,
    pub live: Vec<f64>,
    pub poses: Vec<PlanarPose>,
    pub sweep_values: Vec<f64>,
}

impl Instance {
    pub fn random(seed: u64, max_m: usize, max_d: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(1..=max_m);
        let d = rng.random_range(1..=max_d);
        let vec = |n: usize, r: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| r.random_range(-3.0..3.0))
                .collect::<Vec<f64>>()
        };
        let columns = (0..m).map(|_| vec(d, &mut rng)).collect();
        let live = vec(d, &mut rng);
        let poses = (0..m)
            .map(|_| {
                PlanarPose::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    0.0,
                )
            })
            .collect();
        let sweep_values = (0..m).map(|i| i as f64 - 5.0).collect();
        Instance {
            d,
            columns,
            live,
            poses,
            sweep_values,
        }
    }

    pub fn flat_columns(&self) -> Vec<f64> {
        self.columns.iter().flatten().copied().collect()
    }
}

pub mod oracle {
    use satloc::PlanarPose;

    pub fn weights(columns: &[Vec<f64>], live: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for c in columns {
            let mut s = 0.0;
            for k in 0..live.len() {
                s += c[k] * live[k];
            }
            out.push(s);
        }
        out
    }

    /// Cutoff `max - population std`.
    pub fn cutoff(raw: &[f64]) -> f64 {
        let n = raw.len() as f64;
        let mut mean = 0.0;
        for w in raw {
            mean += w / n;
        }
        let mut ss = 0.0;
        for w in raw {
            ss += (w - mean).powi(2);
        }
        let mut max = raw[0];
        for &w in raw {
            if w > max {
                max = w;
            }
        }
        max - (ss / n).sqrt()
    }

    /// `None` means no signal.
    pub fn threshold(raw: &[f64]) -> Option<Vec<f64>> {
        let t = cutoff(raw);
        let mut total = 0.0;
        for &w in raw {
            if w >= t && w > 0.0 {
                total += w;
            }
        }
        if total <= 0.0 {
            return None;
        }
        Some(
            raw.iter()
                .map(|&w| if w >= t && w > 0.0 { w / total } else { 0.0 })
                .collect(),
        )
    }

    pub fn position(w: &[f64], poses: &[PlanarPose]) -> (f64, f64) {
        let (mut x, mut y) = (0.0, 0.0);
        for i in 0..w.len() {
            x += w[i] * poses[i].x;
            y += w[i] * poses[i].y;
        }
        (x, y)
    }

    pub fn rectified(raw: &[f64]) -> Option<Vec<f64>> {
        let total: f64 = raw.iter().filter(|w| **w > 0.0).sum();
        (total > 0.0).then(|| {
            raw.iter()
                .map(|&w| if w > 0.0 { w / total } else { 0.0 })
                .collect()
        })
    }

    pub fn covariance(v: &[f64], poses: &[PlanarPose], mean: (f64, f64)) -> [[f64; 2]; 2] {
        let mut p = [[0.0; 2]; 2];
        for i in 0..v.len() {
            let e = [poses[i].x - mean.0, poses[i].y - mean.1];
            for r in 0..2 {
                for c in 0..2 {
                    p[r][c] += v[i] * e[r] * e[c];
                }
            }
        }
        p
    }

    pub fn sweep(values: &[f64], w: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..values.len() {
            s += values[i] * w[i];
        }
        s
    }
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-9 * scale.max(b.abs()).max(1e-300)
}

/// Whether any raw weight sits so close to the cutoff that rounding alone
/// could decide its membership.
pub fn near_cutoff(raw: &[f64]) -> bool {
    let t = oracle::cutoff(raw);
    let scale = raw.iter().fold(0.0f64, |m, w| m.max(w.abs())).max(1e-12);
    raw.iter()
        .any(|&w| (w - t).abs() < 1e-9 * scale || w.abs() < 1e-12 * scale)
}

/// Compare every pipeline stage against the oracle at 1e-9 relative error.
pub fn check_instance(inst: &Instance) -> Result<(), String> {
    let raw =
        compute_weights(&inst.flat_columns(), inst.d, &inst.live).map_err(|e| e.to_string())?;
    let raw_o = oracle::weights(&inst.columns, &inst.live);
    let wscale = raw_o.iter().fold(1.0f64, |m, w| m.max(w.abs()));
    for (a, b) in raw.iter().zip(&raw_o) {
        if !close(*a, *b, wscale) {
            return Err(format!("weights {raw:?} vs {raw_o:?}"));
        }
    }
    if near_cutoff(&raw_o) {
        return Ok(());
    }

    let th = threshold_and_normalize(&raw);
    let th_o = oracle::threshold(&raw_o);
    let (th, th_o) = match (th, th_o) {
        (Err(Error::NoSignal), None) => return Ok(()),
        (Ok(a), Some(b)) => (a, b),
        (a, b) => return Err(format!("threshold outcome differs: {a:?} vs {b:?}")),
    };
    for (a, b) in th.iter().zip(&th_o) {
        if !close(*a, *b, 1.0) {
            return Err(format!("thresholded {th:?} vs {th_o:?}"));
        }
    }

    let pos = estimate_position(&th, &inst.poses).map_err(|e| e.to_string())?;
    let pos_o = oracle::position(&th_o, &inst.poses);
    if !close(pos[0], pos_o.0, 20.0) || !close(pos[1], pos_o.1, 20.0) {
        return Err(format!("position {pos:?} vs {pos_o:?}"));
    }

    let v = covariance_weights(&raw, &th, CovarianceWeighting::RectifiedNormalized)
        .map_err(|e| e.to_string())?;
    let v_o = oracle::rectified(&raw_o).ok_or("oracle rectified weights empty")?;
    let cov = estimate_covariance(&v, &inst.poses, pos).map_err(|e| e.to_string())?;
    let cov_o = oracle::covariance(&v_o, &inst.poses, pos_o);
    for r in 0..2 {
        for c in 0..2 {
            if !close(cov.matrix[r][c], cov_o[r][c], 1600.0) {
                return Err(format!("covariance {:?} vs {cov_o:?}", cov.matrix));
            }
        }
    }
    if !close(cov.sigma_long, cov_o[0][0].sqrt(), 40.0)
        || !close(cov.sigma_lat, cov_o[1][1].sqrt(), 40.0)
    {
        return Err("sigma mismatch".into());
    }

    // Heading stage: the same raw scores reused as sweep scores.
    let h = sweep_mean(&inst.sweep_values, &raw, SweepWeighting::Thresholded).ok_or("no sweep")?;
    if !close(h, oracle::sweep(&inst.sweep_values, &th_o), 5.0) {
        return Err("thresholded sweep mismatch".into());
    }
    let h = sweep_mean(&inst.sweep_values, &raw, SweepWeighting::Normalized).ok_or("no sweep")?;
    if !close(h, oracle::sweep(&inst.sweep_values, &v_o), 5.0) {
        return Err("normalized sweep mismatch".into());
    }
    Ok(())
}

/// Default configuration on a short path, with the reference data built once
/// per test binary.
pub fn short_run_config(length: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.path.length = length;
    cfg
}

pub fn short_reference() -> &'static (RunConfig, Prepared) {
    static CELL: OnceLock<(RunConfig, Prepared)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = short_run_config(50.0);
        let map = generate_map(&cfg.map.scene(), cfg.map.seed).unwrap();
        let path: PathSpec = cfg.path.resolve(&map).unwrap();
        let prepared = prepare_reference(map, path, &cfg).unwrap();
        (cfg, prepared)
    })
}
