//! Two-sample MMD with a Gaussian kernel, bandwidth selection against a
//! standard-normal reference, and in-band / out-of-band error summaries.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::LogSnr;
use crate::oracle::{ErrorField, GaussianMixtureSpec};
use crate::rng::{self, tag};

pub use crate::samplers::SamplerReport;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("MMD needs at least 2 points per set, got {0}")]
    TooFewPoints(usize),
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("point sets must have length divisible by dim {dim}, got {len}")]
    Shape { dim: usize, len: usize },
    #[error("no bandwidth candidates")]
    NoCandidates,
    #[error("field and spec disagree on dimension")]
    DimensionMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MmdEstimator {
    #[default]
    Unbiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub bandwidth: f64,
    pub estimator: MmdEstimator,
    /// Sets larger than this are subsampled without replacement.
    pub max_points: usize,
    pub rng_seed: u64,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            bandwidth: 0.03,
            estimator: MmdEstimator::Unbiased,
            max_points: 4096,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub mmd: f64,
    pub bandwidth: f64,
    pub n_x: usize,
    pub n_y: usize,
    /// Points actually used from each set after subsampling.
    pub used_x: usize,
    pub used_y: usize,
}

fn check(x: &[f64], dim: usize) -> Result<usize, EvalError> {
    if dim == 0 || x.len() % dim != 0 {
        return Err(EvalError::Shape { dim, len: x.len() });
    }
    let n = x.len() / dim;
    if n < 2 {
        return Err(EvalError::TooFewPoints(n));
    }
    Ok(n)
}

fn check_bandwidths(bws: &[f64]) -> Result<(), EvalError> {
    if bws.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    match bws.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
        Some(&b) => Err(EvalError::Bandwidth(b)),
        None => Ok(()),
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Per-bandwidth kernel sums over `a_i` against all of `b` (skipping `j == i`
/// when `skip_diag`), row sums reduced in row order.
fn kernel_sums(a: &[f64], b: &[f64], dim: usize, neg_inv: &[f64], skip_diag: bool) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = a
        .par_chunks_exact(dim)
        .enumerate()
        .map(|(i, ai)| {
            let mut acc = vec![0.0; neg_inv.len()];
            for (j, bj) in b.chunks_exact(dim).enumerate() {
                if skip_diag && i == j {
                    continue;
                }
                let d2 = sq_dist(ai, bj);
                for (s, k) in acc.iter_mut().zip(neg_inv) {
                    *s += (d2 * k).exp();
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; neg_inv.len()];
    for r in &rows {
        for (t, v) in total.iter_mut().zip(r) {
            *t += v;
        }
    }
    total
}

/// Orders the pair so the estimator is exactly symmetric in its arguments.
fn canonical<'a>(x: &'a [f64], y: &'a [f64]) -> (&'a [f64], &'a [f64]) {
    let key = |s: &[f64]| (s.len(), s.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    if key(x) <= key(y) {
        (x, y)
    } else {
        (y, x)
    }
}

/// Unbiased squared MMD at each bandwidth in `bandwidths`.
pub fn mmd_sweep(x: &[f64], y: &[f64], dim: usize, bandwidths: &[f64]) -> Result<Vec<f64>, EvalError> {
    check(x, dim)?;
    check(y, dim)?;
    check_bandwidths(bandwidths)?;
    let (x, y) = canonical(x, y);
    let (nx, ny) = ((x.len() / dim) as f64, (y.len() / dim) as f64);
    let neg_inv: Vec<f64> = bandwidths.iter().map(|b| -0.5 / (b * b)).collect();
    let kxx = kernel_sums(x, x, dim, &neg_inv, true);
    let kyy = kernel_sums(y, y, dim, &neg_inv, true);
    let kxy = kernel_sums(x, y, dim, &neg_inv, false);
    Ok((0..bandwidths.len())
        .map(|b| kxx[b] / (nx * (nx - 1.0)) + kyy[b] / (ny * (ny - 1.0)) - 2.0 * kxy[b] / (nx * ny))
        .collect())
}

/// Unbiased squared MMD with kernel `exp(-|x - y|^2 / (2 bandwidth^2))`.
/// Rows are points of dimension `dim`; the value may be negative.
pub fn mmd_unbiased(x: &[f64], y: &[f64], dim: usize, bandwidth: f64) -> Result<f64, EvalError> {
    Ok(mmd_sweep(x, y, dim, &[bandwidth])?[0])
}

/// Keeps at most `max` rows, chosen without replacement from `seed`.
pub fn subsample(x: &[f64], dim: usize, max: usize, seed: u64, stream: u64) -> Vec<f64> {
    let n = x.len() / dim;
    if n <= max {
        return x.to_vec();
    }
    let mut r = rng::stream(seed, &[tag::EVAL, 2, stream]);
    let mut idx = index::sample(&mut r, n, max).into_vec();
    idx.sort_unstable();
    idx.iter().flat_map(|&i| x[i * dim..(i + 1) * dim].iter().copied()).collect()
}

pub fn mmd_with_config(x: &[f64], y: &[f64], dim: usize, cfg: &MmdConfig) -> Result<MmdResult, EvalError> {
    let (n_x, n_y) = (check(x, dim)?, check(y, dim)?);
    let xs = subsample(x, dim, cfg.max_points, cfg.rng_seed, 0);
    let ys = subsample(y, dim, cfg.max_points, cfg.rng_seed, 1);
    Ok(MmdResult {
        mmd: mmd_unbiased(&xs, &ys, dim, cfg.bandwidth)?,
        bandwidth: cfg.bandwidth,
        n_x,
        n_y,
        used_x: xs.len() / dim,
        used_y: ys.len() / dim,
    })
}

/// Standard error of the MMD estimate from the pairwise statistic
/// `h_ij = k(x_i,x_j) + k(y_i,y_j) - k(x_i,y_j) - k(x_j,y_i)` on the first
/// `m = min(n_x, n_y)` points: `4/m Var(mean_j h_ij) + 2/(m(m-1)) Var(h_ij)`.
pub fn mmd_std_err(x: &[f64], y: &[f64], dim: usize, bandwidths: &[f64]) -> Result<Vec<f64>, EvalError> {
    let m = check(x, dim)?.min(check(y, dim)?);
    check_bandwidths(bandwidths)?;
    let (x, y) = canonical(x, y);
    let neg_inv: Vec<f64> = bandwidths.iter().map(|b| -0.5 / (b * b)).collect();
    let nb = bandwidths.len();
    // per row: (sum h, sum h^2) per bandwidth
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let (xi, yi) = (&x[i * dim..(i + 1) * dim], &y[i * dim..(i + 1) * dim]);
            let (mut s, mut s2) = (vec![0.0; nb], vec![0.0; nb]);
            for j in (0..m).filter(|&j| j != i) {
                let (xj, yj) = (&x[j * dim..(j + 1) * dim], &y[j * dim..(j + 1) * dim]);
                let d = [sq_dist(xi, xj), sq_dist(yi, yj), sq_dist(xi, yj), sq_dist(xj, yi)];
                for b in 0..nb {
                    let k = neg_inv[b];
                    let h = (d[0] * k).exp() + (d[1] * k).exp() - (d[2] * k).exp() - (d[3] * k).exp();
                    s[b] += h;
                    s2[b] += h * h;
                }
            }
            (s, s2)
        })
        .collect();
    let mf = m as f64;
    let pairs = mf * (mf - 1.0);
    Ok((0..nb)
        .map(|b| {
            let total: f64 = rows.iter().map(|r| r.0[b]).sum();
            let total2: f64 = rows.iter().map(|r| r.1[b]).sum();
            let mean = total / pairs;
            let var_h = (total2 / pairs - mean * mean).max(0.0);
            let row_means: Vec<f64> = rows.iter().map(|r| r.0[b] / (mf - 1.0)).collect();
            let var_row = row_means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (mf - 1.0).max(1.0);
            (4.0 / mf * var_row + 2.0 / pairs * var_h).sqrt()
        })
        .collect())
}

/// `count` log-spaced values on `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    crate::oracle::linspace(lo.ln(), hi.ln(), count).into_iter().map(f64::exp).collect()
}

/// 25 log-spaced bandwidths on `[1e-3, 1]`.
pub fn default_bandwidth_candidates() -> Vec<f64> {
    log_spaced(1e-3, 1.0, 25)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub selected: f64,
    pub candidates: Vec<f64>,
    pub mmd: Vec<f64>,
    pub std_err: Vec<f64>,
}

/// Picks the bandwidth that maximizes MMD between `data` and an equally
/// sized standard-normal reference. Candidates within three standard errors
/// of the best count as tied, and ties go to the smaller bandwidth.
pub fn select_bandwidth(
    data: &[f64],
    dim: usize,
    candidates: &[f64],
    cfg: &MmdConfig,
) -> Result<BandwidthSelection, EvalError> {
    check_bandwidths(candidates)?;
    check(data, dim)?;
    let data = subsample(data, dim, cfg.max_points, cfg.rng_seed, 0);
    let mut r = rng::stream(cfg.rng_seed, &[tag::EVAL, 1]);
    let reference = rng::normal_vec(&mut r, data.len());
    let mmd = mmd_sweep(&data, &reference, dim, candidates)?;
    let std_err = mmd_std_err(&data, &reference, dim, candidates)?;
    let best = (0..mmd.len()).fold(0, |b, i| if mmd[i] > mmd[b] { i } else { b });
    let floor = mmd[best] - 3.0 * std_err[best];
    let selected = (0..mmd.len())
        .filter(|&i| mmd[i] >= floor)
        .min_by(|&i, &j| candidates[i].total_cmp(&candidates[j]))
        .map_or(candidates[best], |i| candidates[i]);
    Ok(BandwidthSelection {
        selected,
        candidates: candidates.to_vec(),
        mmd,
        std_err,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandError {
    pub in_band_mean: f64,
    pub out_band_mean: f64,
    pub in_band_cells: usize,
    pub out_band_cells: usize,
}

/// Whether `x` lies within `band_sigmas` noisy standard deviations of some
/// noisy component mean at log-SNR `a`.
pub fn in_band(spec: &GaussianMixtureSpec, x: &[f64], a: LogSnr, band_sigmas: f64) -> bool {
    spec.components().iter().any(|c| {
        let s = (a.signal_var() * c.sigma_data * c.sigma_data + a.noise_var()).sqrt();
        let d2: f64 = x
            .iter()
            .zip(&c.mean)
            .map(|(xv, m)| (xv - a.signal_scale() * m).powi(2))
            .sum();
        d2.sqrt() <= band_sigmas * s
    })
}

/// Mean of the field inside and outside the training band. An empty side
/// reports 0.
pub fn ood_band_error(field: &ErrorField, spec: &GaussianMixtureSpec, band_sigmas: f64) -> Result<BandError, EvalError> {
    if field.x_grid.iter().any(|x| x.len() != spec.dim()) {
        return Err(EvalError::DimensionMismatch);
    }
    let (mut si, mut so, mut ni, mut no) = (0.0, 0.0, 0usize, 0usize);
    for (row, &a) in field.values.iter().zip(&field.alphas) {
        for (v, x) in row.iter().zip(&field.x_grid) {
            if in_band(spec, x, a, band_sigmas) {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(BandError {
        in_band_mean: mean(si, ni),
        out_band_mean: mean(so, no),
        in_band_cells: ni,
        out_band_cells: no,
    })
}
