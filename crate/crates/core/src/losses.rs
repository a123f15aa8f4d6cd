//! Diffusion MSE, the denoiser-based log-likelihood ratio, and the
//! contrastive loss built on it.
//!
//! The ratio between the data density and its noised version at level `zeta`
//! needs no normalizing constant:
//!
//! ```text
//! log p_zeta(x) - log p(x)
//!     = 1/2 ∫ dα E_ε[ |ε - ε̂(z_α, α)|² - |ε - b ε̂(z_α, β)|² ],   z_α = mix(x, ε, α)
//! ```
//!
//! with `(β, b) = compose_noise_levels(α, zeta)`. The integral is a trapezoid
//! over a fixed log-SNR grid and the expectation a Monte-Carlo mean. Training
//! on `softplus(y * LLR)` asks the denoiser to act as the Bayes classifier
//! between clean and noised points, which exercises it at mismatched noise
//! levels the plain MSE never visits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{Denoiser, Trainable};
use crate::math::{compose_noise_levels, log_sigmoid, mix_into, sigmoid, softplus, LogSnr, NoiseSchedule};
use crate::nn::{Adam, Ema};
use crate::rng::{self, tag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("log-SNR grid must be strictly increasing with at least two nodes")]
    BadGrid,
    #[error("n_mc must be at least 1")]
    NoDraws,
    #[error("non-finite integrand at node {node} (alpha = {alpha})")]
    NonFinite { node: usize, alpha: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("zeta sampler needs low < high, got [{low}, {high}]")]
    BadZetaRange { low: f64, high: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid joint weight {0}")]
    BadLambda(f64),
}

/// Quadrature and Monte-Carlo settings for [`estimate_llr`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlrEstimatorConfig {
    pub alpha_grid: Vec<LogSnr>,
    pub n_mc: usize,
    /// One noise draw feeds both integrand terms.
    pub shared_noise: bool,
    /// Draws come in `(ε, -ε)` pairs.
    pub antithetic: bool,
    pub rng_seed: u64,
}

impl LlrEstimatorConfig {
    pub fn new(alpha_grid: Vec<LogSnr>, n_mc: usize, rng_seed: u64) -> Result<Self, LossError> {
        let cfg = Self {
            alpha_grid,
            n_mc,
            shared_noise: true,
            antithetic: true,
            rng_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `nodes` evenly spaced log-SNR values on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, nodes: usize, n_mc: usize, rng_seed: u64) -> Result<Self, LossError> {
        if nodes < 2 || !(lo < hi) {
            return Err(LossError::BadGrid);
        }
        let grid = (0..nodes)
            .map(|k| LogSnr::clamped(lo + (hi - lo) * k as f64 / (nodes - 1) as f64))
            .collect();
        Self::new(grid, n_mc, rng_seed)
    }

    /// 64 nodes on `[-10, 15]`, 4 draws per node.
    pub fn training(rng_seed: u64) -> Self {
        Self::uniform(-10.0, 15.0, 64, 4, rng_seed).expect("valid")
    }

    /// 256 nodes on `[-10, 15]`, 256 draws per node.
    pub fn evaluation(rng_seed: u64) -> Self {
        Self::uniform(-10.0, 15.0, 256, 256, rng_seed).expect("valid")
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.alpha_grid.len() < 2 || self.alpha_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LossError::BadGrid);
        }
        if self.n_mc == 0 {
            return Err(LossError::NoDraws);
        }
        Ok(())
    }

    /// Trapezoid weights for the (possibly non-uniform) grid.
    pub fn weights(&self) -> Vec<f64> {
        let a: Vec<f64> = self.alpha_grid.iter().map(|v| v.value()).collect();
        let n = a.len();
        (0..n)
            .map(|k| {
                let left = if k > 0 { a[k] - a[k - 1] } else { 0.0 };
                let right = if k + 1 < n { a[k + 1] - a[k] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect()
    }

    pub fn window(&self) -> (f64, f64) {
        (self.alpha_grid[0].value(), self.alpha_grid[self.alpha_grid.len() - 1].value())
    }
}

/// Noise draws for one `(item, node)`: `n_mc` rows of `2 * dim` values. The
/// second half of a row is only used when the noise is not shared.
fn node_noise(cfg: &LlrEstimatorConfig, key: &[u64], node: usize, dim: usize) -> Vec<f64> {
    let mut path = Vec::with_capacity(key.len() + 2);
    path.push(tag::LLR);
    path.extend_from_slice(key);
    path.push(node as u64);
    let mut r = rng::stream(cfg.rng_seed, &path);
    let width = 2 * dim;
    let mut out = vec![0.0; cfg.n_mc * width];
    for m in 0..cfg.n_mc {
        let row = m * width;
        if cfg.antithetic && m % 2 == 1 {
            for j in 0..width {
                out[row + j] = -out[row - width + j];
            }
        } else {
            let fill = if cfg.shared_noise { dim } else { width };
            rng::fill_normal(&mut r, &mut out[row..row + fill]);
        }
    }
    out
}

/// Rows evaluated for one item: `(z, alpha)` for the first term and
/// `(z', beta)` for the second, per node and draw, plus what is needed to
/// form residuals afterwards.
struct ItemRows {
    xs: Vec<f64>,
    alphas: Vec<LogSnr>,
    eps: Vec<f64>,
    /// `b` per (node, draw) pair.
    b: Vec<f64>,
}

fn build_rows(x: &[f64], zeta: LogSnr, cfg: &LlrEstimatorConfig, key: &[u64]) -> ItemRows {
    let d = x.len();
    let (k_n, m_n) = (cfg.alpha_grid.len(), cfg.n_mc);
    let pairs = k_n * m_n;
    let mut xs = vec![0.0; 2 * pairs * d];
    let mut alphas = Vec::with_capacity(2 * pairs);
    let mut eps = vec![0.0; 2 * pairs * d];
    let mut b = Vec::with_capacity(pairs);
    for (k, &alpha) in cfg.alpha_grid.iter().enumerate() {
        let noise = node_noise(cfg, key, k, d);
        let c = compose_noise_levels(alpha, zeta);
        for m in 0..m_n {
            let p = k * m_n + m;
            let e1 = &noise[2 * d * m..2 * d * m + d];
            let e2 = if cfg.shared_noise { e1 } else { &noise[2 * d * m + d..2 * d * (m + 1)] };
            let (r1, r2) = (2 * p * d, (2 * p + 1) * d);
            mix_into(x, e1, alpha, &mut xs[r1..r1 + d]);
            mix_into(x, e2, alpha, &mut xs[r2..r2 + d]);
            eps[r1..r1 + d].copy_from_slice(e1);
            eps[r2..r2 + d].copy_from_slice(e2);
            alphas.push(alpha);
            alphas.push(c.beta);
            b.push(c.b);
        }
    }
    ItemRows { xs, alphas, eps, b }
}

/// Per-draw replicate values of the estimator and, optionally, the upstream
/// gradient of the estimate with respect to each predicted row.
fn reduce_rows(
    rows: &ItemRows,
    pred: &[f64],
    cfg: &LlrEstimatorConfig,
    weights: &[f64],
    d: usize,
    want_upstream: bool,
) -> Result<(f64, Vec<f64>, Option<Vec<f64>>), LossError> {
    let m_n = cfg.n_mc;
    let mut replicates = vec![0.0; m_n];
    let mut upstream = want_upstream.then(|| vec![0.0; pred.len()]);
    for (k, w) in weights.iter().enumerate() {
        for m in 0..m_n {
            let p = k * m_n + m;
            let (r1, r2) = (2 * p * d, (2 * p + 1) * d);
            let b = rows.b[p];
            let mut t1 = 0.0;
            let mut t2 = 0.0;
            for j in 0..d {
                let a = rows.eps[r1 + j] - pred[r1 + j];
                let c = rows.eps[r2 + j] - b * pred[r2 + j];
                t1 += a * a;
                t2 += c * c;
            }
            let diff = t1 - t2;
            if !diff.is_finite() {
                return Err(LossError::NonFinite {
                    node: k,
                    alpha: cfg.alpha_grid[k].value(),
                });
            }
            replicates[m] += 0.5 * w * diff;
            if let Some(u) = upstream.as_mut() {
                // d/dpred of 0.5 * w / M * (t1 - t2)
                let s = w / m_n as f64;
                for j in 0..d {
                    u[r1 + j] = -s * (rows.eps[r1 + j] - pred[r1 + j]);
                    u[r2 + j] = s * b * (rows.eps[r2 + j] - b * pred[r2 + j]);
                }
            }
        }
    }
    let value = replicates.iter().sum::<f64>() / m_n as f64;
    Ok((value, replicates, upstream))
}

/// Estimate together with its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlrEstimate {
    pub value: f64,
    /// Standard error over draws; antithetic pairs are treated as one draw.
    pub std_err: f64,
}

fn replicate_std_err(replicates: &[f64], antithetic: bool) -> f64 {
    let groups: Vec<f64> = if antithetic && replicates.len() >= 2 {
        replicates.chunks(2).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    } else {
        replicates.to_vec()
    };
    let n = groups.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = groups.iter().sum::<f64>() / n as f64;
    let var = groups.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// `log p_zeta(x) - log p(x)` from denoiser evaluations only.
pub fn estimate_llr(model: &dyn Denoiser, x: &[f64], zeta: LogSnr, cfg: &LlrEstimatorConfig) -> Result<f64, LossError> {
    estimate_llr_keyed(model, x, zeta, cfg, &[0]).map(|e| e.value)
}

/// As [`estimate_llr`], drawing noise from the stream addressed by `key`.
/// Equal keys give equal noise whatever `x` is.
pub fn estimate_llr_keyed(
    model: &dyn Denoiser,
    x: &[f64],
    zeta: LogSnr,
    cfg: &LlrEstimatorConfig,
    key: &[u64],
) -> Result<LlrEstimate, LossError> {
    cfg.validate()?;
    if x.len() != model.data_dim() {
        return Err(LossError::DimensionMismatch {
            expected: model.data_dim(),
            got: x.len(),
        });
    }
    if zeta.is_clean_limit() {
        // p_zeta = p: both terms coincide exactly
        return Ok(LlrEstimate { value: 0.0, std_err: 0.0 });
    }
    let rows = build_rows(x, zeta, cfg, key);
    let pred = model.predict_batch(&rows.xs, &rows.alphas);
    let (value, reps, _) = reduce_rows(&rows, &pred, cfg, &cfg.weights(), x.len(), false)?;
    Ok(LlrEstimate {
        value,
        std_err: replicate_std_err(&reps, cfg.antithetic),
    })
}

/// Truncation-dependent estimate of `-log p(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllEstimate {
    pub value: f64,
    pub window: (f64, f64),
    /// Absolute values are only comparable between identical configs.
    pub truncation_dependent: bool,
}

/// `c_window + 1/2 Σ_k w_k E|ε - ε̂(z_α_k, α_k)|²`, with `c_window` chosen so
/// the estimate is exact for standard normal data at `x = 0`:
/// `c_window = d/2 ln 2π - d/2 ∫_L^U sigmoid(α)² dα`.
pub fn nll_estimate(model: &dyn Denoiser, x: &[f64], cfg: &LlrEstimatorConfig) -> Result<NllEstimate, LossError> {
    cfg.validate()?;
    let d = model.data_dim();
    if x.len() != d {
        return Err(LossError::DimensionMismatch { expected: d, got: x.len() });
    }
    let weights = cfg.weights();
    let m_n = cfg.n_mc;
    let mut xs = vec![0.0; cfg.alpha_grid.len() * m_n * d];
    let mut eps = vec![0.0; xs.len()];
    let mut alphas = Vec::with_capacity(cfg.alpha_grid.len() * m_n);
    for (k, &alpha) in cfg.alpha_grid.iter().enumerate() {
        let noise = node_noise(cfg, &[0], k, d);
        for m in 0..m_n {
            let r = (k * m_n + m) * d;
            let e = &noise[2 * d * m..2 * d * m + d];
            mix_into(x, e, alpha, &mut xs[r..r + d]);
            eps[r..r + d].copy_from_slice(e);
            alphas.push(alpha);
        }
    }
    let pred = model.predict_batch(&xs, &alphas);
    let mut integral = 0.0;
    for (k, w) in weights.iter().enumerate() {
        let mut s = 0.0;
        for m in 0..m_n {
            let r = (k * m_n + m) * d;
            s += (0..d).map(|j| (eps[r + j] - pred[r + j]).powi(2)).sum::<f64>();
        }
        integral += w * s / m_n as f64;
    }
    let (lo, hi) = cfg.window();
    let sq_sigmoid = softplus(hi) - softplus(lo) - sigmoid(hi) + sigmoid(lo);
    let c = 0.5 * d as f64 * ((2.0 * std::f64::consts::PI).ln() - sq_sigmoid);
    Ok(NllEstimate {
        value: c + 0.5 * integral,
        window: (lo, hi),
        truncation_dependent: true,
    })
}

/// How `zeta` is drawn for contrastive items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ZetaLaw {
    #[default]
    Uniform,
    /// Logistic with location `(low + high) / 2` and scale `(high - low) / 8`,
    /// truncated to `[low, high]`.
    LogisticTruncated,
    /// The same logistic without truncation.
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaSampler {
    pub law: ZetaLaw,
    pub low: f64,
    pub high: f64,
}

impl Default for ZetaSampler {
    fn default() -> Self {
        Self {
            law: ZetaLaw::Uniform,
            low: 6.0,
            high: 15.0,
        }
    }
}

impl ZetaSampler {
    pub fn new(law: ZetaLaw, low: f64, high: f64) -> Result<Self, LossError> {
        if !(low < high && low.is_finite() && high.is_finite()) {
            return Err(LossError::BadZetaRange { low, high });
        }
        Ok(Self { law, low, high })
    }

    pub fn sample<R: Rng + ?Sized>(&self, r: &mut R) -> LogSnr {
        let loc = 0.5 * (self.low + self.high);
        let scale = (self.high - self.low) / 8.0;
        let cdf = |v: f64| sigmoid((v - loc) / scale);
        let v = match self.law {
            ZetaLaw::Uniform => r.random_range(self.low..self.high),
            ZetaLaw::LogisticTruncated => {
                let u = r.random_range(cdf(self.low)..cdf(self.high));
                loc + scale * (u / (1.0 - u)).ln()
            }
            ZetaLaw::Logistic => {
                let u: f64 = r.random_range(f64::EPSILON..1.0 - f64::EPSILON);
                loc + scale * (u / (1.0 - u)).ln()
            }
        };
        LogSnr::clamped(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdlBatchItem {
    pub x: Vec<f64>,
    /// `+1` for a clean point, `-1` for one noised at `zeta`.
    pub y: f64,
    pub zeta: LogSnr,
}

/// Which labels [`make_cdl_batch`] assigns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelPolicy {
    #[default]
    FairCoin,
    AllClean,
    AllNoised,
}

/// Per item: draw `zeta`, flip a fair coin, and on tails replace `x` by
/// `mix(x, ε, zeta)`. `data` is row-major with `dim` columns.
pub fn make_cdl_batch(
    data: &[f64],
    dim: usize,
    zeta: &ZetaSampler,
    labels: LabelPolicy,
    seed: u64,
    step: u64,
) -> Result<Vec<CdlBatchItem>, LossError> {
    if data.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    Ok(data
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, x)| {
            let mut r = rng::stream(seed, &[tag::CDL_BATCH, step, i as u64]);
            let z = zeta.sample(&mut r);
            let heads: bool = r.random();
            let clean = match labels {
                LabelPolicy::FairCoin => heads,
                LabelPolicy::AllClean => true,
                LabelPolicy::AllNoised => false,
            };
            if clean {
                CdlBatchItem { x: x.to_vec(), y: 1.0, zeta: z }
            } else {
                let eps = rng::normal_vec(&mut r, dim);
                let mut noised = vec![0.0; dim];
                mix_into(x, &eps, z, &mut noised);
                CdlBatchItem { x: noised, y: -1.0, zeta: z }
            }
        })
        .collect())
}

/// Items whose rows are evaluated together; bounds activation memory.
const CDL_ROWS_PER_GROUP: usize = 8192;

/// Mean of `softplus(y * LLR)` over items and its parameter gradient, added
/// into `grad` (scaled by `scale`). Noise and log-SNR draws are held fixed, so
/// the gradient is the pathwise one.
pub fn cdl_loss<M: Trainable>(
    model: &M,
    items: &[CdlBatchItem],
    cfg: &LlrEstimatorConfig,
    key: &[u64],
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64, LossError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let d = model.data_dim();
    if let Some(bad) = items.iter().find(|it| it.x.len() != d) {
        return Err(LossError::DimensionMismatch { expected: d, got: bad.x.len() });
    }
    let weights = cfg.weights();
    let n = items.len() as f64;
    let rows_per_item = 2 * cfg.alpha_grid.len() * cfg.n_mc;
    let per_group = (CDL_ROWS_PER_GROUP / rows_per_item).max(1);
    let mut total = 0.0;
    let mut grad = grad;
    for (g, group) in items.chunks(per_group).enumerate() {
        let built: Vec<ItemRows> = group
            .par_iter()
            .enumerate()
            .map(|(j, it)| {
                let idx = (g * per_group + j) as u64;
                let mut k = key.to_vec();
                k.push(idx);
                build_rows(&it.x, it.zeta, cfg, &k)
            })
            .collect();
        let xs: Vec<f64> = built.iter().flat_map(|r| r.xs.iter().copied()).collect();
        let alphas: Vec<LogSnr> = built.iter().flat_map(|r| r.alphas.iter().copied()).collect();
        let (pred, cache) = model.forward_train(&xs, &alphas);
        let mut upstream = grad.as_ref().map(|_| vec![0.0; pred.len()]);
        for (j, (it, rows)) in group.iter().zip(&built).enumerate() {
            let span = j * rows_per_item * d..(j + 1) * rows_per_item * d;
            let clean = it.zeta.is_clean_limit();
            let (llr, _, up) = if clean {
                (0.0, vec![], None)
            } else {
                reduce_rows(rows, &pred[span.clone()], cfg, &weights, d, upstream.is_some())?
            };
            let v = it.y * llr;
            total += softplus(v);
            if let (Some(u), Some(up)) = (upstream.as_mut(), up) {
                // d softplus(y L) / dL = y * sigmoid(y L)
                let coef = it.y * sigmoid(v) / n;
                for (dst, s) in u[span].iter_mut().zip(&up) {
                    *dst = coef * s;
                }
            }
        }
        if let (Some((gbuf, scale)), Some(mut u)) = (grad.as_mut(), upstream) {
            if *scale != 1.0 {
                u.iter_mut().for_each(|v| *v *= *scale);
            }
            model.backward(&cache, &u, gbuf);
        }
    }
    Ok(total / n)
}

/// Exact Bayes risk `E[softplus(y * LLR_true(x))]` of the clean-vs-noised
/// classification task for a 1-D mixture at fixed `zeta`, by trapezoid
/// quadrature on `[lo, hi]`.
pub fn bayes_risk_1d(spec: &crate::oracle::GaussianMixtureSpec, zeta: LogSnr, lo: f64, hi: f64, nodes: usize) -> f64 {
    let h = (hi - lo) / (nodes - 1) as f64;
    let mut acc = 0.0;
    for k in 0..nodes {
        let x = [lo + h * k as f64];
        let lp = spec.noisy_log_density(&x, LogSnr::MAX).expect("1-D");
        let lz = spec.noisy_log_density(&x, zeta).expect("1-D");
        let llr = lz - lp;
        // 1/2 p(x) softplus(LLR) + 1/2 p_zeta(x) softplus(-LLR)
        let f = 0.5 * (lp.exp() * softplus(llr) + lz.exp() * softplus(-llr));
        acc += if k == 0 || k + 1 == nodes { 0.5 * f } else { f };
    }
    acc * h
}

/// Posterior probability that `x` is clean, from an LLR: `1 / (1 + exp(LLR))`.
pub fn clean_posterior(llr: f64) -> f64 {
    log_sigmoid(-llr).exp()
}

/// How per-example log-SNRs are drawn for the MSE loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AlphaSampler {
    /// Uniform integer timestep in `1..=T`.
    Timesteps(NoiseSchedule),
    UniformLogSnr { low: f64, high: f64 },
}

impl AlphaSampler {
    pub fn sample<R: Rng + ?Sized>(&self, r: &mut R) -> LogSnr {
        match self {
            AlphaSampler::Timesteps(s) => s.alpha(r.random_range(1..=s.steps())),
            AlphaSampler::UniformLogSnr { low, high } => LogSnr::clamped(r.random_range(*low..*high)),
        }
    }
}

/// Mean over the batch of `|ε - model(mix(x, ε, α), α)|²`, with its gradient
/// added into `grad` scaled by `scale`.
pub fn mse_diffusion_loss<M: Trainable>(
    model: &M,
    data: &[f64],
    sampler: &AlphaSampler,
    seed: u64,
    step: u64,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64, LossError> {
    let d = model.data_dim();
    if data.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if data.len() % d != 0 {
        return Err(LossError::DimensionMismatch { expected: d, got: data.len() % d });
    }
    let n = data.len() / d;
    let mut xs = vec![0.0; data.len()];
    let mut eps = vec![0.0; data.len()];
    let mut alphas = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, &[tag::TRAIN_MSE, step, i as u64]);
        let a = sampler.sample(&mut r);
        rng::fill_normal(&mut r, &mut eps[i * d..(i + 1) * d]);
        mix_into(&data[i * d..(i + 1) * d], &eps[i * d..(i + 1) * d], a, &mut xs[i * d..(i + 1) * d]);
        alphas.push(a);
    }
    let (pred, cache) = model.forward_train(&xs, &alphas);
    let loss = eps.iter().zip(&pred).map(|(e, p)| (e - p).powi(2)).sum::<f64>() / n as f64;
    if let Some((g, scale)) = grad {
        let up: Vec<f64> = eps
            .iter()
            .zip(&pred)
            .map(|(e, p)| -2.0 * scale * (e - p) / n as f64)
            .collect();
        model.backward(&cache, &up, g);
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrainingMode {
    MseOnly,
    CdlOnly,
    Joint { lambda: f64 },
}

impl TrainingMode {
    pub fn validate(&self) -> Result<(), LossError> {
        match *self {
            TrainingMode::Joint { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => Err(LossError::BadLambda(lambda)),
            _ => Ok(()),
        }
    }

    fn weights(&self) -> (f64, f64) {
        match *self {
            TrainingMode::MseOnly => (1.0, 0.0),
            TrainingMode::CdlOnly => (0.0, 1.0),
            TrainingMode::Joint { lambda } => (1.0, lambda),
        }
    }
}

/// Everything a training step needs besides the model and optimizer.
#[derive(Debug, Clone)]
pub struct StepConfig {
    pub mode: TrainingMode,
    pub alpha_sampler: AlphaSampler,
    pub llr: LlrEstimatorConfig,
    pub zeta: ZetaSampler,
    /// Contrastive items per step (taken from the front of the data batch).
    pub cdl_items: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub mse: Option<f64>,
    pub cdl: Option<f64>,
    pub total: f64,
}

/// One optimizer step on `mse + lambda * cdl` (or either alone). The MSE and
/// contrastive parts draw from separate streams, so runs that differ only in
/// mode share their MSE noise exactly.
pub fn combined_training_step<M: Trainable>(
    model: &mut M,
    data: &[f64],
    cfg: &StepConfig,
    step: u64,
    opt: &mut Adam,
    ema: Option<&mut Ema>,
) -> Result<StepStats, LossError> {
    cfg.mode.validate()?;
    let (w_mse, w_cdl) = cfg.mode.weights();
    let mut grad = vec![0.0; model.num_params()];
    let mut total = 0.0;
    let mse = if w_mse > 0.0 {
        let v = mse_diffusion_loss(&*model, data, &cfg.alpha_sampler, cfg.seed, step, Some((&mut grad, w_mse)))?;
        total += w_mse * v;
        Some(v)
    } else {
        None
    };
    let cdl = if w_cdl > 0.0 {
        let d = model.data_dim();
        let take = (cfg.cdl_items * d).min(data.len());
        let items = make_cdl_batch(&data[..take], d, &cfg.zeta, LabelPolicy::FairCoin, cfg.seed, step)?;
        let v = cdl_loss(&*model, &items, &cfg.llr, &[tag::TRAIN_CDL, step], Some((&mut grad, w_cdl)))?;
        total += w_cdl * v;
        Some(v)
    } else {
        None
    };
    opt.step(model.params_mut(), &grad);
    if let Some(e) = ema {
        e.update(model.params());
    }
    Ok(StepStats { step, mse, cdl, total })
}

/// A random batch of rows (with replacement) for step `step`.
pub fn sample_batch(data: &[f64], dim: usize, batch: usize, seed: u64, step: u64) -> Vec<f64> {
    let n = data.len() / dim;
    let mut r: ChaCha8Rng = rng::stream(seed, &[tag::DATA, 2, step]);
    let mut out = Vec::with_capacity(batch * dim);
    for _ in 0..batch {
        let i = r.random_range(0..n);
        out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
    }
    out
}
