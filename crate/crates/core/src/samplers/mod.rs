//! Reverse-time samplers.
//!
//! Every sampler is built from one-step maps `x_t -> x_{t-1}` over a
//! [`NoiseSchedule`]. The sequential samplers apply them in order; the Picard
//! solver turns the same maps into a drift `s = (step(x) - x) / h` with
//! `h = 1/T` and refines the whole path at once, so both agree on what the
//! discretized dynamics are.

pub mod parallel;
pub mod sequential;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::Denoiser;
use crate::math::{LogSnr, NoiseSchedule};
use crate::rng::{self, tag};

pub use parallel::{
    euler_rollout, parallel_sample, picard_iterate, picard_solve, DriftField, InitPolicy, MmdMonitor, ModelDrift,
    NormKind, ParallelOutput, PicardConfig, Trajectory,
};
pub use sequential::{
    ddpm_ancestral_sample, ddpm_ancestral_from, probability_flow_from, probability_flow_sample, stochastic_churn_sample,
    SampleOutput, StochasticSamplerConfig, Stepper,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("non-finite drift at step {step}")]
    NonFiniteDrift { step: usize },
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Speed and convergence accounting for one sampling run. `nfe` counts
/// denoiser evaluations per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SamplerReport {
    pub sampler: String,
    pub nfe: u64,
    pub picard_iterations: Option<usize>,
    pub converged: Option<bool>,
    /// Convergence norm after each Picard iteration.
    pub trace: Vec<f64>,
    pub mmd_trace: Option<Vec<f64>>,
    pub iterations_to_mmd_threshold: Option<usize>,
    /// Largest number of trajectory steps evaluated in one iteration.
    pub peak_parallel_steps: Option<usize>,
    #[serde(skip)]
    pub wall_ms: f64,
}

/// `grad log p_alpha(x) = -model(x, alpha) / sqrt(sigmoid(-alpha))`.
pub fn score_from_model(model: &dyn Denoiser, x: &[f64], alpha: LogSnr) -> Vec<f64> {
    let k = -1.0 / alpha.noise_scale();
    model.predict(x, alpha).into_iter().map(|e| k * e).collect()
}

/// Which one-step map drives the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    /// Ancestral DDPM with pre-drawn noise.
    Ddpm,
    /// Euler on the probability-flow ODE.
    FlowEuler,
}

/// Standard normal starting points for `n` samples.
pub fn initial_noise(seed: u64, n: usize, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[tag::SAMPLER, 0]);
    rng::normal_vec(&mut r, n * dim)
}

/// Noise injected by the ancestral step out of timestep `t`. Row `j` belongs
/// to sample `j` whatever `n` is.
pub fn step_noise(seed: u64, t: usize, n: usize, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[tag::SAMPLER, 1, t as u64]);
    rng::normal_vec(&mut r, n * dim)
}

/// DDPM posterior-mean step from `t` to `t - 1`:
/// `(x - beta_t / sqrt(1 - abar_t) eps) / sqrt(1 - beta_t) + sigma_t xi`,
/// `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`, no noise at `t = 1`.
pub(crate) fn ddpm_step(schedule: &NoiseSchedule, t: usize, x: &[f64], eps: &[f64], xi: Option<&[f64]>) -> Vec<f64> {
    let (a_t, a_prev) = (schedule.alpha(t), schedule.alpha(t - 1));
    let beta = schedule.beta(t);
    let one_minus_abar = a_t.noise_var();
    let inv_sqrt_keep = 1.0 / (1.0 - beta).sqrt();
    let coef = beta / one_minus_abar.sqrt();
    let sigma = if t > 1 {
        (beta * a_prev.noise_var() / one_minus_abar).sqrt()
    } else {
        0.0
    };
    let mut out: Vec<f64> = x
        .iter()
        .zip(eps)
        .map(|(xv, e)| inv_sqrt_keep * (xv - coef * e))
        .collect();
    if let (Some(xi), true) = (xi, sigma > 0.0) {
        for (o, z) in out.iter_mut().zip(xi) {
            *o += sigma * z;
        }
    }
    out
}

/// Probability-flow Euler from log-SNR `a` to `a_next` in the scaled variable
/// `x / sqrt(sigmoid(a))` against `sigma = exp(-a / 2)`.
pub(crate) fn flow_euler_step(a: LogSnr, a_next: LogSnr, x: &[f64], eps: &[f64]) -> Vec<f64> {
    let (s, s_next) = (sigma_edm(a), sigma_edm(a_next));
    let (inv, scale_next) = (1.0 / a.signal_scale(), a_next.signal_scale());
    x.iter()
        .zip(eps)
        .map(|(xv, e)| scale_next * (xv * inv + (s_next - s) * e))
        .collect()
}

/// `exp(-alpha / 2)`.
pub fn sigma_edm(a: LogSnr) -> f64 {
    (-0.5 * a.value()).exp()
}
