//! Log-SNR parameterized variance-preserving noise channel.
//!
//! The channel mixes data `x` with unit Gaussian noise `eps` at log
//! signal-to-noise ratio `alpha`:
//!
//! ```text
//! x_alpha = sqrt(sigmoid(alpha)) * x + sqrt(sigmoid(-alpha)) * eps
//! ```
//!
//! Everything else in the crate (schedules, oracles, losses, samplers) is
//! expressed through [`LogSnr`] and the helpers here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper clamp for log-SNR. `sigmoid(36)` is within one ulp of 1.
pub const ALPHA_MAX: f64 = 36.0;
/// Lower clamp for log-SNR.
pub const ALPHA_MIN: f64 = -36.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("log-SNR must not be NaN")]
    NanLogSnr,
    #[error("noise scale must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Logistic sigmoid, evaluated without overflow for either sign.
#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(v))` without cancellation.
#[inline]
pub fn log_sigmoid(v: f64) -> f64 {
    -softplus(-v)
}

/// `log(1 + exp(v))` in the overflow-safe form `max(v, 0) + log1p(exp(-|v|))`.
#[inline]
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Inverse sigmoid.
#[inline]
pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Inverse sigmoid from `log p`, stable when `p` is close to 1.
#[inline]
pub fn logit_from_log(log_p: f64) -> f64 {
    log_p - (-log_p.exp_m1()).ln()
}

/// Log signal-to-noise ratio of the noise channel, always finite and clamped
/// to `[ALPHA_MIN, ALPHA_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct LogSnr(f64);

impl LogSnr {
    pub const MAX: LogSnr = LogSnr(ALPHA_MAX);
    pub const MIN: LogSnr = LogSnr(ALPHA_MIN);
    pub const ZERO: LogSnr = LogSnr(0.0);

    /// Clamps `alpha` into the supported range. Infinities map to the clamps.
    pub fn new(alpha: f64) -> Result<Self, MathError> {
        if alpha.is_nan() {
            return Err(MathError::NanLogSnr);
        }
        Ok(LogSnr(alpha.clamp(ALPHA_MIN, ALPHA_MAX)))
    }

    /// Like [`LogSnr::new`] for values known not to be NaN.
    ///
    /// # Panics
    /// On NaN input.
    #[inline]
    pub fn clamped(alpha: f64) -> Self {
        Self::new(alpha).expect("log-SNR is NaN")
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// `sigmoid(alpha)`: variance kept from the signal.
    #[inline]
    pub fn signal_var(self) -> f64 {
        sigmoid(self.0)
    }

    /// `sigmoid(-alpha)`: variance of the injected noise.
    #[inline]
    pub fn noise_var(self) -> f64 {
        sigmoid(-self.0)
    }

    #[inline]
    pub fn signal_scale(self) -> f64 {
        self.signal_var().sqrt()
    }

    #[inline]
    pub fn noise_scale(self) -> f64 {
        self.noise_var().sqrt()
    }

    /// True at the upper clamp, which stands for the noise-free limit.
    #[inline]
    pub fn is_clean_limit(self) -> bool {
        self.0 >= ALPHA_MAX
    }
}

impl TryFrom<f64> for LogSnr {
    type Error = MathError;
    fn try_from(v: f64) -> Result<Self, MathError> {
        LogSnr::new(v)
    }
}

impl From<LogSnr> for f64 {
    fn from(a: LogSnr) -> f64 {
        a.0
    }
}

/// Noisy sample `sqrt(sigmoid(alpha)) x + sqrt(sigmoid(-alpha)) eps`.
pub fn mix(x: &[f64], eps: &[f64], alpha: LogSnr) -> Result<Vec<f64>, MathError> {
    if x.len() != eps.len() {
        return Err(MathError::DimensionMismatch {
            expected: x.len(),
            got: eps.len(),
        });
    }
    let mut out = vec![0.0; x.len()];
    mix_into(x, eps, alpha, &mut out);
    Ok(out)
}

/// Allocation-free [`mix`]; slices must have equal length.
#[inline]
pub fn mix_into(x: &[f64], eps: &[f64], alpha: LogSnr, out: &mut [f64]) {
    let (s, n) = (alpha.signal_scale(), alpha.noise_scale());
    for ((o, &xi), &ei) in out.iter_mut().zip(x).zip(eps) {
        *o = s * xi + n * ei;
    }
}

/// Log-SNR `beta` of two channels applied in sequence, and the rescaling `b`
/// that maps the data denoiser at `beta` onto the denoiser of the noisier
/// distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureCoeffs {
    pub beta: LogSnr,
    pub b: f64,
}

/// `sigmoid(beta) = sigmoid(alpha) * sigmoid(zeta)` and
/// `b = sqrt(sigmoid(-alpha) / sigmoid(-beta))`, evaluated in the log domain.
///
/// A level at the upper clamp is the noise-free limit: composing with it
/// returns the other level unchanged and `b = 1` exactly.
pub fn compose_noise_levels(alpha: LogSnr, zeta: LogSnr) -> MixtureCoeffs {
    if zeta.is_clean_limit() {
        return MixtureCoeffs { beta: alpha, b: 1.0 };
    }
    if alpha.is_clean_limit() {
        // sigmoid(-alpha) vanishes in the limit, so b does too.
        return MixtureCoeffs {
            beta: zeta,
            b: (0.5 * (log_sigmoid(-alpha.0) - log_sigmoid(-zeta.0))).exp(),
        };
    }
    let log_sig_beta = log_sigmoid(alpha.0) + log_sigmoid(zeta.0);
    let beta = LogSnr::clamped(logit_from_log(log_sig_beta));
    let log_sig_neg_beta = (-log_sig_beta.exp_m1()).ln();
    let b = (0.5 * (log_sigmoid(-alpha.0) - log_sig_neg_beta)).exp();
    MixtureCoeffs { beta, b }
}

/// `sigma = exp(-alpha / 2)`: noise scale of the `x + sigma eps` convention.
pub fn sigma_from_alpha(alpha: LogSnr) -> f64 {
    (-0.5 * alpha.value()).exp()
}

/// `alpha = -2 ln(sigma)`.
pub fn alpha_from_sigma(sigma: f64) -> Result<LogSnr, MathError> {
    if !(sigma > 0.0) {
        return Err(MathError::NonPositiveSigma(sigma));
    }
    LogSnr::new(-2.0 * sigma.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    DdpmLinearBeta,
    UniformLogsnr,
    EdmSigma,
}

/// Discrete map from timestep `t in 0..=T` to log-SNR.
///
/// Index 0 is the data end and always sits at [`ALPHA_MAX`]; index `T` is the
/// pure-noise end. Log-SNR strictly decreases with `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alphas: Vec<LogSnr>,
}

impl NoiseSchedule {
    fn from_alphas(kind: ScheduleKind, tail: impl IntoIterator<Item = f64>) -> Result<Self, MathError> {
        let mut alphas = vec![LogSnr::MAX];
        for (t, a) in tail.into_iter().enumerate() {
            if a < ALPHA_MIN {
                return Err(MathError::InvalidSchedule(format!(
                    "log-SNR {a} at t={} is below the representable minimum {ALPHA_MIN}",
                    t + 1
                )));
            }
            alphas.push(LogSnr::new(a)?);
        }
        if alphas.len() < 2 {
            return Err(MathError::InvalidSchedule("need at least one step".into()));
        }
        if let Some(w) = alphas.windows(2).position(|w| w[1] >= w[0]) {
            return Err(MathError::InvalidSchedule(format!(
                "log-SNR not strictly decreasing at t={}",
                w + 1
            )));
        }
        Ok(Self { kind, alphas })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[LogSnr] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> LogSnr {
        self.alphas[t]
    }

    /// Cumulative signal fraction `sigmoid(alpha_t)` (the DDPM `alpha_bar_t`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas[t].signal_var()
    }

    /// Per-step variance `beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}` for `t >= 1`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "beta index {t} out of range");
        let log_ratio = log_sigmoid(self.alphas[t].value()) - log_sigmoid(self.alphas[t - 1].value());
        -log_ratio.exp_m1()
    }

    /// Continuous timestep for an arbitrary log-SNR, by piecewise-linear
    /// interpolation of the schedule; clamped to `[0, T]`.
    pub fn timestep_for(&self, alpha: LogSnr) -> f64 {
        let a = alpha.value();
        let xs = &self.alphas;
        if a >= xs[0].value() {
            return 0.0;
        }
        let last = xs.len() - 1;
        if a <= xs[last].value() {
            return last as f64;
        }
        // first index with alpha <= a (alphas are decreasing)
        let hi = xs.partition_point(|v| v.value() > a);
        let (a0, a1) = (xs[hi - 1].value(), xs[hi].value());
        (hi - 1) as f64 + (a0 - a) / (a0 - a1)
    }
}

/// DDPM schedule with `beta_t` linear from `beta_start` to `beta_end`.
pub fn ddpm_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, MathError> {
    if steps < 1 {
        return Err(MathError::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(MathError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let denom = (steps.max(2) - 1) as f64;
    // Neumaier-compensated running sum of log(1 - beta_t).
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    let mut tail = Vec::with_capacity(steps);
    for t in 1..=steps {
        let beta = beta_start + (beta_end - beta_start) * (t - 1) as f64 / denom;
        let term = (-beta).ln_1p();
        let next = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - next) + term;
        } else {
            comp += (term - next) + sum;
        }
        sum = next;
        tail.push(logit_from_log(sum + comp));
    }
    NoiseSchedule::from_alphas(ScheduleKind::DdpmLinearBeta, tail)
}

/// Log-SNR linear in `t` from `alpha_hi` (t = 1) to `alpha_lo` (t = T).
pub fn uniform_logsnr_schedule(steps: usize, alpha_hi: f64, alpha_lo: f64) -> Result<NoiseSchedule, MathError> {
    if steps < 1 || !(alpha_hi > alpha_lo) {
        return Err(MathError::InvalidSchedule(format!(
            "need T >= 1 and alpha_hi > alpha_lo, got T={steps}, {alpha_hi}, {alpha_lo}"
        )));
    }
    let denom = (steps.max(2) - 1) as f64;
    NoiseSchedule::from_alphas(
        ScheduleKind::UniformLogsnr,
        (1..=steps).map(|t| alpha_hi + (alpha_lo - alpha_hi) * (t - 1) as f64 / denom),
    )
}

/// Karras-style noise levels, `sigma_t` spaced in `sigma^(1/rho)` from
/// `sigma_min` (t = 1) to `sigma_max` (t = T), mapped to log-SNR.
pub fn edm_schedule(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<NoiseSchedule, MathError> {
    if steps < 1 || !(sigma_min > 0.0 && sigma_min < sigma_max && rho > 0.0) {
        return Err(MathError::InvalidSchedule(format!(
            "need T >= 1, 0 < sigma_min < sigma_max, rho > 0; got {steps}, {sigma_min}, {sigma_max}, {rho}"
        )));
    }
    let denom = (steps.max(2) - 1) as f64;
    let (lo, hi) = (sigma_min.powf(1.0 / rho), sigma_max.powf(1.0 / rho));
    let tail: Result<Vec<f64>, MathError> = (1..=steps)
        .map(|t| {
            let s = (lo + (hi - lo) * (t - 1) as f64 / denom).powf(rho);
            alpha_from_sigma(s).map(f64::from)
        })
        .collect();
    NoiseSchedule::from_alphas(ScheduleKind::EdmSigma, tail?)
}

/// The DDPM baseline default: `T = 1000`, `beta` linear from 1e-4 to 0.02.
pub fn default_ddpm_schedule() -> NoiseSchedule {
    ddpm_schedule(1000, 1e-4, 0.02).expect("default schedule is valid")
}

/// Parameters that rebuild a [`NoiseSchedule`]; what configs and checkpoints store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleSpec {
    DdpmLinearBeta { steps: usize, beta_start: f64, beta_end: f64 },
    UniformLogsnr { steps: usize, alpha_hi: f64, alpha_lo: f64 },
    EdmSigma { steps: usize, sigma_min: f64, sigma_max: f64, rho: f64 },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::DdpmLinearBeta {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, MathError> {
        match *self {
            ScheduleSpec::DdpmLinearBeta { steps, beta_start, beta_end } => ddpm_schedule(steps, beta_start, beta_end),
            ScheduleSpec::UniformLogsnr { steps, alpha_hi, alpha_lo } => uniform_logsnr_schedule(steps, alpha_hi, alpha_lo),
            ScheduleSpec::EdmSigma { steps, sigma_min, sigma_max, rho } => edm_schedule(steps, sigma_min, sigma_max, rho),
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            ScheduleSpec::DdpmLinearBeta { steps, .. }
            | ScheduleSpec::UniformLogsnr { steps, .. }
            | ScheduleSpec::EdmSigma { steps, .. } => steps,
        }
    }
}
