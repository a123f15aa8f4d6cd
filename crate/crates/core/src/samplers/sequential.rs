//! Step-by-step samplers: ancestral DDPM, probability-flow Euler/Heun, and a
//! churn variant that re-injects noise before each deterministic step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ddpm_step, flow_euler_step, initial_noise, sigma_edm, step_noise, SamplerError, SamplerReport};
use crate::denoiser::Denoiser;
use crate::math::{LogSnr, NoiseSchedule};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stepper {
    Euler,
    #[default]
    Heun,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub dim: usize,
    /// Row-major `n x dim`.
    pub samples: Vec<f64>,
    /// `states[i]` is the batch after `i` steps (index 0 is the noise).
    pub trajectory: Option<Vec<Vec<f64>>>,
    pub report: SamplerReport,
}

impl SampleOutput {
    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn ddpm_ancestral_sample(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
    keep_trajectory: bool,
) -> SampleOutput {
    let d = model.data_dim();
    ddpm_ancestral_from(model, schedule, initial_noise(seed, n, d), seed, keep_trajectory)
}

/// Ancestral sampling from the given `x_T`; step noise comes from `seed`.
pub fn ddpm_ancestral_from(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x_t: Vec<f64>,
    seed: u64,
    keep_trajectory: bool,
) -> SampleOutput {
    let start = Instant::now();
    let d = model.data_dim();
    let n = x_t.len() / d;
    let mut x = x_t;
    let mut traj = keep_trajectory.then(|| vec![x.clone()]);
    for t in (1..=schedule.steps()).rev() {
        let a = schedule.alpha(t);
        let eps = model.predict_batch(&x, &vec![a; n]);
        let xi = (t > 1).then(|| step_noise(seed, t, n, d));
        x = ddpm_step(schedule, t, &x, &eps, xi.as_deref());
        if let Some(tr) = traj.as_mut() {
            tr.push(x.clone());
        }
    }
    SampleOutput {
        dim: d,
        samples: x,
        trajectory: traj,
        report: SamplerReport {
            sampler: "ddpm".into(),
            nfe: schedule.steps() as u64,
            wall_ms: elapsed_ms(start),
            ..SamplerReport::default()
        },
    }
}

pub fn probability_flow_sample(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    n: usize,
    stepper: Stepper,
    seed: u64,
) -> SampleOutput {
    let d = model.data_dim();
    probability_flow_from(model, schedule, initial_noise(seed, n, d), stepper)
}

/// One deterministic step from log-SNR `a` (state `x`) to `a_next`; Heun adds
/// a corrector evaluation unless `a_next` is the data end of the schedule.
fn flow_step(
    model: &dyn Denoiser,
    a: LogSnr,
    a_next: LogSnr,
    x: &[f64],
    stepper: Stepper,
    last: bool,
    nfe: &mut u64,
) -> Vec<f64> {
    let n = x.len() / model.data_dim();
    let eps = model.predict_batch(x, &vec![a; n]);
    *nfe += 1;
    let euler = flow_euler_step(a, a_next, x, &eps);
    if stepper == Stepper::Euler || last {
        return euler;
    }
    let eps2 = model.predict_batch(&euler, &vec![a_next; n]);
    *nfe += 1;
    let avg: Vec<f64> = eps.iter().zip(&eps2).map(|(p, q)| 0.5 * (p + q)).collect();
    flow_euler_step(a, a_next, x, &avg)
}

pub fn probability_flow_from(model: &dyn Denoiser, schedule: &NoiseSchedule, x_t: Vec<f64>, stepper: Stepper) -> SampleOutput {
    let start = Instant::now();
    let d = model.data_dim();
    let mut x = x_t;
    let mut nfe = 0;
    for t in (1..=schedule.steps()).rev() {
        x = flow_step(model, schedule.alpha(t), schedule.alpha(t - 1), &x, stepper, t == 1, &mut nfe);
    }
    SampleOutput {
        dim: d,
        samples: x,
        trajectory: None,
        report: SamplerReport {
            sampler: format!("flow-{}", if stepper == Stepper::Heun { "heun" } else { "euler" }),
            nfe,
            wall_ms: elapsed_ms(start),
            ..SamplerReport::default()
        },
    }
}

/// Churn settings. Steps with `t_min <= t <= t_max` first raise the noise
/// level by a factor `1 + gamma` in `sigma = exp(-alpha / 2)`, i.e. lower the
/// log-SNR by `2 ln(1 + gamma)`, with `gamma = min(s_churn / T, sqrt 2 - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StochasticSamplerConfig {
    pub s_churn: f64,
    pub s_noise: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub stepper: Stepper,
}

impl Default for StochasticSamplerConfig {
    fn default() -> Self {
        Self {
            s_churn: 0.0,
            s_noise: 1.0,
            t_min: 1,
            t_max: usize::MAX,
            stepper: Stepper::Heun,
        }
    }
}

impl StochasticSamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.s_churn >= 0.0 && self.s_churn.is_finite()) {
            return Err(SamplerError::Config(format!("s_churn must be >= 0, got {}", self.s_churn)));
        }
        if !(0.9..=1.1).contains(&self.s_noise) {
            return Err(SamplerError::Config(format!("s_noise must lie in [0.9, 1.1], got {}", self.s_noise)));
        }
        if self.t_min > self.t_max {
            return Err(SamplerError::Config("t_min > t_max".into()));
        }
        Ok(())
    }
}

pub fn stochastic_churn_sample(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &StochasticSamplerConfig,
    n: usize,
    seed: u64,
) -> Result<SampleOutput, SamplerError> {
    cfg.validate()?;
    let start = Instant::now();
    let d = model.data_dim();
    let steps = schedule.steps();
    let gamma = (cfg.s_churn / steps as f64).min(2f64.sqrt() - 1.0);
    let mut x = initial_noise(seed, n, d);
    let mut nfe = 0;
    for t in (1..=steps).rev() {
        let mut a = schedule.alpha(t);
        if gamma > 0.0 && (cfg.t_min..=cfg.t_max).contains(&t) {
            let a_hat = LogSnr::clamped(a.value() - 2.0 * (1.0 + gamma).ln());
            let (s, s_hat) = (sigma_edm(a), sigma_edm(a_hat));
            let add = (s_hat * s_hat - s * s).max(0.0).sqrt() * cfg.s_noise;
            let mut r = rng::stream(seed, &[tag::SAMPLER, 2, t as u64]);
            let xi = rng::normal_vec(&mut r, n * d);
            let (inv, scale_hat) = (1.0 / a.signal_scale(), a_hat.signal_scale());
            for (v, z) in x.iter_mut().zip(&xi) {
                *v = scale_hat * (*v * inv + add * z);
            }
            a = a_hat;
        }
        x = flow_step(model, a, schedule.alpha(t - 1), &x, cfg.stepper, t == 1, &mut nfe);
    }
    Ok(SampleOutput {
        dim: d,
        samples: x,
        trajectory: None,
        report: SamplerReport {
            sampler: "churn".into(),
            nfe,
            wall_ms: elapsed_ms(start),
            ..SamplerReport::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ZeroDenoiser;
    use crate::math::{ddpm_schedule, default_ddpm_schedule};
    use crate::oracle::{AnalyticDenoiser, GaussianMixtureSpec};

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    fn std_normal_cdf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 is too coarse here; use erfc via series-free identity
        0.5 * libm_erfc(-x / std::f64::consts::SQRT_2)
    }

    /// Complementary error function (Numerical Recipes `erfcc`, rel. err < 1.2e-7).
    fn libm_erfc(x: f64) -> f64 {
        let z = x.abs();
        let t = 1.0 / (1.0 + 0.5 * z);
        let r = t * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07 + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
        if x >= 0.0 {
            r
        } else {
            2.0 - r
        }
    }

    #[test]
    fn ddpm_on_gaussian_oracle_stays_gaussian() {
        let oracle = AnalyticDenoiser::new(GaussianMixtureSpec::standard_normal(1));
        let s = default_ddpm_schedule();
        let out = ddpm_ancestral_sample(&oracle, &s, 10_000, 3, false);
        let (m, v) = mean_var(&out.samples);
        let n = 10_000f64;
        assert!(m.abs() < 3.0 / n.sqrt(), "{m}");
        assert!((v - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "{v}");
        assert_eq!(out.report.nfe, 1000);
    }

    #[test]
    fn single_step_with_zero_model() {
        let s = ddpm_schedule(1, 0.3, 0.3).unwrap();
        let z = ZeroDenoiser { dim: 2 };
        let out = ddpm_ancestral_sample(&z, &s, 3, 1, true);
        let x_t = initial_noise(1, 3, 2);
        for (o, x) in out.samples.iter().zip(&x_t) {
            assert!((o - x / 0.7f64.sqrt()).abs() < 1e-15);
        }
        assert_eq!(out.trajectory.unwrap().len(), 2);
        let again = ddpm_ancestral_sample(&z, &s, 3, 1, false);
        assert_eq!(again.samples, out.samples);
    }

    #[test]
    fn flow_pushes_gaussian_quantiles_to_gaussian() {
        let oracle = AnalyticDenoiser::new(GaussianMixtureSpec::standard_normal(1));
        let s = default_ddpm_schedule();
        let n = 10_000;
        // quantiles of N(0,1) by bisection on the cdf
        let quantile = |p: f64| {
            let (mut lo, mut hi) = (-10.0, 10.0);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if std_normal_cdf(mid) < p {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let grid: Vec<f64> = (0..n).map(|i| quantile((i as f64 + 0.5) / n as f64)).collect();
        let out = probability_flow_from(&oracle, &s, grid, Stepper::Euler);
        let mut xs = out.samples.clone();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = std_normal_cdf(x);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "{ks}");
        assert_eq!(out.report.nfe, 1000);
    }

    #[test]
    fn heun_self_convergence_and_nfe() {
        let oracle = AnalyticDenoiser::new(GaussianMixtureSpec::two_mode_1d());
        let coarse = ddpm_schedule(200, 1e-4 * 5.0, 0.02 * 5.0).unwrap();
        let fine = ddpm_schedule(2000, 1e-4 / 2.0, 0.02 / 2.0).unwrap();
        let x_t = initial_noise(8, 64, 1);
        let a = probability_flow_from(&oracle, &coarse, x_t.clone(), Stepper::Heun);
        let b = probability_flow_from(&oracle, &fine, x_t, Stepper::Heun);
        assert_eq!(a.report.nfe, 2 * 200 - 1);
        assert_eq!(b.report.nfe, 2 * 2000 - 1);
        let worst = a.samples.iter().zip(&b.samples).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-2, "{worst}");
        assert!(probability_flow_sample(&oracle, &coarse, 0, Stepper::Heun, 1).is_empty());
    }

    #[test]
    fn churn_zero_is_flow_and_guard_rejects() {
        let oracle = AnalyticDenoiser::new(GaussianMixtureSpec::two_mode_1d());
        let s = ddpm_schedule(100, 1e-3, 0.2).unwrap();
        let cfg = StochasticSamplerConfig::default();
        let c = stochastic_churn_sample(&oracle, &s, &cfg, 50, 4).unwrap();
        let f = probability_flow_sample(&oracle, &s, 50, Stepper::Heun, 4);
        assert_eq!(c.samples, f.samples);
        let bad = StochasticSamplerConfig { s_noise: 1.2, ..cfg };
        assert!(stochastic_churn_sample(&oracle, &s, &bad, 5, 4).is_err());
        let churn = StochasticSamplerConfig { s_churn: 20.0, s_noise: 1.007, ..cfg };
        let c2 = stochastic_churn_sample(&oracle, &s, &churn, 50, 4).unwrap();
        assert_ne!(c2.samples, f.samples);
        assert!(c2.samples.iter().all(|v| v.is_finite()));
    }
}
