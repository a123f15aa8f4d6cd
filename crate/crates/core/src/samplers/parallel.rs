//! Picard iteration over a whole discretized trajectory.
//!
//! With `h = 1/T` and drift `s_i`, iterate `k + 1` is
//! `x_{i+1} = x_i^{k+1} + h s_i(x_i^k)` starting from the fixed `x_0`. All
//! `T` drift evaluations of one iteration are independent and go to the model
//! as one batch; the path is then rebuilt by accumulation in step order, so
//! after `k` iterations the first `k` states equal the sequential rollout
//! bit for bit.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ddpm_step, flow_euler_step, initial_noise, step_noise, SamplerError, SamplerReport, StepKind};
use crate::denoiser::Denoiser;
use crate::eval::mmd_unbiased;
use crate::math::{LogSnr, NoiseSchedule};
use crate::rng::{self, tag};

/// Rows sent to the model per batched call.
const MAX_BATCH_ROWS: usize = 1 << 16;

/// A discretized drift over `steps()` steps acting on flat states of length
/// `state_len()`. Implementations return `h * s_i(x)`, the increment of step
/// `i`, so that accumulation is a plain sum.
pub trait DriftField: Sync {
    fn state_len(&self) -> usize;
    fn steps(&self) -> usize;
    /// Increments for steps `first, first + 1, ...` at `states[0], states[1], ...`.
    fn increments(&self, first: usize, states: &[Vec<f64>]) -> Vec<Vec<f64>>;
}

/// Drift built from a step map `x_i -> x_{i+1}` of a reverse-time sampler:
/// `h s_i(x) = step_i(x) - x`. Step `i` moves from timestep `T - i` to
/// `T - i - 1`. DDPM noise is drawn once up front, so the drift is
/// deterministic.
pub struct ModelDrift<'a> {
    model: &'a dyn Denoiser,
    schedule: NoiseSchedule,
    kind: StepKind,
    n: usize,
    noise: Vec<Vec<f64>>,
}

impl<'a> ModelDrift<'a> {
    pub fn new(model: &'a dyn Denoiser, schedule: &NoiseSchedule, kind: StepKind, n: usize, seed: u64) -> Self {
        let d = model.data_dim();
        let steps = schedule.steps();
        let noise = match kind {
            StepKind::Ddpm => (0..steps)
                .map(|i| {
                    let t = steps - i;
                    if t > 1 {
                        step_noise(seed, t, n, d)
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
            StepKind::FlowEuler => Vec::new(),
        };
        Self {
            model,
            schedule: schedule.clone(),
            kind,
            n,
            noise,
        }
    }

    fn apply(&self, i: usize, x: &[f64], eps: &[f64]) -> Vec<f64> {
        let t = self.schedule.steps() - i;
        let next = match self.kind {
            StepKind::Ddpm => {
                let xi = &self.noise[i];
                ddpm_step(&self.schedule, t, x, eps, (!xi.is_empty()).then_some(xi.as_slice()))
            }
            StepKind::FlowEuler => flow_euler_step(self.schedule.alpha(t), self.schedule.alpha(t - 1), x, eps),
        };
        next.iter().zip(x).map(|(a, b)| a - b).collect()
    }
}

impl DriftField for ModelDrift<'_> {
    fn state_len(&self) -> usize {
        self.n * self.model.data_dim()
    }

    fn steps(&self) -> usize {
        self.schedule.steps()
    }

    fn increments(&self, first: usize, states: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let steps_per_call = (MAX_BATCH_ROWS / self.n.max(1)).max(1);
        let steps = self.schedule.steps();
        let mut out = Vec::with_capacity(states.len());
        for (c, chunk) in states.chunks(steps_per_call).enumerate() {
            let base = first + c * steps_per_call;
            let xs: Vec<f64> = chunk.iter().flatten().copied().collect();
            let alphas: Vec<LogSnr> = (0..chunk.len())
                .flat_map(|j| std::iter::repeat_n(self.schedule.alpha(steps - base - j), self.n))
                .collect();
            let eps = self.model.predict_batch(&xs, &alphas);
            let len = self.state_len();
            for (j, x) in chunk.iter().enumerate() {
                out.push(self.apply(base + j, x, &eps[j * len..(j + 1) * len]));
            }
        }
        out
    }
}

/// `states[i]` is the state after `i` steps; `states[0]` is the noise end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Per-sample dimension; each state holds `len / dim` samples.
    pub dim: usize,
    pub states: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn last(&self) -> &[f64] {
        &self.states[self.states.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    /// Largest over steps of the per-dimension mean squared change, averaged
    /// over samples.
    #[default]
    MaxOverSteps,
    /// Largest over steps and samples of the per-dimension mean squared change.
    PerStepPointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    /// Every state starts equal to `states[0]`.
    #[default]
    Constant,
    /// Every state after the first is an independent standard normal draw.
    IidGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub tol: f64,
    pub max_iters: usize,
    /// Sliding-window length; `None` updates the whole path every iteration.
    pub window: Option<usize>,
    pub norm_kind: NormKind,
    pub init: InitPolicy,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 1000,
            window: None,
            norm_kind: NormKind::MaxOverSteps,
            init: InitPolicy::Constant,
        }
    }
}

impl PicardConfig {
    pub fn validate(&self, steps: usize) -> Result<(), SamplerError> {
        if !(self.tol > 0.0) {
            return Err(SamplerError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(SamplerError::Config("max_iters must be at least 1".into()));
        }
        if let Some(w) = self.window {
            if w == 0 || w > steps {
                return Err(SamplerError::Config(format!("window must lie in 1..={steps}, got {w}")));
            }
        }
        Ok(())
    }
}

fn step_norm(old: &[f64], new: &[f64], dim: usize, kind: NormKind) -> f64 {
    match kind {
        NormKind::MaxOverSteps => {
            old.iter().zip(new).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / old.len().max(1) as f64
        }
        NormKind::PerStepPointwise => old
            .chunks_exact(dim)
            .zip(new.chunks_exact(dim))
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / dim as f64)
            .fold(0.0, f64::max),
    }
}

/// One Picard update of steps `lo..hi`: evaluates the drift at
/// `states[lo..hi]` as one batch, then rebuilds `states[lo + 1..=hi]` from
/// the unchanged `states[lo]`. Returns the change norm of each rebuilt state.
pub fn picard_iterate(
    drift: &dyn DriftField,
    traj: &mut Trajectory,
    lo: usize,
    hi: usize,
    norm: NormKind,
) -> Result<Vec<f64>, SamplerError> {
    let incs = drift.increments(lo, &traj.states[lo..hi]);
    for (j, inc) in incs.iter().enumerate() {
        if inc.iter().any(|v| !v.is_finite()) {
            return Err(SamplerError::NonFiniteDrift { step: lo + j });
        }
    }
    let mut norms = Vec::with_capacity(hi - lo);
    for (j, inc) in incs.iter().enumerate() {
        let i = lo + j;
        let next: Vec<f64> = traj.states[i].iter().zip(inc).map(|(x, d)| x + d).collect();
        norms.push(step_norm(&traj.states[i + 1], &next, traj.dim, norm));
        traj.states[i + 1] = next;
    }
    traj.iteration += 1;
    Ok(norms)
}

/// Sequential rollout of the same drift from `x0`.
pub fn euler_rollout(drift: &dyn DriftField, x0: Vec<f64>, dim: usize) -> Result<Trajectory, SamplerError> {
    let mut states = Vec::with_capacity(drift.steps() + 1);
    states.push(x0);
    for i in 0..drift.steps() {
        let inc = drift.increments(i, std::slice::from_ref(&states[i])).pop().unwrap_or_default();
        if inc.iter().any(|v| !v.is_finite()) {
            return Err(SamplerError::NonFiniteDrift { step: i });
        }
        let next = states[i].iter().zip(&inc).map(|(x, d)| x + d).collect();
        states.push(next);
    }
    Ok(Trajectory { dim, states, iteration: 0 })
}

/// Task-level stop: MMD of the current end state against a reference set,
/// evaluated after every iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MmdMonitor {
    pub reference: Vec<f64>,
    pub bandwidth: f64,
    pub threshold: Option<f64>,
    /// Stop as soon as the threshold is reached.
    pub stop_at_threshold: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelOutput {
    pub dim: usize,
    pub samples: Vec<f64>,
    pub trajectory: Trajectory,
    pub report: SamplerReport,
}

fn init_trajectory(x0: Vec<f64>, dim: usize, steps: usize, policy: InitPolicy, seed: u64) -> Trajectory {
    let len = x0.len();
    let mut states = vec![x0];
    for i in 1..=steps {
        states.push(match policy {
            InitPolicy::Constant => states[0].clone(),
            InitPolicy::IidGaussian => rng::normal_vec(&mut rng::stream(seed, &[tag::SAMPLER, 3, i as u64]), len),
        });
    }
    Trajectory { dim, states, iteration: 0 }
}

/// Runs Picard iterations on `traj` until convergence or `max_iters`.
///
/// Without a window every iteration updates all steps. With window `w`, the
/// active block `[start, start + w)` is updated; after each update the block
/// start moves past the freshly exact state, and, while the block has not
/// reached the last step, past every following state whose change fell below
/// `tol`. Newly covered states start at the value of the old block end.
pub fn picard_solve(
    drift: &dyn DriftField,
    traj: &mut Trajectory,
    cfg: &PicardConfig,
    monitor: Option<&MmdMonitor>,
) -> Result<SamplerReport, SamplerError> {
    let start_time = Instant::now();
    let steps = drift.steps();
    cfg.validate(steps)?;
    if traj.states.len() != steps + 1 || traj.states.iter().any(|s| s.len() != drift.state_len()) {
        return Err(SamplerError::DimensionMismatch {
            expected: steps + 1,
            got: traj.states.len(),
        });
    }
    let w = cfg.window.unwrap_or(steps);
    let (mut lo, mut hi) = (0, w.min(steps));
    let mut report = SamplerReport {
        sampler: if cfg.window.is_some() { "picard-window" } else { "picard" }.into(),
        mmd_trace: monitor.map(|_| Vec::new()),
        ..SamplerReport::default()
    };
    let (mut evals, mut peak, mut converged) = (0u64, 0usize, steps == 0);
    let mut k = 0;
    while !converged && k < cfg.max_iters {
        let norms = picard_iterate(drift, traj, lo, hi, cfg.norm_kind)?;
        k += 1;
        evals += (hi - lo) as u64;
        peak = peak.max(hi - lo);
        let worst = norms.iter().copied().fold(0.0, f64::max);
        report.trace.push(worst);
        if let Some(m) = monitor {
            let v = mmd_unbiased(traj.last(), &m.reference, traj.dim, m.bandwidth).unwrap_or(f64::NAN);
            report.mmd_trace.as_mut().expect("monitor trace").push(v);
            if m.threshold.is_some_and(|th| v <= th) && report.iterations_to_mmd_threshold.is_none() {
                report.iterations_to_mmd_threshold = Some(k);
                if m.stop_at_threshold {
                    converged = worst < cfg.tol;
                    break;
                }
            }
        }
        if cfg.window.is_none() {
            converged = worst < cfg.tol || k >= steps;
            continue;
        }
        let mut next_lo = lo + 1;
        if hi < steps {
            while next_lo < hi && norms[next_lo - lo] < cfg.tol {
                next_lo += 1;
            }
        }
        if next_lo >= steps || (hi == steps && worst < cfg.tol) {
            converged = true;
            continue;
        }
        let next_hi = (next_lo + w).min(steps);
        for i in hi + 1..=next_hi {
            traj.states[i] = traj.states[hi].clone();
        }
        (lo, hi) = (next_lo, next_hi);
    }
    report.picard_iterations = Some(k);
    report.converged = Some(converged);
    report.nfe = evals;
    report.peak_parallel_steps = Some(peak);
    report.wall_ms = start_time.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

/// Picard sampling of a model's reverse dynamics from `N(0, I)` noise drawn
/// with `seed`; DDPM step noise matches the sequential ancestral sampler.
pub fn parallel_sample(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    kind: StepKind,
    cfg: &PicardConfig,
    n: usize,
    seed: u64,
    monitor: Option<&MmdMonitor>,
) -> Result<ParallelOutput, SamplerError> {
    cfg.validate(schedule.steps())?;
    let d = model.data_dim();
    let drift = ModelDrift::new(model, schedule, kind, n, seed);
    let mut traj = init_trajectory(initial_noise(seed, n, d), d, schedule.steps(), cfg.init, seed);
    let report = picard_solve(&drift, &mut traj, cfg, monitor)?;
    Ok(ParallelOutput {
        dim: d,
        samples: traj.last().to_vec(),
        trajectory: traj,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{ddpm_schedule, default_ddpm_schedule};
    use crate::oracle::{AnalyticDenoiser, GaussianMixtureSpec};
    use crate::samplers::ddpm_ancestral_from;

    struct FnDrift<F> {
        len: usize,
        steps: usize,
        f: F,
    }

    impl<F: Fn(usize, &[f64]) -> Vec<f64> + Sync> DriftField for FnDrift<F> {
        fn state_len(&self) -> usize {
            self.len
        }
        fn steps(&self) -> usize {
            self.steps
        }
        fn increments(&self, first: usize, states: &[Vec<f64>]) -> Vec<Vec<f64>> {
            states.iter().enumerate().map(|(j, x)| (self.f)(first + j, x)).collect()
        }
    }

    fn constant_traj(x0: Vec<f64>, steps: usize) -> Trajectory {
        init_trajectory(x0, 1, steps, InitPolicy::Constant, 0)
    }

    #[test]
    fn constant_drift_one_iteration() {
        let steps = 8;
        let drift = FnDrift { len: 1, steps, f: |_, _: &[f64]| vec![1.0 / 8.0] };
        let mut traj = constant_traj(vec![0.5], steps);
        picard_iterate(&drift, &mut traj, 0, steps, NormKind::MaxOverSteps).unwrap();
        for t in 0..=steps {
            assert_eq!(traj.states[t][0], 0.5 + t as f64 / 8.0);
        }
        let norms = picard_iterate(&drift, &mut traj, 0, steps, NormKind::MaxOverSteps).unwrap();
        assert!(norms.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_drift_by_hand() {
        let drift = FnDrift { len: 1, steps: 4, f: |_, x: &[f64]| vec![-x[0] / 4.0] };
        let mut traj = constant_traj(vec![1.0], 4);
        picard_iterate(&drift, &mut traj, 0, 4, NormKind::MaxOverSteps).unwrap();
        let first: Vec<f64> = traj.states.iter().map(|s| s[0]).collect();
        assert_eq!(first, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        picard_iterate(&drift, &mut traj, 0, 4, NormKind::MaxOverSteps).unwrap();
        let second: Vec<f64> = traj.states.iter().map(|s| s[0]).collect();
        assert_eq!(second, vec![1.0, 0.75, 0.5625, 0.4375, 0.375]);
    }

    #[test]
    fn non_finite_drift_reports_step() {
        let drift = FnDrift {
            len: 1,
            steps: 5,
            f: |i, _: &[f64]| vec![if i == 3 { f64::NAN } else { 0.0 }],
        };
        let mut traj = constant_traj(vec![0.0], 5);
        assert_eq!(
            picard_iterate(&drift, &mut traj, 0, 5, NormKind::MaxOverSteps),
            Err(SamplerError::NonFiniteDrift { step: 3 })
        );
    }

    fn oracle_setup() -> (AnalyticDenoiser, NoiseSchedule) {
        (AnalyticDenoiser::new(GaussianMixtureSpec::two_mode_1d()), ddpm_schedule(100, 1e-3, 0.2).unwrap())
    }

    #[test]
    fn prefix_exactness() {
        let (oracle, s) = oracle_setup();
        let n = 16;
        for kind in [StepKind::FlowEuler, StepKind::Ddpm] {
            let drift = ModelDrift::new(&oracle, &s, kind, n, 11);
            let x0 = initial_noise(11, n, 1);
            let reference = euler_rollout(&drift, x0.clone(), 1).unwrap();
            let mut traj = constant_traj(x0, 100);
            for k in 1..=32 {
                picard_iterate(&drift, &mut traj, 0, 100, NormKind::MaxOverSteps).unwrap();
                for i in 0..=k {
                    assert_eq!(traj.states[i], reference.states[i], "k={k} i={i}");
                }
            }
        }
    }

    #[test]
    fn rollout_matches_ancestral_sampler() {
        let (oracle, s) = oracle_setup();
        let drift = ModelDrift::new(&oracle, &s, StepKind::Ddpm, 8, 2);
        let x0 = initial_noise(2, 8, 1);
        let roll = euler_rollout(&drift, x0.clone(), 1).unwrap();
        let seq = ddpm_ancestral_from(&oracle, &s, x0, 2, false);
        for (a, b) in roll.last().iter().zip(&seq.samples) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_point_matches_rollout_and_nfe() {
        let oracle = AnalyticDenoiser::new(GaussianMixtureSpec::two_mode_1d());
        let s = default_ddpm_schedule();
        let cfg = PicardConfig { tol: 1e-6, ..PicardConfig::default() };
        let out = parallel_sample(&oracle, &s, StepKind::FlowEuler, &cfg, 32, 5, None).unwrap();
        let drift = ModelDrift::new(&oracle, &s, StepKind::FlowEuler, 32, 5);
        let roll = euler_rollout(&drift, initial_noise(5, 32, 1), 1).unwrap();
        let r = &out.report;
        let iters = r.picard_iterations.unwrap();
        assert!(r.converged.unwrap() && iters <= 1000);
        assert_eq!(r.nfe, 1000 * iters as u64);
        assert!(r.trace.iter().all(|v| v.is_finite()) && *r.trace.last().unwrap() < 1e-6);
        // tol bounds a squared change, so compare squared errors
        for (a, b) in out.samples.iter().zip(roll.last()) {
            assert!((a - b).powi(2) < 10.0 * cfg.tol, "{a} {b}");
        }
        let huge = PicardConfig { tol: 1e9, ..cfg };
        let one = parallel_sample(&oracle, &s, StepKind::FlowEuler, &huge, 4, 5, None).unwrap();
        assert_eq!(one.report.picard_iterations, Some(1));
    }

    #[test]
    fn full_window_equals_full_picard() {
        let (oracle, s) = oracle_setup();
        for kind in [StepKind::FlowEuler, StepKind::Ddpm] {
            let cfg = PicardConfig { tol: 1e-8, ..PicardConfig::default() };
            let full = parallel_sample(&oracle, &s, kind, &cfg, 16, 3, None).unwrap();
            let wcfg = PicardConfig { window: Some(100), ..cfg.clone() };
            let win = parallel_sample(&oracle, &s, kind, &wcfg, 16, 3, None).unwrap();
            assert_eq!(full.trajectory.states, win.trajectory.states);
            assert_eq!(full.report.picard_iterations, win.report.picard_iterations);
            assert_eq!(full.report.trace, win.report.trace);
        }
    }

    #[test]
    fn unit_window_is_sequential() {
        let (oracle, s) = oracle_setup();
        let cfg = PicardConfig {
            tol: 1e-8,
            window: Some(1),
            ..PicardConfig::default()
        };
        let out = parallel_sample(&oracle, &s, StepKind::Ddpm, &cfg, 16, 3, None).unwrap();
        let drift = ModelDrift::new(&oracle, &s, StepKind::Ddpm, 16, 3);
        let roll = euler_rollout(&drift, initial_noise(3, 16, 1), 1).unwrap();
        assert_eq!(out.trajectory.states, roll.states);
        assert_eq!(out.report.picard_iterations, Some(100));
        assert_eq!(out.report.nfe, 100);
        assert_eq!(out.report.peak_parallel_steps, Some(1));
    }

    #[test]
    fn window_converges_near_full() {
        let (oracle, s) = oracle_setup();
        let cfg = PicardConfig { tol: 1e-10, ..PicardConfig::default() };
        let full = parallel_sample(&oracle, &s, StepKind::FlowEuler, &cfg, 16, 3, None).unwrap();
        let wcfg = PicardConfig { window: Some(16), ..cfg };
        let win = parallel_sample(&oracle, &s, StepKind::FlowEuler, &wcfg, 16, 3, None).unwrap();
        assert!(win.report.converged.unwrap());
        assert_eq!(win.report.peak_parallel_steps, Some(16));
        for (a, b) in win.samples.iter().zip(&full.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn config_guards() {
        let (oracle, s) = oracle_setup();
        for cfg in [
            PicardConfig { tol: 0.0, ..PicardConfig::default() },
            PicardConfig { window: Some(101), ..PicardConfig::default() },
            PicardConfig { max_iters: 0, ..PicardConfig::default() },
        ] {
            assert!(matches!(
                parallel_sample(&oracle, &s, StepKind::Ddpm, &cfg, 2, 0, None),
                Err(SamplerError::Config(_))
            ));
        }
    }

    #[test]
    fn monitor_records_threshold() {
        let (oracle, s) = oracle_setup();
        let reference = ddpm_ancestral_from(&oracle, &s, initial_noise(99, 200, 1), 99, false).samples;
        let m = MmdMonitor {
            reference,
            bandwidth: 0.5,
            threshold: Some(0.05),
            stop_at_threshold: false,
        };
        let cfg = PicardConfig { tol: 1e-8, ..PicardConfig::default() };
        let out = parallel_sample(&oracle, &s, StepKind::Ddpm, &cfg, 200, 1, Some(&m)).unwrap();
        let trace = out.report.mmd_trace.unwrap();
        assert_eq!(trace.len(), out.report.picard_iterations.unwrap());
        let hit = out.report.iterations_to_mmd_threshold.unwrap();
        assert!(trace[hit - 1] <= 0.05 && trace[..hit - 1].iter().all(|&v| v > 0.05));
    }
}
