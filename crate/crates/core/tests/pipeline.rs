use cdl_core::datasets::sample_mixture;
use cdl_core::denoiser::Trainable;
use cdl_core::eval::mmd_unbiased;
use cdl_core::losses::{
    combined_training_step, estimate_llr_keyed, sample_batch, AlphaSampler, LlrEstimatorConfig, StepConfig,
    TrainingMode, ZetaSampler,
};
use cdl_core::math::{default_ddpm_schedule, LogSnr, NoiseSchedule};
use cdl_core::nn::{Adam, AdamConfig, Ema, MlpArch, MlpDenoiser};
use cdl_core::oracle::{AnalyticDenoiser, GaussianMixtureSpec};
use cdl_core::samplers::{ddpm_ancestral_sample, parallel_sample, PicardConfig, StepKind};

fn train(mode: TrainingMode, steps: u64, data: &[f64], schedule: &NoiseSchedule) -> (MlpDenoiser, Vec<f64>) {
    let mut arch = MlpArch::default_for(1);
    arch.hidden = vec![32, 32];
    let mut model = MlpDenoiser::new(arch, 3).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 3e-3, ..AdamConfig::default() }, model.num_params()).unwrap();
    let mut ema = Ema::new(0.99, model.params()).unwrap();
    let cfg = StepConfig {
        mode,
        alpha_sampler: AlphaSampler::Timesteps(schedule.clone()),
        llr: LlrEstimatorConfig::uniform(-12.0, 20.0, 16, 2, 3).unwrap(),
        zeta: ZetaSampler::default(),
        cdl_items: 4,
        seed: 3,
    };
    let mut mse = Vec::new();
    for step in 0..steps {
        let batch = sample_batch(data, 1, 64, 3, step);
        let s = combined_training_step(&mut model, &batch, &cfg, step, &mut opt, Some(&mut ema)).unwrap();
        mse.push(s.mse.unwrap());
    }
    (model.with_params(ema.shadow()).unwrap(), mse)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn training_reduces_loss_and_samples_the_modes() {
    let spec = GaussianMixtureSpec::symmetric_two_mode(2.0, 0.5);
    let data = sample_mixture(&spec, 2000, 1).points;
    let schedule = default_ddpm_schedule();
    let (model, mse) = train(TrainingMode::Joint { lambda: 1.0 }, 600, &data, &schedule);
    assert!(mean(&mse[500..]) < 0.8 * mean(&mse[..50]));

    let out = ddpm_ancestral_sample(&model, &schedule, 500, 9, false);
    let right = out.samples.iter().filter(|&&x| x > 0.0).count() as f64 / 500.0;
    assert!((right - 0.5).abs() < 0.15, "mode balance {right}");
    let near = out.samples.iter().filter(|x| (x.abs() - 2.0).abs() < 1.5).count();
    assert!(near > 400, "{near} of 500 samples near a mode");

    let reference = sample_mixture(&spec, 500, 2).points;
    let fresh = sample_mixture(&spec, 500, 3).points;
    let m_model = mmd_unbiased(&out.samples, &reference, 1, 0.5).unwrap();
    let m_noise = mmd_unbiased(&vec![0.0; 500], &reference, 1, 0.5).unwrap();
    let m_fresh = mmd_unbiased(&fresh, &reference, 1, 0.5).unwrap();
    assert!(m_model < 0.25 * m_noise, "{m_model} vs {m_noise}");
    assert!(m_fresh.abs() < m_model.max(0.01));
}

#[test]
fn parallel_and_sequential_sampling_agree_on_a_trained_model() {
    let spec = GaussianMixtureSpec::symmetric_two_mode(2.0, 0.5);
    let data = sample_mixture(&spec, 1000, 1).points;
    let schedule = default_ddpm_schedule();
    let (model, _) = train(TrainingMode::MseOnly, 200, &data, &schedule);
    let seq = ddpm_ancestral_sample(&model, &schedule, 64, 5, false);
    let par = parallel_sample(&model, &schedule, StepKind::Ddpm, &PicardConfig::default(), 64, 5, None).unwrap();
    assert_eq!(par.report.converged, Some(true));
    let worst = seq
        .samples
        .iter()
        .zip(&par.samples)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "{worst}");
}

#[test]
fn oracle_llr_separates_clean_from_noised_points() {
    let spec = GaussianMixtureSpec::symmetric_two_mode(2.0, 0.5);
    let oracle = AnalyticDenoiser::new(spec.clone());
    let cfg = LlrEstimatorConfig::uniform(-12.0, 24.0, 128, 16, 1).unwrap();
    let zeta = LogSnr::clamped(1.0);
    // a point on a mode is more likely clean; one between the modes is more likely noised
    let on = estimate_llr_keyed(&oracle, &[2.0], zeta, &cfg, &[0]).unwrap();
    let off = estimate_llr_keyed(&oracle, &[0.0], zeta, &cfg, &[0]).unwrap();
    let exact = |x: f64| {
        spec.noisy_log_density(&[x], zeta).unwrap() - spec.noisy_log_density(&[x], LogSnr::MAX).unwrap()
    };
    assert!(on.value < 0.0 && off.value > 0.0, "{} {}", on.value, off.value);
    for (est, x) in [(on, 2.0), (off, 0.0)] {
        let err = (est.value - exact(x)).abs();
        assert!(err < 4.0 * est.std_err + 1e-3, "x={x}: {} +/- {} vs {}", est.value, est.std_err, exact(x));
    }
}
