//! Training loop shared by `cdl train` and the experiment harnesses.

use cdl_core::datasets::{split, Dataset};
use cdl_core::denoiser::Trainable;
use cdl_core::losses::{combined_training_step, mse_diffusion_loss, sample_batch, StepConfig, StepStats};
use cdl_core::nn::{default_lr, Adam, AdamConfig, Ema, MlpDenoiser};

use crate::config::RunConfig;
use crate::CliError;

pub struct TrainOutcome {
    pub model: MlpDenoiser,
    pub ema: Ema,
    pub opt: Adam,
    pub log: Vec<StepStats>,
    /// `(step, validation MSE)` at every checkpoint.
    pub val: Vec<(u64, f64)>,
}

/// Training and validation parts of the configured dataset.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>), CliError> {
    let ds = cfg.dataset()?;
    if cfg.dataset.val_frac == 0.0 {
        return Ok((ds, None));
    }
    let (train, val) = split(&ds, 1.0 - cfg.dataset.val_frac, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    if train.is_empty() {
        return Err(CliError::Config("validation split leaves no training data".into()));
    }
    Ok((train, (!val.is_empty()).then_some(val)))
}

fn validation_mse(cfg: &RunConfig, model: &MlpDenoiser, val: &Dataset) -> Result<f64, CliError> {
    mse_diffusion_loss(model, &val.points, &cfg.alpha_sampler(), cfg.seed, u64::MAX, None)
        .map_err(|e| CliError::Numeric(e.to_string()))
}

/// Runs `cfg.training.steps` optimizer steps. `on_checkpoint` sees the state
/// after every `checkpoint_every` steps and after the last one; `log`
/// receives progress lines.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    mut on_checkpoint: impl FnMut(u64, &MlpDenoiser, &Ema, &Adam) -> Result<(), CliError>,
    mut log: impl FnMut(&str),
) -> Result<TrainOutcome, CliError> {
    let t = &cfg.training;
    let mut model = MlpDenoiser::new(cfg.arch(data.dim), cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let lr = t.lr.unwrap_or_else(|| default_lr(t.batch));
    let mut opt = Adam::new(AdamConfig { lr, ..AdamConfig::default() }, model.num_params())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut ema = Ema::new(t.ema_decay, model.params()).map_err(|e| CliError::Config(e.to_string()))?;
    let step_cfg = StepConfig {
        mode: t.mode,
        alpha_sampler: cfg.alpha_sampler(),
        llr: cfg.llr_training().map_err(|e| CliError::Config(e.to_string()))?,
        zeta: t.zeta,
        cdl_items: t.cdl_items,
        seed: cfg.seed,
    };
    let mut history = Vec::with_capacity(t.steps as usize);
    let mut val_log = Vec::new();
    for step in 0..t.steps {
        opt.config.lr = lr * t.lr_schedule.factor(step, t.steps);
        let batch = sample_batch(&data.points, data.dim, t.batch, cfg.seed, step);
        let stats = combined_training_step(&mut model, &batch, &step_cfg, step, &mut opt, Some(&mut ema))
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !stats.total.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
            return Err(CliError::Numeric(format!("loss diverged at step {step}")));
        }
        history.push(stats);
        let done = step + 1;
        if t.log_every > 0 && done % t.log_every == 0 {
            let recent = &history[history.len().saturating_sub(t.log_every as usize)..];
            let mean = |f: fn(&StepStats) -> Option<f64>| {
                let v: Vec<f64> = recent.iter().filter_map(f).collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            log(&format!("step {done}: mse {:.5} cdl {:.5}", mean(|s| s.mse), mean(|s| s.cdl)));
        }
        if done == t.steps || (t.checkpoint_every > 0 && done % t.checkpoint_every == 0) {
            if let Some(v) = val {
                val_log.push((done, validation_mse(cfg, &model, v)?));
            }
            on_checkpoint(done, &model, &ema, &opt)?;
        }
    }
    Ok(TrainOutcome {
        model,
        ema,
        opt,
        log: history,
        val: val_log,
    })
}
