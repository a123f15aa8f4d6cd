//! Run configuration: a TOML file plus `key.path=value` overrides.
//!
//! Every field has a default, so an empty file is a valid config. The
//! resolved config is written next to every artifact, and its hash (which
//! leaves out `threads` and `out_dir`, neither of which can change results)
//! is embedded in every output file.

use std::path::{Path, PathBuf};

use cdl_core::datasets::{self, Dataset};
use cdl_core::losses::{AlphaSampler, LlrEstimatorConfig, TrainingMode, ZetaSampler};
use cdl_core::math::{NoiseSchedule, ScheduleSpec};
use cdl_core::nn::{Activation, Conditioning, InputEncoding, MlpArch, TimeEmbedding};
use cdl_core::oracle::GaussianMixtureSpec;
use cdl_core::samplers::{InitPolicy, NormKind, PicardConfig, StepKind, StochasticSamplerConfig, Stepper};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 picks the number of cores.
    pub threads: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub training: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleSpec::default(),
            training: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// The bundled 2D dino, or the CSV at `path` when given.
    #[default]
    Dino,
    /// Draws from `mixture`.
    Mixture,
    /// Points read as-is from the CSV at `path`.
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub path: Option<PathBuf>,
    pub mixture: GaussianMixtureSpec,
    /// Fraction held out for validation loss.
    pub val_frac: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Dino,
            n: 8000,
            path: None,
            mixture: GaussianMixtureSpec::two_mode_1d(),
            val_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningKind {
    /// Sinusoidal embedding of the (fractional) timestep of `schedule`.
    #[default]
    Timestep,
    LogSnr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embed_dim: usize,
    pub freq_base: f64,
    pub conditioning: ConditioningKind,
    /// Sinusoidal features of the input coordinates; off when unset.
    pub input_encoding: Option<InputEncoding>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = TimeEmbedding::default();
        Self {
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            embed_dim: e.embed_dim,
            freq_base: e.freq_base,
            conditioning: ConditioningKind::Timestep,
            input_encoding: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlphaChoice {
    /// Uniform timestep of the run schedule.
    #[default]
    Timesteps,
    UniformLogsnr { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to 0 over the run.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: u64, steps: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub steps: u64,
    pub batch: usize,
    /// Adam learning rate; unset means `1e-4 * batch / 64`.
    pub lr: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub ema_decay: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub alpha: AlphaChoice,
    /// Contrastive items per step, taken from the front of the batch.
    pub cdl_items: usize,
    pub llr_lo: f64,
    pub llr_hi: f64,
    pub llr_nodes: usize,
    pub llr_draws: usize,
    pub zeta: ZetaSampler,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::MseOnly,
            steps: 20_000,
            batch: 256,
            lr: None,
            lr_schedule: LrSchedule::Constant,
            ema_decay: 0.999,
            checkpoint_every: 5000,
            log_every: 1000,
            alpha: AlphaChoice::Timesteps,
            cdl_items: 8,
            llr_lo: -10.0,
            llr_hi: 15.0,
            llr_nodes: 64,
            llr_draws: 4,
            zeta: ZetaSampler::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    #[default]
    Ddpm,
    FlowEuler,
    FlowHeun,
    Churn,
    Parallel,
}

impl std::str::FromStr for SamplerKind {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "ddpm" => SamplerKind::Ddpm,
            "flow-euler" => SamplerKind::FlowEuler,
            "flow-heun" => SamplerKind::FlowHeun,
            "churn" => SamplerKind::Churn,
            "parallel" => SamplerKind::Parallel,
            other => return Err(CliError::Config(format!("unknown sampler {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub n: usize,
    /// Sample from the EMA weights when the checkpoint has them.
    pub use_ema: bool,
    /// One-step map driven by the parallel sampler.
    pub step: StepKind,
    pub tol: f64,
    pub max_iters: usize,
    pub window: Option<usize>,
    pub norm: NormKind,
    pub init: InitPolicy,
    pub s_churn: f64,
    pub s_noise: f64,
    pub t_min: usize,
    pub t_max: usize,
    /// Reference points for the per-iteration MMD trace of the parallel sampler.
    pub mmd_reference: Option<PathBuf>,
    pub mmd_threshold: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let p = PicardConfig::default();
        Self {
            kind: SamplerKind::Ddpm,
            n: 2000,
            use_ema: true,
            step: StepKind::Ddpm,
            tol: 2e-6,
            max_iters: p.max_iters,
            window: None,
            norm: NormKind::MaxOverSteps,
            init: InitPolicy::Constant,
            s_churn: 0.0,
            s_noise: 1.0,
            t_min: 1,
            t_max: 1_000_000,
            mmd_reference: None,
            mmd_threshold: Some(0.002),
        }
    }
}

impl SamplerConfig {
    pub fn picard(&self) -> PicardConfig {
        PicardConfig {
            tol: self.tol,
            max_iters: self.max_iters,
            window: self.window,
            norm_kind: self.norm,
            init: self.init,
        }
    }

    pub fn churn(&self) -> StochasticSamplerConfig {
        StochasticSamplerConfig {
            s_churn: self.s_churn,
            s_noise: self.s_noise,
            t_min: self.t_min,
            t_max: self.t_max,
            stepper: Stepper::Heun,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bandwidth: f64,
    /// Pick the bandwidth by the MMD-vs-Gaussian peak instead.
    pub auto_bandwidth: bool,
    pub max_points: usize,
    pub bandwidth_candidates: usize,
    pub bandwidth_lo: f64,
    pub bandwidth_hi: f64,
    pub band_sigmas: f64,
    pub heatmap_columns: usize,
    pub llr_nodes: usize,
    pub llr_draws: usize,
    pub llr_lo: f64,
    pub llr_hi: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bandwidth: 0.03,
            auto_bandwidth: false,
            max_points: 4096,
            bandwidth_candidates: 25,
            bandwidth_lo: 1e-3,
            bandwidth_hi: 1.0,
            band_sigmas: 3.0,
            heatmap_columns: 200,
            llr_nodes: 256,
            llr_draws: 256,
            llr_lo: -10.0,
            llr_hi: 15.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let base = Self::from_toml(&text)?;
        let mut value = toml::Value::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.schedule.build().map_err(|e| CliError::Config(format!("schedule: {e}")))?;
        self.training.mode.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.dataset.n == 0 {
            return bad("dataset.n must be positive".into());
        }
        if !(self.dataset.val_frac >= 0.0 && self.dataset.val_frac < 1.0) {
            return bad(format!("dataset.val_frac must lie in [0, 1), got {}", self.dataset.val_frac));
        }
        if self.dataset.kind == DatasetKind::Csv && self.dataset.path.is_none() {
            return bad("dataset.kind = \"csv\" needs dataset.path".into());
        }
        if self.training.batch == 0 {
            return bad("training.batch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.training.ema_decay) {
            return bad(format!("training.ema_decay must lie in [0, 1), got {}", self.training.ema_decay));
        }
        if let Some(lr) = self.training.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("training.lr must be positive, got {lr}"));
            }
        }
        self.llr_training().map_err(|e| CliError::Config(format!("training llr grid: {e}")))?;
        ZetaSampler::new(self.training.zeta.law, self.training.zeta.low, self.training.zeta.high)
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.sampler.n == 0 {
            return bad("sampler.n must be positive".into());
        }
        self.sampler
            .picard()
            .validate(self.schedule.steps())
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.sampler.churn().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.eval.bandwidth > 0.0 && self.eval.bandwidth.is_finite()) {
            return bad(format!("eval.bandwidth must be positive, got {}", self.eval.bandwidth));
        }
        if self.eval.max_points < 2 || self.eval.bandwidth_candidates == 0 {
            return bad("eval.max_points must be >= 2 and eval.bandwidth_candidates >= 1".into());
        }
        if !(self.eval.bandwidth_lo > 0.0 && self.eval.bandwidth_lo <= self.eval.bandwidth_hi) {
            return bad("eval bandwidth range must satisfy 0 < lo <= hi".into());
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return bad("model.hidden must be a nonempty list of positive widths".into());
        }
        self.arch(1).validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok(())
    }

    /// The config with `threads` and `out_dir` cleared; this is what gets
    /// hashed and written next to results.
    pub fn canonical(&self) -> Self {
        let mut c = self.clone();
        c.threads = 0;
        c.out_dir = PathBuf::new();
        c
    }

    /// Hash of the result-relevant part of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.canonical()).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule.build().expect("validated")
    }

    pub fn arch(&self, data_dim: usize) -> MlpArch {
        MlpArch {
            data_dim,
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
            embedding: TimeEmbedding {
                embed_dim: self.model.embed_dim,
                freq_base: self.model.freq_base,
            },
            conditioning: match self.model.conditioning {
                ConditioningKind::Timestep => Conditioning::Timestep {
                    schedule: self.schedule.clone(),
                },
                ConditioningKind::LogSnr => Conditioning::LogSnr,
            },
            input_encoding: self.model.input_encoding,
        }
    }

    pub fn llr_training(&self) -> Result<LlrEstimatorConfig, cdl_core::losses::LossError> {
        let t = &self.training;
        LlrEstimatorConfig::uniform(t.llr_lo, t.llr_hi, t.llr_nodes, t.llr_draws, self.seed)
    }

    pub fn llr_eval(&self) -> Result<LlrEstimatorConfig, CliError> {
        let e = &self.eval;
        LlrEstimatorConfig::uniform(e.llr_lo, e.llr_hi, e.llr_nodes, e.llr_draws, self.seed)
            .map_err(|e| CliError::Config(format!("eval llr grid: {e}")))
    }

    pub fn alpha_sampler(&self) -> AlphaSampler {
        match self.training.alpha {
            AlphaChoice::Timesteps => AlphaSampler::Timesteps(self.schedule()),
            AlphaChoice::UniformLogsnr { low, high } => AlphaSampler::UniformLogSnr { low, high },
        }
    }

    /// The training dataset (before the validation split).
    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let d = &self.dataset;
        let map = |e: datasets::DatasetError| CliError::Input(e.to_string());
        match d.kind {
            DatasetKind::Dino => match &d.path {
                Some(p) => datasets::load_dino(p, d.n, self.seed).map_err(map),
                None => Ok(datasets::builtin_dino(d.n, self.seed)),
            },
            DatasetKind::Mixture => Ok(datasets::sample_mixture(&d.mixture, d.n, self.seed)),
            DatasetKind::Csv => {
                let (points, dim) = datasets::read_points_csv(d.path.as_deref().expect("validated")).map_err(map)?;
                Ok(Dataset {
                    dim,
                    points,
                    normalization: datasets::Normalization::identity(dim),
                })
            }
        }
    }
}

/// Sets `a.b.c=value` in a TOML tree. The value is parsed as a TOML value
/// when possible and taken as a string otherwise.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p:?} is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(p.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(CliError::Config("empty override key".into()))
}
