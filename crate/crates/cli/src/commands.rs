//! Subcommand implementations. Each writes its outputs under `cfg.out_dir`;
//! every file carries the config hash, and wall-clock time goes to a separate
//! `timing.json` so the other files are reproducible byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cdl_core::datasets::{points_to_csv, read_points_csv};
use cdl_core::denoiser::Denoiser;
use cdl_core::eval::{self, log_spaced, mmd_with_config, ood_band_error, select_bandwidth, MmdConfig};
use cdl_core::losses::estimate_llr_keyed;
use cdl_core::math::LogSnr;
use cdl_core::nn::checkpoint::{Checkpoint, FloatEncoding};
use cdl_core::oracle::{default_t_grid, default_x_grid_1d, error_field, AnalyticDenoiser};
use cdl_core::samplers::{
    ddpm_ancestral_sample, parallel_sample, probability_flow_sample, stochastic_churn_sample, MmdMonitor,
    SampleOutput, SamplerReport, Stepper,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, SamplerKind};
use crate::train::{prepare_data, train};
use crate::CliError;

pub const VERSION: &str = concat!("cdl v", env!("CARGO_PKG_VERSION"));

/// Where a denoiser comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Checkpoint(PathBuf),
    /// The closed-form denoiser of the configured mixture.
    Oracle,
}

struct Out {
    dir: PathBuf,
    hash: String,
    threads: usize,
}

impl Out {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(&cfg.out_dir)?;
        Ok(Self {
            dir: cfg.out_dir.clone(),
            hash: cfg.hash(),
            threads: cfg.threads,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        fs::write(&p, text)?;
        Ok(p)
    }

    fn csv(&self, name: &str, header: &str, rows: &[String]) -> Result<PathBuf, CliError> {
        let mut s = format!("# config_hash={}\n{header}\n", self.hash);
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        self.write(name, &s)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut v = serde_json::to_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        if let Value::Object(m) = &mut v {
            m.insert("config_hash".into(), Value::String(self.hash.clone()));
        }
        self.write(name, &(serde_json::to_string_pretty(&v).expect("json") + "\n"))
    }

    fn config(&self, cfg: &RunConfig) -> Result<PathBuf, CliError> {
        self.write("config.toml", &format!("# config_hash={}\n{}", self.hash, cfg.canonical().to_toml()))
    }

    fn timing(&self, command: &str, start: Instant) -> Result<(), CliError> {
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let v = json!({"command": command, "wall_ms": ms, "threads": self.threads, "out_dir": self.dir});
        self.write("timing.json", &(v.to_string() + "\n"))?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn cmd_train(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let start = Instant::now();
    let out = Out::new(cfg)?;
    out.config(cfg)?;
    let (data, val) = prepare_data(cfg)?;
    let outcome = train(
        cfg,
        &data,
        val.as_ref(),
        |step, model, ema, opt| {
            let ck = Checkpoint::capture(model, cfg.seed, step, Some(ema), Some(opt), FloatEncoding::Hex);
            out.json(&format!("checkpoint_step{step:08}.json"), &ck)?;
            Ok(())
        },
        |line| log(line),
    )?;
    let last = outcome.log.last().map_or(0, |s| s.step + 1);
    let ck = Checkpoint::capture(&outcome.model, cfg.seed, last, Some(&outcome.ema), Some(&outcome.opt), FloatEncoding::Hex);
    out.json("checkpoint_final.json", &ck)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), num);
    let rows: Vec<String> = outcome
        .log
        .iter()
        .map(|s| format!("{},{},{},{}", s.step, opt(s.mse), opt(s.cdl), num(s.total)))
        .collect();
    out.csv("loss.csv", "step,mse,cdl,total", &rows)?;
    let vrows: Vec<String> = outcome.val.iter().map(|(s, v)| format!("{s},{}", num(*v))).collect();
    out.csv("val.csv", "step,val_mse", &vrows)?;
    let t = &cfg.training;
    out.json(
        "metadata.json",
        &json!({
            "version": VERSION,
            "config": cfg.canonical(),
            "data_dim": data.dim,
            "train_points": data.len(),
            "val_points": val.as_ref().map_or(0, |v| v.len()),
            "normalization": data.normalization,
            "num_params": cdl_core::nn::param_count(&cfg.arch(data.dim).layer_dims()),
            "mode": t.mode,
            "llr_quadrature": {"lo": t.llr_lo, "hi": t.llr_hi, "nodes": t.llr_nodes, "draws": t.llr_draws},
            "zeta": t.zeta,
        }),
    )?;
    out.timing("train", start)
}

fn load_model(cfg: &RunConfig, source: &ModelSource, use_ema: bool) -> Result<Box<dyn Denoiser>, CliError> {
    match source {
        ModelSource::Oracle => Ok(Box::new(AnalyticDenoiser::new(cfg.dataset.mixture.clone()))),
        ModelSource::Checkpoint(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::Input(format!("cannot read checkpoint {}: {e}", p.display())))?;
            let ck = Checkpoint::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            let m = if use_ema { ck.ema_model() } else { ck.model() };
            Ok(Box::new(m.map_err(|e| CliError::Input(e.to_string()))?))
        }
    }
}

fn read_points(path: &Path) -> Result<(Vec<f64>, usize), CliError> {
    read_points_csv(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Draws `sampler.n` samples with the configured sampler.
pub fn run_sampler(cfg: &RunConfig, model: &dyn Denoiser) -> Result<SampleOutput, CliError> {
    let s = cfg.schedule();
    let sc = &cfg.sampler;
    let n = sc.n;
    let numeric = |e: cdl_core::samplers::SamplerError| CliError::Numeric(e.to_string());
    let out = match sc.kind {
        SamplerKind::Ddpm => ddpm_ancestral_sample(model, &s, n, cfg.seed, false),
        SamplerKind::FlowEuler => probability_flow_sample(model, &s, n, Stepper::Euler, cfg.seed),
        SamplerKind::FlowHeun => probability_flow_sample(model, &s, n, Stepper::Heun, cfg.seed),
        SamplerKind::Churn => stochastic_churn_sample(model, &s, &sc.churn(), n, cfg.seed).map_err(numeric)?,
        SamplerKind::Parallel => {
            let monitor = match &sc.mmd_reference {
                Some(p) => {
                    let (reference, dim) = read_points(p)?;
                    if dim != model.data_dim() {
                        return Err(CliError::Input(format!("reference has dim {dim}, model {}", model.data_dim())));
                    }
                    Some(MmdMonitor {
                        reference,
                        bandwidth: cfg.eval.bandwidth,
                        threshold: sc.mmd_threshold,
                        stop_at_threshold: false,
                    })
                }
                None => None,
            };
            let p = parallel_sample(model, &s, sc.step, &sc.picard(), n, cfg.seed, monitor.as_ref()).map_err(numeric)?;
            SampleOutput {
                dim: p.dim,
                samples: p.samples,
                trajectory: None,
                report: p.report,
            }
        }
    };
    if out.samples.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numeric("sampler produced non-finite values".into()));
    }
    Ok(out)
}

pub fn cmd_sample(cfg: &RunConfig, source: &ModelSource) -> Result<SamplerReport, CliError> {
    let start = Instant::now();
    let out = Out::new(cfg)?;
    out.config(cfg)?;
    let model = load_model(cfg, source, cfg.sampler.use_ema)?;
    let res = run_sampler(cfg, model.as_ref())?;
    out.write(
        "samples.csv",
        &points_to_csv(&res.samples, res.dim, &[format!("config_hash={}", out.hash)]),
    )?;
    out.json("sampler_report.json", &res.report)?;
    if let Some(trace) = &res.report.mmd_trace {
        let rows: Vec<String> = trace
            .iter()
            .zip(&res.report.trace)
            .enumerate()
            .map(|(k, (m, t))| format!("{},{},{}", k + 1, num(*m), num(*t)))
            .collect();
        out.csv("mmd_trace.csv", "iteration,mmd,picard_norm", &rows)?;
    }
    out.timing("sample", start)?;
    Ok(res.report)
}

pub fn cmd_eval_mmd(cfg: &RunConfig, samples: &Path, reference: &Path) -> Result<eval::MmdResult, CliError> {
    let start = Instant::now();
    let out = Out::new(cfg)?;
    let (x, dx) = read_points(samples)?;
    let (y, dy) = read_points(reference)?;
    if dx != dy {
        return Err(CliError::Input(format!("dimension mismatch: {dx} vs {dy}")));
    }
    let bandwidth = if cfg.eval.auto_bandwidth {
        select_bandwidth(&y, dy, &candidates(cfg), &mmd_cfg(cfg, cfg.eval.bandwidth))
            .map_err(|e| CliError::Input(e.to_string()))?
            .selected
    } else {
        cfg.eval.bandwidth
    };
    let res = mmd_with_config(&x, &y, dx, &mmd_cfg(cfg, bandwidth)).map_err(|e| CliError::Input(e.to_string()))?;
    out.json("mmd.json", &res)?;
    out.timing("eval-mmd", start)?;
    Ok(res)
}

fn mmd_cfg(cfg: &RunConfig, bandwidth: f64) -> MmdConfig {
    MmdConfig {
        bandwidth,
        max_points: cfg.eval.max_points,
        rng_seed: cfg.seed,
        ..MmdConfig::default()
    }
}

fn candidates(cfg: &RunConfig) -> Vec<f64> {
    let e = &cfg.eval;
    log_spaced(e.bandwidth_lo, e.bandwidth_hi, e.bandwidth_candidates)
}

pub fn cmd_bandwidth_sweep(cfg: &RunConfig, data: Option<&Path>) -> Result<eval::BandwidthSelection, CliError> {
    let start = Instant::now();
    let out = Out::new(cfg)?;
    let (points, dim) = match data {
        Some(p) => read_points(p)?,
        None => {
            let ds = cfg.dataset()?;
            (ds.points, ds.dim)
        }
    };
    let sel = select_bandwidth(&points, dim, &candidates(cfg), &mmd_cfg(cfg, cfg.eval.bandwidth))
        .map_err(|e| CliError::Input(e.to_string()))?;
    let rows: Vec<String> = (0..sel.candidates.len())
        .map(|i| format!("{},{},{}", num(sel.candidates[i]), num(sel.mmd[i]), num(sel.std_err[i])))
        .collect();
    out.csv("bandwidth_sweep.csv", "sigma,mmd,std_err", &rows)?;
    out.json("bandwidth.json", &json!({"selected": sel.selected, "n": points.len() / dim}))?;
    out.timing("bandwidth-sweep", start)?;
    Ok(sel)
}

pub fn cmd_heatmap(cfg: &RunConfig, source: &ModelSource) -> Result<eval::BandError, CliError> {
    let start = Instant::now();
    let out = Out::new(cfg)?;
    let spec = &cfg.dataset.mixture;
    let model = load_model(cfg, source, true)?;
    if model.data_dim() != spec.dim() || spec.dim() != 1 {
        return Err(CliError::Input(format!(
            "heatmap needs a 1-D mixture and matching model (spec dim {}, model dim {})",
            spec.dim(),
            model.data_dim()
        )));
    }
    let s = cfg.schedule();
    let field = error_field(
        model.as_ref(),
        spec,
        &default_x_grid_1d(),
        &default_t_grid(&s, cfg.eval.heatmap_columns),
        &s,
    )
    .map_err(|e| CliError::Input(e.to_string()))?;
    let band = ood_band_error(&field, spec, cfg.eval.band_sigmas).map_err(|e| CliError::Input(e.to_string()))?;
    out.write("error_field.csv", &format!("# config_hash={}\n{}", out.hash, field.to_csv()))?;
    out.write("error_field.svg", &format!("<!-- config_hash={} -->\n{}", out.hash, field.to_svg()))?;
    out.json("band_error.json", &band)?;
    out.timing("heatmap", start)?;
    Ok(band)
}

/// One row per `(x, zeta)`: estimated LLR, its standard error and, for the
/// oracle, the closed form `log p_zeta(x) - log p(x)`.
pub fn cmd_llr(cfg: &RunConfig, source: &ModelSource, xs: &[Vec<f64>], zetas: &[f64]) -> Result<Vec<String>, CliError> {
    let start = Instant::now();
    let out = Out::new(cfg)?;
    let model = load_model(cfg, source, true)?;
    let d = model.data_dim();
    if let Some(x) = xs.iter().find(|x| x.len() != d) {
        return Err(CliError::Input(format!("point {x:?} does not have dimension {d}")));
    }
    let llr_cfg = cfg.llr_eval()?;
    let spec = &cfg.dataset.mixture;
    let exact = *source == ModelSource::Oracle;
    let mut rows = Vec::new();
    for (i, x) in xs.iter().enumerate() {
        for (j, &z) in zetas.iter().enumerate() {
            let zeta = LogSnr::clamped(z);
            let est = estimate_llr_keyed(model.as_ref(), x, zeta, &llr_cfg, &[i as u64, j as u64])
                .map_err(|e| CliError::Input(e.to_string()))?;
            let closed = if exact {
                let v = spec.noisy_log_density(x, zeta).map_err(|e| CliError::Input(e.to_string()))?
                    - spec.noisy_log_density(x, LogSnr::MAX).map_err(|e| CliError::Input(e.to_string()))?;
                num(v)
            } else {
                String::new()
            };
            let xcols: Vec<String> = x.iter().map(|v| num(*v)).collect();
            rows.push(format!("{},{},{},{},{closed}", xcols.join(","), num(z), num(est.value), num(est.std_err)));
        }
    }
    let xh: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    out.csv("llr.csv", &format!("{},zeta,llr,std_err,closed_form", xh.join(",")), &rows)?;
    out.timing("llr", start)?;
    Ok(rows)
}
