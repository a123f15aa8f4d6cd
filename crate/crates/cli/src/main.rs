use std::path::PathBuf;
use std::process::ExitCode;

use cdl_cli::commands::{self, ModelSource};
use cdl_cli::config::RunConfig;
use cdl_cli::CliError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cdl", version, about = "Train, sample and evaluate diffusion denoisers")]
struct Cli {
    /// TOML config file; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override `key.path=value`; may repeat. Flags below win over these.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Checkpoint JSON written by `cdl train`.
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use the closed-form denoiser of the configured mixture.
    #[arg(long)]
    oracle: bool,
}

impl ModelArgs {
    fn source(&self) -> Result<ModelSource, CliError> {
        match (&self.checkpoint, self.oracle) {
            (Some(p), false) => Ok(ModelSource::Checkpoint(p.clone())),
            (None, true) => Ok(ModelSource::Oracle),
            _ => Err(CliError::Config("give exactly one of --checkpoint or --oracle".into())),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoints, loss CSVs and metadata.
    Train,
    /// Draw samples from a checkpoint or the oracle.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        /// ddpm | flow-euler | flow-heun | churn | parallel
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        /// constant | iid-gaussian
        #[arg(long)]
        init_policy: Option<String>,
        /// Reference CSV for the per-iteration MMD trace.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// MMD between two CSV point sets.
    EvalMmd {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        bandwidth: Option<f64>,
        /// Choose the bandwidth from the reference set.
        #[arg(long)]
        auto_bandwidth: bool,
    },
    /// Denoiser error field against the mixture oracle (CSV + SVG).
    Heatmap {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// MMD-vs-Gaussian curve over bandwidths and the selected bandwidth.
    BandwidthSweep {
        /// Data CSV; defaults to the configured dataset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Pointwise log-likelihood-ratio estimates.
    Llr {
        #[command(flatten)]
        model: ModelArgs,
        /// Points, `;`-separated, coordinates `,`-separated.
        #[arg(long, default_value = "-5;0;5", allow_hyphen_values = true)]
        x: String,
        /// Comma-separated log-SNR values.
        #[arg(long, default_value = "6,8,10", allow_hyphen_values = true)]
        zeta: String,
    },
}

fn parse_list(s: &str, sep: char) -> Result<Vec<f64>, CliError> {
    s.split(sep)
        .map(|v| v.trim().parse::<f64>().map_err(|e| CliError::Config(format!("bad number {v:?}: {e}"))))
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    let mut push = |k: &str, v: String| overrides.push(format!("{k}={v}"));
    if let Some(s) = cli.seed {
        push("seed", s.to_string());
    }
    if let Some(o) = &cli.out {
        push("out_dir", format!("{:?}", o.display().to_string()));
    }
    if let Some(t) = cli.threads {
        push("threads", t.to_string());
    }
    match &cli.command {
        Command::Sample {
            sampler,
            n,
            tol,
            max_iters,
            window,
            init_policy,
            reference,
            ..
        } => {
            if let Some(s) = sampler {
                s.parse::<cdl_cli::config::SamplerKind>()?;
                push("sampler.kind", format!("{s:?}"));
            }
            if let Some(v) = n {
                push("sampler.n", v.to_string());
            }
            if let Some(v) = tol {
                push("sampler.tol", format!("{v:?}"));
            }
            if let Some(v) = max_iters {
                push("sampler.max_iters", v.to_string());
            }
            if let Some(v) = window {
                push("sampler.window", v.to_string());
            }
            if let Some(v) = init_policy {
                push("sampler.init", format!("{v:?}"));
            }
            if let Some(p) = reference {
                push("sampler.mmd_reference", format!("{:?}", p.display().to_string()));
            }
        }
        Command::EvalMmd {
            bandwidth,
            auto_bandwidth,
            ..
        } => {
            if let Some(b) = bandwidth {
                push("eval.bandwidth", format!("{b:?}"));
            }
            if *auto_bandwidth {
                push("eval.auto_bandwidth", "true".into());
            }
        }
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Train => commands::cmd_train(&cfg, &mut |line| eprintln!("{line}")),
        Command::Sample { model, .. } => {
            let r = commands::cmd_sample(&cfg, &model.source()?)?;
            eprintln!(
                "{}: nfe {} iterations {:?} converged {:?} ({:.0} ms)",
                r.sampler, r.nfe, r.picard_iterations, r.converged, r.wall_ms
            );
            Ok(())
        }
        Command::EvalMmd { samples, reference, .. } => {
            let r = commands::cmd_eval_mmd(&cfg, &samples, &reference)?;
            println!("mmd {:.6e} bandwidth {} n_x {} n_y {}", r.mmd, r.bandwidth, r.n_x, r.n_y);
            Ok(())
        }
        Command::Heatmap { model } => {
            let b = commands::cmd_heatmap(&cfg, &model.source()?)?;
            println!(
                "in-band mean {:.6e} out-of-band mean {:.6e} ({} / {} cells)",
                b.in_band_mean, b.out_band_mean, b.in_band_cells, b.out_band_cells
            );
            Ok(())
        }
        Command::BandwidthSweep { data } => {
            let s = commands::cmd_bandwidth_sweep(&cfg, data.as_deref())?;
            println!("selected bandwidth {}", s.selected);
            Ok(())
        }
        Command::Llr { model, x, zeta } => {
            let xs = x.split(';').map(|p| parse_list(p, ',')).collect::<Result<Vec<_>, _>>()?;
            let zetas = parse_list(&zeta, ',')?;
            for row in commands::cmd_llr(&cfg, &model.source()?, &xs, &zetas)? {
                println!("{row}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
