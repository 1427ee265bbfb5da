use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use pbvae::checkpoint::Checkpoint;
use pbvae::harness::{
    self, cmd_certify, cmd_sweep, cmd_train, cmd_train_prior, run_pipeline, ExperimentConfig, Objective, Overrides,
    RunReport,
};

/// Train VAEs under β-VAE or PAC-Bayes objectives and compute risk certificates.
#[derive(Parser)]
#[command(name = "pbvae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn or construct the prior centre.
    TrainPrior(Common),
    /// Train the posterior (or a β-VAE baseline) from a prior checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Prior checkpoint [default: <out>/prior.ckpt]
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Evaluate certificates and train/test losses.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Trained checkpoint [default: <out>/posterior.ckpt]
        #[arg(long)]
        posterior: Option<PathBuf>,
    },
    /// Run every point of the config's [sweep] grid and write sweep.csv.
    Sweep(Common),
    /// Prior, training and certification in one go.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// β for both the prior and the β-VAE baseline.
    #[arg(long)]
    beta: Option<f64>,
    /// Prior standard deviation for both networks.
    #[arg(long)]
    sigma: Option<f64>,
    /// KL attenuation factor.
    #[arg(long)]
    lambda: Option<f64>,
    /// beta_vae, pb_mcallester or pb_quadratic.
    #[arg(long)]
    objective: Option<Objective>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        cfg.apply(&Overrides {
            beta: self.beta,
            sigma: self.sigma,
            lambda: self.lambda,
            objective: self.objective,
            seed: self.seed,
        })?;
        Ok(cfg)
    }
}

fn load_checkpoint(explicit: Option<PathBuf>, out: &Path, default: &str) -> Result<Checkpoint> {
    let path = explicit.unwrap_or_else(|| out.join(default));
    Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn summarise(report: &RunReport) {
    let c = &report.certificates;
    println!("config {}", report.config_hash);
    println!(
        "train loss {:.3} nats, test loss {}",
        report.train_loss_raw,
        report
            .test_loss_raw
            .map_or("n/a".into(), |t| format!("{t:.3} nats"))
    );
    for cert in c.all() {
        let label = match cert.mode {
            Some(m) => format!("{:?} ({:?})", cert.kind, m),
            None => format!("{:?}", cert.kind),
        };
        println!(
            "{label}: R̂ = {:.5}, budget = {:.3e}, bound = {:.5} ({:.1} nats/image)",
            cert.empirical_loss, cert.kl_budget, cert.risk_bound, cert.risk_bound_rescaled_nats_per_image
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainPrior(common) => {
            let cfg = common.load()?;
            cmd_train_prior(&cfg, &common.out)?;
            println!("wrote {}", common.out.join(harness::PRIOR_CHECKPOINT).display());
        }
        Command::Train { common, prior } => {
            let cfg = common.load()?;
            let prior = load_checkpoint(prior, &common.out, harness::PRIOR_CHECKPOINT)?;
            cmd_train(&cfg, &prior, &common.out)?;
            println!("wrote {}", common.out.join(harness::POSTERIOR_CHECKPOINT).display());
        }
        Command::Certify {
            common,
            prior,
            posterior,
        } => {
            let cfg = common.load()?;
            let prior = load_checkpoint(prior, &common.out, harness::PRIOR_CHECKPOINT)?;
            let posterior = load_checkpoint(posterior, &common.out, harness::POSTERIOR_CHECKPOINT)?;
            summarise(&cmd_certify(&cfg, &prior, &posterior, &common.out)?);
        }
        Command::Sweep(common) => {
            let cfg = common.load()?;
            let rows = cmd_sweep(&cfg, &common.out, |row| {
                eprintln!("{} {} {}", row.config_hash, row.status, row.error.as_deref().unwrap_or(""));
            })?;
            let failed = rows.iter().filter(|r| r.status == "failed").count();
            println!("{} rows ({failed} failed) in {}", rows.len(), common.out.join("sweep.csv").display());
        }
        Command::Run(common) => {
            let cfg = common.load()?;
            summarise(&run_pipeline(&cfg, &common.out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
