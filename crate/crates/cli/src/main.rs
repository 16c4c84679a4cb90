use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use arlab_cli::pipeline::{cmd_reprogram, cmd_sweep, cmd_train};
use arlab_cli::report::{cmd_correlate, CorrelateArgs};
use arlab_cli::ExperimentConfig;
use arlab_core::CorrelationMethod;
use clap::{Args, Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "arlab", version, about = "Adversarial reprogramming experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON as written to runs/<hash>/config.json).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed)?;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        Ok(cfg)
    }

    fn pool(&self) -> Result<()> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build_global()
            .map_err(Into::into)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model (or initialize the untrained control).
    Train(Common),
    /// Optimize one program and append its metrics row.
    Reprogram {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to the cached model for the config.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// One reprogramming run per mask size.
    Sweep(Common),
    /// Correlate two metrics columns with permutation p-values.
    Correlate {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "RA")]
        x: String,
        #[arg(long, default_value = "rN")]
        y: String,
        #[arg(long, value_delimiter = ',', default_value = "pearson,spearman,kendall")]
        methods: Vec<CorrelationMethod>,
        #[arg(long, default_value_t = 10_000)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for correlations.csv and scatter.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(common) => {
            common.pool()?;
            let cfg = common.load()?;
            let t = cmd_train(&cfg)?;
            println!(
                "checkpoint {} sha256 {} test accuracy {:.4}",
                t.dir.display(),
                t.digest,
                t.test_accuracy
            );
            if let Some(l) = t.losses.last() {
                println!("final training loss {l:.6}");
            }
        }
        Command::Reprogram { common, model } => {
            common.pool()?;
            let cfg = common.load()?;
            let run = cmd_reprogram(&cfg, model.as_deref())?;
            println!("{}", run.record.to_json_line()?);
        }
        Command::Sweep(common) => {
            let cfg = common.load()?;
            let outcome = cmd_sweep(&cfg, common.jobs)?;
            for (size, res) in &outcome.runs {
                match res {
                    Ok(rec) => println!("{}", rec.to_json_line()?),
                    Err(e) => eprintln!("mask size {size} failed: {e:#}"),
                }
            }
            if outcome.failures() > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Correlate {
            metrics,
            x,
            y,
            methods,
            permutations,
            seed,
            out,
        } => {
            let args = CorrelateArgs {
                metrics: &metrics,
                x: &x,
                y: &y,
                methods: &methods,
                permutations,
                seed,
            };
            for r in cmd_correlate(&args, out.as_deref())? {
                println!(
                    "{} {x} vs {y}: {:.6} p = {:.6} ({} permutations{})",
                    r.method.name(),
                    r.coefficient,
                    r.p_value,
                    r.n_permutations,
                    if r.exhaustive { ", exhaustive" } else { "" }
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
