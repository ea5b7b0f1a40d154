use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use fedmobile::exec::Execution;
use fedmobile::orchestrator::{write_metrics, Experiment, ExperimentConfig};
use fedmobile::synthdata::ScenarioKind;
use fedmobile::textio::fmt_f64;
use fedmobile::{selftest, Error, Result};

#[derive(Parser)]
#[command(version, about = "Multimodal federated learning simulator with missing modalities")]
struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metric files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sweep the missing rate; one output directory per value.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.7,0.8,0.9")]
        grid: Vec<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the invariant checks.
    Selftest,
}

fn run_one(config: &ExperimentConfig, exec: Execution, out: &std::path::Path) -> Result<(f64, f64)> {
    let mut exp = Experiment::new(config, exec)?;
    let metrics = exp.run()?;
    write_metrics(&metrics, &exp.config, out)?;
    Ok(metrics.last().map(|m| (m.test_accuracy, m.test_loss)).unwrap_or((0.0, 0.0)))
}

fn dispatch(cli: Cli) -> Result<bool> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (acc, loss) = run_one(&cfg, exec, &out)?;
            println!("final test accuracy {acc:.4}, loss {loss:.4}; metrics in {}", out.display());
            Ok(true)
        }
        Command::Ablate { config, grid, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            if cfg.scenario.kind == ScenarioKind::Scenario2 {
                return Err(Error::Config("ablate sweeps a single missing rate; scenario2 uses per-node rates".into()));
            }
            let mut summary = String::from("beta,final_test_accuracy,final_test_loss\n");
            for beta in grid {
                let mut c = cfg.clone();
                c.scenario.beta = beta;
                c.validate()?;
                let dir = out.join(format!("beta_{beta}"));
                let (acc, loss) = run_one(&c, exec, &dir)?;
                println!("beta {beta}: final test accuracy {acc:.4}");
                summary.push_str(&format!("{beta},{},{}\n", fmt_f64(acc), fmt_f64(loss)));
            }
            let path = out.join("ablation.csv");
            std::fs::write(&path, summary).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
            Ok(true)
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
