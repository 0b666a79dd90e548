//! `smoothnet`: train, sweep, account and inspect DP-SGD runs.
//!
//! Exit codes: 0 ok, 2 configuration or input error, 3 diverged run,
//! 4 numerical error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use smoothnet::accountant::{calibrate_sigma, epsilon, DEFAULT_DELTA};
use smoothnet::harness::pareto_front;
use smoothnet::harness::sweep::run_sweep_with;
use smoothnet::harness::train::run_dir;
use smoothnet::harness::{run_training_with, RunConfig, RunStatus};
use smoothnet::{Error, Model};

#[derive(Parser)]
#[command(name = "smoothnet", version, about = "Differentially private CNN training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run described by a config file.
    Train {
        config: PathBuf,
        /// Continue from the last completed epoch of this run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the clip-norm sweep described by the config's `sweep` section.
    Sweep { config: PathBuf },
    /// Spent (epsilon, delta) of the subsampled Gaussian mechanism.
    Accountant {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
    },
    /// Smallest noise multiplier meeting a target epsilon.
    Calibrate {
        #[arg(long)]
        target_epsilon: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
    },
    /// Non-dominated (epsilon, accuracy) points of a metrics or summary CSV.
    Pareto { csv: PathBuf },
    /// Parameter count and structure of the configured architecture.
    Params { config: PathBuf },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn error_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::Shape { .. } | Error::Record(_) | Error::Privacy(_) => {
            EXIT_NUMERIC
        }
        _ => EXIT_CONFIG,
    }
}

fn status_code(status: &RunStatus) -> u8 {
    match status {
        RunStatus::Completed | RunStatus::EarlyStopped { .. } => 0,
        RunStatus::Diverged { .. } => EXIT_DIVERGED,
        RunStatus::Error { .. } => EXIT_NUMERIC,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}

fn run(cli: Cli) -> smoothnet::Result<u8> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = RunConfig::from_file(&config)?;
            let record = run_training_with(&cfg, resume.as_deref(), &mut |row| {
                eprintln!(
                    "epoch {:>3} step {:>6} train_loss {:.4} val_loss {:.4} val_acc {:.4} eps {:.4}",
                    row.epoch, row.step, row.train_loss, row.val_loss, row.val_acc, row.epsilon
                );
            })?;
            let m = &record.metadata;
            println!(
                "{}",
                json!({
                    "run_id": m.run_id,
                    "status": m.status,
                    "epochs": m.epochs_completed,
                    "steps": m.total_steps,
                    "best_val_acc": m.best_val_acc,
                    "test_acc": m.test_acc,
                    "epsilon": m.final_epsilon,
                    "delta": m.delta,
                    "dir": run_dir(&cfg),
                })
            );
            Ok(status_code(&m.status))
        }
        Command::Sweep { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let outcome = run_sweep_with(&cfg.sweep, &cfg, &mut |p, r| match r {
                Ok(rec) => eprintln!(
                    "{}: {} best_val_acc {:.4} eps {:.4}",
                    p.run_id,
                    rec.status().name(),
                    rec.metadata.best_val_acc,
                    rec.metadata.final_epsilon
                ),
                Err(e) => eprintln!("{}: error: {e}", p.run_id),
            })?;
            for row in outcome.summary.iter().filter(|r| r.top_k) {
                println!("{}", serde_json::to_string(row)?);
            }
            Ok(0)
        }
        Command::Accountant {
            q,
            sigma,
            steps,
            delta,
        } => {
            let s = epsilon(q, sigma, steps, delta)?;
            println!(
                "{}",
                json!({"epsilon": s.epsilon, "order": s.order, "q": q, "sigma": sigma, "steps": steps, "delta": delta})
            );
            Ok(0)
        }
        Command::Calibrate {
            target_epsilon,
            q,
            steps,
            delta,
        } => {
            let sigma = calibrate_sigma(target_epsilon, delta, q, steps)?;
            let s = epsilon(q, sigma, steps, delta)?;
            println!(
                "{}",
                json!({"sigma": sigma, "epsilon": s.epsilon, "order": s.order, "target_epsilon": target_epsilon, "q": q, "steps": steps, "delta": delta})
            );
            Ok(0)
        }
        Command::Pareto { csv } => {
            let points = read_points(&csv)?;
            let front = pareto_front(&points)?;
            println!("epsilon,accuracy");
            for (e, a) in front {
                println!("{e},{a}");
            }
            Ok(0)
        }
        Command::Params { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let model: Model<f32> = cfg.architecture.build(cfg.seed)?;
            println!("{}", serde_json::to_string(model.summary())?);
            Ok(0)
        }
    }
}

/// `(epsilon, accuracy)` pairs from a CSV with an epsilon column
/// (`epsilon` or `final_epsilon`) and an accuracy column (`best_val_acc`,
/// `val_acc` or `accuracy`).
fn read_points(path: &std::path::Path) -> smoothnet::Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let find = |names: &[&str]| {
        names
            .iter()
            .find_map(|n| headers.iter().position(|h| h == *n))
            .ok_or_else(|| Error::Config(format!("{} has none of the columns {names:?}", path.display())))
    };
    let e = find(&["epsilon", "final_epsilon"])?;
    let a = find(&["best_val_acc", "val_acc", "accuracy"])?;
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|err| Error::Config(format!("{:?}: {err}", &rec[i])))
        };
        points.push((parse(e)?, parse(a)?));
    }
    Ok(points)
}
