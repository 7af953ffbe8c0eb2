//! `sba` — experiment runner.
//!
//! Exit codes: 0 success, 1 config error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sba_cli::config::{CliError, CliResult, ConfigMap, DatasetSpec, ExperimentSpec};
use sba_cli::metrics::{cost_ratio, emit_curves, group_by_run, read_metrics, MetricsRecord};
use sba_cli::runner::execute;
use sba_core::inference::{evaluate, EvalMode};
use sba_core::network::load_checkpoint;
use sba_core::vicinity::VicinityConfig;

#[derive(Parser)]
#[command(name = "sba", about = "Stochastic batch augmentation training lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalModeArg {
    Argmax,
    Vote,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Run every training run described by a config file (sweeps included).
    Run {
        /// Experiment config path.
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset described by a config file.
    Eval {
        /// Model checkpoint (written by `run`).
        checkpoint: PathBuf,
        /// Config file holding at least the dataset.* keys; vicinity.* keys
        /// configure vote evaluation when present.
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "argmax")]
        eval_mode: EvalModeArg,
        /// Which half of the dataset spec to evaluate.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Seed for the evaluation streams (vote mode).
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
    /// Time-to-target ratio t1/t2 between two runs' metrics.
    CostRatio {
        /// Metrics file of the reference (slower) run, e.g. always-on
        /// augmentation.
        metrics_a: PathBuf,
        /// Metrics file of the compared run.
        metrics_b: PathBuf,
        /// Target argmax test accuracy both runs must reach.
        #[arg(long)]
        target: f64,
        /// Run id inside metrics_a (required when the file holds several).
        #[arg(long)]
        run_a: Option<String>,
        /// Run id inside metrics_b (required when the file holds several).
        #[arg(long)]
        run_b: Option<String>,
    },
    /// Emit per-run curve files (delimited text) from a metrics file.
    Curves { metrics: PathBuf, out_dir: PathBuf },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("runtime failure: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch() -> CliResult<()> {
    match Cli::parse().command {
        Command::Run { config } => {
            let spec = ExperimentSpec::from_file(&config)?;
            let runs = spec.enumerate()?.len();
            println!("executing {runs} run(s) into {}", spec.out_dir.display());
            let outcome = execute(&spec)?;
            println!(
                "completed {}/{} run(s); metrics: {}; summary: {}",
                outcome.completed,
                runs,
                outcome.metrics_path.display(),
                outcome.summary_path.display()
            );
            for (id, err) in &outcome.failed {
                eprintln!("run {id} failed: {err}");
            }
            if outcome.all_ok() {
                Ok(())
            } else {
                Err(CliError::Runtime(format!(
                    "{} run(s) failed; partial results preserved",
                    outcome.failed.len()
                )))
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            eval_mode,
            split,
            eval_seed,
        } => {
            let net = load_checkpoint(&checkpoint)?;
            let map = ConfigMap::load(&dataset)?;
            let dataset_spec = DatasetSpec::from_config(&map)?;
            let mut vicinity = VicinityConfig::default();
            let mut scratch = sba_core::trainer::RunConfig::default();
            for key in [
                "vicinity.p_gauss",
                "vicinity.q_drop",
                "vicinity.sigma",
                "vicinity.tau",
                "vicinity.keep_prob",
                "vicinity.basis_mode",
            ] {
                if let Some(raw) = map.get(key) {
                    sba_cli::config::apply_run_key(&mut scratch, key, raw)?;
                    vicinity = scratch.vicinity;
                }
            }
            let (train, test) = dataset_spec.load()?;
            let ds = match split {
                SplitArg::Train => train,
                SplitArg::Test => test,
            };
            let mode = match eval_mode {
                EvalModeArg::Argmax => EvalMode::Argmax,
                EvalModeArg::Vote => EvalMode::Vote,
            };
            let result = evaluate(&net, &ds, mode, &vicinity, eval_seed)?;
            println!(
                "samples: {}  accuracy: {:.6}  error_rate: {:.6}",
                ds.len(),
                result.accuracy,
                result.error_rate
            );
            Ok(())
        }
        Command::CostRatio {
            metrics_a,
            metrics_b,
            target,
            run_a,
            run_b,
        } => {
            let a = select_run(&read_metrics(&metrics_a)?, run_a.as_deref(), "metrics_a")?;
            let b = select_run(&read_metrics(&metrics_b)?, run_b.as_deref(), "metrics_b")?;
            println!("{}", cost_ratio(&a, &b, target));
            Ok(())
        }
        Command::Curves { metrics, out_dir } => {
            let records = read_metrics(&metrics)?;
            let files = emit_curves(&records, &out_dir)?;
            for f in &files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn select_run(
    records: &[MetricsRecord],
    run_id: Option<&str>,
    which: &str,
) -> CliResult<Vec<MetricsRecord>> {
    let runs = group_by_run(records);
    match run_id {
        Some(id) => runs
            .into_iter()
            .find(|(rid, _)| rid == id)
            .map(|(_, r)| r)
            .ok_or_else(|| CliError::Config(format!("{which}: run id `{id}` not found"))),
        None => {
            if runs.len() == 1 {
                Ok(runs.into_iter().next().expect("one run").1)
            } else {
                let ids: Vec<String> = runs.iter().map(|(id, _)| id.clone()).collect();
                Err(CliError::Config(format!(
                    "{which} holds {} runs; pick one with --run-a/--run-b: {}",
                    ids.len(),
                    ids.join(", ")
                )))
            }
        }
    }
}
