//! Sweep execution: runs the cross product on a small worker pool, appends
//! metrics records as epochs finish, writes one checkpoint per run, and
//! finishes with a summary table.
//!
//! Output layout under the experiment's `out_dir`:
//!
//! - `metrics.jsonl` — one record per epoch per run. Lines are appended as
//!   runs complete (so interrupted experiments keep partial results) and the
//!   file is rewritten in canonical run order on success, making re-runs
//!   byte-identical apart from wall-clock fields.
//! - `<run_id>.model.sba` — final checkpoint per run.
//! - `summary.tsv` — per-run median of the final five epochs' accuracy.
//! - `failures.tsv` — run id and error for every failed run, if any.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sba_core::data::Dataset;
use sba_core::network::save_checkpoint;
use sba_core::trainer::run_training;

use crate::config::{canonical_run_lines, CliError, CliResult, ExperimentSpec, PlannedRun};
use crate::metrics::{config_hash, summarize, summary_table, MetricsRecord};

/// Outcome of a whole experiment.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub completed: usize,
    pub failed: Vec<(String, String)>,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
}

impl ExperimentOutcome {
    pub fn all_ok(&self) -> bool {
        self.failed.is_empty()
    }
}

struct RunResult {
    index: usize,
    records: Vec<MetricsRecord>,
}

/// Executes every planned run of the spec. Failures are isolated: they are
/// recorded and sibling runs continue.
pub fn execute(spec: &ExperimentSpec) -> CliResult<ExperimentOutcome> {
    let runs = spec.enumerate()?;
    let (train, test) = spec.dataset.load()?;
    std::fs::create_dir_all(&spec.out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", spec.out_dir.display())))?;

    let metrics_path = spec.out_dir.join("metrics.jsonl");
    let live = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", metrics_path.display())))?;
    let live = Mutex::new(live);

    let results: Mutex<Vec<RunResult>> = Mutex::new(Vec::with_capacity(runs.len()));
    let failures: Mutex<Vec<(String, String)>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let workers = spec.workers.min(runs.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= runs.len() {
                    break;
                }
                let run = &runs[i];
                match execute_one(run, &train, &test, &spec.out_dir) {
                    Ok(records) => {
                        {
                            let mut file = live.lock().expect("metrics file lock");
                            for r in &records {
                                // One self-contained line per record; a crash
                                // mid-experiment leaves a readable prefix.
                                let _ = writeln!(file, "{}", r.to_line());
                            }
                        }
                        results.lock().expect("results lock").push(RunResult {
                            index: run.index,
                            records,
                        });
                    }
                    Err(e) => {
                        failures
                            .lock()
                            .expect("failures lock")
                            .push((run.run_id.clone(), e.to_string()));
                    }
                }
            });
        }
    });

    let mut results = results.into_inner().expect("threads joined");
    let failed = failures.into_inner().expect("threads joined");
    results.sort_by_key(|r| r.index);

    // Canonicalize the metrics file in run order so re-runs are
    // byte-identical (except wall-clock values) regardless of worker
    // interleaving.
    let mut canonical = String::new();
    let mut all_records = Vec::new();
    for r in &results {
        for record in &r.records {
            canonical.push_str(&record.to_line());
            canonical.push('\n');
            all_records.push(record.clone());
        }
    }
    std::fs::write(&metrics_path, canonical)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", metrics_path.display())))?;

    let summary_path = spec.out_dir.join("summary.tsv");
    std::fs::write(&summary_path, summary_table(&summarize(&all_records)))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", summary_path.display())))?;

    if !failed.is_empty() {
        let failures_path = spec.out_dir.join("failures.tsv");
        let mut text = String::from("run_id\terror\n");
        for (id, err) in &failed {
            text.push_str(&format!("{id}\t{err}\n"));
        }
        std::fs::write(&failures_path, text).map_err(|e| {
            CliError::Runtime(format!("cannot write {}: {e}", failures_path.display()))
        })?;
    }

    Ok(ExperimentOutcome {
        completed: results.len(),
        failed,
        metrics_path,
        summary_path,
    })
}

fn execute_one(
    run: &PlannedRun,
    train: &Dataset,
    test: &Dataset,
    out_dir: &Path,
) -> CliResult<Vec<MetricsRecord>> {
    let hash = config_hash(&canonical_run_lines(&run.config));
    let trained = run_training(&run.config, train, test)?;
    let records: Vec<MetricsRecord> = trained
        .metrics
        .iter()
        .map(|m| MetricsRecord::from_epoch(&run.run_id, &hash, m))
        .collect();
    let model_path = out_dir.join(format!("{}.model.sba", run.run_id));
    save_checkpoint(&trained.net, &model_path)?;
    Ok(records)
}
