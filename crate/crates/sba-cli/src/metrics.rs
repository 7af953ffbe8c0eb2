//! Metrics records, summaries, cost ratios, and curve files.
//!
//! Runs append one self-contained JSON record per epoch to a single
//! line-delimited file, so partially complete experiments stay readable.
//! Summaries report the median of the final five epochs' test accuracy per
//! run. The cost ratio compares cumulative training wall-clock to the first
//! epoch reaching a target argmax accuracy.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use sba_core::trainer::EpochMetrics;

use crate::config::{CliError, CliResult};

/// One epoch of one run, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub config_hash: String,
    pub epoch: usize,
    pub train_loss_primary: f64,
    pub train_loss_constraint: Option<f64>,
    pub train_accuracy: f64,
    pub test_accuracy_argmax: f64,
    pub test_accuracy_vote: f64,
    pub augmented_fraction: f64,
    pub wall_clock_seconds: f64,
}

impl MetricsRecord {
    pub fn from_epoch(run_id: &str, config_hash: &str, m: &EpochMetrics) -> MetricsRecord {
        MetricsRecord {
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            epoch: m.epoch,
            train_loss_primary: m.train_loss_primary,
            train_loss_constraint: m.train_loss_constraint,
            train_accuracy: m.train_accuracy,
            test_accuracy_argmax: m.test_accuracy_argmax,
            test_accuracy_vote: m.test_accuracy_vote,
            augmented_fraction: m.augmented_fraction,
            wall_clock_seconds: m.wall_clock_seconds,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// FNV-1a 64 over the canonical config lines; stable across re-runs.
pub fn config_hash(lines: &[String]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for line in lines {
        for byte in line.as_bytes().iter().chain(b"\n") {
            hash ^= *byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{hash:016x}")
}

/// Parses a line-delimited metrics file.
pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(line).map_err(|e| {
            CliError::Runtime(format!("{}:{}: bad metrics record: {e}", path.display(), i + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Records grouped by run id, preserving first-seen run order and sorting
/// epochs within each run.
pub fn group_by_run(records: &[MetricsRecord]) -> Vec<(String, Vec<MetricsRecord>)> {
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, Vec<MetricsRecord>> = BTreeMap::new();
    for r in records {
        if !map.contains_key(&r.run_id) {
            order.push(r.run_id.clone());
        }
        map.entry(r.run_id.clone()).or_default().push(r.clone());
    }
    order
        .into_iter()
        .map(|id| {
            let mut v = map.remove(&id).expect("id present");
            v.sort_by_key(|r| r.epoch);
            (id, v)
        })
        .collect()
}

pub fn median(values: &mut Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// The reporting statistic: median over the final five epochs (fewer if the
/// run is shorter).
pub fn final5_median(run: &[MetricsRecord], field: fn(&MetricsRecord) -> f64) -> f64 {
    let tail = &run[run.len().saturating_sub(5)..];
    let mut values: Vec<f64> = tail.iter().map(field).collect();
    median(&mut values)
}

/// Summary row per run.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub run_id: String,
    pub config_hash: String,
    pub epochs: usize,
    pub final5_median_argmax: f64,
    pub final5_median_vote: f64,
    pub mean_epoch_seconds: f64,
}

pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    group_by_run(records)
        .into_iter()
        .map(|(run_id, run)| SummaryRow {
            run_id,
            config_hash: run[0].config_hash.clone(),
            epochs: run.len(),
            final5_median_argmax: final5_median(&run, |r| r.test_accuracy_argmax),
            final5_median_vote: final5_median(&run, |r| r.test_accuracy_vote),
            mean_epoch_seconds: run.iter().map(|r| r.wall_clock_seconds).sum::<f64>()
                / run.len() as f64,
        })
        .collect()
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "run_id\tconfig_hash\tepochs\tfinal5_median_argmax\tfinal5_median_vote\tmean_epoch_seconds\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
            r.run_id,
            r.config_hash,
            r.epochs,
            r.final5_median_argmax,
            r.final5_median_vote,
            r.mean_epoch_seconds
        ));
    }
    out
}

/// Result of a time-to-target comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostRatioOutcome {
    /// `t_a / t_b`: cumulative training seconds to the first epoch whose
    /// argmax test accuracy reaches the target.
    Ratio(f64),
    /// At least one run never reached the target.
    NotReached { a_reached: bool, b_reached: bool },
}

impl fmt::Display for CostRatioOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostRatioOutcome::Ratio(r) => write!(f, "cost ratio t1/t2 = {r:.4}"),
            CostRatioOutcome::NotReached { a_reached, b_reached } => write!(
                f,
                "target not reached (a: {}, b: {})",
                if *a_reached { "reached" } else { "not reached" },
                if *b_reached { "reached" } else { "not reached" },
            ),
        }
    }
}

/// Cumulative training seconds up to the first epoch with argmax accuracy
/// at or above `target`; `None` when never reached.
pub fn time_to_target(run: &[MetricsRecord], target: f64) -> Option<f64> {
    let mut cumulative = 0.0;
    for r in run {
        cumulative += r.wall_clock_seconds;
        if r.test_accuracy_argmax >= target {
            return Some(cumulative);
        }
    }
    None
}

pub fn cost_ratio(
    run_a: &[MetricsRecord],
    run_b: &[MetricsRecord],
    target: f64,
) -> CostRatioOutcome {
    let ta = time_to_target(run_a, target);
    let tb = time_to_target(run_b, target);
    match (ta, tb) {
        (Some(ta), Some(tb)) => CostRatioOutcome::Ratio(ta / tb),
        (a, b) => CostRatioOutcome::NotReached {
            a_reached: a.is_some(),
            b_reached: b.is_some(),
        },
    }
}

/// Writes one delimited curve file per run: epoch, train loss, both test
/// accuracies, augmented fraction, cumulative seconds.
pub fn emit_curves(records: &[MetricsRecord], out_dir: &Path) -> CliResult<Vec<std::path::PathBuf>> {
    if records.is_empty() {
        return Err(CliError::Runtime("no metrics records to plot".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut written = Vec::new();
    for (run_id, run) in group_by_run(records) {
        let mut text = String::from(
            "epoch,train_loss_primary,test_accuracy_argmax,test_accuracy_vote,augmented_fraction,cumulative_seconds\n",
        );
        let mut cumulative = 0.0;
        for r in &run {
            cumulative += r.wall_clock_seconds;
            text.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?}\n",
                r.epoch,
                r.train_loss_primary,
                r.test_accuracy_argmax,
                r.test_accuracy_vote,
                r.augmented_fraction,
                cumulative
            ));
        }
        let path = out_dir.join(format!("{run_id}.curve.csv"));
        std::fs::write(&path, text)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(run: &str, epoch: usize, acc: f64, secs: f64) -> MetricsRecord {
        MetricsRecord {
            run_id: run.to_string(),
            config_hash: "deadbeef".to_string(),
            epoch,
            train_loss_primary: 1.0 / (epoch + 1) as f64,
            train_loss_constraint: if epoch % 2 == 0 { Some(0.01) } else { None },
            train_accuracy: acc,
            test_accuracy_argmax: acc,
            test_accuracy_vote: acc + 0.001,
            augmented_fraction: 0.5,
            wall_clock_seconds: secs,
        }
    }

    #[test]
    fn records_roundtrip_through_json_lines() {
        let a = record("r1", 0, 0.8, 1.5);
        let b: MetricsRecord = serde_json::from_str(&a.to_line()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let lines = vec!["eta=0.1".to_string(), "omega=0.5".to_string()];
        assert_eq!(config_hash(&lines), config_hash(&lines));
        let other = vec!["eta=0.2".to_string(), "omega=0.5".to_string()];
        assert_ne!(config_hash(&lines), config_hash(&other));
    }

    #[test]
    fn final5_median_uses_last_five_epochs() {
        let run: Vec<MetricsRecord> = (0..10)
            .map(|e| record("r", e, e as f64 / 10.0, 1.0))
            .collect();
        // Last five accuracies: .5 .6 .7 .8 .9 -> median .7
        assert!((final5_median(&run, |r| r.test_accuracy_argmax) - 0.7).abs() < 1e-12);

        let short: Vec<MetricsRecord> = (0..3).map(|e| record("r", e, 0.5, 1.0)).collect();
        assert_eq!(final5_median(&short, |r| r.test_accuracy_argmax), 0.5);
    }

    #[test]
    fn identical_runs_have_unit_cost_ratio() {
        let run: Vec<MetricsRecord> = (0..5).map(|e| record("r", e, 0.2 * e as f64, 2.0)).collect();
        match cost_ratio(&run, &run, 0.5) {
            CostRatioOutcome::Ratio(r) => assert!((r - 1.0).abs() < 1e-12),
            other => panic!("expected ratio, got {other:?}"),
        }
    }

    #[test]
    fn unreachable_target_reports_not_reached_for_both() {
        let run: Vec<MetricsRecord> = (0..5).map(|e| record("r", e, 0.1, 2.0)).collect();
        match cost_ratio(&run, &run, 0.99) {
            CostRatioOutcome::NotReached { a_reached, b_reached } => {
                assert!(!a_reached);
                assert!(!b_reached);
            }
            other => panic!("expected not reached, got {other:?}"),
        }
    }

    #[test]
    fn cost_ratio_uses_first_crossing_times() {
        // a reaches 0.5 at epoch 2 (cumulative 6s), b at epoch 0 (2s).
        let a: Vec<MetricsRecord> =
            vec![record("a", 0, 0.1, 2.0), record("a", 1, 0.3, 2.0), record("a", 2, 0.6, 2.0)];
        let b: Vec<MetricsRecord> = vec![record("b", 0, 0.7, 2.0), record("b", 1, 0.9, 2.0)];
        match cost_ratio(&a, &b, 0.5) {
            CostRatioOutcome::Ratio(r) => assert!((r - 3.0).abs() < 1e-12),
            other => panic!("expected ratio, got {other:?}"),
        }
    }

    #[test]
    fn curves_roundtrip_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let run: Vec<MetricsRecord> =
            (0..30).map(|e| record("r", e, 0.03 * e as f64, 0.125)).collect();
        let files = emit_curves(&run, dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 31); // header + 30 epochs

        // Columns parse back to the exact stored values ({:?} float
        // formatting round-trips f64).
        let mut cumulative = 0.0;
        for (i, line) in lines[1..].iter().enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[0].parse::<usize>().unwrap(), i);
            assert_eq!(
                cells[1].parse::<f64>().unwrap().to_bits(),
                run[i].train_loss_primary.to_bits()
            );
            assert_eq!(
                cells[2].parse::<f64>().unwrap().to_bits(),
                run[i].test_accuracy_argmax.to_bits()
            );
            cumulative += run[i].wall_clock_seconds;
            assert_eq!(cells[5].parse::<f64>().unwrap().to_bits(), cumulative.to_bits());
        }
    }

    #[test]
    fn summary_orders_runs_by_first_appearance() {
        let mut records = Vec::new();
        for e in 0..3 {
            records.push(record("b_run", e, 0.5, 1.0));
            records.push(record("a_run", e, 0.6, 1.0));
        }
        let rows = summarize(&records);
        assert_eq!(rows[0].run_id, "b_run");
        assert_eq!(rows[1].run_id, "a_run");
        let table = summary_table(&rows);
        assert!(table.starts_with("run_id\t"));
        assert_eq!(table.lines().count(), 3);
    }
}
