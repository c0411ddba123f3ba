//! Run artifacts on disk.
//!
//! Each seed of an experiment writes to `<out>/<experiment_name>/<seed>/`:
//!
//! * `rounds.csv`: one row per round. Floats use 17 significant digits, and
//!   the per-client and per-task maps are JSON objects inside quoted cells.
//! * `summary.json`: headline numbers plus the identifiers needed to line up
//!   runs across schemes, windows and strategies.
//! * `config.resolved.json`: the fully resolved configuration.
//!
//! Nothing time-dependent is written, so identical configs give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{FclError, Result};
use crate::federation::RoundRecord;
use crate::workload::TaskMatrix;

pub const ROUNDS_HEADER: [&str; 6] = [
    "round",
    "step",
    "avg_accuracy",
    "federator_duration_s",
    "client_durations_json",
    "per_task_accuracy_json",
];

/// Everything one seed of an experiment produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentArtifact {
    pub config_snapshot: ExperimentConfig,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub schedule: TaskMatrix,
    pub wall_time_s: f64,
}

/// `x` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn json_map(map: &BTreeMap<usize, f64>) -> String {
    let mut s = String::from("{");
    for (i, (k, v)) in map.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "\"{k}\":{}", fmt_f64(*v));
    }
    s.push('}');
    s
}

pub fn rounds_csv_bytes(records: &[RoundRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| FclError::workload(format!("csv encoding: {e}"));
    w.write_record(ROUNDS_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.round_id.to_string(),
            r.step.to_string(),
            fmt_f64(r.avg_accuracy),
            fmt_f64(r.federator_duration_s),
            json_map(&r.client_durations_s),
            json_map(&r.per_task_accuracy),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| FclError::workload(format!("csv encoding: {e}")))
}

pub fn write_rounds_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let bytes = rounds_csv_bytes(records)?;
    std::fs::write(path, bytes).map_err(|e| FclError::io(path, e))
}

/// One row of `rounds.csv` as read back.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub round_id: usize,
    pub step: usize,
    pub avg_accuracy: f64,
    pub federator_duration_s: f64,
    pub client_durations_s: BTreeMap<usize, f64>,
    pub per_task_accuracy: BTreeMap<usize, f64>,
}

impl From<&RoundRecord> for RoundRow {
    fn from(r: &RoundRecord) -> Self {
        RoundRow {
            round_id: r.round_id,
            step: r.step,
            avg_accuracy: r.avg_accuracy,
            federator_duration_s: r.federator_duration_s,
            client_durations_s: r.client_durations_s.clone(),
            per_task_accuracy: r.per_task_accuracy.clone(),
        }
    }
}

fn parse_json_map(cell: &str, line: usize, column: &str) -> Result<BTreeMap<usize, f64>> {
    let raw: BTreeMap<String, f64> = serde_json::from_str(cell)
        .map_err(|e| FclError::workload(format!("line {line}, {column}: {e}")))?;
    raw.into_iter()
        .map(|(k, v)| {
            k.parse::<usize>()
                .map(|k| (k, v))
                .map_err(|e| FclError::workload(format!("line {line}, {column}: key {k:?}: {e}")))
        })
        .collect()
}

/// Parses the contents of a `rounds.csv` file.
pub fn parse_rounds_csv(text: &str) -> Result<Vec<RoundRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| FclError::workload(format!("rounds.csv header: {e}")))?;
    if headers.iter().ne(ROUNDS_HEADER) {
        return Err(FclError::workload("rounds.csv header does not match"));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| FclError::workload(format!("line {line}: {e}")))?;
        if rec.len() != ROUNDS_HEADER.len() {
            return Err(FclError::workload(format!("line {line}: expected 6 fields")));
        }
        let int = |j: usize| {
            rec[j]
                .parse::<usize>()
                .map_err(|e| FclError::workload(format!("line {line}, {}: {e}", ROUNDS_HEADER[j])))
        };
        let float = |j: usize| {
            rec[j]
                .parse::<f64>()
                .map_err(|e| FclError::workload(format!("line {line}, {}: {e}", ROUNDS_HEADER[j])))
        };
        rows.push(RoundRow {
            round_id: int(0)?,
            step: int(1)?,
            avg_accuracy: float(2)?,
            federator_duration_s: float(3)?,
            client_durations_s: parse_json_map(&rec[4], line, ROUNDS_HEADER[4])?,
            per_task_accuracy: parse_json_map(&rec[5], line, ROUNDS_HEADER[5])?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment_name: String,
    pub seed: u64,
    pub scheme: String,
    pub window: String,
    pub strategy: String,
    pub num_clients: usize,
    pub num_tasks: usize,
    pub num_rounds: usize,
    /// `avg_accuracy` of the last round; zero when there were no rounds.
    pub final_avg_accuracy: f64,
    pub mean_avg_accuracy: f64,
    pub final_per_task_accuracy: BTreeMap<usize, f64>,
    pub mean_client_duration_s: f64,
    pub mean_federator_duration_s: f64,
    pub schedule: Vec<Vec<usize>>,
    pub config: ExperimentConfig,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl RunSummary {
    pub fn from_artifact(a: &ExperimentArtifact) -> Self {
        let cfg = &a.config_snapshot;
        let last = a.records.last();
        RunSummary {
            experiment_name: cfg.experiment_name.clone(),
            seed: a.seed,
            scheme: cfg.schedule.scheme.name().into(),
            window: cfg.federation.window.name().into(),
            strategy: cfg.federation.strategy.name().into(),
            num_clients: cfg.partition.num_clients,
            num_tasks: cfg.dataset.num_tasks,
            num_rounds: a.records.len(),
            final_avg_accuracy: last.map_or(0.0, |r| r.avg_accuracy),
            mean_avg_accuracy: mean(a.records.iter().map(|r| r.avg_accuracy)),
            final_per_task_accuracy: last.map(|r| r.per_task_accuracy.clone()).unwrap_or_default(),
            mean_client_duration_s: mean(
                a.records.iter().flat_map(|r| r.client_durations_s.values().copied()),
            ),
            mean_federator_duration_s: mean(a.records.iter().map(|r| r.federator_duration_s)),
            schedule: a.schedule.rows().to_vec(),
            config: cfg.clone(),
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| FclError::workload(format!("json encoding: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_summary_json(artifact: &ExperimentArtifact, path: &Path) -> Result<RunSummary> {
    let summary = RunSummary::from_artifact(artifact);
    std::fs::write(path, to_json(&summary)?).map_err(|e| FclError::io(path, e))?;
    Ok(summary)
}

pub fn write_config_json(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(cfg)?).map_err(|e| FclError::io(path, e))
}

/// `<out>/<experiment_name>/<seed>`
pub fn run_dir(out: &Path, experiment_name: &str, seed: u64) -> PathBuf {
    out.join(experiment_name).join(seed.to_string())
}

/// Writes all three files for one seed and returns its summary.
pub fn write_artifact(artifact: &ExperimentArtifact, out: &Path) -> Result<RunSummary> {
    let dir = run_dir(out, &artifact.config_snapshot.experiment_name, artifact.seed);
    std::fs::create_dir_all(&dir).map_err(|e| FclError::io(&dir, e))?;
    write_rounds_csv(&artifact.records, &dir.join("rounds.csv"))?;
    write_config_json(&artifact.config_snapshot, &dir.join("config.resolved.json"))?;
    write_summary_json(artifact, &dir.join("summary.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;
    use crate::workload::schedule_column;

    fn record(round_id: usize, acc: [f64; 2]) -> RoundRecord {
        let per_task = BTreeMap::from([(0, acc[0]), (1, acc[1])]);
        RoundRecord {
            round_id,
            step: round_id / 2,
            selected: vec![0, 1],
            skipped: vec![],
            federator_duration_s: 1.0 / 3.0 + round_id as f64,
            client_durations_s: BTreeMap::from([(0, 0.1 + 0.2), (1, std::f64::consts::PI)]),
            avg_accuracy: (acc[0] + acc[1]) / 2.0,
            per_task_accuracy: per_task,
        }
    }

    fn artifact(records: Vec<RoundRecord>) -> ExperimentArtifact {
        ExperimentArtifact {
            config_snapshot: parse_config_str("experiment_name = \"m\"\npartition.num_clients = 2\n").unwrap(),
            seed: 4,
            records,
            schedule: schedule_column(2, 2).unwrap(),
            wall_time_s: 12.5,
        }
    }

    #[test]
    fn empty_records_give_header_only() {
        let text = String::from_utf8(rounds_csv_bytes(&[]).unwrap()).unwrap();
        assert_eq!(
            text,
            "round,step,avg_accuracy,federator_duration_s,client_durations_json,per_task_accuracy_json\n"
        );
        assert!(parse_rounds_csv(&text).unwrap().is_empty());
    }

    #[test]
    fn two_records_three_lines_and_exact_reread() {
        let records = vec![record(0, [0.7, 1.0 / 7.0]), record(1, [0.123_456_789_012_345_68, 0.0])];
        let text = String::from_utf8(rounds_csv_bytes(&records).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 3);
        let rows = parse_rounds_csv(&text).unwrap();
        let expected: Vec<RoundRow> = records.iter().map(RoundRow::from).collect();
        assert_eq!(rows, expected);
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(3.0), "3.0000000000000000e0");
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(parse_rounds_csv("a,b\n").is_err());
        let head = ROUNDS_HEADER.join(",");
        assert!(parse_rounds_csv(&format!("{head}\n0,0,x,1,{{}},{{}}\n")).is_err());
        assert!(parse_rounds_csv(&format!("{head}\n0,0,1,1,\"{{\"\"a\"\":1}}\",{{}}\n")).is_err());
    }

    #[test]
    fn summary_fields() {
        let a = artifact(vec![record(0, [0.5, 0.25]), record(1, [0.75, 1.0])]);
        let s = RunSummary::from_artifact(&a);
        assert_eq!(s.final_avg_accuracy, a.records[1].avg_accuracy);
        let recomputed = (a.records[0].avg_accuracy + a.records[1].avg_accuracy) / 2.0;
        assert!((s.mean_avg_accuracy - recomputed).abs() < 1e-12);
        assert_eq!(s.scheme, "column");
        assert_eq!(s.num_rounds, 2);
    }

    #[test]
    fn artifact_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = artifact(vec![record(0, [0.5, 0.25])]);
        write_artifact(&a, dir.path()).unwrap();
        let run = run_dir(dir.path(), "m", 4);
        let first = std::fs::read(run.join("summary.json")).unwrap();
        let mut b = a.clone();
        b.wall_time_s = 99.0;
        write_artifact(&b, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(run.join("summary.json")).unwrap());
        let parsed: RunSummary = serde_json::from_slice(&first).unwrap();
        assert_eq!(parsed, RunSummary::from_artifact(&a));
        let cfg: ExperimentConfig =
            serde_json::from_slice(&std::fs::read(run.join("config.resolved.json")).unwrap()).unwrap();
        assert_eq!(cfg, a.config_snapshot);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_rounds_csv(&[], &dir.path().join("missing/rounds.csv")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
