use std::path::Path;

use fclbench::config::{parse_config_str, parse_config_with, ExperimentConfig};
use fclbench::continual::WindowMode;
use fclbench::metrics::{parse_rounds_csv, run_dir, RunSummary};
use fclbench::orchestrator::{compare_schemes, export_dataset_file, run_all, run_seed};
use fclbench::workload::{parse_exported_dataset, Scheme};
use fclbench::FclError;

fn small(out: &Path, extra: &str) -> ExperimentConfig {
    parse_config_str(&format!(
        "experiment_name = \"small\"\nout_dir = {:?}\nseeds = [3]\n\
         dataset.num_tasks = 4\ndataset.classes_per_task = 3\ndataset.examples_per_class = 20\n\
         dataset.input_dim = 8\npartition.num_clients = 3\nfederation.rounds_per_task = 2\n\
         model.hidden = [12]\n{extra}",
        out.display().to_string()
    ))
    .unwrap()
}

#[test]
fn resolved_config_reparses_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [
        "",
        "federation.strategy = \"ewc\"\nfederation.ewc.lambda = 5.0\n",
        "federation.strategy = \"gem\"\nschedule.scheme = \"balanced\"\nresources.nodes = 2\n",
    ] {
        let cfg = small(dir.path(), extra);
        let again = parse_config_str(&cfg.to_config_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }
}

#[test]
fn overrides_beat_environment_which_beats_file() {
    let text = "experiment_name = \"p\"\nout_dir = \"from-file\"\nfederation.lr = 0.1\n";
    let cfg = parse_config_with(text, &[], Some("from-env")).unwrap();
    assert_eq!(cfg.out_dir, "from-env");
    let cfg = parse_config_with(
        text,
        &["out_dir=from-flag".into(), "federation.lr=0.25".into(), "federation.window=sliding".into()],
        Some("from-env"),
    )
    .unwrap();
    assert_eq!(cfg.out_dir, "from-flag");
    assert_eq!(cfg.federation.lr, 0.25);
    assert_eq!(cfg.federation.window, WindowMode::Sliding);
}

#[test]
fn misspelled_key_names_its_path() {
    let err = parse_config_str("experiment_name = \"x\"\nfederation.local_epoch = 3\n").unwrap_err();
    assert!(matches!(err, FclError::Config(_)));
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("federation"), "{err}");
    assert!(err.to_string().contains("local_epoch"), "{err}");
}

#[test]
fn invalid_values_are_config_errors() {
    for bad in [
        "federation.lr = -1.0",
        "federation.clients_per_round = 9",
        "partition.alpha = 0.0",
        "schedule.scheme = \"diagonal\"",
        "dataset.num_tasks = 2\npartition.num_clients = 4\nschedule.scheme = \"balanced\"",
    ] {
        let err = parse_config_str(&format!("experiment_name = \"x\"\n{bad}\n")).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{bad}: {err}");
    }
}

#[test]
fn artifacts_match_in_memory_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "federation.strategy = \"ewc\"\n");
    let summaries = run_all(&cfg, |_, _| {}).unwrap();
    let artifact = run_seed(&cfg, 3).unwrap();
    let run = run_dir(dir.path(), "small", 3);

    let rows = parse_rounds_csv(&std::fs::read_to_string(run.join("rounds.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), artifact.records.len());
    assert_eq!(rows.len(), 4 * 2);
    for (row, rec) in rows.iter().zip(&artifact.records) {
        assert_eq!(row.avg_accuracy, rec.avg_accuracy);
        assert_eq!(row.per_task_accuracy, rec.per_task_accuracy);
    }

    let summary: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary, summaries[0]);
    assert_eq!(summary.final_avg_accuracy, artifact.records.last().unwrap().avg_accuracy);
    assert!(run.join("config.resolved.json").is_file());
}

#[test]
fn compare_schemes_writes_one_row_per_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "");
    let rows = compare_schemes(&cfg, |_, _| {}).unwrap();
    assert_eq!(rows.iter().map(|r| r.scheme).collect::<Vec<_>>(), Scheme::ALL.to_vec());
    let table = std::fs::read_to_string(dir.path().join("small").join("scheme_comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + Scheme::ALL.len());
    for scheme in Scheme::ALL {
        assert!(run_dir(dir.path(), &format!("small-{}", scheme.name()), 3).join("rounds.csv").is_file());
    }
}

#[test]
fn exported_dataset_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "");
    let path = dir.path().join("data.csv");
    let n = export_dataset_file(&cfg, &path).unwrap();
    let examples = parse_exported_dataset(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(examples.len(), n);
    assert_eq!(n, 4 * 3 * 20);
    assert!(examples.iter().all(|e| e.features.len() == 8 && e.task_id < 4 && e.label < 12));
}

#[test]
fn unwritable_output_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"").unwrap();
    let cfg = small(&blocker, "");
    let err = run_all(&cfg, |_, _| {}).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}
