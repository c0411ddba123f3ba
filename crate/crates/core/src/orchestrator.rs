//! Turns a resolved config into runs and artifacts.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{FclError, Result};
use crate::federation::{run_experiment, ClientProfile, ExperimentData, ExperimentOutcome, FederationConfig};
use crate::metrics::{fmt_f64, write_artifact, ExperimentArtifact, RunSummary};
use crate::model::ModelParams;
use crate::rng::{stream, Purpose};
use crate::workload::{
    build_schedule, export_dataset, generate_overlapping_dataset, partition_noniid,
    split_train_test, Scheme,
};

pub fn federation_config(cfg: &ExperimentConfig, seed: u64) -> FederationConfig {
    let f = &cfg.federation;
    FederationConfig {
        num_clients: cfg.partition.num_clients,
        clients_per_round: cfg.clients_per_round(),
        rounds_per_task: f.rounds_per_task,
        local_epochs: f.local_epochs,
        batch_size: f.batch_size,
        lr: f.lr,
        aggregation: f.aggregation,
        window: f.window,
        strategy: f.continual_strategy(),
        seed,
    }
}

/// Explicit profiles, or generated ones packed round-robin onto the nodes.
pub fn client_profiles(cfg: &ExperimentConfig, seed: u64) -> Vec<ClientProfile> {
    let r = &cfg.resources;
    if let Some(p) = &r.profiles {
        let mut p = p.clone();
        p.sort_by_key(|c| c.client_id);
        return p;
    }
    let n = cfg.partition.num_clients;
    let nodes = match r.clients_per_node {
        Some(per) => n.div_ceil(per),
        None => r.nodes,
    };
    let mut rng = stream(seed, Purpose::Resources, 0);
    (0..n)
        .map(|c| {
            let jitter = if r.speed_jitter > 0.0 {
                r.speed_jitter * rng.random_range(-1.0..1.0)
            } else {
                0.0
            };
            ClientProfile {
                client_id: c,
                speed_factor: r.speed * (1.0 + jitter),
                node_id: c % nodes,
                link_latency_s: r.link_latency_s,
                link_throughput_bps: r.link_throughput_bps,
            }
        })
        .collect()
}

/// Generates the data, shards, schedule, profiles and initial model of one seed.
pub fn prepare_run(cfg: &ExperimentConfig, seed: u64) -> Result<(FederationConfig, ExperimentData, ModelParams)> {
    let (dataset, tasks) = generate_overlapping_dataset(&cfg.dataset, seed)?;
    let shards = partition_noniid(&dataset, &tasks, cfg.partition.num_clients, cfg.partition.alpha, seed)?;
    let (train_shards, test_shards) = split_train_test(&shards, cfg.partition.test_fraction)?;
    let schedule = build_schedule(cfg.schedule.scheme, cfg.partition.num_clients, tasks.len(), seed)?;
    let initial = ModelParams::init(
        dataset.input_dim(),
        &cfg.model.hidden,
        dataset.num_classes,
        &mut stream(seed, Purpose::ModelInit, 0),
    )?;
    let data = ExperimentData {
        dataset,
        tasks,
        train_shards,
        test_shards,
        schedule,
        profiles: client_profiles(cfg, seed),
    };
    Ok((federation_config(cfg, seed), data, initial))
}

pub fn run_seed_outcome(cfg: &ExperimentConfig, seed: u64) -> Result<(ExperimentData, ExperimentOutcome)> {
    let (fed, data, initial) = prepare_run(cfg, seed)?;
    let outcome = run_experiment(&fed, &data, &initial)?;
    Ok((data, outcome))
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentArtifact> {
    let start = Instant::now();
    let (data, outcome) = run_seed_outcome(cfg, seed)?;
    Ok(ExperimentArtifact {
        config_snapshot: cfg.clone(),
        seed,
        records: outcome.records,
        schedule: data.schedule,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// One line of human-readable progress per finished seed.
pub fn summary_line(s: &RunSummary, wall_time_s: f64) -> String {
    format!(
        "{} seed={} scheme={} window={} strategy={} rounds={} final_avg_accuracy={:.4} mean_avg_accuracy={:.4} wall_time_s={:.2}",
        s.experiment_name,
        s.seed,
        s.scheme,
        s.window,
        s.strategy,
        s.num_rounds,
        s.final_avg_accuracy,
        s.mean_avg_accuracy,
        wall_time_s
    )
}

/// Runs every seed and writes its artifacts. `on_seed` sees each summary as it lands.
pub fn run_all(
    cfg: &ExperimentConfig,
    mut on_seed: impl FnMut(&RunSummary, f64),
) -> Result<Vec<RunSummary>> {
    let out = Path::new(&cfg.out_dir);
    let mut summaries = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let artifact = run_seed(cfg, seed)?;
        let summary = write_artifact(&artifact, out)?;
        on_seed(&summary, artifact.wall_time_s);
        summaries.push(summary);
    }
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRow {
    pub scheme: Scheme,
    pub mean_final_avg_accuracy: f64,
    pub per_seed: BTreeMap<u64, f64>,
}

pub const COMPARISON_FILE: &str = "scheme_comparison.csv";

/// Runs the config under all three schemes. Per-scheme artifacts go to
/// `<out>/<experiment_name>-<scheme>/<seed>/`, the table to
/// `<out>/<experiment_name>/scheme_comparison.csv`.
pub fn compare_schemes(
    cfg: &ExperimentConfig,
    mut on_seed: impl FnMut(&RunSummary, f64),
) -> Result<Vec<SchemeRow>> {
    let mut rows = Vec::with_capacity(3);
    for scheme in Scheme::ALL {
        let mut variant = cfg.clone();
        variant.schedule.scheme = scheme;
        variant.experiment_name = format!("{}-{}", cfg.experiment_name, scheme.name());
        let variant = variant.resolve()?;
        let summaries = run_all(&variant, &mut on_seed)?;
        let per_seed: BTreeMap<u64, f64> = summaries.iter().map(|s| (s.seed, s.final_avg_accuracy)).collect();
        let mean = per_seed.values().sum::<f64>() / per_seed.len() as f64;
        rows.push(SchemeRow {
            scheme,
            mean_final_avg_accuracy: mean,
            per_seed,
        });
    }
    let dir = Path::new(&cfg.out_dir).join(&cfg.experiment_name);
    std::fs::create_dir_all(&dir).map_err(|e| FclError::io(&dir, e))?;
    let path = dir.join(COMPARISON_FILE);
    std::fs::write(&path, comparison_csv(&rows)).map_err(|e| FclError::io(&path, e))?;
    Ok(rows)
}

/// `scheme,mean_final_avg_accuracy,per_seed_json`
pub fn comparison_csv(rows: &[SchemeRow]) -> String {
    let mut out = String::from("scheme,mean_final_avg_accuracy,per_seed_json\n");
    for row in rows {
        let seeds: Vec<String> = row
            .per_seed
            .iter()
            .map(|(s, v)| format!("\"\"{s}\"\":{}", fmt_f64(*v)))
            .collect();
        out.push_str(&format!(
            "{},{},\"{{{}}}\"\n",
            row.scheme.name(),
            fmt_f64(row.mean_final_avg_accuracy),
            seeds.join(",")
        ));
    }
    out
}

/// Writes the first seed's dataset in the documented export format.
pub fn export_dataset_file(cfg: &ExperimentConfig, path: &Path) -> Result<usize> {
    let (dataset, _) = generate_overlapping_dataset(&cfg.dataset, cfg.seeds[0])?;
    let file = std::fs::File::create(path).map_err(|e| FclError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    export_dataset(&dataset, &mut w).map_err(|e| FclError::io(path, e))?;
    std::io::Write::flush(&mut w).map_err(|e| FclError::io(path, e))?;
    Ok(dataset.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn tiny(out: &Path) -> ExperimentConfig {
        parse_config_str(&format!(
            "experiment_name = \"tiny\"\nout_dir = {:?}\nseeds = [1, 2]\n\
             dataset.num_tasks = 3\ndataset.classes_per_task = 2\ndataset.examples_per_class = 15\n\
             dataset.input_dim = 6\npartition.num_clients = 3\nfederation.rounds_per_task = 2\n\
             model.hidden = [8]\n",
            out.display().to_string()
        ))
        .unwrap()
    }

    #[test]
    fn generated_profiles_are_round_robin() {
        let cfg = parse_config_str(
            "experiment_name = \"r\"\npartition.num_clients = 7\nresources.nodes = 3\nresources.speed_jitter = 0.2\n",
        )
        .unwrap();
        let p = client_profiles(&cfg, 0);
        assert_eq!(p.iter().map(|c| c.node_id).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2, 0]);
        assert!(p.iter().all(|c| (80.0..=120.0).contains(&c.speed_factor)));
        assert_eq!(p, client_profiles(&cfg, 0));

        let cfg = parse_config_str(
            "experiment_name = \"r\"\npartition.num_clients = 7\nresources.clients_per_node = 2\n",
        )
        .unwrap();
        let nodes: std::collections::BTreeSet<usize> = client_profiles(&cfg, 0).iter().map(|c| c.node_id).collect();
        assert_eq!(nodes.len(), 4);
    }

    #[test]
    fn one_directory_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let mut lines = Vec::new();
        let summaries = run_all(&cfg, |s, t| lines.push(summary_line(s, t))).unwrap();
        assert_eq!(summaries.len(), 2);
        assert_eq!(lines.len(), 2);
        for seed in [1, 2] {
            let run = dir.path().join("tiny").join(seed.to_string());
            for f in ["rounds.csv", "summary.json", "config.resolved.json"] {
                assert!(run.join(f).is_file(), "{f}");
            }
        }
    }

    #[test]
    fn comparison_has_three_rows_matching_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let rows = compare_schemes(&cfg, |_, _| {}).unwrap();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            let mut finals = Vec::new();
            for seed in &cfg.seeds {
                let path = dir
                    .path()
                    .join(format!("tiny-{}", row.scheme.name()))
                    .join(seed.to_string())
                    .join("summary.json");
                let s: RunSummary = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
                finals.push(s.final_avg_accuracy);
            }
            let mean = finals.iter().sum::<f64>() / finals.len() as f64;
            assert!((mean - row.mean_final_avg_accuracy).abs() < 1e-12);
        }
        let table = std::fs::read_to_string(dir.path().join("tiny").join(COMPARISON_FILE)).unwrap();
        assert_eq!(table.lines().count(), 4);
        let mut reader = csv::Reader::from_reader(table.as_bytes());
        for rec in reader.records() {
            let rec = rec.unwrap();
            let per_seed: BTreeMap<String, f64> = serde_json::from_str(&rec[2]).unwrap();
            assert_eq!(per_seed.len(), 2);
        }
    }

    #[test]
    fn export_writes_every_example() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let path = dir.path().join("data.csv");
        let n = export_dataset_file(&cfg, &path).unwrap();
        assert_eq!(n, 3 * 2 * 15);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), n);
        let err = export_dataset_file(&cfg, &dir.path().join("no/such/dir.csv")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
