//! Experiment configuration.
//!
//! Configs are flat text with one dotted key per line:
//!
//! ```text
//! experiment_name = "fcl-default"
//! seeds = [0, 1, 2]
//! schedule.scheme = "balanced"
//! federation.lr = 0.05
//! ```
//!
//! The syntax is a subset of TOML, so section headers (`[federation]`) are
//! accepted too. Every key not listed in [`ExperimentConfig`] is rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::continual::{ContinualStrategy, WindowMode};
use crate::error::{FclError, Result};
use crate::federation::{Aggregation, ClientProfile};
use crate::workload::{DatasetParams, Scheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_name: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dataset: DatasetParams,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub resources: ResourcesConfig,
}

fn default_out_dir() -> String {
    "runs".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub num_clients: usize,
    /// Dirichlet concentration; smaller is more skewed.
    pub alpha: f64,
    pub test_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            num_clients: 4,
            alpha: 0.5,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub scheme: Scheme,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            scheme: Scheme::Column,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Naive,
    Ewc,
    Gem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EwcSection {
    pub lambda: f64,
    pub fisher_samples: usize,
}

impl Default for EwcSection {
    fn default() -> Self {
        EwcSection {
            lambda: 100.0,
            fisher_samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GemSection {
    pub memory_per_task: usize,
    pub margin: f64,
}

impl Default for GemSection {
    fn default() -> Self {
        GemSection {
            memory_per_task: 32,
            margin: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    /// Defaults to every client.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
    pub rounds_per_task: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub aggregation: Aggregation,
    pub window: WindowMode,
    pub strategy: StrategyKind,
    pub ewc: EwcSection,
    pub gem: GemSection,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            clients_per_round: None,
            rounds_per_task: 10,
            local_epochs: 2,
            batch_size: 16,
            lr: 0.05,
            aggregation: Aggregation::FedAvg,
            window: WindowMode::Expanding,
            strategy: StrategyKind::Naive,
            ewc: EwcSection::default(),
            gem: GemSection::default(),
        }
    }
}

impl FederationSection {
    pub fn continual_strategy(&self) -> ContinualStrategy {
        match self.strategy {
            StrategyKind::Naive => ContinualStrategy::Naive,
            StrategyKind::Ewc => ContinualStrategy::Ewc {
                lambda: self.ewc.lambda,
                fisher_samples: self.ewc.fisher_samples,
            },
            StrategyKind::Gem => ContinualStrategy::Gem {
                memory_per_task: self.gem.memory_per_task,
                margin: self.gem.margin,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32, 32],
        }
    }
}

/// Client resources: either explicit `profiles` or a generator that packs
/// clients round-robin onto `nodes` machines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResourcesConfig {
    pub nodes: usize,
    /// When set, the node count becomes `ceil(num_clients / clients_per_node)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clients_per_node: Option<usize>,
    /// Examples per second of a client with no jitter.
    pub speed: f64,
    /// Each client's speed is `speed * (1 + speed_jitter * u)`, `u ~ U(-1, 1)`.
    pub speed_jitter: f64,
    pub link_latency_s: f64,
    #[serde(rename = "link_throughput_Bps")]
    pub link_throughput_bps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profiles: Option<Vec<ClientProfile>>,
}

impl Default for ResourcesConfig {
    fn default() -> Self {
        ResourcesConfig {
            nodes: 1,
            clients_per_node: None,
            speed: 100.0,
            speed_jitter: 0.0,
            link_latency_s: 0.05,
            link_throughput_bps: 12.5e6,
            profiles: None,
        }
    }
}

impl ExperimentConfig {
    /// Fills derived defaults and checks every constraint.
    pub fn resolve(mut self) -> Result<Self> {
        let n = self.partition.num_clients;
        if self.federation.clients_per_round.is_none() {
            self.federation.clients_per_round = Some(n);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn clients_per_round(&self) -> usize {
        self.federation
            .clients_per_round
            .unwrap_or(self.partition.num_clients)
    }

    fn validate(&self) -> Result<()> {
        let name = &self.experiment_name;
        if name.is_empty()
            || name == "."
            || name == ".."
            || name.contains(['/', '\\'])
        {
            return Err(FclError::config(format!(
                "experiment_name {name:?} must be a plain directory name"
            )));
        }
        if self.seeds.is_empty() {
            return Err(FclError::config("seeds must not be empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(FclError::config("seeds must be distinct"));
        }
        self.dataset.validate()?;

        let p = &self.partition;
        if p.num_clients == 0 {
            return Err(FclError::config("partition.num_clients must be at least 1"));
        }
        if !(p.alpha > 0.0 && p.alpha.is_finite()) {
            return Err(FclError::config("partition.alpha must be positive"));
        }
        if !(0.0..1.0).contains(&p.test_fraction) {
            return Err(FclError::config("partition.test_fraction must be in [0, 1)"));
        }
        if self.schedule.scheme == Scheme::Balanced && p.num_clients > self.dataset.num_tasks {
            return Err(FclError::config(format!(
                "schedule.scheme = balanced needs partition.num_clients ({}) <= dataset.num_tasks ({})",
                p.num_clients, self.dataset.num_tasks
            )));
        }

        let f = &self.federation;
        let k = self.clients_per_round();
        if k == 0 || k > p.num_clients {
            return Err(FclError::config(format!(
                "federation.clients_per_round must be in 1..={}",
                p.num_clients
            )));
        }
        if f.batch_size == 0 {
            return Err(FclError::config("federation.batch_size must be positive"));
        }
        if !(f.lr > 0.0 && f.lr.is_finite()) {
            return Err(FclError::config("federation.lr must be positive"));
        }
        f.continual_strategy()
            .validate()
            .map_err(|e| FclError::config(format!("federation.{}: {e}", f.strategy.name())))?;
        if self.model.hidden.contains(&0) {
            return Err(FclError::config("model.hidden widths must be positive"));
        }

        let r = &self.resources;
        if r.nodes == 0 || r.clients_per_node == Some(0) {
            return Err(FclError::config("resources.nodes and clients_per_node must be positive"));
        }
        if !(r.speed > 0.0 && r.speed.is_finite()) {
            return Err(FclError::config("resources.speed must be positive"));
        }
        if !(0.0..1.0).contains(&r.speed_jitter) {
            return Err(FclError::config("resources.speed_jitter must be in [0, 1)"));
        }
        if !(r.link_latency_s >= 0.0 && r.link_latency_s.is_finite()) {
            return Err(FclError::config("resources.link_latency_s must be >= 0"));
        }
        if !(r.link_throughput_bps > 0.0 && r.link_throughput_bps.is_finite()) {
            return Err(FclError::config("resources.link_throughput_Bps must be positive"));
        }
        if let Some(profiles) = &r.profiles {
            let ids: BTreeSet<usize> = profiles.iter().map(|p| p.client_id).collect();
            if ids.len() != profiles.len() || ids != (0..p.num_clients).collect() {
                return Err(FclError::config(format!(
                    "resources.profiles must list clients 0..{} exactly once",
                    p.num_clients
                )));
            }
            profiles
                .iter()
                .try_for_each(ClientProfile::validate)
                .map_err(|e| FclError::config(format!("resources.profiles: {e}")))?;
        }
        Ok(())
    }

    /// Renders the config as dotted `key = value` lines, sorted by key.
    pub fn to_config_string(&self) -> Result<String> {
        let table = Table::try_from(self)
            .map_err(|e| FclError::config(format!("cannot render config: {e}")))?;
        let mut lines = Vec::new();
        flatten(&table, "", &mut lines);
        let mut out = lines.join("\n");
        out.push('\n');
        Ok(out)
    }
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Naive => "naive",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Gem => "gem",
        }
    }
}

fn flatten(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in table {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match value {
            Value::Table(inner) => flatten(inner, &path, out),
            other => out.push(format!("{path} = {other}")),
        }
    }
}

/// Applies one `key=value` override to a raw config table.
///
/// The value is read as a TOML value when it parses as one and as a bare
/// string otherwise, so `schedule.scheme=column` works unquoted.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| FclError::config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(FclError::config(format!("override key {key:?} is malformed")));
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));

    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cursor = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(FclError::config(format!(
                    "override {key:?}: {} is not a section",
                    parts[..=depth].join(".")
                )))
            }
        };
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// Parses config text without overrides.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    parse_config_with(text, &[], None)
}

/// Parses config text, applies `overrides` in order, then validates.
///
/// `out_dir` replaces the file's `out_dir` before the overrides are applied.
pub fn parse_config_with(
    text: &str,
    overrides: &[String],
    out_dir: Option<&str>,
) -> Result<ExperimentConfig> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| FclError::config(e.to_string().trim_end().to_string()))?;
    if let Some(dir) = out_dir {
        table.insert("out_dir".into(), Value::String(dir.into()));
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(Value::Table(table))
        .map_err(|e| {
            let path = e.path().to_string();
            FclError::config(format!("{path}: {}", e.into_inner()))
        })?;
    cfg.resolve()
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    load_config(path, &[], None)
}

pub fn load_config(path: &Path, overrides: &[String], out_dir: Option<&str>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FclError::io(path, e))?;
    parse_config_with(&text, overrides, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "experiment_name = \"mini\"\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.federation.lr, 0.05);
        assert_eq!(cfg.federation.local_epochs, 2);
        assert_eq!(cfg.federation.rounds_per_task, 10);
        assert_eq!(cfg.federation.clients_per_round, Some(4));
        assert_eq!(cfg.dataset.num_tasks, 10);
        assert_eq!(cfg.dataset.classes_per_task, 5);
        assert_eq!(cfg.schedule.scheme, Scheme::Column);
        assert_eq!(cfg.federation.strategy, StrategyKind::Naive);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn missing_name_is_rejected() {
        let err = parse_config_str("seeds = [1]\n").unwrap_err();
        assert!(err.to_string().contains("experiment_name"), "{err}");
    }

    #[test]
    fn misspelled_key_is_named() {
        let err = parse_config_str("experiment_name = \"x\"\nschedule.scheem = \"column\"\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("scheem"), "{msg}");
        assert!(msg.contains("schedule"), "{msg}");
    }

    #[test]
    fn type_errors_carry_the_key_path() {
        let err = parse_config_str("experiment_name = \"x\"\nfederation.lr = \"fast\"\n").unwrap_err();
        assert!(err.to_string().contains("federation.lr"), "{err}");
        let err = parse_config_str("experiment_name = \"x\"\nschedule.scheme = \"diagonal\"\n").unwrap_err();
        assert!(err.to_string().contains("schedule.scheme"), "{err}");
    }

    #[test]
    fn syntax_errors_are_config_errors() {
        let err = parse_config_str("experiment_name = \n").unwrap_err();
        assert!(matches!(err, FclError::Config(_)));
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "experiment_name = \"rt\"\nseeds = [3, 9]\nschedule.scheme = \"shuffled\"\n\
                    federation.strategy = \"gem\"\nfederation.gem.margin = 0.1\n\
                    resources.clients_per_node = 3\n";
        let cfg = parse_config_str(text).unwrap();
        let rendered = cfg.to_config_string().unwrap();
        assert!(rendered.contains("federation.gem.margin = 0.1"), "{rendered}");
        let again = parse_config_str(&rendered).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.to_config_string().unwrap(), rendered);
    }

    #[test]
    fn explicit_profiles_round_trip() {
        let text = "experiment_name = \"p\"\npartition.num_clients = 2\n\
            resources.profiles = [\n\
              { client_id = 0, speed_factor = 50.0, node_id = 0, link_latency_s = 0.01, link_throughput_Bps = 1e6 },\n\
              { client_id = 1, speed_factor = 80.0, node_id = 1, link_latency_s = 0.02, link_throughput_Bps = 2e6 },\n\
            ]\n";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.resources.profiles.as_ref().unwrap().len(), 2);
        assert_eq!(parse_config_str(&cfg.to_config_string().unwrap()).unwrap(), cfg);

        let missing = "experiment_name = \"p\"\npartition.num_clients = 3\n\
            resources.profiles = [{ client_id = 0, speed_factor = 1.0, node_id = 0, link_latency_s = 0.0, link_throughput_Bps = 1.0 }]\n";
        assert!(parse_config_str(missing).is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let text = "experiment_name = \"o\"\nschedule.scheme = \"shuffled\"\n";
        let cfg = parse_config_with(
            text,
            &["schedule.scheme=column".into(), "seeds = [7]".into(), "federation.lr=0.5".into()],
            None,
        )
        .unwrap();
        assert_eq!(cfg.schedule.scheme, Scheme::Column);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.federation.lr, 0.5);

        let cfg = parse_config_with(text, &["out_dir=b".into()], Some("a")).unwrap();
        assert_eq!(cfg.out_dir, "b");
        let cfg = parse_config_with(text, &[], Some("a")).unwrap();
        assert_eq!(cfg.out_dir, "a");
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let text = MINIMAL;
        assert!(parse_config_with(text, &["noequals".into()], None).is_err());
        assert!(parse_config_with(text, &["a..b=1".into()], None).is_err());
        assert!(parse_config_with(text, &["experiment_name.x=1".into()], None).is_err());
        let err = parse_config_with(text, &["federation.bogus=1".into()], None).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn constraint_violations() {
        for bad in [
            "seeds = []",
            "seeds = [1, 1]",
            "partition.num_clients = 0",
            "federation.clients_per_round = 9",
            "federation.lr = -1.0",
            "schedule.scheme = \"balanced\"\npartition.num_clients = 11",
            "federation.strategy = \"gem\"\nfederation.gem.memory_per_task = 0",
            "federation.strategy = \"ewc\"\nfederation.ewc.lambda = -1.0",
            "resources.speed_jitter = 1.5",
            "dataset.noise_sigma = 0.0",
            "model.hidden = [0]",
        ] {
            let text = format!("experiment_name = \"c\"\n{bad}\n");
            let err = parse_config_str(&text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}: {err}");
        }
        assert!(parse_config_str("experiment_name = \"../up\"\n").is_err());
    }

    #[test]
    fn section_headers_are_accepted() {
        let cfg = parse_config_str("experiment_name = \"s\"\n[federation]\nlr = 0.2\n").unwrap();
        assert_eq!(cfg.federation.lr, 0.2);
    }
}
