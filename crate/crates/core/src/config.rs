//! Experiment configuration.
//!
//! Configs are TOML (a resolved JSON dump is accepted too). Validation
//! reports every problem at once: unknown keys, type errors and semantic
//! checks. Missing keys take defaults, and the resolved config is what gets
//! hashed and written beside the results.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
use crate::importance::Scaling;
use crate::nn::HeadMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Spp,
    Ewc,
    Si,
    Mas,
    Sgd,
    SgdF,
    Finetune,
    Joint,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::Spp,
        StrategyKind::Ewc,
        StrategyKind::Si,
        StrategyKind::Mas,
        StrategyKind::Sgd,
        StrategyKind::SgdF,
        StrategyKind::Finetune,
        StrategyKind::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Spp => "spp",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Si => "si",
            StrategyKind::Mas => "mas",
            StrategyKind::Sgd => "sgd",
            StrategyKind::SgdF => "sgd_f",
            StrategyKind::Finetune => "finetune",
            StrategyKind::Joint => "joint",
        }
    }

    /// Head layout the strategy trains with: plain SGD is the single-head
    /// baseline, fine-tuning and frozen-trunk SGD always use one head per
    /// task, everything else follows the configured mode.
    pub fn head_mode(self, configured: HeadMode) -> HeadMode {
        match self {
            StrategyKind::Sgd => HeadMode::Single,
            StrategyKind::SgdF | StrategyKind::Finetune => HeadMode::Multi,
            _ => configured,
        }
    }

    pub fn is_regularized(self) -> bool {
        matches!(
            self,
            StrategyKind::Spp | StrategyKind::Ewc | StrategyKind::Si | StrategyKind::Mas
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| crate::Error::config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    Joint,
    SingleTask,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Idx,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSequenceKind {
    Split,
    Permuted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: vec![784, 512, 256, 10],
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the four standard MNIST IDX files.
    pub dir: PathBuf,
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// Synthetic source only: rows generated per split before task
    /// construction, class count, and blob noise.
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_classes: usize,
    pub synthetic_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Idx,
            dir: PathBuf::from("data/mnist"),
            train_per_task: 10_000,
            test_per_task: 2_000,
            synthetic_train: 6_000,
            synthetic_test: 1_000,
            synthetic_classes: 10,
            synthetic_noise: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksConfig {
    pub kind: TaskSequenceKind,
    /// Split sequences: disjoint class subsets, one task each.
    pub subsets: Vec<Vec<usize>>,
    /// Permuted sequences: number of tasks.
    pub count: usize,
    /// Permuted sequences: first task keeps the original pixel order.
    pub identity_first: bool,
}

impl Default for TasksConfig {
    fn default() -> Self {
        TasksConfig {
            kind: TaskSequenceKind::Split,
            subsets: (0..5).map(|t| vec![2 * t, 2 * t + 1]).collect(),
            count: 10,
            identity_first: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_ratio: f64,
    /// Optimizer steps per decay period; the step count restarts each task.
    pub decay_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 5,
            batch_size: 64,
            lr: 0.1,
            decay_ratio: 0.96,
            decay_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub dropout: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 1,
            data: 2,
            dropout: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    pub sample_size: usize,
    pub ewc_true_labels: bool,
    pub si_damping: f64,
    pub spp_scaling: Scaling,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            sample_size: 2048,
            ewc_true_labels: false,
            si_damping: 0.1,
            spp_scaling: Scaling::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaConfig {
    pub spp: f64,
    pub ewc: f64,
    pub si: f64,
    pub mas: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig {
            spp: 4.0,
            ewc: 100.0,
            si: 1.0,
            mas: 1.0,
        }
    }
}

impl LambdaConfig {
    pub fn for_strategy(&self, kind: StrategyKind) -> f64 {
        match kind {
            StrategyKind::Spp => self.spp,
            StrategyKind::Ewc => self.ewc,
            StrategyKind::Si => self.si,
            StrategyKind::Mas => self.mas,
            _ => 0.0,
        }
    }

    pub fn set(&mut self, kind: StrategyKind, value: f64) {
        match kind {
            StrategyKind::Spp => self.spp = value,
            StrategyKind::Ewc => self.ewc = value,
            StrategyKind::Si => self.si = value,
            StrategyKind::Mas => self.mas = value,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub strategy: StrategyKind,
    pub grid: Vec<f64>,
    /// Fraction of each task's training rows held out for scoring.
    pub validation_fraction: f64,
    /// Also score single-head SGD on the same validation sequence.
    pub baseline: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            strategy: StrategyKind::Spp,
            grid: vec![0.01, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            validation_fraction: 0.1,
            baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactConfig {
    /// Write a checkpoint after every task.
    pub checkpoints: bool,
    /// Write importance snapshots after every task.
    pub importance: bool,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        ArtifactConfig {
            checkpoints: true,
            importance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub strategies: Vec<StrategyKind>,
    pub head_mode: HeadMode,
    pub reference: ReferenceMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_file: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub tasks: TasksConfig,
    pub training: TrainingConfig,
    pub seeds: Seeds,
    pub importance: ImportanceConfig,
    pub lambda: LambdaConfig,
    pub sweep: SweepConfig,
    pub artifacts: ArtifactConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            output_dir: PathBuf::from("runs/experiment"),
            strategies: vec![StrategyKind::Spp, StrategyKind::Sgd],
            head_mode: HeadMode::Multi,
            reference: ReferenceMode::Joint,
            reference_file: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            tasks: TasksConfig::default(),
            training: TrainingConfig::default(),
            seeds: Seeds::default(),
            importance: ImportanceConfig::default(),
            lambda: LambdaConfig::default(),
            sweep: SweepConfig::default(),
            artifacts: ArtifactConfig::default(),
        }
    }
}

/// Every problem found while validating a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationErrors(pub Vec<String>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} validation error(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationErrors {}

/// Keys that are valid but absent from the default dump.
const OPTIONAL_KEYS: &[&str] = &["reference_file"];

fn unknown_keys(user: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in user {
        let path = if prefix.is_empty() {
            key.to_string()
        } else {
            format!("{prefix}.{key}")
        };
        match known.get(key) {
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => out.push(format!("unknown key `{path}`")),
            Some(toml::Value::Table(k)) => {
                if let toml::Value::Table(u) = value {
                    unknown_keys(u, k, &path, out);
                }
            }
            Some(_) => {}
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_idx_file(path: &Path, magic: u32, errors: &mut Vec<String>) {
    match std::fs::File::open(path) {
        Err(e) => errors.push(format!("data file {} is not readable: {e}", path.display())),
        Ok(mut f) => {
            use std::io::Read;
            let mut head = [0u8; 4];
            if f.read_exact(&mut head).is_err() || u32::from_be_bytes(head) != magic {
                errors.push(format!(
                    "data file {} does not start with IDX magic {magic:#010x}",
                    path.display()
                ));
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ValidationErrors> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ValidationErrors(vec![format!("TOML syntax: {e}")]))?;
        Self::from_table(table, base_dir)
    }

    /// Parses a resolved JSON dump.
    pub fn from_json_str(text: &str, base_dir: &Path) -> Result<Self, ValidationErrors> {
        let json: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| ValidationErrors(vec![format!("JSON syntax: {e}")]))?;
        let table = toml::Table::try_from(json)
            .map_err(|e| ValidationErrors(vec![format!("config is not a table: {e}")]))?;
        Self::from_table(table, base_dir)
    }

    fn from_table(table: toml::Table, base_dir: &Path) -> Result<Self, ValidationErrors> {
        let mut errors = Vec::new();
        let known = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
        unknown_keys(&table, &known, "", &mut errors);
        if !table.contains_key("strategies") {
            errors.push("`strategies` is required".into());
        }
        // Unknown keys would also trip deny_unknown_fields; strip them so
        // type errors elsewhere are still reported.
        let mut cleaned = table.clone();
        strip_unknown(&mut cleaned, &known, "");
        let parsed = ExperimentConfig::deserialize(toml::Value::Table(cleaned));
        let mut config = match parsed {
            Ok(c) => c,
            Err(e) => {
                errors.push(format!("invalid value: {}", e.message().trim()));
                return Err(ValidationErrors(errors));
            }
        };
        config.data.dir = resolve(base_dir, &config.data.dir);
        config.output_dir = resolve(base_dir, &config.output_dir);
        if let Some(r) = &config.reference_file {
            config.reference_file = Some(resolve(base_dir, r));
        }
        errors.extend(config.semantic_errors());
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(ValidationErrors(errors))
        }
    }

    /// Checks that do not depend on parsing.
    pub fn semantic_errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.strategies.is_empty() {
            e.push("`strategies` must name at least one strategy".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.strategies {
            if !seen.insert(*s) {
                e.push(format!("strategy `{s}` listed twice"));
            }
        }
        for (name, v) in [
            ("spp", self.lambda.spp),
            ("ewc", self.lambda.ewc),
            ("si", self.lambda.si),
            ("mas", self.lambda.mas),
        ] {
            if !v.is_finite() || v < 0.0 {
                e.push(format!("lambda.{name} must be finite and >= 0, got {v}"));
            }
        }
        let m = &self.model;
        if m.layers.len() < 2 {
            e.push("model.layers needs at least an input and an output size".into());
        } else if m.layers.contains(&0) {
            e.push("model.layers entries must be positive".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            e.push(format!("model.dropout must be in [0, 1), got {}", m.dropout));
        }
        let t = &self.training;
        if t.epochs == 0 {
            e.push("training.epochs must be at least 1".into());
        }
        if t.batch_size == 0 {
            e.push("training.batch_size must be at least 1".into());
        }
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            e.push(format!("training.lr must be positive, got {}", t.lr));
        }
        if !(t.decay_ratio > 0.0 && t.decay_ratio <= 1.0) {
            e.push(format!(
                "training.decay_ratio must be in (0, 1], got {}",
                t.decay_ratio
            ));
        }
        let d = &self.data;
        if d.train_per_task == 0 || d.test_per_task == 0 {
            e.push("data.train_per_task and data.test_per_task must be positive".into());
        }
        let classes = match d.source {
            DataSource::Idx => {
                check_idx_file(&d.dir.join("train-images-idx3-ubyte"), IDX_IMAGES_MAGIC, &mut e);
                check_idx_file(&d.dir.join("train-labels-idx1-ubyte"), IDX_LABELS_MAGIC, &mut e);
                check_idx_file(&d.dir.join("t10k-images-idx3-ubyte"), IDX_IMAGES_MAGIC, &mut e);
                check_idx_file(&d.dir.join("t10k-labels-idx1-ubyte"), IDX_LABELS_MAGIC, &mut e);
                10
            }
            DataSource::Synthetic => {
                if d.synthetic_classes < 2 {
                    e.push("data.synthetic_classes must be at least 2".into());
                }
                if d.synthetic_train == 0 || d.synthetic_test == 0 {
                    e.push("data.synthetic_train and data.synthetic_test must be positive".into());
                }
                if !(d.synthetic_noise >= 0.0) {
                    e.push("data.synthetic_noise must be non-negative".into());
                }
                d.synthetic_classes
            }
        };
        let tasks = &self.tasks;
        let max_task_classes = match tasks.kind {
            TaskSequenceKind::Split => {
                if tasks.subsets.is_empty() {
                    e.push("tasks.subsets must list at least one class subset".into());
                }
                let mut used = std::collections::BTreeSet::new();
                for (i, s) in tasks.subsets.iter().enumerate() {
                    if s.is_empty() {
                        e.push(format!("tasks.subsets[{i}] is empty"));
                    }
                    for &c in s {
                        if c >= classes {
                            e.push(format!("tasks.subsets[{i}] names class {c}, source has {classes}"));
                        }
                        if !used.insert(c) {
                            e.push(format!("class {c} appears in more than one subset"));
                        }
                    }
                }
                tasks.subsets.iter().map(Vec::len).max().unwrap_or(0)
            }
            TaskSequenceKind::Permuted => {
                if tasks.count == 0 {
                    e.push("tasks.count must be at least 1".into());
                }
                classes
            }
        };
        if let Some(&out) = m.layers.last() {
            let needs_single = self
                .strategies
                .iter()
                .any(|s| s.head_mode(self.head_mode) == HeadMode::Single)
                || (self.head_mode == HeadMode::Single && self.reference != ReferenceMode::None);
            if needs_single && out < max_task_classes {
                e.push(format!(
                    "single-head output width {out} is smaller than the {max_task_classes} classes of a task"
                ));
            }
        }
        let imp = &self.importance;
        if imp.sample_size == 0 {
            e.push("importance.sample_size must be at least 1".into());
        }
        if !(imp.si_damping > 0.0) || !imp.si_damping.is_finite() {
            e.push(format!(
                "importance.si_damping must be positive, got {}",
                imp.si_damping
            ));
        }
        let sw = &self.sweep;
        if sw.grid.is_empty() {
            e.push("sweep.grid must not be empty".into());
        }
        if sw.grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
            e.push("sweep.grid values must be finite and >= 0".into());
        }
        if !(sw.validation_fraction > 0.0 && sw.validation_fraction < 1.0) {
            e.push(format!(
                "sweep.validation_fraction must be in (0, 1), got {}",
                sw.validation_fraction
            ));
        }
        if !sw.strategy.is_regularized() {
            e.push(format!("sweep.strategy `{}` has no lambda", sw.strategy));
        }
        if let Some(r) = &self.reference_file {
            if !r.is_file() {
                e.push(format!("reference_file {} does not exist", r.display()));
            }
        }
        e
    }

    pub fn task_count(&self) -> usize {
        match self.tasks.kind {
            TaskSequenceKind::Split => self.tasks.subsets.len(),
            TaskSequenceKind::Permuted => self.tasks.count,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact resolved JSON, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn strip_unknown(user: &mut toml::Table, known: &toml::Table, prefix: &str) {
    user.retain(|key, _| {
        let path = if prefix.is_empty() {
            key.to_string()
        } else {
            format!("{prefix}.{key}")
        };
        known.contains_key(key) || OPTIONAL_KEYS.contains(&path.as_str())
    });
    for (key, value) in user.iter_mut() {
        if let (toml::Value::Table(u), Some(toml::Value::Table(k))) = (value, known.get(key)) {
            let path = if prefix.is_empty() {
                key.to_string()
            } else {
                format!("{prefix}.{key}")
            };
            strip_unknown(u, k, &path);
        }
    }
}

/// Reads and validates a config file (`.json` is read as a resolved dump,
/// anything else as TOML).
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, ValidationErrors> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ValidationErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if path.extension().is_some_and(|x| x == "json") {
        ExperimentConfig::from_json_str(&text, base)
    } else {
        ExperimentConfig::from_toml_str(&text, base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
strategies = ["spp", "sgd"]
[data]
source = "synthetic"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL, Path::new("/tmp")).unwrap();
        assert_eq!(c.lambda.spp, 4.0);
        assert_eq!(c.training.decay_ratio, 0.96);
        assert_eq!(c.model.layers, vec![784, 512, 256, 10]);
        assert_eq!(c.task_count(), 5);
        assert_eq!(c.output_dir, Path::new("/tmp/runs/experiment"));
    }

    #[test]
    fn negative_lambda_is_a_single_error() {
        let text = format!("{MINIMAL}\n[lambda]\nspp = -1.0\n");
        let err = ExperimentConfig::from_toml_str(&text, Path::new("/tmp")).unwrap_err();
        assert_eq!(err.0.len(), 1, "{err}");
        assert!(err.0[0].contains("lambda.spp"));
    }

    #[test]
    fn all_errors_are_reported_together() {
        let text = r#"
strategies = ["spp"]
learning_rate = 0.1
[training]
epochs = 0
batchsize = 3
[data]
source = "synthetic"
[lambda]
spp = -2
"#;
        let err = ExperimentConfig::from_toml_str(text, Path::new("/tmp")).unwrap_err();
        let all = err.0.join("\n");
        assert!(all.contains("unknown key `learning_rate`"), "{all}");
        assert!(all.contains("unknown key `training.batchsize`"), "{all}");
        assert!(all.contains("training.epochs"), "{all}");
        assert!(all.contains("lambda.spp"), "{all}");
    }

    #[test]
    fn missing_data_files_are_reported() {
        let text = "strategies = [\"sgd\"]\n[data]\ndir = \"/nonexistent/mnist\"\n";
        let err = ExperimentConfig::from_toml_str(text, Path::new("/tmp")).unwrap_err();
        assert_eq!(err.0.len(), 4, "{err}");
    }

    #[test]
    fn resolved_dump_is_a_fixed_point() {
        let c = ExperimentConfig::from_toml_str(MINIMAL, Path::new("/tmp")).unwrap();
        let dump = c.to_json_pretty();
        let again = ExperimentConfig::from_json_str(&dump, Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_json_pretty(), dump);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("lwf".parse::<StrategyKind>().is_err());
    }
}
