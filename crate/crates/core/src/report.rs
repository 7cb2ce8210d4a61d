//! Result files, post-hoc analysis and the summary table.
//!
//! A run directory holds:
//!
//! * `resolved_config.json`: the config with every default filled in.
//! * `results.json`: the [`RunRecord`] (accuracy matrices, reference
//!   accuracies with provenance, metrics, config hash, seeds).
//! * `accuracy.csv`: `strategy,task_trained,task_evaluated,accuracy`.
//! * `metrics.csv`: one row of summary metrics per strategy.
//! * `<strategy>/checkpoints`, `<strategy>/importance`,
//!   `<strategy>/diagnostics`: JSON tensors per task.
//!
//! `analyze` adds `histograms.csv`, `frechet.csv` and per-strategy change
//! maps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{self, ChangeMap, FrechetRow, Histogram, HistogramSource};
use crate::checkpoint;
use crate::config::{ExperimentConfig, StrategyKind};
use crate::error::{Error, Result};
use crate::params::{LayerId, ParamMap};
use crate::runner::{RunRecord, RunStatus, StrategyOutcome, SweepResult};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const RESULTS: &str = "results.json";
pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const HISTOGRAMS_CSV: &str = "histograms.csv";
pub const FRECHET_CSV: &str = "frechet.csv";
pub const DEFAULT_BINS: usize = 100;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

pub fn write_resolved_config(dir: &Path, config: &ExperimentConfig) -> Result<PathBuf> {
    create_dir(dir)?;
    let path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&path, config.to_json_pretty()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Serialize)]
struct AccuracyRow<'a> {
    strategy: &'a str,
    task_trained: usize,
    task_evaluated: usize,
    accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: String,
    pub head_mode: String,
    pub lambda: f64,
    pub status: String,
    pub acc: Option<f64>,
    pub fwt: Option<f64>,
    pub bwt: Option<f64>,
    pub smt: Option<f64>,
    pub reference: String,
}

/// Writes `results.json`, `accuracy.csv` and `metrics.csv`.
pub fn write_results(dir: &Path, record: &RunRecord) -> Result<()> {
    create_dir(dir)?;
    checkpoint::write_json_atomic(&dir.join(RESULTS), record)?;

    let path = dir.join(ACCURACY_CSV);
    let mut w = csv_writer(&path)?;
    for s in &record.strategies {
        let name = s.strategy.name();
        if let Some(m) = &s.matrix {
            for (j, row) in m.rows().iter().enumerate() {
                for (i, &a) in row.iter().enumerate() {
                    w.serialize(AccuracyRow {
                        strategy: name,
                        task_trained: j,
                        task_evaluated: i,
                        accuracy: a,
                    })
                    .map_err(csv_err(&path))?;
                }
            }
        } else if s.is_completed() {
            // Joint training has no sequence; its accuracies are reported
            // as if evaluated after the last task.
            let last = s.final_accuracies.len().saturating_sub(1);
            for (i, &a) in s.final_accuracies.iter().enumerate() {
                w.serialize(AccuracyRow {
                    strategy: name,
                    task_trained: last,
                    task_evaluated: i,
                    accuracy: a,
                })
                .map_err(csv_err(&path))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(METRICS_CSV);
    let mut w = csv_writer(&path)?;
    for row in metrics_rows(record) {
        w.serialize(row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn metrics_rows(record: &RunRecord) -> Vec<MetricsRow> {
    let reference = match &record.reference {
        Some(r) => serde_json::to_value(r.source)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
        None => "none".into(),
    };
    record
        .strategies
        .iter()
        .map(|s| MetricsRow {
            strategy: s.strategy.name().into(),
            head_mode: format!("{:?}", s.head_mode).to_lowercase(),
            lambda: s.lambda,
            status: match &s.status {
                RunStatus::Completed => "completed".into(),
                RunStatus::Failed { .. } => "failed".into(),
            },
            acc: s.summary.acc,
            fwt: s.summary.fwt,
            bwt: s.summary.bwt,
            smt: s.summary.smt,
            reference: reference.clone(),
        })
        .collect()
}

pub fn load_results(dir: &Path) -> Result<RunRecord> {
    let record: RunRecord = checkpoint::read_json(&dir.join(RESULTS))?;
    if record.schema_version != checkpoint::SCHEMA_VERSION {
        return Err(Error::config(format!(
            "results schema {} is not supported",
            record.schema_version
        )));
    }
    Ok(record)
}

/// Writes `sweep.json` and `sweep.csv` (`strategy,lambda,acc,bwt,status`).
pub fn write_sweep(dir: &Path, sweep: &SweepResult) -> Result<()> {
    create_dir(dir)?;
    checkpoint::write_json_atomic(&dir.join(SWEEP_JSON), sweep)?;
    let path = dir.join(SWEEP_CSV);
    let mut w = csv_writer(&path)?;
    w.write_record(["strategy", "lambda", "acc", "bwt", "status"])
        .map_err(csv_err(&path))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for p in sweep.points.iter().chain(&sweep.baseline) {
        let status = match &p.status {
            RunStatus::Completed => "completed",
            RunStatus::Failed { .. } => "failed",
        };
        w.write_record([
            p.strategy.name(),
            &p.lambda.to_string(),
            &opt(p.summary.acc),
            &opt(p.summary.bwt),
            status,
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// The tensors one strategy contributes to the analysis.
#[derive(Debug, Clone)]
pub struct StrategyArtifacts {
    pub strategy: String,
    pub last_task: usize,
    /// Entropy importance of the first task measured right after it.
    pub first_after_first: ParamMap,
    /// Entropy importance of the first task measured on the final model.
    pub first_after_last: ParamMap,
    /// Parameters after the first task and at the end.
    pub before: ParamMap,
    pub after: ParamMap,
    /// Importance the change map is weighted by: the strategy's own
    /// first-task importance, or the entropy importance if it has none.
    pub importance: ParamMap,
}

impl StrategyArtifacts {
    pub fn from_outcome(outcome: &StrategyOutcome) -> Option<Self> {
        let diag = outcome.diagnostics.as_ref()?;
        let first = diag.after_task.first()?;
        let importance = outcome
            .importance
            .per_task
            .get(&0)
            .cloned()
            .unwrap_or_else(|| first.clone());
        Some(StrategyArtifacts {
            strategy: outcome.record.strategy.name().into(),
            last_task: diag.on_final.len() - 1,
            first_after_first: first.clone(),
            first_after_last: diag.on_final.first()?.clone(),
            before: outcome.snapshots.first()?.params.clone(),
            after: outcome.snapshots.last()?.params.clone(),
            importance,
        })
    }

    /// Reads a strategy's artifacts from a run directory.
    pub fn load(run_dir: &Path, kind: StrategyKind, task_count: usize) -> Result<Self> {
        let dir = run_dir.join(kind.name());
        let last = task_count - 1;
        let diag = |after: usize| -> Result<ParamMap> {
            let path = dir
                .join("diagnostics")
                .join(format!("entropy_task0_after{after}.json"));
            Ok(checkpoint::load_importance(&path)?.1)
        };
        let ck = |t: usize| -> Result<ParamMap> {
            let path = dir.join("checkpoints").join(format!("task_{t}.json"));
            Ok(checkpoint::load_checkpoint(&path)?.params)
        };
        let first_after_first = diag(0)?;
        let own = dir.join("importance").join("task_0.json");
        let importance = if own.is_file() {
            checkpoint::load_importance(&own)?.1
        } else {
            first_after_first.clone()
        };
        Ok(StrategyArtifacts {
            strategy: kind.name().into(),
            last_task: last,
            first_after_first,
            first_after_last: diag(last)?,
            before: ck(0)?,
            after: ck(last)?,
            importance,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub histograms: Vec<Histogram>,
    pub frechet: Vec<FrechetRow>,
    pub change_maps: Vec<(String, ChangeMap)>,
}

impl AnalysisOutput {
    pub fn frechet_for(&self, method: &str, layer: &str) -> Option<f64> {
        self.frechet
            .iter()
            .find(|r| r.method == method && r.layer == layer)
            .map(|r| r.distance)
    }
}

/// Label of the pooled-trunk histograms.
pub const POOLED: &str = "trunk";

fn trunk_groups(map: &ParamMap) -> Vec<(String, Vec<f64>)> {
    let mut groups: Vec<(String, Vec<f64>)> = (0..map.trunk.len())
        .map(|k| {
            let id = LayerId::Trunk(k);
            (id.to_string(), analysis::layer_values(map, id))
        })
        .collect();
    let pooled = groups.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    groups.push((POOLED.into(), pooled));
    groups
}

/// Histograms of first-task importance after the first and the last task,
/// per trunk layer and pooled, with Fréchet distances between the two; and
/// change maps from the first to the last task. Histograms of one layer
/// share a range across all strategies.
pub fn analyze(artifacts: &[StrategyArtifacts], bins: usize) -> Result<AnalysisOutput> {
    let mut histograms = Vec::new();
    let mut frechet = Vec::new();
    let grouped: Vec<_> = artifacts
        .iter()
        .map(|a| (trunk_groups(&a.first_after_first), trunk_groups(&a.first_after_last)))
        .collect();
    let layer_names: Vec<String> = grouped
        .first()
        .map(|(g, _)| g.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    for (li, layer) in layer_names.iter().enumerate() {
        let sets: Vec<&[f64]> = grouped
            .iter()
            .flat_map(|(a, b)| [a[li].1.as_slice(), b[li].1.as_slice()])
            .collect();
        let range = analysis::auto_range(&sets)?;
        for (art, (early, late)) in artifacts.iter().zip(&grouped) {
            let label_early = "task0_after0".to_string();
            let label_late = format!("task0_after{}", art.last_task);
            let source = |task: &str| HistogramSource {
                method: art.strategy.clone(),
                task: task.into(),
                layer: layer.clone(),
            };
            let h1 = analysis::importance_histogram(&early[li].1, bins, range, source(&label_early))?;
            let h2 = analysis::importance_histogram(&late[li].1, bins, range, source(&label_late))?;
            frechet.push(FrechetRow {
                method: art.strategy.clone(),
                layer: layer.clone(),
                task_pair: format!("{label_early}~{label_late}"),
                distance: analysis::frechet_distance(&h1, &h2)?,
            });
            histograms.push(h1);
            histograms.push(h2);
        }
    }
    let change_maps = artifacts
        .iter()
        .map(|a| Ok((a.strategy.clone(), analysis::change_map(&a.before, &a.after, &a.importance)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalysisOutput {
        histograms,
        frechet,
        change_maps,
    })
}

pub fn write_analysis(dir: &Path, out: &AnalysisOutput) -> Result<()> {
    create_dir(dir)?;
    analysis::write_histograms_csv(&dir.join(HISTOGRAMS_CSV), &out.histograms)?;
    analysis::write_frechet_csv(&dir.join(FRECHET_CSV), &out.frechet)?;
    for (name, map) in &out.change_maps {
        analysis::write_change_map_csv(
            &dir.join(format!("change_map_{name}.csv")),
            &dir.join(format!("change_summary_{name}.csv")),
            map,
        )?;
    }
    Ok(())
}

/// Loads every completed sequential strategy's artifacts from `run_dir` and
/// writes the analysis CSVs beside them.
pub fn analyze_run_dir(run_dir: &Path, bins: usize) -> Result<AnalysisOutput> {
    let record = load_results(run_dir)?;
    let artifacts = record
        .strategies
        .iter()
        .filter(|s| s.is_completed() && s.matrix.is_some() && !s.diagnostic_files.is_empty())
        .map(|s| StrategyArtifacts::load(run_dir, s.strategy, record.task_count))
        .collect::<Result<Vec<_>>>()?;
    if artifacts.is_empty() {
        return Err(Error::config(format!(
            "{} has no completed strategy with stored diagnostics",
            run_dir.display()
        )));
    }
    let out = analyze(&artifacts, bins)?;
    write_analysis(run_dir, &out)?;
    Ok(out)
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Plain-text summary table; ACC, FWT and BWT in percent, SMT in squared
/// percent.
pub fn format_table(record: &RunRecord) -> String {
    let mut s = String::new();
    let reference = match &record.reference {
        Some(r) => format!("{:?}", r.source).to_lowercase(),
        None => "none".into(),
    };
    let _ = writeln!(
        s,
        "{} ({} tasks, config {}, FWT reference: {reference})",
        record.name,
        record.task_count,
        &record.config_hash[..record.config_hash.len().min(12)]
    );
    let _ = writeln!(
        s,
        "{:<10} {:<6} {:>8} {:>8} {:>8} {:>8} {:>8}  status",
        "strategy", "head", "lambda", "ACC", "FWT", "BWT", "SMT"
    );
    for r in metrics_rows(record) {
        let smt = r.smt.map_or("-".into(), |v| format!("{:.2}", 1e4 * v));
        let _ = writeln!(
            s,
            "{:<10} {:<6} {:>8} {:>8} {:>8} {:>8} {:>8}  {}",
            r.strategy,
            r.head_mode,
            r.lambda,
            pct(r.acc),
            pct(r.fwt),
            pct(r.bwt),
            smt,
            r.status
        );
    }
    for st in &record.strategies {
        if let RunStatus::Failed { cause } = &st.status {
            let _ = writeln!(s, "{} failed: {cause}", st.strategy);
        }
    }
    s
}
