//! Experiment orchestration.
//!
//! Every strategy starts from the same initialization and walks the task
//! sequence on its own. Random streams (shuffling, dropout, importance
//! samples, permutations) are keyed by seed, task and epoch only, so the
//! strategy list can be reordered or trimmed without changing any result.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ImportanceSnapshot, SCHEMA_VERSION};
use crate::config::{
    DataSource, ExperimentConfig, ReferenceMode, StrategyKind, TaskSequenceKind,
};
use crate::consolidation::{self, AnchorBook, ConsolidationConfig, Prior, Regularizer};
use crate::data::{
    self, Dataset, SplitTag, SyntheticSpec, TaskSpec, IDENTITY_PERMUTATION_SEED,
};
use crate::error::{Error, Result};
use crate::importance::{self, FisherObjective, ImportanceMap, SiTracker};
use crate::metrics::{self, AccuracyMatrix, MetricSummary, Reference, ReferenceSource};
use crate::nn::{self, Architecture, Batch, HeadMode, ModelState, Mode, Objective};
use crate::params::ParamMap;

/// Independent random streams derived from the configured seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Dropout = 2,
    ImportanceSample = 3,
    Permutation = 4,
    Subsample = 5,
    Validation = 6,
    JointOrder = 7,
    Synthetic = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for `stream` at coordinates `(a, b)` (typically task and epoch).
pub fn derive_seed(base: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix(base);
    for v in [stream as u64, a, b] {
        h = splitmix(h ^ v);
    }
    h
}

/// One task's training and scoring data.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    /// Test split, or the held-out validation rows in sweep mode.
    pub test: Dataset,
}

/// Loads (or generates) the train and test sources named by the config.
pub fn load_sources(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match config.data.source {
        DataSource::Idx => data::load_mnist_dir(&config.data.dir),
        DataSource::Synthetic => {
            let d = &config.data;
            let spec = SyntheticSpec {
                classes: d.synthetic_classes,
                width: config.model.layers[0],
                noise: d.synthetic_noise,
                prototype_seed: derive_seed(config.seeds.data, Stream::Synthetic, 0, 0),
            };
            let seed = |k| derive_seed(config.seeds.data, Stream::Synthetic, 1, k);
            let train = data::synthetic_dataset(&spec, d.synthetic_train, seed(0), SplitTag::Train)?;
            let test = data::synthetic_dataset(&spec, d.synthetic_test, seed(1), SplitTag::Test)?;
            Ok((train, test))
        }
    }
}

fn take_up_to(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    data::subsample(dataset, n.min(dataset.len()), seed)
}

fn permutation_seed(config: &ExperimentConfig, t: usize) -> u64 {
    if t == 0 && config.tasks.identity_first {
        return IDENTITY_PERMUTATION_SEED;
    }
    match derive_seed(config.seeds.data, Stream::Permutation, t as u64, 0) {
        IDENTITY_PERMUTATION_SEED => 1,
        s => s,
    }
}

/// Builds the task sequence from in-memory sources. Each task takes up to
/// `train_per_task` / `test_per_task` rows; tasks with fewer available rows
/// use all of them.
pub fn build_tasks_from(config: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Vec<TaskData>> {
    let d = &config.data;
    let sub = |t: u64, k: u64| derive_seed(config.seeds.data, Stream::Subsample, t, k);
    match config.tasks.kind {
        TaskSequenceKind::Split => {
            let train_tasks = data::make_split_tasks(train, &config.tasks.subsets)?;
            let test_tasks = data::make_split_tasks(test, &config.tasks.subsets)?;
            train_tasks
                .into_iter()
                .zip(test_tasks)
                .enumerate()
                .map(|(t, ((spec, tr), (_, te)))| {
                    Ok(TaskData {
                        spec,
                        train: take_up_to(&tr, d.train_per_task, sub(t as u64, 0))?,
                        test: take_up_to(&te, d.test_per_task, sub(t as u64, 1))?,
                    })
                })
                .collect()
        }
        TaskSequenceKind::Permuted => {
            let base_train = take_up_to(train, d.train_per_task, sub(0, 0))?;
            let base_test = take_up_to(test, d.test_per_task, sub(0, 1))?;
            (0..config.tasks.count)
                .map(|t| {
                    let (spec, tr) = data::make_permuted_task(&base_train, t, permutation_seed(config, t))?;
                    let te = data::apply_task(&base_test, &spec)?;
                    Ok(TaskData {
                        spec,
                        train: tr,
                        test: te,
                    })
                })
                .collect()
        }
    }
}

pub fn build_tasks(config: &ExperimentConfig) -> Result<Vec<TaskData>> {
    let (train, test) = load_sources(config)?;
    build_tasks_from(config, &train, &test)
}

/// Replaces every task's test set with a validation split carved from its
/// training rows.
pub fn to_validation_tasks(config: &ExperimentConfig, tasks: Vec<TaskData>) -> Result<Vec<TaskData>> {
    tasks
        .into_iter()
        .enumerate()
        .map(|(t, task)| {
            let seed = derive_seed(config.seeds.data, Stream::Validation, t as u64, 0);
            let (train, val) =
                data::split_validation(&task.train, config.sweep.validation_fraction, seed)?;
            Ok(TaskData {
                spec: task.spec,
                train,
                test: val,
            })
        })
        .collect()
}

/// Architecture a strategy trains with on `tasks`.
pub fn architecture_for(config: &ExperimentConfig, kind: StrategyKind, tasks: &[TaskData]) -> Result<Architecture> {
    match kind.head_mode(config.head_mode) {
        HeadMode::Single => Architecture::single(&config.model.layers),
        HeadMode::Multi => {
            let widths: Vec<usize> = tasks.iter().map(|t| t.spec.class_count).collect();
            Architecture::multi(&config.model.layers, &widths)
        }
    }
}

pub fn initial_model(config: &ExperimentConfig, kind: StrategyKind, tasks: &[TaskData]) -> Result<ModelState> {
    ModelState::new(
        architecture_for(config, kind, tasks)?,
        config.seeds.init,
        config.model.dropout,
    )
}

fn regularizer(kind: StrategyKind) -> Regularizer {
    match kind {
        StrategyKind::Spp => Regularizer::Spp,
        StrategyKind::Ewc => Regularizer::Ewc,
        StrategyKind::Si => Regularizer::Si,
        StrategyKind::Mas => Regularizer::Mas,
        _ => Regularizer::None,
    }
}

/// Per-step inputs beyond the model and batch.
pub struct StepContext<'a> {
    pub lr: f64,
    pub consolidation: ConsolidationConfig,
    pub prior: Option<Prior<'a>>,
    pub si: Option<&'a mut SiTracker>,
}

/// One optimizer step under `kind`'s update rule; returns the training loss.
///
/// * `sgd`, `finetune`, `joint`: plain cross-entropy step.
/// * `sgd_f`: as above, but the trunk is frozen from the second task on.
/// * `spp`, `ewc`, `mas`: cross-entropy plus the consolidation penalty.
/// * `si`: the penalized step, with the path integral fed by the plain
///   cross-entropy gradient and the update actually applied.
pub fn strategy_step(
    kind: StrategyKind,
    model: &mut ModelState,
    batch: &Batch,
    ctx: StepContext<'_>,
    mode: Mode<'_>,
) -> Result<f64> {
    match kind {
        StrategyKind::Sgd | StrategyKind::Finetune | StrategyKind::Joint => {
            let (loss, grad) = nn::loss_and_gradients(model, batch, Objective::CrossEntropy, mode)?;
            nn::sgd_step(model, &grad, ctx.lr);
            Ok(loss)
        }
        StrategyKind::SgdF => {
            let (loss, mut grad) =
                nn::loss_and_gradients(model, batch, Objective::CrossEntropy, mode)?;
            if batch.task_id > 0 {
                for layer in &mut grad.params.trunk {
                    layer.weight.fill(0.0);
                    layer.bias.fill(0.0);
                }
            }
            nn::sgd_step(model, &grad, ctx.lr);
            Ok(loss)
        }
        StrategyKind::Spp | StrategyKind::Ewc | StrategyKind::Mas => {
            let t = consolidation::total_loss(model, batch, ctx.prior, &ctx.consolidation, mode)?;
            nn::sgd_step(model, &t.grad, ctx.lr);
            Ok(t.loss)
        }
        StrategyKind::Si => {
            let tracker = ctx
                .si
                .ok_or_else(|| Error::State("SI step without an active tracker".into()))?;
            let t = consolidation::total_loss(model, batch, ctx.prior, &ctx.consolidation, mode)?;
            let before = model.params.clone();
            nn::sgd_step(model, &t.grad, ctx.lr);
            let mut delta = model.params.clone();
            delta.zip_apply(&before, |d, b| *d -= b);
            tracker.update(&t.task_grad.params, &delta);
            Ok(t.loss)
        }
    }
}

/// Rows `indices` of `dataset` as a batch for `task_id`.
pub fn make_batch(dataset: &Dataset, indices: &[usize], task_id: usize) -> Result<Batch> {
    let inputs: Array2<f64> = dataset.images.select(Axis(0), indices);
    let labels = indices.iter().map(|&i| dataset.labels[i]).collect();
    Batch::new(inputs, labels, task_id)
}

/// Row order for one epoch of one task.
pub fn epoch_order(config: &ExperimentConfig, task: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let seed = derive_seed(config.seeds.data, Stream::Shuffle, task as u64, epoch as u64);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn check_finite(loss: f64, what: &str, task: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::State(format!(
            "{what} diverged on task {task} (loss {loss})"
        )))
    }
}

/// A strategy's state while it walks the sequence.
#[derive(Debug, Clone)]
pub struct Learner {
    pub kind: StrategyKind,
    pub model: ModelState,
    pub anchors: AnchorBook,
    pub importance: ImportanceMap,
    pub consolidation: ConsolidationConfig,
    si: Option<SiTracker>,
}

impl Learner {
    pub fn new(kind: StrategyKind, model: ModelState, lambda: f64) -> Result<Self> {
        Ok(Learner {
            kind,
            model,
            anchors: AnchorBook::new(),
            importance: ImportanceMap::new(),
            consolidation: ConsolidationConfig::new(lambda, regularizer(kind))?,
            si: None,
        })
    }

    /// Trains task `t` for the configured number of epochs.
    pub fn train_task(&mut self, config: &ExperimentConfig, t: usize, train: &Dataset) -> Result<()> {
        let tr = &config.training;
        if self.kind == StrategyKind::Si {
            self.si = Some(SiTracker::new(&self.model));
        }
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.dropout, Stream::Dropout, t as u64, 0));
        let mut step = 0;
        for epoch in 0..tr.epochs {
            for chunk in epoch_order(config, t, epoch, train.len()).chunks(tr.batch_size) {
                let batch = make_batch(train, chunk, t)?;
                let lr = nn::lr_schedule(tr.lr, step, tr.decay_every, tr.decay_ratio);
                let prior = self.anchors.current().map(|anchor| Prior {
                    anchor,
                    importance: &self.importance,
                });
                let ctx = StepContext {
                    lr,
                    consolidation: self.consolidation,
                    prior,
                    si: self.si.as_mut(),
                };
                let loss = strategy_step(self.kind, &mut self.model, &batch, ctx, Mode::Train(&mut dropout_rng))?;
                check_finite(loss, self.kind.name(), t)?;
                step += 1;
            }
        }
        Ok(())
    }

    /// Anchors the boundary after task `t` and folds the task's importance
    /// into the cumulative map. Returns the task's clamped importance, if
    /// the strategy estimates one.
    pub fn finish_task(&mut self, config: &ExperimentConfig, t: usize, train: &Dataset) -> Result<Option<ParamMap>> {
        self.anchors.take_anchor(&self.model, t)?;
        let imp = match self.kind {
            StrategyKind::Spp => {
                let sample = importance_sample(config, t, train)?;
                let est = importance::spp_estimate(&self.model, sample.images.view(), t)?;
                Some(importance::clamp(&est.saliency))
            }
            StrategyKind::Ewc => {
                let sample = importance_sample(config, t, train)?;
                let (labels, objective) = if config.importance.ewc_true_labels {
                    (Some(sample.labels.as_slice()), FisherObjective::TrueLabel)
                } else {
                    (None, FisherObjective::PredictedLabel)
                };
                let f = importance::fisher_diagonal(&self.model, sample.images.view(), labels, t, objective)?;
                Some(f.params)
            }
            StrategyKind::Mas => {
                let sample = importance_sample(config, t, train)?;
                Some(importance::mas_importance(&self.model, sample.images.view(), t)?)
            }
            StrategyKind::Si => {
                let tracker = self
                    .si
                    .take()
                    .ok_or_else(|| Error::State("SI task finished without a tracker".into()))?;
                Some(tracker.finish(&self.model, config.importance.si_damping)?)
            }
            _ => None,
        };
        if let Some(map) = &imp {
            self.importance.accumulate(t, map.clone())?;
            if self.kind == StrategyKind::Spp {
                self.importance.rescale_cumulative(config.importance.spp_scaling)?;
            }
        }
        Ok(imp)
    }
}

/// Unlabelled-importance sample for task `t`, up to the configured size.
pub fn importance_sample(config: &ExperimentConfig, t: usize, train: &Dataset) -> Result<Dataset> {
    let seed = derive_seed(config.seeds.data, Stream::ImportanceSample, t as u64, 0);
    take_up_to(train, config.importance.sample_size, seed)
}

/// Clamped entropy saliency of task `i` on `model`, measured for every
/// strategy so importance distributions can be compared across runs.
pub fn entropy_importance(config: &ExperimentConfig, model: &ModelState, i: usize, train: &Dataset) -> Result<ParamMap> {
    let sample = importance_sample(config, i, train)?;
    let est = importance::spp_estimate(model, sample.images.view(), i)?;
    Ok(importance::clamp(&est.saliency))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { cause: String },
}

/// Artifact paths and timings of one strategy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRecord {
    pub strategy: StrategyKind,
    pub head_mode: HeadMode,
    pub lambda: f64,
    pub status: RunStatus,
    pub task_seconds: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub importance_files: Vec<PathBuf>,
    pub diagnostic_files: Vec<PathBuf>,
    /// Absent for joint training, which has no sequence.
    pub matrix: Option<AccuracyMatrix>,
    /// Accuracy on every task at the end of the run.
    pub final_accuracies: Vec<f64>,
    pub summary: MetricSummary,
}

impl StrategyRecord {
    fn failed(kind: StrategyKind, head_mode: HeadMode, lambda: f64, cause: String) -> Self {
        StrategyRecord {
            strategy: kind,
            head_mode,
            lambda,
            status: RunStatus::Failed { cause },
            task_seconds: Vec::new(),
            checkpoints: Vec::new(),
            importance_files: Vec::new(),
            diagnostic_files: Vec::new(),
            matrix: None,
            final_accuracies: Vec::new(),
            summary: MetricSummary {
                acc: None,
                fwt: None,
                bwt: None,
                smt: None,
            },
        }
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// Entropy importance of each task measured right after it was trained and
/// again on the final model.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyDiagnostics {
    pub after_task: Vec<ParamMap>,
    pub on_final: Vec<ParamMap>,
}

/// Everything a completed strategy run produced, kept in memory.
#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub record: StrategyRecord,
    /// Model after each task; one entry for joint training.
    pub snapshots: Vec<ModelState>,
    /// Clamped per-task importance of the strategy's own estimator.
    pub importance: ImportanceMap,
    pub diagnostics: Option<EntropyDiagnostics>,
}

fn importance_objective(kind: StrategyKind, config: &ExperimentConfig) -> (&'static str, usize) {
    let n = config.importance.sample_size;
    match kind {
        StrategyKind::Spp => ("entropy", n),
        StrategyKind::Ewc if config.importance.ewc_true_labels => ("true_label", n),
        StrategyKind::Ewc => ("predicted_label", n),
        StrategyKind::Mas => ("output_norm", n),
        StrategyKind::Si => ("path_integral", 0),
        _ => ("none", 0),
    }
}

fn snapshot(kind: &str, objective: &str, sample_size: usize, t: usize, seed: u64, map: &ParamMap) -> ImportanceSnapshot {
    ImportanceSnapshot {
        schema_version: SCHEMA_VERSION,
        task_id: t,
        method: kind.to_string(),
        objective: objective.to_string(),
        sample_size,
        seed,
        parameters: checkpoint::params_to_records(map),
    }
}

/// Options for [`run_strategy`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Directory for this strategy's artifacts; nothing is written if absent.
    pub out_dir: Option<&'a Path>,
    /// Measure entropy importance after every task and on the final model.
    pub diagnostics: bool,
}

/// Trains one sequential strategy through every task.
pub fn run_strategy(
    config: &ExperimentConfig,
    kind: StrategyKind,
    tasks: &[TaskData],
    options: RunOptions<'_>,
) -> Result<StrategyOutcome> {
    if kind == StrategyKind::Joint {
        return run_joint(config, tasks, options);
    }
    let lambda = config.lambda.for_strategy(kind);
    let mut learner = Learner::new(kind, initial_model(config, kind, tasks)?, lambda)?;
    let head_mode = learner.model.arch.head_mode;
    let tests: Vec<&Dataset> = tasks.iter().map(|t| &t.test).collect();
    let mut matrix = AccuracyMatrix::new(tasks.len());
    let mut record = StrategyRecord::failed(kind, head_mode, lambda, String::new());
    let mut snapshots = Vec::with_capacity(tasks.len());
    let mut after_task = Vec::new();
    let (objective, sample_size) = importance_objective(kind, config);
    let sample_seed = |t: usize| derive_seed(config.seeds.data, Stream::ImportanceSample, t as u64, 0);

    for (t, task) in tasks.iter().enumerate() {
        let start = Instant::now();
        learner.train_task(config, t, &task.train)?;
        matrix.push_row(metrics::evaluate_row(&learner.model, &tests, t)?)?;
        let imp = learner.finish_task(config, t, &task.train)?;
        if options.diagnostics {
            let diag = match (kind, &imp) {
                (StrategyKind::Spp, Some(map)) => map.clone(),
                _ => entropy_importance(config, &learner.model, t, &task.train)?,
            };
            after_task.push(diag);
        }
        record.task_seconds.push(start.elapsed().as_secs_f64());
        if let Some(dir) = options.out_dir {
            if config.artifacts.checkpoints {
                let path = dir.join("checkpoints").join(format!("task_{t}.json"));
                checkpoint::save_checkpoint(&path, &learner.model)?;
                record.checkpoints.push(path);
            }
            if config.artifacts.importance {
                if let Some(map) = &imp {
                    let path = dir.join("importance").join(format!("task_{t}.json"));
                    let snap = snapshot(kind.name(), objective, sample_size, t, sample_seed(t), map);
                    checkpoint::save_importance(&path, &snap)?;
                    record.importance_files.push(path);
                }
            }
        }
        snapshots.push(learner.model.clone());
    }

    let diagnostics = if options.diagnostics {
        let on_final = tasks
            .iter()
            .enumerate()
            .map(|(i, task)| entropy_importance(config, &learner.model, i, &task.train))
            .collect::<Result<Vec<_>>>()?;
        if let (Some(dir), true) = (options.out_dir, config.artifacts.importance) {
            let last = tasks.len() - 1;
            for (i, map) in after_task.iter().enumerate() {
                let path = dir.join("diagnostics").join(format!("entropy_task{i}_after{i}.json"));
                checkpoint::save_importance(&path, &snapshot(kind.name(), "entropy", config.importance.sample_size, i, sample_seed(i), map))?;
                record.diagnostic_files.push(path);
            }
            for (i, map) in on_final.iter().enumerate() {
                let path = dir.join("diagnostics").join(format!("entropy_task{i}_after{last}.json"));
                checkpoint::save_importance(&path, &snapshot(kind.name(), "entropy", config.importance.sample_size, i, sample_seed(i), map))?;
                record.diagnostic_files.push(path);
            }
        }
        Some(EntropyDiagnostics {
            after_task,
            on_final,
        })
    } else {
        None
    };

    record.final_accuracies = matrix.rows().last().cloned().unwrap_or_default();
    record.summary = MetricSummary::compute(&matrix, None);
    record.matrix = Some(matrix);
    record.status = RunStatus::Completed;
    Ok(StrategyOutcome {
        record,
        snapshots,
        importance: learner.importance,
        diagnostics,
    })
}

/// Trains one model on all tasks at once: every epoch, each task's rows are
/// shuffled into batches and the batches of all tasks are interleaved in a
/// random order. The learning-rate step count runs over the whole run.
pub fn train_joint(config: &ExperimentConfig, tasks: &[TaskData]) -> Result<ModelState> {
    let mut model = initial_model(config, StrategyKind::Joint, tasks)?;
    let tr = &config.training;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.seeds.dropout,
        Stream::Dropout,
        u64::MAX,
        0,
    ));
    let mut step = 0;
    for epoch in 0..tr.epochs {
        let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
        for (t, task) in tasks.iter().enumerate() {
            let order = epoch_order(config, t, epoch, task.train.len());
            batches.extend(order.chunks(tr.batch_size).map(|c| (t, c.to_vec())));
        }
        let seed = derive_seed(config.seeds.data, Stream::JointOrder, epoch as u64, 0);
        batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for (t, rows) in batches {
            let batch = make_batch(&tasks[t].train, &rows, t)?;
            let lr = nn::lr_schedule(tr.lr, step, tr.decay_every, tr.decay_ratio);
            let ctx = StepContext {
                lr,
                consolidation: ConsolidationConfig::new(0.0, Regularizer::None)?,
                prior: None,
                si: None,
            };
            let loss = strategy_step(StrategyKind::Joint, &mut model, &batch, ctx, Mode::Train(&mut dropout_rng))?;
            check_finite(loss, "joint training", t)?;
            step += 1;
        }
    }
    Ok(model)
}

fn run_joint(config: &ExperimentConfig, tasks: &[TaskData], options: RunOptions<'_>) -> Result<StrategyOutcome> {
    let start = Instant::now();
    let model = train_joint(config, tasks)?;
    let accs = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| nn::accuracy(&model, t.test.images.view(), &t.test.labels, i))
        .collect::<Result<Vec<f64>>>()?;
    let mut record = StrategyRecord::failed(StrategyKind::Joint, model.arch.head_mode, 0.0, String::new());
    record.task_seconds.push(start.elapsed().as_secs_f64());
    if let (Some(dir), true) = (options.out_dir, config.artifacts.checkpoints) {
        let path = dir.join("checkpoints").join("joint.json");
        checkpoint::save_checkpoint(&path, &model)?;
        record.checkpoints.push(path);
    }
    record.summary.acc = Some(accs.iter().sum::<f64>() / accs.len() as f64);
    record.final_accuracies = accs;
    record.status = RunStatus::Completed;
    Ok(StrategyOutcome {
        record,
        snapshots: vec![model],
        importance: ImportanceMap::new(),
        diagnostics: None,
    })
}

/// Accuracy of a fresh model trained on each task alone, in the head mode
/// the config names.
pub fn single_task_reference(config: &ExperimentConfig, tasks: &[TaskData]) -> Result<Reference> {
    let values = tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let solo = std::slice::from_ref(task);
            let model = initial_model(config, StrategyKind::Joint, solo)?;
            let mut learner = Learner::new(StrategyKind::Sgd, model, 0.0)?;
            learner.train_task_as(config, t, &task.train)?;
            let acc = nn::accuracy(&learner.model, task.test.images.view(), &task.test.labels, 0)?;
            Ok(Some(acc))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Reference {
        values,
        source: ReferenceSource::SingleTask,
    })
}

impl Learner {
    /// Trains on `train` as head 0 while drawing random streams for task `t`.
    fn train_task_as(&mut self, config: &ExperimentConfig, t: usize, train: &Dataset) -> Result<()> {
        let tr = &config.training;
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.dropout, Stream::Dropout, t as u64, 0));
        let mut step = 0;
        for epoch in 0..tr.epochs {
            for chunk in epoch_order(config, t, epoch, train.len()).chunks(tr.batch_size) {
                let batch = make_batch(train, chunk, 0)?;
                let lr = nn::lr_schedule(tr.lr, step, tr.decay_every, tr.decay_ratio);
                let ctx = StepContext {
                    lr,
                    consolidation: self.consolidation,
                    prior: None,
                    si: None,
                };
                let loss = strategy_step(StrategyKind::Sgd, &mut self.model, &batch, ctx, Mode::Train(&mut dropout_rng))?;
                check_finite(loss, "single-task reference", t)?;
                step += 1;
            }
        }
        Ok(())
    }
}

/// Summary of a whole experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub name: String,
    pub config_hash: String,
    pub seeds: crate::config::Seeds,
    pub task_count: usize,
    pub tasks: Vec<TaskSpec>,
    /// Rows per task actually used (train, test).
    pub task_sizes: Vec<(usize, usize)>,
    pub reference: Option<Reference>,
    pub strategies: Vec<StrategyRecord>,
}

impl RunRecord {
    pub fn strategy(&self, kind: StrategyKind) -> Option<&StrategyRecord> {
        self.strategies.iter().find(|s| s.strategy == kind)
    }
}

/// In-memory results of [`run_sequence`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    /// Completed strategies' full outcomes, in config order.
    pub outcomes: Vec<StrategyOutcome>,
}

impl RunOutcome {
    pub fn outcome(&self, kind: StrategyKind) -> Option<&StrategyOutcome> {
        self.outcomes.iter().find(|o| o.record.strategy == kind)
    }
}

/// Resolves the FWT reference for `config`, training joint or single-task
/// models when needed. A joint outcome is returned for reuse.
fn resolve_reference(
    config: &ExperimentConfig,
    tasks: &[TaskData],
    out_dir: Option<&Path>,
) -> Result<(Option<Reference>, Option<StrategyOutcome>)> {
    if let Some(path) = &config.reference_file {
        let mut r: Reference = checkpoint::read_json(path)?;
        r.source = ReferenceSource::File;
        if r.values.len() != tasks.len() {
            return Err(Error::config(format!(
                "reference file {} has {} entries for {} tasks",
                path.display(),
                r.values.len(),
                tasks.len()
            )));
        }
        return Ok((Some(r), None));
    }
    match config.reference {
        ReferenceMode::None => Ok((None, None)),
        ReferenceMode::SingleTask => Ok((Some(single_task_reference(config, tasks)?), None)),
        ReferenceMode::Joint => {
            let joint = run_joint(
                config,
                tasks,
                RunOptions {
                    out_dir: out_dir.map(|d| d.join("joint")).as_deref(),
                    diagnostics: false,
                },
            )?;
            let r = Reference {
                values: joint.record.final_accuracies.iter().map(|&a| Some(a)).collect(),
                source: ReferenceSource::Joint,
            };
            Ok((Some(r), Some(joint)))
        }
    }
}

/// Runs every configured strategy over `tasks`. A failing strategy is
/// recorded with its cause and the others continue.
pub fn run_sequence_on(
    config: &ExperimentConfig,
    tasks: &[TaskData],
    out_dir: Option<&Path>,
    diagnostics: bool,
) -> Result<RunOutcome> {
    if tasks.is_empty() {
        return Err(Error::config("task sequence is empty"));
    }
    let (reference, mut joint) = match resolve_reference(config, tasks, out_dir) {
        Ok(r) => r,
        Err(e) => {
            // Without a reference only FWT is lost.
            eprintln!("reference accuracies unavailable: {e}");
            (None, None)
        }
    };
    let mut records = Vec::new();
    let mut outcomes = Vec::new();
    for &kind in &config.strategies {
        let dir = out_dir.map(|d| d.join(kind.name()));
        let result = match (kind, joint.take()) {
            (StrategyKind::Joint, Some(j)) => Ok(j),
            (_, j) => {
                joint = j;
                run_strategy(
                    config,
                    kind,
                    tasks,
                    RunOptions {
                        out_dir: dir.as_deref(),
                        diagnostics,
                    },
                )
            }
        };
        match result {
            Ok(mut outcome) => {
                if let Some(m) = &outcome.record.matrix {
                    outcome.record.summary = MetricSummary::compute(m, reference.as_ref());
                }
                records.push(outcome.record.clone());
                outcomes.push(outcome);
            }
            Err(e) => {
                let head = kind.head_mode(config.head_mode);
                records.push(StrategyRecord::failed(
                    kind,
                    head,
                    config.lambda.for_strategy(kind),
                    e.to_string(),
                ));
            }
        }
    }
    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        name: config.name.clone(),
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        task_count: tasks.len(),
        tasks: tasks.iter().map(|t| t.spec.clone()).collect(),
        task_sizes: tasks.iter().map(|t| (t.train.len(), t.test.len())).collect(),
        reference,
        strategies: records,
    };
    Ok(RunOutcome { record, outcomes })
}

/// Builds the tasks named by `config` and runs every strategy, writing
/// artifacts under `output_dir`.
pub fn run_sequence(config: &ExperimentConfig) -> Result<RunOutcome> {
    let dir = &config.output_dir;
    crate::report::write_resolved_config(dir, config)?;
    let tasks = build_tasks(config)?;
    let outcome = run_sequence_on(config, &tasks, Some(dir), true)?;
    crate::report::write_results(dir, &outcome.record)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub strategy: StrategyKind,
    pub lambda: f64,
    pub summary: MetricSummary,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_hash: String,
    pub points: Vec<SweepPoint>,
    pub baseline: Option<SweepPoint>,
    /// Grid value with the highest validation ACC (first on ties).
    pub best_lambda: Option<f64>,
}

fn sweep_point(config: &ExperimentConfig, kind: StrategyKind, lambda: f64, tasks: &[TaskData]) -> SweepPoint {
    let mut c = config.clone();
    c.lambda.set(kind, lambda);
    match run_strategy(&c, kind, tasks, RunOptions::default()) {
        Ok(o) => SweepPoint {
            strategy: kind,
            lambda,
            summary: o.record.summary,
            status: RunStatus::Completed,
        },
        Err(e) => SweepPoint {
            strategy: kind,
            lambda,
            summary: StrategyRecord::failed(kind, HeadMode::Single, lambda, String::new()).summary,
            status: RunStatus::Failed {
                cause: e.to_string(),
            },
        },
    }
}

/// Greedy λ search on validation splits carved from the training rows.
pub fn sweep_on(config: &ExperimentConfig, tasks: &[TaskData]) -> Result<SweepResult> {
    let kind = config.sweep.strategy;
    if !kind.is_regularized() {
        return Err(Error::config(format!("strategy `{kind}` has no lambda to sweep")));
    }
    let points: Vec<SweepPoint> = config
        .sweep
        .grid
        .iter()
        .map(|&l| sweep_point(config, kind, l, tasks))
        .collect();
    let baseline = config
        .sweep
        .baseline
        .then(|| sweep_point(config, StrategyKind::Sgd, 0.0, tasks));
    let best_lambda = points
        .iter()
        .filter_map(|p| p.summary.acc.map(|a| (p.lambda, a)))
        .fold(None, |best: Option<(f64, f64)>, (l, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((l, a)),
        })
        .map(|(l, _)| l);
    Ok(SweepResult {
        config_hash: config.hash(),
        points,
        baseline,
        best_lambda,
    })
}

pub fn sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    let tasks = to_validation_tasks(config, build_tasks(config)?)?;
    sweep_on(config, &tasks)
}
