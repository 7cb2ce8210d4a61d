//! Sequential training replayed step by step, and the per-strategy update
//! rules.

mod common;

use common::*;
use spp_core::config::{
    DataConfig, DataSource, ExperimentConfig, ImportanceConfig, ModelConfig, ReferenceMode, StrategyKind,
    TaskSequenceKind, TasksConfig, TrainingConfig,
};
use spp_core::consolidation::{self, ConsolidationConfig, Prior, Regularizer};
use spp_core::importance::{ImportanceMap, Scaling};
use spp_core::nn::{self, Architecture, Batch, HeadMode, Mode, Objective};
use spp_core::params::ParamMap;
use spp_core::runner::{self, RunOptions, StepContext, TaskData};

fn permuted_config(strategies: Vec<StrategyKind>) -> ExperimentConfig {
    ExperimentConfig {
        strategies,
        head_mode: HeadMode::Single,
        reference: ReferenceMode::None,
        model: ModelConfig {
            layers: vec![6, 3, 2],
            dropout: 0.0,
        },
        data: DataConfig {
            source: DataSource::Synthetic,
            train_per_task: 48,
            test_per_task: 30,
            synthetic_train: 200,
            synthetic_test: 100,
            synthetic_classes: 2,
            synthetic_noise: 0.3,
            ..DataConfig::default()
        },
        tasks: TasksConfig {
            kind: TaskSequenceKind::Permuted,
            count: 2,
            ..TasksConfig::default()
        },
        training: TrainingConfig {
            epochs: 3,
            batch_size: 8,
            lr: 0.2,
            decay_every: 5,
            decay_ratio: 0.9,
        },
        importance: ImportanceConfig {
            sample_size: 24,
            ..ImportanceConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn split_config(strategies: Vec<StrategyKind>) -> ExperimentConfig {
    ExperimentConfig {
        strategies,
        head_mode: HeadMode::Multi,
        reference: ReferenceMode::None,
        model: ModelConfig {
            layers: vec![10, 6, 4],
            dropout: 0.0,
        },
        data: DataConfig {
            source: DataSource::Synthetic,
            train_per_task: 40,
            test_per_task: 20,
            synthetic_train: 240,
            synthetic_test: 120,
            synthetic_classes: 4,
            synthetic_noise: 0.25,
            ..DataConfig::default()
        },
        tasks: TasksConfig {
            subsets: vec![vec![0, 1], vec![2, 3]],
            ..TasksConfig::default()
        },
        training: TrainingConfig {
            epochs: 2,
            batch_size: 10,
            ..TrainingConfig::default()
        },
        importance: ImportanceConfig {
            sample_size: 16,
            ..ImportanceConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn run(config: &ExperimentConfig, kind: StrategyKind, tasks: &[TaskData]) -> spp_core::runner::StrategyOutcome {
    runner::run_strategy(config, kind, tasks, RunOptions::default()).unwrap()
}

/// Clamped `−g·w + ½F·w²` with `g` and `F` accumulated one sample at a time.
fn saliency_oracle(m: &nn::ModelState, x: &ndarray::Array2<f64>) -> ParamMap {
    let n = x.nrows() as f64;
    let mut g = m.params.zeros_like();
    let mut f = m.params.zeros_like();
    for r in 0..x.nrows() {
        let xi = x.slice(ndarray::s![r..r + 1, ..]).to_owned();
        let gi = nn::gradients(m, &Batch::new(xi, vec![0], 0).unwrap(), Objective::Entropy).unwrap().params;
        g.zip_apply(&gi, |a, v| *a += v);
        f.zip_apply(&gi, |a, v| *a += v * v);
    }
    let mut s = m.params.clone();
    for id in tensor_ids(&s) {
        let (gs, fs) = (g.tensor(id).to_vec(), f.tensor(id).to_vec());
        for (k, w) in s.tensor_mut(id).iter_mut().enumerate() {
            let v = -(gs[k] / n) * *w + 0.5 * (fs[k] / n) * *w * *w;
            *w = v.max(0.0);
        }
    }
    s
}

#[test]
fn spp_run_matches_scripted_replay() {
    let mut config = permuted_config(vec![StrategyKind::Spp]);
    config.lambda.spp = 2.0;
    config.importance.spp_scaling = Scaling::Max;
    let tasks = runner::build_tasks(&config).unwrap();
    let outcome = run(&config, StrategyKind::Spp, &tasks);
    let model0 = runner::initial_model(&config, StrategyKind::Spp, &tasks).unwrap();
    assert!(model0.num_params() <= 30);

    let tr = &config.training;
    let mut m = model0;
    let mut anchor: Option<ParamMap> = None;
    let mut omega_sum: Option<ParamMap> = None;
    let mut rows = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let mut step = 0;
        for epoch in 0..tr.epochs {
            let order = runner::epoch_order(&config, t, epoch, task.train.len());
            for chunk in order.chunks(tr.batch_size) {
                let batch = runner::make_batch(&task.train, chunk, t).unwrap();
                let lr = tr.lr * tr.decay_ratio.powi((step / tr.decay_every) as i32);
                let mut g = nn::gradients(&m, &batch, Objective::CrossEntropy).unwrap().params;
                if let (Some(a), Some(o)) = (&anchor, &omega_sum) {
                    let max = o.flatten().into_iter().fold(0.0, f64::max);
                    for id in tensor_ids(&g) {
                        let (w, a, o) = (m.params.tensor(id).to_vec(), a.tensor(id).to_vec(), o.tensor(id).to_vec());
                        for (k, gk) in g.tensor_mut(id).iter_mut().enumerate() {
                            *gk += 2.0 * config.lambda.spp * (o[k] / max) * (w[k] - a[k]);
                        }
                    }
                }
                let before = m.params.clone();
                for id in tensor_ids(&g) {
                    let gs = g.tensor(id).to_vec();
                    for (k, w) in m.params.tensor_mut(id).iter_mut().enumerate() {
                        *w = before.tensor(id)[k] - lr * gs[k];
                    }
                }
                step += 1;
            }
        }
        let row: Vec<f64> = tasks[..=t]
            .iter()
            .map(|task| {
                let logits = nn::forward(&m, task.test.images.view(), 0).unwrap();
                let hits = logits
                    .rows()
                    .into_iter()
                    .zip(&task.test.labels)
                    .filter(|(r, &l)| nn::argmax(r.iter().copied()) == l)
                    .count();
                hits as f64 / task.test.len() as f64
            })
            .collect();
        rows.push(row);
        anchor = Some(m.params.clone());
        let sample = runner::importance_sample(&config, t, &task.train).unwrap();
        let s = saliency_oracle(&m, &sample.images);
        omega_sum = Some(match omega_sum {
            Some(mut acc) => {
                acc.add_assign(&s);
                acc
            }
            None => s,
        });
    }

    let matrix = outcome.record.matrix.unwrap();
    assert_eq!(matrix.rows(), rows.as_slice());
    for (a, b) in outcome.snapshots[1].params.flatten().iter().zip(m.params.flatten()) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn spp_step_adds_analytic_penalty_gradient() {
    let m = net_4_3_2(4);
    let anchor = consolidation::take_anchor(
        &{
            let mut a = m.clone();
            a.params = random_like(&m.params, 5, -1.0, 1.0);
            a
        },
        0,
    );
    let mut imp = ImportanceMap::new();
    imp.accumulate(0, random_like(&m.params, 6, 0.0, 2.0)).unwrap();
    let b = batch(6, 4, 2, 7);
    let lambda = 3.0;
    let (lr, cfg) = (0.05, ConsolidationConfig::new(lambda, Regularizer::Spp).unwrap());

    let mut stepped = m.clone();
    let ctx = StepContext {
        lr,
        consolidation: cfg,
        prior: Some(Prior {
            anchor: &anchor,
            importance: &imp,
        }),
        si: None,
    };
    runner::strategy_step(StrategyKind::Spp, &mut stepped, &b, ctx, Mode::Eval).unwrap();

    let plain = nn::gradients(&m, &b, Objective::CrossEntropy).unwrap().params;
    let omega = imp.cumulative.as_ref().unwrap();
    for id in tensor_ids(&m.params) {
        for k in 0..m.params.tensor(id).len() {
            let w = m.params.tensor(id)[k];
            let expected = plain.tensor(id)[k] + 2.0 * lambda * omega.tensor(id)[k] * (w - anchor.params().tensor(id)[k]);
            let implied = (w - stepped.params.tensor(id)[k]) / lr;
            assert!(relative_error(implied, expected, 1e-9) < 1e-9, "{id:?}[{k}]: {implied} vs {expected}");
        }
    }
}

#[test]
fn sgd_f_freezes_trunk_after_first_task() {
    let config = split_config(vec![StrategyKind::SgdF]);
    let tasks = runner::build_tasks(&config).unwrap();
    let outcome = run(&config, StrategyKind::SgdF, &tasks);
    let (first, last) = (&outcome.snapshots[0].params, &outcome.snapshots[1].params);
    assert_eq!(bits(&ParamMap { trunk: first.trunk.clone(), heads: vec![] }.flatten()),
               bits(&ParamMap { trunk: last.trunk.clone(), heads: vec![] }.flatten()));
    assert_ne!(first.heads[1], last.heads[1]);
}

#[test]
fn finetune_leaves_other_heads_untouched() {
    let config = split_config(vec![StrategyKind::Finetune]);
    let tasks = runner::build_tasks(&config).unwrap();
    let outcome = run(&config, StrategyKind::Finetune, &tasks);
    let init = runner::initial_model(&config, StrategyKind::Finetune, &tasks).unwrap();
    assert_eq!(outcome.snapshots[0].params.heads[1], init.params.heads[1]);
    assert_eq!(outcome.snapshots[1].params.heads[0], outcome.snapshots[0].params.heads[0]);
    assert_ne!(outcome.snapshots[1].params.trunk, outcome.snapshots[0].params.trunk);
}

#[test]
fn spp_with_zero_lambda_reproduces_sgd() {
    let mut config = permuted_config(vec![StrategyKind::Spp, StrategyKind::Sgd]);
    config.lambda.spp = 0.0;
    let tasks = runner::build_tasks(&config).unwrap();
    let spp = run(&config, StrategyKind::Spp, &tasks);
    let sgd = run(&config, StrategyKind::Sgd, &tasks);
    assert!(spp.record.summary.bitwise_eq(&sgd.record.summary));
    assert_eq!(bits(&spp.snapshots[1].params.flatten()), bits(&sgd.snapshots[1].params.flatten()));
}

#[test]
fn first_task_of_regularized_strategies_matches_finetune() {
    let config = split_config(vec![]);
    let tasks = runner::build_tasks(&config).unwrap();
    let reference = run(&config, StrategyKind::Finetune, &tasks);
    for kind in [StrategyKind::Spp, StrategyKind::Ewc, StrategyKind::Si, StrategyKind::Mas] {
        let outcome = run(&config, kind, &tasks);
        assert_eq!(
            bits(&outcome.snapshots[0].params.flatten()),
            bits(&reference.snapshots[0].params.flatten()),
            "{kind:?}"
        );
    }
}

#[test]
fn runs_are_deterministic_and_independent_of_strategy_order() {
    let config = split_config(vec![StrategyKind::Spp, StrategyKind::Ewc]);
    let tasks = runner::build_tasks(&config).unwrap();
    let a = runner::run_sequence_on(&config, &tasks, None, false).unwrap();
    let mut reordered = config.clone();
    reordered.strategies = vec![StrategyKind::Ewc, StrategyKind::Spp];
    let b = runner::run_sequence_on(&reordered, &tasks, None, false).unwrap();
    for kind in [StrategyKind::Spp, StrategyKind::Ewc] {
        let (x, y) = (a.outcome(kind).unwrap(), b.outcome(kind).unwrap());
        assert_eq!(x.record.matrix, y.record.matrix);
        assert_eq!(bits(&x.snapshots[1].params.flatten()), bits(&y.snapshots[1].params.flatten()));
    }
}

#[test]
fn architecture_follows_head_rule() {
    let config = split_config(vec![]);
    let tasks = runner::build_tasks(&config).unwrap();
    let sgd = runner::architecture_for(&config, StrategyKind::Sgd, &tasks).unwrap();
    let ft = runner::architecture_for(&config, StrategyKind::Finetune, &tasks).unwrap();
    assert_eq!(sgd.head_mode, HeadMode::Single);
    assert_eq!(ft.head_mode, HeadMode::Multi);
    assert_eq!(ft, Architecture::multi(&[10, 6, 4], &[2, 2]).unwrap());
}
