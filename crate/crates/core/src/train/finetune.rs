//! Multi-task fine-tuning of the electrode graph over a frozen encoder.
//!
//! Joint mode interleaves every task in mixed batches; the subgraph masking
//! keeps samples isolated, so one optimizer step sees several tasks at once.
//! Separate mode trains an independent graph per task on *exactly* the sample
//! draws the joint schedule allocated to that task, with the same batch size —
//! budgets are matched in draws, asserted, and reported.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, EegSample, TaskId};
use crate::ete::EteModel;
use crate::numkit::Tape;
use crate::teg::{cross_entropy, SubgraphActivation, TegModel};

use super::evaluate::{evaluate, split_dataset, SplitRatios};
use super::metrics::{MetricRow, MetricsLog};
use super::optim::{AdamW, AdamWConfig, Schedule};
use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    Joint,
    Separate,
}

/// One downstream task with its splits.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task: TaskId,
    pub num_classes: u32,
    pub train: Vec<EegSample>,
    pub val: Vec<EegSample>,
    pub test: Vec<EegSample>,
}

impl TaskDataset {
    /// Split a labeled dataset 8:1:1 (subject-disjoint when subjects exist).
    pub fn from_dataset(dataset: &Dataset, seed: u64) -> Result<Self, TrainError> {
        let num_classes = dataset
            .num_classes
            .ok_or_else(|| TrainError::Config(format!("dataset {} has no classes", dataset.name)))?;
        let (train, val, test) = split_dataset(dataset, SplitRatios::default(), seed)?;
        Ok(Self {
            task: TaskId(dataset.name.clone()),
            num_classes,
            train,
            val,
            test,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Joint-mode optimizer steps; separate mode derives its per-task budget.
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: Schedule,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub mode: FinetuneMode,
    pub metrics: MetricsLog,
    /// Validation accuracy per task after training.
    pub per_task_accuracy: BTreeMap<TaskId, f64>,
    /// Sample draws each task received (identical across modes by
    /// construction).
    pub per_task_draws: BTreeMap<TaskId, u64>,
    pub per_task_steps: BTreeMap<TaskId, u64>,
    pub joint_model: Option<TegModel>,
    pub separate_models: BTreeMap<TaskId, TegModel>,
}

/// The joint-mode draw schedule: for each step, `batch_size` (task, sample)
/// slots drawn uniformly from the pooled training sets (so tasks are sampled
/// in proportion to their size).
pub fn joint_schedule(
    tasks: &[TaskDataset],
    steps: u64,
    batch_size: usize,
    seed: u64,
) -> Vec<Vec<(usize, usize)>> {
    let pooled: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.train.len()).map(move |si| (ti, si)))
        .collect();
    (0..steps)
        .map(|step| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(step + 1);
            (0..batch_size)
                .map(|_| pooled[rng.gen_range(0..pooled.len())])
                .collect()
        })
        .collect()
}

fn register_all(template: &TegModel, tasks: &[TaskDataset], seed: u64) -> TegModel {
    let mut model = template.clone();
    for (i, t) in tasks.iter().enumerate() {
        model.register_task(t.task.clone(), t.num_classes, seed ^ (i as u64 + 1));
    }
    model
}

fn batch_loss(
    model: &TegModel,
    ete: &EteModel,
    tasks: &[TaskDataset],
    slots: &[(usize, usize)],
) -> Result<(Tape, crate::numkit::Val, f64), TrainError> {
    let mut tape = Tape::new();
    let mut total = None;
    for &(ti, si) in slots {
        let task = &tasks[ti];
        let sample = &task.train[si];
        let label = sample
            .label()
            .ok_or_else(|| TrainError::Config(format!("unlabeled sample in task {}", task.task)))?;
        let activation = SubgraphActivation::from_sample(sample)?;
        let z = model.extract_reprs(&mut tape, ete, sample)?;
        let logits = model.forward(&mut tape, z, &activation, &task.task)?;
        let ce = cross_entropy(&mut tape, logits, label)?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    let mean = tape.scale(total.expect("non-empty batch"), 1.0 / slots.len() as f64)?;
    let value = tape.scalar_value(mean)?;
    Ok((tape, mean, value))
}

#[allow(clippy::too_many_arguments)]
fn train_on_schedule(
    model: &mut TegModel,
    ete: &EteModel,
    tasks: &[TaskDataset],
    schedule: &[Vec<(usize, usize)>],
    lr_schedule: &Schedule,
    optimizer_cfg: AdamWConfig,
    metrics: &mut MetricsLog,
    task_tag: Option<&TaskId>,
    step_offset: u64,
) -> Result<(), TrainError> {
    let mut optimizer = AdamW::new(optimizer_cfg);
    for (step, slots) in schedule.iter().enumerate() {
        if slots.is_empty() {
            continue;
        }
        let (tape, mean, loss_value) = batch_loss(model, ete, tasks, slots)?;
        let grads = tape.backward(mean)?;
        let lr = lr_schedule.lr(step as u64);
        optimizer.step(model.params_mut(), &grads, lr)?;
        metrics.push(MetricRow {
            step: step_offset + step as u64 + 1,
            lr,
            loss: Some(loss_value),
            holdout_loss: None,
            task: task_tag.map(|t| t.0.clone()),
            accuracy: None,
        });
    }
    Ok(())
}

/// Fine-tune on multiple tasks. The encoder (and with it the electrode
/// vocabulary) must already be frozen; only graph parameters, the summary
/// token, and task heads train.
pub fn finetune(
    tasks: &[TaskDataset],
    ete: &EteModel,
    teg_template: &TegModel,
    mode: FinetuneMode,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::Config("no tasks to fine-tune on".into()));
    }
    for t in tasks {
        if t.train.is_empty() {
            return Err(TrainError::EmptySplit(format!("task {} train", t.task)));
        }
        if t.val.is_empty() {
            return Err(TrainError::EmptySplit(format!("task {} val", t.task)));
        }
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }

    let schedule = joint_schedule(tasks, cfg.steps, cfg.batch_size, cfg.seed);
    let mut per_task_draws: BTreeMap<TaskId, u64> = BTreeMap::new();
    for slots in &schedule {
        for &(ti, _) in slots {
            *per_task_draws.entry(tasks[ti].task.clone()).or_default() += 1;
        }
    }

    let mut metrics = MetricsLog::new();
    let mut per_task_accuracy = BTreeMap::new();
    let mut per_task_steps = BTreeMap::new();
    let mut joint_model = None;
    let mut separate_models = BTreeMap::new();

    match mode {
        FinetuneMode::Joint => {
            let mut model = register_all(teg_template, tasks, cfg.seed);
            train_on_schedule(
                &mut model,
                ete,
                tasks,
                &schedule,
                &cfg.schedule,
                cfg.optimizer,
                &mut metrics,
                None,
                0,
            )?;
            for t in tasks {
                let report = evaluate(ete, &model, &t.val, &t.task)?;
                per_task_accuracy.insert(t.task.clone(), report.accuracy);
                per_task_steps.insert(t.task.clone(), cfg.steps);
                metrics.push(MetricRow {
                    step: cfg.steps,
                    lr: 0.0,
                    loss: None,
                    holdout_loss: None,
                    task: Some(t.task.0.clone()),
                    accuracy: Some(report.accuracy),
                });
            }
            joint_model = Some(model);
        }
        FinetuneMode::Separate => {
            // one global step counter keeps the combined log monotone
            let mut step_offset = 0u64;
            for (ti, t) in tasks.iter().enumerate() {
                // replay exactly this task's share of the joint schedule
                let draws: Vec<(usize, usize)> = schedule
                    .iter()
                    .flatten()
                    .filter(|&&(i, _)| i == ti)
                    .copied()
                    .collect();
                debug_assert_eq!(
                    draws.len() as u64,
                    per_task_draws.get(&t.task).copied().unwrap_or(0)
                );
                let task_schedule: Vec<Vec<(usize, usize)>> = draws
                    .chunks(cfg.batch_size)
                    .map(<[(usize, usize)]>::to_vec)
                    .collect();
                let steps = task_schedule.len() as u64;
                let lr_schedule = Schedule {
                    warmup_ratio: cfg.schedule.warmup_ratio,
                    total_steps: steps.max(1),
                    base_lr: cfg.schedule.base_lr,
                };
                // head init matches the joint run's seed for this task
                let mut model = teg_template.clone();
                model.register_task(t.task.clone(), t.num_classes, cfg.seed ^ (ti as u64 + 1));
                train_on_schedule(
                    &mut model,
                    ete,
                    std::slice::from_ref(t),
                    &task_schedule
                        .iter()
                        .map(|slots| slots.iter().map(|&(_, si)| (0usize, si)).collect())
                        .collect::<Vec<_>>(),
                    &lr_schedule,
                    cfg.optimizer,
                    &mut metrics,
                    Some(&t.task),
                    step_offset,
                )?;
                let report = evaluate(ete, &model, &t.val, &t.task)?;
                per_task_accuracy.insert(t.task.clone(), report.accuracy);
                per_task_steps.insert(t.task.clone(), steps);
                metrics.push(MetricRow {
                    step: step_offset + steps,
                    lr: 0.0,
                    loss: None,
                    holdout_loss: None,
                    task: Some(t.task.0.clone()),
                    accuracy: Some(report.accuracy),
                });
                step_offset += steps;
                separate_models.insert(t.task.clone(), model);
            }
        }
    }

    Ok(FinetuneOutcome {
        mode,
        metrics,
        per_task_accuracy,
        per_task_draws,
        per_task_steps,
        joint_model,
        separate_models,
    })
}
