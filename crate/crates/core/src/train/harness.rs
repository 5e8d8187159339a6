//! Protocol harnesses: objective comparison (autoregressive vs masked
//! reconstruction), joint-vs-separate fine-tuning, and the model-size ×
//! token-budget scaling grid. Each emits plot-ready tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{generate_synthetic, PreprocessProfile, SyntheticSpec, TaskId};
use crate::ete::{count_parameters, EteConfig, EteModel, FullConfig, MaeModel, Rho};
use crate::teg::TegModel;
use crate::tokenizer::{reorganize, ElectrodeVocabulary, GroupedCorpus};

use super::finetune::{finetune, FinetuneConfig, FinetuneMode, TaskDataset};
use super::pretrain::{pretrain, Objective, PretrainConfig, PretrainModel};
use super::TrainError;

/// Shared experiment scaffold: synthetic corpus and task specs plus the
/// training configurations every harness builds on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub profile: PreprocessProfile,
    pub corpus_spec: SyntheticSpec,
    /// Named downstream tasks (labels come from each spec's task rule).
    pub task_specs: Vec<(String, SyntheticSpec)>,
    pub ete: EteConfig,
    pub teg_layers: usize,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub mask_ratio: f64,
}

impl HarnessConfig {
    pub fn corpus(&self) -> Result<GroupedCorpus, TrainError> {
        let dataset = generate_synthetic(&self.corpus_spec, &self.profile, "corpus", None)?;
        Ok(reorganize(&dataset.samples).map_err(|e| TrainError::Config(e.to_string()))?)
    }

    pub fn task(&self, index: usize, split_seed: u64) -> Result<TaskDataset, TrainError> {
        let (name, spec) = self
            .task_specs
            .get(index)
            .ok_or_else(|| TrainError::Config(format!("no task spec at index {index}")))?;
        let dataset = generate_synthetic(spec, &self.profile, name, Some(TaskId(name.clone())))?;
        TaskDataset::from_dataset(&dataset, split_seed)
    }
}

/// Vocabulary init seed derived from a run seed, shared by the harnesses and
/// the CLI so runs agree on initialization.
pub fn derive_vocab_seed(seed: u64) -> u64 {
    seed ^ 0x766f_6361
}

/// Pretrain one encoder under the given objective, then freeze it.
fn pretrain_frozen(
    cfg: &HarnessConfig,
    corpus: &GroupedCorpus,
    objective: Objective,
    seed: u64,
    train_fraction: f64,
) -> Result<(EteModel, f64, f64), TrainError> {
    let mut model = match objective {
        Objective::Ar { .. } => PretrainModel::Ar(EteModel::init(&cfg.ete, seed)?),
        Objective::Mae { .. } => PretrainModel::Mae(MaeModel::init(&cfg.ete, seed)?),
    };
    let mut vocab = ElectrodeVocabulary::init(cfg.ete.token_width, derive_vocab_seed(seed));
    let mut pcfg = cfg.pretrain.clone();
    pcfg.objective = objective;
    pcfg.seed = seed;
    pcfg.train_fraction = train_fraction;
    let outcome = pretrain(corpus, &mut model, &mut vocab, &pcfg, None)?;
    let mut encoder = model.into_encoder();
    encoder.freeze();
    Ok((
        encoder,
        outcome.initial_holdout_loss,
        outcome.final_holdout_loss,
    ))
}

fn finetune_accuracy(
    cfg: &HarnessConfig,
    encoder: &EteModel,
    task: &TaskDataset,
    seed: u64,
) -> Result<f64, TrainError> {
    let template = TegModel::init(&cfg.ete, cfg.teg_layers, seed ^ 0x7465_67)?;
    let mut fcfg = cfg.finetune.clone();
    fcfg.seed = seed;
    let outcome = finetune(
        std::slice::from_ref(task),
        encoder,
        &template,
        FinetuneMode::Joint,
        &fcfg,
    )?;
    Ok(outcome.per_task_accuracy[&task.task])
}

/// One harness measurement: objective × distance × seed.
#[derive(Debug, Clone, Serialize)]
pub struct ObjectiveCell {
    pub method: String,
    pub rho: String,
    pub seed: u64,
    pub final_pretrain_loss: f64,
    pub accuracy: f64,
}

/// Pretrain both objectives under matched budgets and fine-tune each on the
/// first task spec, for every `(rho, seed)` pair.
pub fn ar_vs_mae_harness(
    cfg: &HarnessConfig,
    rhos: &[Rho],
    seeds: &[u64],
) -> Result<Vec<ObjectiveCell>, TrainError> {
    let corpus = cfg.corpus()?;
    let mut cells = Vec::new();
    for &rho in rhos {
        for &seed in seeds {
            let task = cfg.task(0, seed)?;
            for method in ["MAE", "AR"] {
                let objective = match method {
                    "AR" => Objective::Ar { rho },
                    _ => Objective::Mae {
                        rho,
                        mask_ratio: cfg.mask_ratio,
                    },
                };
                let (encoder, _, final_loss) =
                    pretrain_frozen(cfg, &corpus, objective, seed, 1.0)?;
                let accuracy = finetune_accuracy(cfg, &encoder, &task, seed)?;
                cells.push(ObjectiveCell {
                    method: method.to_string(),
                    rho: rho.to_string(),
                    seed,
                    final_pretrain_loss: final_loss,
                    accuracy,
                });
            }
        }
    }
    Ok(cells)
}

/// Render objective-comparison cells as a fixed-width table, one row per
/// method × distance, one accuracy column per seed plus the mean.
pub fn objective_table(cells: &[ObjectiveCell]) -> String {
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut out = String::from("method,loss");
    for s in &seeds {
        let _ = write!(out, ",acc_seed{s}");
    }
    out.push_str(",acc_mean\n");
    let mut keys: Vec<(String, String)> = cells
        .iter()
        .map(|c| (c.method.clone(), c.rho.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    for (method, rho) in keys {
        let _ = write!(out, "{method},{rho}");
        let mut accs = Vec::new();
        for s in &seeds {
            let cell = cells
                .iter()
                .find(|c| c.method == method && c.rho == rho && c.seed == *s);
            match cell {
                Some(c) => {
                    accs.push(c.accuracy);
                    let _ = write!(out, ",{:.4}", c.accuracy);
                }
                None => out.push(','),
            }
        }
        let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        let _ = writeln!(out, ",{mean:.4}");
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct JointSeparateReport {
    /// `(task, joint accuracy, separate accuracy, delta)`
    pub rows: Vec<(String, f64, f64, f64)>,
    pub per_task_draws: Vec<(String, u64)>,
    /// Two identical-seed joint runs produced identical metrics.
    pub deterministic: bool,
    /// Separate mode consumed exactly the joint schedule's per-task draws.
    pub budgets_matched: bool,
}

impl JointSeparateReport {
    pub fn table(&self) -> String {
        let mut out = String::from("setting");
        for (task, _, _, _) in &self.rows {
            let _ = write!(out, ",{task}");
        }
        out.push('\n');
        out.push_str("separate");
        for (_, _, sep, _) in &self.rows {
            let _ = write!(out, ",{sep:.4}");
        }
        out.push('\n');
        out.push_str("joint");
        for (_, joint, _, _) in &self.rows {
            let _ = write!(out, ",{joint:.4}");
        }
        out.push('\n');
        out.push_str("delta");
        for (_, _, _, delta) in &self.rows {
            let _ = write!(out, ",{delta:+.4}");
        }
        out.push('\n');
        out
    }
}

/// Run joint and separate fine-tuning on the first two task specs under one
/// pretrained encoder; determinism and budget matching are verified here, the
/// sign of the per-task delta is only reported.
pub fn joint_vs_separate_harness(
    cfg: &HarnessConfig,
    seed: u64,
) -> Result<JointSeparateReport, TrainError> {
    if cfg.task_specs.len() < 2 {
        return Err(TrainError::Config(
            "joint-vs-separate needs two task specs".into(),
        ));
    }
    let corpus = cfg.corpus()?;
    let (encoder, _, _) = pretrain_frozen(
        cfg,
        &corpus,
        Objective::Ar { rho: Rho::L2 },
        seed,
        1.0,
    )?;
    let tasks = vec![cfg.task(0, seed)?, cfg.task(1, seed)?];
    let template = TegModel::init(&cfg.ete, cfg.teg_layers, seed ^ 0x7465_67)?;
    let mut fcfg = cfg.finetune.clone();
    fcfg.seed = seed;

    let joint_a = finetune(&tasks, &encoder, &template, FinetuneMode::Joint, &fcfg)?;
    let joint_b = finetune(&tasks, &encoder, &template, FinetuneMode::Joint, &fcfg)?;
    let separate = finetune(&tasks, &encoder, &template, FinetuneMode::Separate, &fcfg)?;

    let deterministic = joint_a.metrics == joint_b.metrics;
    let budgets_matched = joint_a.per_task_draws == separate.per_task_draws;

    let mut rows = Vec::new();
    for t in &tasks {
        let joint = joint_a.per_task_accuracy[&t.task];
        let sep = separate.per_task_accuracy[&t.task];
        rows.push((t.task.0.clone(), joint, sep, joint - sep));
    }
    let per_task_draws = joint_a
        .per_task_draws
        .iter()
        .map(|(task, draws)| (task.0.clone(), *draws))
        .collect();
    Ok(JointSeparateReport {
        rows,
        per_task_draws,
        deterministic,
        budgets_matched,
    })
}

/// The model-size × token-budget grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingLadder {
    /// `(name, encoder config, graph depth)`, smallest first.
    pub configs: Vec<(String, EteConfig, usize)>,
    /// Token-budget fractions, e.g. `[0, 0.25, 0.5, 0.75, 1]`.
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: HarnessConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingCell {
    pub config: String,
    pub params: u64,
    pub seed: u64,
    pub fraction: f64,
    /// Signal tokens in the allotted training budget.
    pub tokens: u64,
    pub final_loss: f64,
    pub accuracy: f64,
}

/// Every `(config, fraction, seed)` cell: pretrain at the budget (a zero
/// budget skips pretraining entirely — the frozen random encoder), then
/// fine-tune and evaluate the first task.
pub fn scaling_harness(ladder: &ScalingLadder) -> Result<Vec<ScalingCell>, TrainError> {
    let corpus = ladder.base.corpus()?;
    let blocks = corpus.num_blocks() as f64;
    let tokens_per_block = {
        let (_, first) = corpus
            .block_index()
            .first()
            .copied()
            .map(|(id, b)| (id, b))
            .ok_or_else(|| TrainError::Config("empty corpus".into()))?;
        corpus
            .block_tokens(first)
            .map_err(|e| TrainError::Config(e.to_string()))?
            .rows() as u64
    };
    let mut cells = Vec::new();
    for (name, ete_cfg, teg_layers) in &ladder.configs {
        let mut cfg = ladder.base.clone();
        cfg.ete = ete_cfg.clone();
        cfg.teg_layers = *teg_layers;
        let params = count_parameters(&FullConfig {
            ete: ete_cfg.clone(),
            teg_layers: *teg_layers,
        })
        .total();
        for &seed in &ladder.seeds {
            for &fraction in &ladder.fractions {
                let task = cfg.task(0, seed)?;
                let (encoder, initial_loss, final_loss) = if fraction == 0.0 {
                    // no pretraining: frozen random initialization
                    let mut zero_cfg = cfg.clone();
                    zero_cfg.pretrain.steps = 0;
                    pretrain_frozen(&zero_cfg, &corpus, cfg.pretrain.objective, seed, 1.0)?
                } else {
                    pretrain_frozen(&cfg, &corpus, cfg.pretrain.objective, seed, fraction)?
                };
                let loss = if fraction == 0.0 { initial_loss } else { final_loss };
                let accuracy = finetune_accuracy(&cfg, &encoder, &task, seed)?;
                let tokens = if fraction == 0.0 {
                    0
                } else {
                    (fraction * blocks * (1.0 - cfg.pretrain.holdout_fraction)).round() as u64
                        * tokens_per_block
                };
                cells.push(ScalingCell {
                    config: name.clone(),
                    params,
                    seed,
                    fraction,
                    tokens,
                    final_loss: loss,
                    accuracy,
                });
            }
        }
    }
    Ok(cells)
}

pub fn scaling_csv(cells: &[ScalingCell]) -> String {
    let mut out = String::from("config,params,seed,fraction,tokens,final_loss,accuracy\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.config, c.params, c.seed, c.fraction, c.tokens, c.final_loss, c.accuracy
        );
    }
    out
}

/// Whitespace-separated columns with a comment header, one block per config.
pub fn scaling_gnuplot(cells: &[ScalingCell]) -> String {
    let mut out = String::from("# config params seed fraction tokens final_loss accuracy\n");
    let mut names: Vec<&str> = cells.iter().map(|c| c.config.as_str()).collect();
    names.dedup();
    for name in names {
        for c in cells.iter().filter(|c| c.config == name) {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {}",
                c.config, c.params, c.seed, c.fraction, c.tokens, c.final_loss, c.accuracy
            );
        }
        out.push('\n');
    }
    out
}
