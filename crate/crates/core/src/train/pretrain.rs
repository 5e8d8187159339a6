//! Self-supervised pretraining over a grouped electrode corpus.
//!
//! Batch composition is stateless: step `s` draws its block indices from a
//! ChaCha8 generator on stream `s + 1`, so a resumed run continues bit-for-bit
//! from a checkpoint holding only parameters, optimizer moments, and the step
//! counter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::ete::{EteModel, MaeModel, Rho};
use crate::numkit::{NumError, Tape, Tensor};
use crate::tokenizer::{assemble_pretrain_on, BlockRef, ElectrodeId, ElectrodeVocabulary, GroupedCorpus};

use super::metrics::{MetricRow, MetricsLog};
use super::optim::{AdamW, AdamWConfig, Schedule};
use super::{io_err, TrainError};

/// Stream reserved for the train/holdout split shuffle.
const SPLIT_STREAM: u64 = u64::MAX - 1;

fn default_train_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    /// Next-token prediction under a causal mask.
    Ar { rho: Rho },
    /// Bidirectional masked reconstruction over random signal positions.
    Mae { rho: Rho, mask_ratio: f64 },
}

impl Objective {
    pub fn rho(&self) -> Rho {
        match self {
            Objective::Ar { rho } | Objective::Mae { rho, .. } => *rho,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: Schedule,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub objective: Objective,
    /// Fraction of blocks reserved for held-out loss.
    pub holdout_fraction: f64,
    /// Cap on held-out sequences per evaluation.
    pub holdout_eval_cap: usize,
    /// Token-budget knob: fraction of the training split actually used (the
    /// holdout stays fixed, so losses are comparable across budgets).
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    pub seed: u64,
}

/// The model being pretrained: the causal encoder, or its bidirectional
/// masked-reconstruction variant.
pub enum PretrainModel {
    Ar(EteModel),
    Mae(MaeModel),
}

impl PretrainModel {
    pub fn encoder(&self) -> &EteModel {
        match self {
            PretrainModel::Ar(m) => m,
            PretrainModel::Mae(m) => &m.ete,
        }
    }

    pub fn into_encoder(self) -> EteModel {
        match self {
            PretrainModel::Ar(m) => m,
            PretrainModel::Mae(m) => m.ete,
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            PretrainModel::Ar(m) => m.params_mut(),
            PretrainModel::Mae(m) => m.params_mut(),
        }
    }

    fn save(&self, dir: &Path, vocab: &ElectrodeVocabulary) -> Result<(), TrainError> {
        match self {
            PretrainModel::Ar(m) => checkpoint::save_ete(dir, m, vocab)?,
            PretrainModel::Mae(m) => checkpoint::save_mae(dir, m, vocab)?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub metrics: MetricsLog,
    /// Held-out loss at the loop entry (untrained loss for fresh runs).
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
    pub steps_run: u64,
}

fn split_blocks(
    corpus: &GroupedCorpus,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<(ElectrodeId, BlockRef)>, Vec<(ElectrodeId, BlockRef)>), TrainError> {
    let mut index = corpus.block_index();
    if index.is_empty() {
        return Err(TrainError::Config("corpus has no blocks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    // Fisher-Yates, fixed order
    for i in (1..index.len()).rev() {
        let j = rng.gen_range(0..=i);
        index.swap(i, j);
    }
    let holdout_len = ((fraction * index.len() as f64).round() as usize).min(index.len() - 1);
    let holdout = index[..holdout_len].to_vec();
    let train = index[holdout_len..].to_vec();
    if train.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    Ok((train, holdout))
}

/// Per-sequence loss for one block, assembled with the current vocabulary.
fn block_loss(
    tape: &mut Tape,
    model: &PretrainModel,
    vocab: &ElectrodeVocabulary,
    corpus: &GroupedCorpus,
    entry: &(ElectrodeId, BlockRef),
    objective: &Objective,
    mask_positions: Option<&[usize]>,
) -> Result<crate::numkit::Val, TrainError> {
    let block = corpus
        .block_tokens(entry.1)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let table = tape.leaf(vocab.embeddings());
    let seq = assemble_pretrain_on(tape, table, entry.0, &block)?;
    match (model, objective) {
        (PretrainModel::Ar(m), Objective::Ar { rho }) => Ok(m.ar_loss_on(tape, seq, *rho)?),
        (PretrainModel::Mae(m), Objective::Mae { rho, .. }) => {
            let positions = mask_positions.expect("mask positions supplied for mae");
            Ok(m.loss_on(tape, seq, positions, *rho)?.loss)
        }
        _ => Err(TrainError::Config(
            "objective does not match the model kind".into(),
        )),
    }
}

fn draw_mask_positions(t: usize, mask_ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let count = ((mask_ratio * t as f64).ceil() as usize).clamp(1, t);
    let mut positions: Vec<usize> = (1..=t).collect();
    positions.shuffle(rng);
    positions.truncate(count);
    positions.sort_unstable();
    positions
}

/// Mean held-out loss over up to `cap` sequences, reduced in index order.
/// MAE masks are derived from each block's position in the holdout list, so
/// evaluation is deterministic.
fn holdout_loss(
    model: &PretrainModel,
    vocab: &ElectrodeVocabulary,
    corpus: &GroupedCorpus,
    holdout: &[(ElectrodeId, BlockRef)],
    objective: &Objective,
    cap: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let eval: Vec<_> = holdout.iter().take(cap.max(1)).collect();
    if eval.is_empty() {
        return Err(TrainError::EmptySplit("holdout".into()));
    }
    let losses: Result<Vec<f64>, TrainError> = eval
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let mut tape = Tape::new();
            let mask = match objective {
                Objective::Ar { .. } => None,
                Objective::Mae { mask_ratio, .. } => {
                    let block = corpus
                        .block_tokens(entry.1)
                        .map_err(|e| TrainError::Config(e.to_string()))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c);
                    rng.set_stream(i as u64);
                    Some(draw_mask_positions(block.rows(), *mask_ratio, &mut rng))
                }
            };
            let loss = block_loss(
                &mut tape,
                model,
                vocab,
                corpus,
                entry,
                objective,
                mask.as_deref(),
            )?;
            Ok(tape.scalar_value(loss)?)
        })
        .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Record one batch on a fresh tape: per-sequence losses summed in draw order,
/// scaled to a mean.
fn batch_step(
    corpus: &GroupedCorpus,
    model: &PretrainModel,
    vocab: &ElectrodeVocabulary,
    cfg: &PretrainConfig,
    batch: &[&(ElectrodeId, BlockRef)],
    rng: &mut ChaCha8Rng,
) -> Result<(Tape, crate::numkit::Val, f64), TrainError> {
    let mut tape = Tape::new();
    let mut total = None;
    for entry in batch {
        let mask = match &cfg.objective {
            Objective::Ar { .. } => None,
            Objective::Mae { mask_ratio, .. } => {
                let block = corpus
                    .block_tokens(entry.1)
                    .map_err(|e| TrainError::Config(e.to_string()))?;
                Some(draw_mask_positions(block.rows(), *mask_ratio, rng))
            }
        };
        let loss = block_loss(&mut tape, model, vocab, corpus, entry, &cfg.objective, mask.as_deref())?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let mean = tape.scale(total.expect("batch non-empty"), 1.0 / batch.len() as f64)?;
    let value = tape.scalar_value(mean)?;
    Ok((tape, mean, value))
}

/// Whether an error is a non-finite value surfacing from the kernel, at any
/// nesting depth.
pub(crate) fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Num(NumError::NonFinite { .. })
            | TrainError::Model(crate::ete::ModelError::Num(NumError::NonFinite { .. }))
    )
}

/// Non-finite values anywhere in a loss evaluation mean the run diverged.
fn diverged_if_non_finite(result: Result<f64, TrainError>, step: u64) -> Result<f64, TrainError> {
    match result {
        Err(e) if is_non_finite(&e) => Err(TrainError::Diverged { step }),
        other => other,
    }
}

fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:08}"))
}

fn save_checkpoint(
    run_dir: &Path,
    step: u64,
    model: &PretrainModel,
    vocab: &ElectrodeVocabulary,
    optimizer: &AdamW,
) -> Result<PathBuf, TrainError> {
    let dir = checkpoint_dir(run_dir, step);
    model.save(&dir.join("model"), vocab)?;
    let state = optimizer.state_tensors();
    let config = serde_json::json!({
        "format_version": checkpoint::CKPT_FORMAT_VERSION,
        "kind": "optim",
        "step": step,
        "adamw": optimizer.config,
    });
    checkpoint::save_tensors(&dir.join("optim"), &state, &config)?;
    Ok(dir)
}

/// Fresh pretraining run. Checkpoints (when a run directory and cadence are
/// given) hold model, vocabulary, and optimizer state; metrics are written to
/// the run directory at the end.
pub fn pretrain(
    corpus: &GroupedCorpus,
    model: &mut PretrainModel,
    vocab: &mut ElectrodeVocabulary,
    cfg: &PretrainConfig,
    run_dir: Option<&Path>,
) -> Result<PretrainOutcome, TrainError> {
    let optimizer = AdamW::new(cfg.optimizer);
    run_loop(corpus, model, vocab, cfg, run_dir, optimizer, 0)
}

/// Continue a run from its newest checkpoint; the continuation reproduces the
/// uninterrupted run bit-for-bit.
pub fn resume_pretrain(
    corpus: &GroupedCorpus,
    run_dir: &Path,
    cfg: &PretrainConfig,
) -> Result<(PretrainModel, ElectrodeVocabulary, PretrainOutcome), TrainError> {
    let ckpts = run_dir.join("checkpoints");
    let mut steps: Vec<(u64, PathBuf)> = std::fs::read_dir(&ckpts)
        .map_err(|e| io_err(&ckpts, e))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let name = entry.file_name().into_string().ok()?;
            let step = name.strip_prefix("step_")?.parse::<u64>().ok()?;
            Some((step, entry.path()))
        })
        .collect();
    steps.sort();
    let (start, dir) = steps
        .pop()
        .ok_or_else(|| TrainError::Config("no checkpoints to resume from".into()))?;

    let model_dir = dir.join("model");
    let mut model = match cfg.objective {
        Objective::Ar { .. } => {
            let (m, _) = checkpoint::load_ete(&model_dir)?;
            PretrainModel::Ar(m)
        }
        Objective::Mae { .. } => {
            let (m, _) = checkpoint::load_mae(&model_dir)?;
            PretrainModel::Mae(m)
        }
    };
    let vocab_tensors = checkpoint::load_tensors(&model_dir)?.0;
    let embeddings = vocab_tensors
        .get("vocab.embeddings")
        .ok_or_else(|| TrainError::Config("checkpoint lacks vocabulary".into()))?;
    let mut vocab = ElectrodeVocabulary::from_embeddings(embeddings.clone().requires_grad(true))
        .map_err(|e| TrainError::Config(e.to_string()))?;

    let (optim_tensors, optim_cfg) = checkpoint::load_tensors(&dir.join("optim"))?;
    let step = optim_cfg
        .get("step")
        .and_then(|v| v.as_u64())
        .unwrap_or(start);
    let adamw: AdamWConfig = serde_json::from_value(
        optim_cfg
            .get("adamw")
            .cloned()
            .unwrap_or_else(|| serde_json::json!(AdamWConfig::default())),
    )?;
    let optim_map: BTreeMap<String, Tensor> = optim_tensors;
    let optimizer = AdamW::restore(adamw, step, &optim_map);

    let outcome = run_loop(corpus, &mut model, &mut vocab, cfg, Some(run_dir), optimizer, start)?;
    Ok((model, vocab, outcome))
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    corpus: &GroupedCorpus,
    model: &mut PretrainModel,
    vocab: &mut ElectrodeVocabulary,
    cfg: &PretrainConfig,
    run_dir: Option<&Path>,
    mut optimizer: AdamW,
    start_step: u64,
) -> Result<PretrainOutcome, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(TrainError::Config(format!(
            "train_fraction {} outside [0, 1]",
            cfg.train_fraction
        )));
    }
    let (mut train, holdout) = split_blocks(corpus, cfg.holdout_fraction, cfg.seed)?;
    let budget = ((cfg.train_fraction * train.len() as f64).round() as usize).max(1);
    train.truncate(budget);
    let eval_split: &[(ElectrodeId, BlockRef)] = if holdout.is_empty() { &train } else { &holdout };

    let mut metrics = MetricsLog::new();
    let initial = diverged_if_non_finite(
        holdout_loss(
            model,
            vocab,
            corpus,
            eval_split,
            &cfg.objective,
            cfg.holdout_eval_cap,
            cfg.seed,
        ),
        start_step,
    )?;

    for step in start_step..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step + 1);
        let batch: Vec<&(ElectrodeId, BlockRef)> = (0..cfg.batch_size)
            .map(|_| &train[rng.gen_range(0..train.len())])
            .collect();

        // non-finite values anywhere in the step are divergence
        let (tape, mean, loss_value) =
            match batch_step(corpus, model, vocab, cfg, &batch, &mut rng) {
                Ok(out) => out,
                Err(e) if is_non_finite(&e) => return Err(TrainError::Diverged { step }),
                Err(e) => return Err(e),
            };
        let grads = tape.backward(mean)?;

        let lr = cfg.schedule.lr(step);
        let mut params = model.params_mut();
        params.push(("vocab.embeddings".to_string(), vocab.embeddings_mut()));
        optimizer.step(params, &grads, lr)?;

        let mut row = MetricRow {
            step: step + 1,
            lr,
            loss: Some(loss_value),
            holdout_loss: None,
            task: None,
            accuracy: None,
        };
        if let Some(every) = cfg.eval_every {
            if (step + 1) % every == 0 && step + 1 != cfg.steps {
                row.holdout_loss = Some(holdout_loss(
                    model,
                    vocab,
                    corpus,
                    eval_split,
                    &cfg.objective,
                    cfg.holdout_eval_cap,
                    cfg.seed,
                )?);
            }
        }
        metrics.push(row);

        if let (Some(dir), Some(every)) = (run_dir, cfg.checkpoint_every) {
            if (step + 1) % every == 0 {
                save_checkpoint(dir, step + 1, model, vocab, &optimizer)?;
            }
        }
    }

    let final_loss = diverged_if_non_finite(
        holdout_loss(
            model,
            vocab,
            corpus,
            eval_split,
            &cfg.objective,
            cfg.holdout_eval_cap,
            cfg.seed,
        ),
        cfg.steps,
    )?;
    if let Some(last) = metrics.rows().last().cloned() {
        let mut row = last;
        row.holdout_loss = Some(final_loss);
        metrics.push(row);
    }

    if let Some(dir) = run_dir {
        save_checkpoint(dir, cfg.steps, model, vocab, &optimizer)?;
        // stable alias for downstream commands
        model.save(&dir.join("model"), vocab)?;
        metrics.write(dir)?;
    }

    Ok(PretrainOutcome {
        metrics,
        initial_holdout_loss: initial,
        final_holdout_loss: final_loss,
        steps_run: cfg.steps.saturating_sub(start_step),
    })
}
