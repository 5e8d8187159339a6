//! Task-shared electrode graph.
//!
//! A learnable 138-node table (one node per canonical electrode) carries base
//! features. Each sample activates the subgraph of its own electrodes: the
//! frozen temporal encoder's summary-token states are added onto the matching
//! node rows, masked multi-head graph attention lets exactly the active nodes
//! exchange information, active-node features are mean-pooled, and a per-task
//! linear head produces logits. Activation is functional — the base table is
//! never mutated by a forward pass — so mixed-task batches cannot leak state
//! between samples.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{EegSample, TaskId};
use crate::ete::{EteModel, Linear, ModelError, RmsNorm};
use crate::numkit::{NumError, Tape, Tensor, Val};
use crate::tokenizer::{vocabulary_size, ElectrodeId};

/// The electrodes a sample activates. Defines the indicator mask β:
/// `β(m, n) = 1` iff both `m` and `n` are active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgraphActivation {
    active: Vec<ElectrodeId>,
}

impl SubgraphActivation {
    pub fn new(active: Vec<ElectrodeId>) -> Result<Self, ModelError> {
        if active.is_empty() {
            return Err(ModelError::Contract("empty subgraph activation".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &active {
            if id.0 as usize >= vocabulary_size() {
                return Err(ModelError::Contract(format!(
                    "electrode id {} out of range",
                    id.0
                )));
            }
            if !seen.insert(*id) {
                return Err(ModelError::Contract(format!(
                    "duplicate electrode id {} in activation",
                    id.0
                )));
            }
        }
        Ok(Self { active })
    }

    pub fn from_sample(sample: &EegSample) -> Result<Self, ModelError> {
        Self::new(sample.electrodes().to_vec())
    }

    pub fn ids(&self) -> &[ElectrodeId] {
        &self.active
    }

    pub fn indices(&self) -> Vec<usize> {
        self.active.iter().map(|id| id.0 as usize).collect()
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn beta(&self, m: usize, n: usize) -> f64 {
        let has = |x: usize| self.active.iter().any(|id| id.0 as usize == x);
        if has(m) && has(n) {
            1.0
        } else {
            0.0
        }
    }
}

/// One graph block: pre-normalized masked attention, then a pre-normalized
/// position-wise feed-forward, both residual and confined to active rows.
#[derive(Debug, Clone)]
pub struct TegLayer {
    pub norm1: RmsNorm,
    /// Per-head maps, concatenated along columns: `[d × heads·head_size]`.
    pub w: Tensor,
    /// Per-head scoring vectors: `[heads × 2·head_size]`.
    pub a: Tensor,
    pub norm2: RmsNorm,
    pub ffn_w1: Linear,
    pub ffn_w2: Linear,
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct TaskHead {
    pub linear: Linear,
    pub num_classes: u32,
}

#[derive(Debug, Clone)]
pub struct TegModel {
    pub hidden: usize,
    pub heads: usize,
    pub head_size: usize,
    pub intermediate: usize,
    pub token_width: usize,
    /// `[138 × d]` learnable base node features.
    pub nodes: Tensor,
    /// `[1 × C]` shared summary token appended to every electrode stream.
    pub special_token: Tensor,
    pub layers: Vec<TegLayer>,
    pub task_heads: BTreeMap<TaskId, TaskHead>,
}

/// Per-head attention coefficients and the pre-residual output of one
/// attention sublayer, for inspection.
pub struct AttentionTrace {
    /// One `[k × k]` α matrix per head, rows over active nodes in activation
    /// order.
    pub alphas: Vec<Val>,
    /// `[k × d]` activated output before the residual add.
    pub out: Val,
}

impl TegModel {
    pub fn init(ete_config: &crate::ete::EteConfig, layers: usize, seed: u64) -> Result<Self, ModelError> {
        ete_config.validate()?;
        if layers == 0 {
            return Err(ModelError::Config("graph depth must be positive".into()));
        }
        let d = ete_config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let out_std = std / (2.0 * layers as f64).sqrt();
        let v = vocabulary_size();
        let nodes = Tensor::randn(&[v, d], std, &mut rng).requires_grad(true);
        let special_token =
            Tensor::randn(&[1, ete_config.token_width], std, &mut rng).requires_grad(true);
        let layers = (0..layers)
            .map(|_| TegLayer {
                norm1: RmsNorm::ones(d),
                w: Tensor::randn(&[d, d], std, &mut rng).requires_grad(true),
                a: Tensor::randn(&[ete_config.heads, 2 * ete_config.head_size], std, &mut rng)
                    .requires_grad(true),
                norm2: RmsNorm::ones(d),
                ffn_w1: Linear::init(d, ete_config.intermediate, std, false, &mut rng),
                ffn_w2: Linear::init(ete_config.intermediate, d, out_std, false, &mut rng),
            })
            .collect();
        Ok(Self {
            hidden: d,
            heads: ete_config.heads,
            head_size: ete_config.head_size,
            intermediate: ete_config.intermediate,
            token_width: ete_config.token_width,
            nodes,
            special_token,
            layers,
            task_heads: BTreeMap::new(),
        })
    }

    pub fn register_task(&mut self, task: TaskId, num_classes: u32, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7461_736b);
        let linear = Linear::init(self.hidden, num_classes as usize, 0.02, true, &mut rng);
        self.task_heads.insert(task, TaskHead { linear, num_classes });
    }

    /// Summary representations `z ∈ [E × d]`: each electrode's `[T × C]`
    /// block gets the shared summary token appended, runs through the frozen
    /// encoder causally, and contributes its final-position hidden state.
    /// Gradients flow into the summary token but not the encoder.
    pub fn extract_reprs(
        &self,
        tape: &mut Tape,
        ete: &EteModel,
        sample: &EegSample,
    ) -> Result<Val, ModelError> {
        if ete.in_proj.w.needs_grad() {
            return Err(ModelError::Contract(
                "encoder must be frozen for representation extraction".into(),
            ));
        }
        let e_count = sample.electrodes().len();
        let t = sample.num_tokens();
        let c_row = tape.leaf(&self.special_token);
        let mut rows = Vec::with_capacity(e_count);
        for e in 0..e_count {
            let block = sample
                .electrode_block(e)
                .map_err(|err| ModelError::Contract(err.to_string()))?;
            let block_val = tape.constant(&block);
            let seq = tape.concat_rows(&[block_val, c_row])?;
            let fwd = ete.forward_on(tape, seq)?;
            rows.push(tape.slice_rows(fwd.hidden, t, 1)?);
        }
        Ok(tape.concat_rows(&rows)?)
    }

    /// Representation extraction from an already-assembled `[E × (T+1) × C]`
    /// tensor (no gradient into the summary token; inference/tests).
    pub fn extract_reprs_assembled(
        tape: &mut Tape,
        ete: &EteModel,
        assembled: &Tensor,
    ) -> Result<Val, ModelError> {
        let e_count = assembled.shape()[0];
        let last = assembled.shape()[1] - 1;
        let mut rows = Vec::with_capacity(e_count);
        for e in 0..e_count {
            let seq = assembled
                .subtensor(e)
                .map_err(ModelError::Num)?;
            let fwd = ete.forward(tape, &seq)?;
            rows.push(tape.slice_rows(fwd.hidden, last, 1)?);
        }
        Ok(tape.concat_rows(&rows)?)
    }

    /// Per-sample functional activation: base node table plus `z` scattered
    /// onto the active rows. The table itself is never mutated.
    pub fn activate(
        &self,
        tape: &mut Tape,
        z: Val,
        activation: &SubgraphActivation,
    ) -> Result<Val, ModelError> {
        let zk = tape.shape(z)[0];
        if zk != activation.len() {
            return Err(ModelError::Contract(format!(
                "{zk} representation rows for {} active electrodes",
                activation.len()
            )));
        }
        let base = tape.leaf(&self.nodes);
        let scattered = tape.scatter_rows(z, &activation.indices(), vocabulary_size())?;
        Ok(tape.add(base, scattered)?)
    }

    /// Masked attention over normalized active rows. Neighborhoods are the
    /// full active clique (self-loops included); α rows sum to 1 over active
    /// neighbors, and every pair involving an inactive node carries exactly
    /// zero weight because inactive rows never enter the computation.
    pub fn attention_trace(
        &self,
        tape: &mut Tape,
        layer: &TegLayer,
        normed_active: Val,
    ) -> Result<AttentionTrace, NumError> {
        let k = tape.shape(normed_active)[0];
        let hs = self.head_size;
        let w = tape.leaf(&layer.w);
        let a = tape.leaf(&layer.a);
        let ones_row = tape.constant(&Tensor::ones(&[1, k]));
        let ones_col = tape.constant(&Tensor::ones(&[k, 1]));

        let mut alphas = Vec::with_capacity(self.heads);
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wh = tape.slice_cols(w, h * hs, hs)?;
            let g = tape.matmul(normed_active, wh)?;
            let a_row = tape.slice_rows(a, h, 1)?;
            let a_src = tape.slice_cols(a_row, 0, hs)?;
            let a_dst = tape.slice_cols(a_row, hs, hs)?;
            let a_src_col = tape.transpose(a_src)?;
            let a_dst_col = tape.transpose(a_dst)?;
            let s_src = tape.matmul(g, a_src_col)?;
            let s_dst = tape.matmul(g, a_dst_col)?;
            // score(m, n) = a_src·g_m + a_dst·g_n, an outer sum
            let left = tape.matmul(s_src, ones_row)?;
            let s_dst_row = tape.transpose(s_dst)?;
            let right = tape.matmul(ones_col, s_dst_row)?;
            let scores = tape.add(left, right)?;
            let scored = tape.leaky_relu(scores, LEAKY_SLOPE)?;
            let alpha = tape.softmax_lastdim(scored, None)?;
            outputs.push(tape.matmul(alpha, g)?);
            alphas.push(alpha);
        }
        let merged = tape.concat_cols(&outputs)?;
        let out = tape.relu(merged)?;
        Ok(AttentionTrace { alphas, out })
    }

    /// One graph layer over the full `[138 × d]` feature table. Active rows
    /// get pre-norm → masked attention → residual, then pre-norm →
    /// feed-forward → residual; inactive rows pass through unchanged.
    pub fn graph_attention_layer(
        &self,
        tape: &mut Tape,
        layer: &TegLayer,
        features: Val,
        activation: &SubgraphActivation,
    ) -> Result<Val, ModelError> {
        if activation.is_empty() {
            return Err(ModelError::Contract("empty subgraph activation".into()));
        }
        let idx = activation.indices();
        let v = vocabulary_size();

        let active = tape.gather_rows(features, &idx)?;
        let normed = layer.norm1.apply(tape, active)?;
        let trace = self.attention_trace(tape, layer, normed)?;
        let delta = tape.scatter_rows(trace.out, &idx, v)?;
        let features = tape.add(features, delta)?;

        let active2 = tape.gather_rows(features, &idx)?;
        let normed2 = layer.norm2.apply(tape, active2)?;
        let f1 = layer.ffn_w1.apply(tape, normed2)?;
        let f1 = tape.silu(f1)?;
        let f2 = layer.ffn_w2.apply(tape, f1)?;
        let delta2 = tape.scatter_rows(f2, &idx, v)?;
        Ok(tape.add(features, delta2)?)
    }

    /// Mean-pool the active rows and apply the task head.
    pub fn pool_and_classify(
        &self,
        tape: &mut Tape,
        features: Val,
        activation: &SubgraphActivation,
        task: &TaskId,
    ) -> Result<Val, ModelError> {
        let head = self
            .task_heads
            .get(task)
            .ok_or_else(|| ModelError::UnknownTask(task.0.clone()))?;
        let idx = activation.indices();
        let active = tape.gather_rows(features, &idx)?;
        let k = idx.len();
        let mean_weights = Tensor::new(&[1, k], vec![1.0 / k as f64; k]).expect("finite");
        let pool_val = tape.constant(&mean_weights);
        let pooled = tape.matmul(pool_val, active)?;
        Ok(head.linear.apply(tape, pooled)?)
    }

    /// Full forward from summary representations to logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        z: Val,
        activation: &SubgraphActivation,
        task: &TaskId,
    ) -> Result<Val, ModelError> {
        let mut features = self.activate(tape, z, activation)?;
        for layer in &self.layers {
            features = self.graph_attention_layer(tape, layer, features, activation)?;
        }
        self.pool_and_classify(tape, features, activation, task)
    }

    /// Per-sample logits for a batch that may mix tasks and electrode sets.
    /// Each entry is processed with its own activation, so results match the
    /// solo forward exactly; errors carry the offending batch index.
    pub fn batch_forward(
        &self,
        tape: &mut Tape,
        items: &[(Val, SubgraphActivation, TaskId)],
    ) -> Result<Vec<Val>, ModelError> {
        let mut out = Vec::with_capacity(items.len());
        for (i, (z, activation, task)) in items.iter().enumerate() {
            let logits = self
                .forward(tape, *z, activation, task)
                .map_err(|e| ModelError::Contract(format!("batch item {i}: {e}")))?;
            out.push(logits);
        }
        Ok(out)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("teg.nodes".to_string(), self.nodes.clone()),
            ("teg.c".to_string(), self.special_token.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("teg.layer{i}.norm1.w"), l.norm1.weight.clone()));
            out.push((format!("teg.layer{i}.gat.w"), l.w.clone()));
            out.push((format!("teg.layer{i}.gat.a"), l.a.clone()));
            out.push((format!("teg.layer{i}.norm2.w"), l.norm2.weight.clone()));
            out.push((format!("teg.layer{i}.ffn.w1"), l.ffn_w1.w.clone()));
            out.push((format!("teg.layer{i}.ffn.w2"), l.ffn_w2.w.clone()));
        }
        for (task, head) in &self.task_heads {
            out.push((format!("teg.head.{task}.w"), head.linear.w.clone()));
            out.push((
                format!("teg.head.{task}.b"),
                head.linear.b.clone().expect("task heads have bias"),
            ));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("teg.nodes".to_string(), &mut self.nodes),
            ("teg.c".to_string(), &mut self.special_token),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("teg.layer{i}.norm1.w"), &mut l.norm1.weight));
            out.push((format!("teg.layer{i}.gat.w"), &mut l.w));
            out.push((format!("teg.layer{i}.gat.a"), &mut l.a));
            out.push((format!("teg.layer{i}.norm2.w"), &mut l.norm2.weight));
            out.push((format!("teg.layer{i}.ffn.w1"), &mut l.ffn_w1.w));
            out.push((format!("teg.layer{i}.ffn.w2"), &mut l.ffn_w2.w));
        }
        for (task, head) in &mut self.task_heads {
            out.push((format!("teg.head.{task}.w"), &mut head.linear.w));
            out.push((
                format!("teg.head.{task}.b"),
                head.linear.b.as_mut().expect("task heads have bias"),
            ));
        }
        out
    }

    /// Core parameter count (node table, summary token, graph layers), task
    /// heads excluded — the analytic-count counterpart.
    pub fn num_params_core(&self) -> u64 {
        self.named_params()
            .iter()
            .filter(|(name, _)| !name.starts_with("teg.head."))
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }
}

/// Numerically stable cross-entropy of `[1 × n]` logits against a class index.
pub fn cross_entropy(tape: &mut Tape, logits: Val, label: u32) -> Result<Val, ModelError> {
    let n = tape.shape(logits)[1];
    if (label as usize) >= n {
        return Err(ModelError::Contract(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    let max = tape
        .value(logits)
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(logits, -max)?;
    let exps = tape.exp(shifted)?;
    let sum = tape.sum_lastdim(exps)?;
    let lse = tape.ln(sum)?;
    let picked = tape.slice_cols(shifted, label as usize, 1)?;
    let diff = tape.sub(lse, picked)?;
    Ok(tape.mean_all(diff)?)
}

#[cfg(test)]
mod tests;
