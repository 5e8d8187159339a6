//! Electrode temporal encoder: a causal-attention transformer over one
//! electrode's token stream with a next-token prediction head.
//!
//! Sequences are `(T+1) × C`: the electrode condition token followed by `T`
//! signal tokens (pretraining), or `T` signal tokens followed by the summary
//! token (fine-tuning). A linear projection lifts `C`-wide tokens to the
//! hidden width, learned absolute positions are added, and `L` pre-normalized
//! blocks of causal multi-head attention + SwiGLU feed-forward follow. The
//! prediction head maps hidden states back to token space; the output at
//! position `t` is the model's estimate of the token at `t+1`.

mod count;
mod mae;

pub use count::{count_parameters, FullConfig, ParamCount};
pub use mae::{MaeForward, MaeModel};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{NumError, Tape, Tensor, Val, MASK_NEG_INF};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("model configuration error: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("task {0:?} has no registered head")]
    UnknownTask(String),
}

/// Reconstruction distance ρ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rho {
    L2,
    L1,
    /// `1 − cos(x, x̂)` per token, averaged.
    Cosine,
}

impl std::fmt::Display for Rho {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rho::L2 => "l2",
            Rho::L1 => "l1",
            Rho::Cosine => "cos",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EteConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_size: usize,
    pub intermediate: usize,
    pub token_width: usize,
    pub max_seq_len: usize,
}

impl EteConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden != self.heads * self.head_size {
            return Err(ModelError::Config(format!(
                "hidden {} != heads {} × head_size {}",
                self.hidden, self.heads, self.head_size
            )));
        }
        if self.layers == 0 || self.hidden == 0 || self.token_width == 0 || self.max_seq_len == 0 {
            return Err(ModelError::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }

    fn named(layers: usize, heads: usize, head_size: usize, intermediate: usize) -> Self {
        Self {
            layers,
            hidden: heads * head_size,
            heads,
            head_size,
            intermediate,
            token_width: 256,
            max_seq_len: 26,
        }
    }

    pub fn base() -> Self {
        Self::named(3, 4, 32, 512)
    }

    pub fn large() -> Self {
        Self::named(9, 8, 32, 1024)
    }

    pub fn huge() -> Self {
        Self::named(12, 14, 64, 3584)
    }

    pub fn giant() -> Self {
        Self::named(20, 28, 64, 7168)
    }

    /// Gradcheck-scale model: every parameter can be finite-differenced.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            hidden: 8,
            heads: 2,
            head_size: 4,
            intermediate: 16,
            token_width: 6,
            max_seq_len: 8,
        }
    }
}

/// `x · W (+ b)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn init<R: Rng>(inp: usize, out: usize, std: f64, bias: bool, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[inp, out], std, rng).requires_grad(true),
            b: bias.then(|| Tensor::zeros(&[out]).requires_grad(true)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Val) -> Result<Val, NumError> {
        let w = tape.leaf(&self.w);
        let y = tape.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let bv = tape.leaf(b);
                tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// Pre-normalization with learnable scale, no bias:
/// `x / sqrt(mean(x²) + 1e-6) ⊙ w`, row-wise.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub weight: Tensor,
}

pub const RMS_EPS: f64 = 1e-6;

impl RmsNorm {
    pub fn ones(width: usize) -> Self {
        Self {
            weight: Tensor::ones(&[width]).requires_grad(true),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Val) -> Result<Val, NumError> {
        let d = tape.shape(x)[1] as f64;
        let sq = tape.mul(x, x)?;
        let ssq = tape.sum_lastdim(sq)?;
        let ms = tape.scale(ssq, 1.0 / d)?;
        let shifted = tape.add_scalar(ms, RMS_EPS)?;
        let inv = tape.pow_const(shifted, -0.5)?;
        let normed = tape.mul_col(x, inv)?;
        let w = tape.leaf(&self.weight);
        tape.mul_row(normed, w)
    }
}

/// SwiGLU feed-forward: `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn apply(&self, tape: &mut Tape, x: Val) -> Result<Val, NumError> {
        let g = self.gate.apply(tape, x)?;
        let g = tape.silu(g)?;
        let u = self.up.apply(tape, x)?;
        let h = tape.mul(g, u)?;
        self.down.apply(tape, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: RmsNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm2: RmsNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct EteModel {
    pub config: EteConfig,
    pub in_proj: Linear,
    /// `[max_seq_len × hidden]` learned absolute positions.
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: RmsNorm,
    /// Prediction head: hidden → hidden → token width, SiLU between.
    pub head_w1: Linear,
    pub head_w2: Linear,
}

/// Additive causal mask: entry `(i, j)` is 0 for `j ≤ i`, the −∞ sentinel
/// otherwise.
pub fn causal_mask(seq_len: usize) -> Tensor {
    let mut data = vec![0.0; seq_len * seq_len];
    for i in 0..seq_len {
        for j in i + 1..seq_len {
            data[i * seq_len + j] = MASK_NEG_INF;
        }
    }
    Tensor::new(&[seq_len, seq_len], data).expect("mask sentinel is finite")
}

/// Handles into a recorded forward pass.
pub struct EteForward {
    /// The leased input sequence.
    pub seq: Val,
    /// Residual stream before the final normalization.
    pub stream: Val,
    /// Final-normalized hidden states, `[(T+1) × d]`.
    pub hidden: Val,
    /// Next-token estimates in token space, `[(T+1) × C]`.
    pub predictions: Val,
}

impl EteModel {
    pub fn init(config: &EteConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let std = 0.02;
        // residual-feeding projections scaled down by depth
        let out_std = std / (2.0 * config.layers as f64).sqrt();

        let in_proj = Linear::init(config.token_width, d, std, true, &mut rng);
        let pos = Tensor::randn(&[config.max_seq_len, d], std, &mut rng).requires_grad(true);
        let blocks = (0..config.layers)
            .map(|_| Block {
                norm1: RmsNorm::ones(d),
                wq: Linear::init(d, d, std, false, &mut rng),
                wk: Linear::init(d, d, std, false, &mut rng),
                wv: Linear::init(d, d, std, false, &mut rng),
                wo: Linear::init(d, d, out_std, false, &mut rng),
                norm2: RmsNorm::ones(d),
                ffn: FeedForward {
                    gate: Linear::init(d, config.intermediate, std, false, &mut rng),
                    up: Linear::init(d, config.intermediate, std, false, &mut rng),
                    down: Linear::init(config.intermediate, d, out_std, false, &mut rng),
                },
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            in_proj,
            pos,
            blocks,
            final_norm: RmsNorm::ones(d),
            head_w1: Linear::init(d, d, std, true, &mut rng),
            head_w2: Linear::init(d, config.token_width, std, true, &mut rng),
        })
    }

    /// Token projection plus positions: the residual stream's starting value.
    pub fn embed(&self, tape: &mut Tape, seq: Val) -> Result<Val, NumError> {
        let n = tape.shape(seq)[0];
        let projected = self.in_proj.apply(tape, seq)?;
        let pos = tape.leaf(&self.pos);
        let pos_n = tape.slice_rows(pos, 0, n)?;
        tape.add(projected, pos_n)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        block: &Block,
        x: Val,
        mode: AttentionMode,
    ) -> Result<Val, NumError> {
        let n = tape.shape(x)[0];
        let hs = self.config.head_size;
        let scale = 1.0 / (hs as f64).sqrt();
        let q = block.wq.apply(tape, x)?;
        let k = block.wk.apply(tape, x)?;
        let v = block.wv.apply(tape, x)?;
        let mask = match mode {
            AttentionMode::Causal => {
                let m = causal_mask(n);
                Some(tape.constant(&m))
            }
            AttentionMode::Bidirectional => None,
        };
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * hs, hs)?;
            let kh = tape.slice_cols(k, h * hs, hs)?;
            let vh = tape.slice_cols(v, h * hs, hs)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale)?;
            let alpha = tape.softmax_lastdim(scaled, mask)?;
            heads.push(tape.matmul(alpha, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        block.wo.apply(tape, merged)
    }

    /// Run the `L` blocks over an already-embedded stream.
    pub fn encode(&self, tape: &mut Tape, mut stream: Val, mode: AttentionMode) -> Result<Val, NumError> {
        for block in &self.blocks {
            let normed = block.norm1.apply(tape, stream)?;
            let attn = self.attention(tape, block, normed, mode)?;
            stream = tape.add(stream, attn)?;
            let normed2 = block.norm2.apply(tape, stream)?;
            let ff = block.ffn.apply(tape, normed2)?;
            stream = tape.add(stream, ff)?;
        }
        Ok(stream)
    }

    fn head(&self, tape: &mut Tape, hidden: Val) -> Result<Val, NumError> {
        let h = self.head_w1.apply(tape, hidden)?;
        let h = tape.silu(h)?;
        self.head_w2.apply(tape, h)
    }

    pub(crate) fn forward_val(
        &self,
        tape: &mut Tape,
        seq: Val,
        mode: AttentionMode,
    ) -> Result<EteForward, ModelError> {
        let shape = tape.shape(seq).to_vec();
        if shape.len() != 2 || shape[1] != self.config.token_width {
            return Err(ModelError::Config(format!(
                "sequence shape {shape:?} does not match token width {}",
                self.config.token_width
            )));
        }
        if shape[0] > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: shape[0],
                max: self.config.max_seq_len,
            });
        }
        let stream0 = self.embed(tape, seq)?;
        let stream = self.encode(tape, stream0, mode)?;
        let hidden = self.final_norm.apply(tape, stream)?;
        let predictions = self.head(tape, hidden)?;
        Ok(EteForward {
            seq,
            stream,
            hidden,
            predictions,
        })
    }

    /// Causal forward pass over a plain sequence tensor. Predictions at
    /// position `t` are computed strictly from positions ≤ t.
    pub fn forward(&self, tape: &mut Tape, seq: &Tensor) -> Result<EteForward, ModelError> {
        let v = tape.constant(seq);
        self.forward_val(tape, v, AttentionMode::Causal)
    }

    /// Causal forward over an on-tape sequence (used when the sequence itself
    /// carries gradients, e.g. through the condition or summary token).
    pub fn forward_on(&self, tape: &mut Tape, seq: Val) -> Result<EteForward, ModelError> {
        self.forward_val(tape, seq, AttentionMode::Causal)
    }

    /// Autoregressive loss over a `(T+1) × C` sequence: the prediction for
    /// signal token `t` (row `t`) is read at row `t−1`, the condition row is
    /// never a target, and per-token distances are averaged over the `T`
    /// signal tokens.
    pub fn ar_loss(&self, tape: &mut Tape, seq: &Tensor, rho: Rho) -> Result<Val, ModelError> {
        let v = tape.constant(seq);
        self.ar_loss_on(tape, v, rho)
    }

    pub fn ar_loss_on(&self, tape: &mut Tape, seq: Val, rho: Rho) -> Result<Val, ModelError> {
        let n = tape.shape(seq)[0];
        if n < 2 {
            return Err(ModelError::Contract(
                "autoregressive loss needs at least one signal token after the condition".into(),
            ));
        }
        let t = n - 1;
        let fwd = self.forward_val(tape, seq, AttentionMode::Causal)?;
        let preds = tape.slice_rows(fwd.predictions, 0, t)?;
        let targets = tape.slice_rows(fwd.seq, 1, t)?;
        Ok(rho_loss(tape, preds, targets, rho)?)
    }
}

/// Mean per-token distance between prediction and target rows.
pub fn rho_loss(tape: &mut Tape, preds: Val, targets: Val, rho: Rho) -> Result<Val, NumError> {
    match rho {
        Rho::L2 => {
            let diff = tape.sub(targets, preds)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean_all(sq)
        }
        Rho::L1 => {
            let diff = tape.sub(targets, preds)?;
            let a = tape.abs(diff)?;
            tape.mean_all(a)
        }
        Rho::Cosine => {
            let dot = tape.mul(preds, targets)?;
            let num = tape.sum_lastdim(dot)?;
            let pp = tape.mul(preds, preds)?;
            let pn = tape.sum_lastdim(pp)?;
            let tt = tape.mul(targets, targets)?;
            let tn = tape.sum_lastdim(tt)?;
            let prod = tape.mul(pn, tn)?;
            let guarded = tape.add_scalar(prod, 1e-24)?;
            let denom = tape.pow_const(guarded, 0.5)?;
            let cos = tape.div(num, denom)?;
            let mean = tape.mean_all(cos)?;
            let neg = tape.scale(mean, -1.0)?;
            tape.add_scalar(neg, 1.0)
        }
    }
}

/// Stable names for every trainable tensor of the encoder, in a fixed order.
impl EteModel {
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("ete.in_proj.w".to_string(), self.in_proj.w.clone()),
            (
                "ete.in_proj.b".to_string(),
                self.in_proj.b.clone().expect("in_proj has bias"),
            ),
            ("ete.pos".to_string(), self.pos.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("ete.block{i}.norm1.w"), b.norm1.weight.clone()));
            out.push((format!("ete.block{i}.attn.wq"), b.wq.w.clone()));
            out.push((format!("ete.block{i}.attn.wk"), b.wk.w.clone()));
            out.push((format!("ete.block{i}.attn.wv"), b.wv.w.clone()));
            out.push((format!("ete.block{i}.attn.wo"), b.wo.w.clone()));
            out.push((format!("ete.block{i}.norm2.w"), b.norm2.weight.clone()));
            out.push((format!("ete.block{i}.ffn.gate"), b.ffn.gate.w.clone()));
            out.push((format!("ete.block{i}.ffn.up"), b.ffn.up.w.clone()));
            out.push((format!("ete.block{i}.ffn.down"), b.ffn.down.w.clone()));
        }
        out.push(("ete.final_norm.w".to_string(), self.final_norm.weight.clone()));
        out.push(("ete.head.w1".to_string(), self.head_w1.w.clone()));
        out.push((
            "ete.head.b1".to_string(),
            self.head_w1.b.clone().expect("head has bias"),
        ));
        out.push(("ete.head.w2".to_string(), self.head_w2.w.clone()));
        out.push((
            "ete.head.b2".to_string(),
            self.head_w2.b.clone().expect("head has bias"),
        ));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("ete.in_proj.w".to_string(), &mut self.in_proj.w),
            (
                "ete.in_proj.b".to_string(),
                self.in_proj.b.as_mut().expect("in_proj has bias"),
            ),
            ("ete.pos".to_string(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("ete.block{i}.norm1.w"), &mut b.norm1.weight));
            out.push((format!("ete.block{i}.attn.wq"), &mut b.wq.w));
            out.push((format!("ete.block{i}.attn.wk"), &mut b.wk.w));
            out.push((format!("ete.block{i}.attn.wv"), &mut b.wv.w));
            out.push((format!("ete.block{i}.attn.wo"), &mut b.wo.w));
            out.push((format!("ete.block{i}.norm2.w"), &mut b.norm2.weight));
            out.push((format!("ete.block{i}.ffn.gate"), &mut b.ffn.gate.w));
            out.push((format!("ete.block{i}.ffn.up"), &mut b.ffn.up.w));
            out.push((format!("ete.block{i}.ffn.down"), &mut b.ffn.down.w));
        }
        out.push(("ete.final_norm.w".to_string(), &mut self.final_norm.weight));
        out.push(("ete.head.w1".to_string(), &mut self.head_w1.w));
        out.push((
            "ete.head.b1".to_string(),
            self.head_w1.b.as_mut().expect("head has bias"),
        ));
        out.push(("ete.head.w2".to_string(), &mut self.head_w2.w));
        out.push((
            "ete.head.b2".to_string(),
            self.head_w2.b.as_mut().expect("head has bias"),
        ));
        out
    }

    /// Trainable scalar count of this encoder (vocabulary excluded).
    pub fn num_params(&self) -> u64 {
        self.named_params().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Stop all parameters from taking gradients.
    pub fn freeze(&mut self) {
        for (_, p) in self.params_mut() {
            *p = p.frozen();
        }
    }
}
