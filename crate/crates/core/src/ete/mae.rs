//! Bidirectional masked-reconstruction pretraining, the ablation baseline.
//!
//! A random subset of signal-token positions is replaced by a learned mask
//! token before the input projection; attention sees the whole sequence (no
//! causal mask) and the loss is taken over the masked positions only —
//! unmasked positions contribute nothing.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{rho_loss, AttentionMode, EteConfig, EteModel, ModelError, Rho};
use crate::numkit::{Tape, Tensor, Val};

#[derive(Debug, Clone)]
pub struct MaeModel {
    pub ete: EteModel,
    /// `[1 × C]` learned replacement token.
    pub mask_token: Tensor,
}

/// Handles into a recorded masked forward pass.
pub struct MaeForward {
    pub predictions: Val,
    pub loss: Val,
    pub positions: Vec<usize>,
}

impl MaeModel {
    pub fn init(config: &EteConfig, seed: u64) -> Result<Self, ModelError> {
        use rand::SeedableRng;
        let ete = EteModel::init(config, seed)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x4d41_534b);
        let mask_token =
            Tensor::randn(&[1, config.token_width], 0.02, &mut rng).requires_grad(true);
        Ok(Self { ete, mask_token })
    }

    /// Draw `⌈mask_ratio·T⌉` signal positions (the condition row is never
    /// masked) and compute the masked-reconstruction loss.
    pub fn loss<R: Rng>(
        &self,
        tape: &mut Tape,
        seq: &Tensor,
        mask_ratio: f64,
        rho: Rho,
        rng: &mut R,
    ) -> Result<MaeForward, ModelError> {
        if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
            return Err(ModelError::Contract(format!(
                "mask_ratio must lie in (0, 1), got {mask_ratio}"
            )));
        }
        let n = seq.rows();
        if n < 2 {
            return Err(ModelError::Contract("sequence has no signal tokens".into()));
        }
        let t = n - 1;
        let count = ((mask_ratio * t as f64).ceil() as usize).min(t);
        if count == 0 {
            return Err(ModelError::Contract("mask selects zero positions".into()));
        }
        let mut positions: Vec<usize> = (1..=t).collect();
        positions.shuffle(rng);
        positions.truncate(count);
        positions.sort_unstable();
        self.loss_with_mask(tape, seq, &positions, rho)
    }

    /// Deterministic variant with explicit masked positions (rows of `seq`,
    /// condition row 0 excluded).
    pub fn loss_with_mask(
        &self,
        tape: &mut Tape,
        seq: &Tensor,
        positions: &[usize],
        rho: Rho,
    ) -> Result<MaeForward, ModelError> {
        let v = tape.constant(seq);
        self.loss_on(tape, v, positions, rho)
    }

    /// On-tape variant: `seq` may carry gradients (e.g. through the electrode
    /// condition row).
    pub fn loss_on(
        &self,
        tape: &mut Tape,
        seq: Val,
        positions: &[usize],
        rho: Rho,
    ) -> Result<MaeForward, ModelError> {
        let n = tape.shape(seq)[0];
        if positions.is_empty() {
            return Err(ModelError::Contract("mask selects zero positions".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &p in positions {
            if p == 0 || p >= n {
                return Err(ModelError::Contract(format!(
                    "masked position {p} outside signal rows 1..{n}"
                )));
            }
            if !seen.insert(p) {
                return Err(ModelError::Contract(format!("duplicate masked position {p}")));
            }
        }

        // keep[i] = 0 at masked rows; the mask token fills the holes
        let mut keep = vec![1.0; n];
        let mut hole = vec![0.0; n];
        for &p in positions {
            keep[p] = 0.0;
            hole[p] = 1.0;
        }
        let keep = Tensor::new(&[n, 1], keep).expect("finite");
        let hole = Tensor::new(&[n, 1], hole).expect("finite");

        let keep_val = tape.constant(&keep);
        let hole_val = tape.constant(&hole);
        let kept = tape.mul_col(seq, keep_val)?;
        let mask_row = tape.leaf(&self.mask_token);
        let fill = tape.matmul(hole_val, mask_row)?;
        let masked_input = tape.add(kept, fill)?;

        let fwd = self
            .ete
            .forward_val(tape, masked_input, AttentionMode::Bidirectional)?;
        let pred_rows = tape.gather_rows(fwd.predictions, positions)?;
        let target_rows = tape.gather_rows(seq, positions)?;
        let loss = rho_loss(tape, pred_rows, target_rows, rho)?;
        Ok(MaeForward {
            predictions: fwd.predictions,
            loss,
            positions: positions.to_vec(),
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.ete.named_params();
        out.push(("mae.mask_token".to_string(), self.mask_token.clone()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.ete.params_mut();
        out.push(("mae.mask_token".to_string(), &mut self.mask_token));
        out
    }
}
