//! Electrode-wise reorganization and sequence assembly.
//!
//! Heterogeneous multi-electrode datasets are decomposed electrode by
//! electrode: every electrode's `T×C` token block becomes one training unit,
//! grouped by electrode identity ([`reorganize`]). For pretraining, the
//! electrode's trainable embedding is *prepended* as a condition token
//! ([`assemble_pretrain`], giving `(T+1)×C`); for fine-tuning, a shared
//! summary token is *appended* after the last signal token
//! ([`assemble_finetune`]). The two placements are deliberate and asymmetric.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::{DataError, EegSample};
use crate::numkit::{NumError, Tape, Tensor, Val};

/// Canonical electrode name list, one per line, fixed order. The file is the
/// versioned wire format for the vocabulary; index = line number.
const ELECTRODES_V1: &str = include_str!("electrodes_v1.txt");

/// Index into the canonical electrode vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ElectrodeId(pub u16);

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("electrode {0:?} is not in the canonical vocabulary")]
    UnknownElectrode(String),
    #[error("electrode id {0} out of range")]
    BadId(u16),
    #[error("block width {got} does not match embedding width {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn canonical_names() -> &'static Vec<&'static str> {
    static NAMES: OnceLock<Vec<&'static str>> = OnceLock::new();
    NAMES.get_or_init(|| {
        ELECTRODES_V1
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

/// Number of canonical electrodes.
pub fn vocabulary_size() -> usize {
    canonical_names().len()
}

/// Case-insensitive lookup of a canonical electrode name.
pub fn electrode_index(name: &str) -> Option<ElectrodeId> {
    static INDEX: OnceLock<BTreeMap<String, u16>> = OnceLock::new();
    let map = INDEX.get_or_init(|| {
        canonical_names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_ascii_uppercase(), i as u16))
            .collect()
    });
    map.get(&name.to_ascii_uppercase())
        .map(|&i| ElectrodeId(i))
}

pub fn electrode_name(id: ElectrodeId) -> Option<&'static str> {
    canonical_names().get(id.0 as usize).copied()
}

/// Trainable per-electrode condition embeddings, one `C`-wide row per
/// canonical electrode.
#[derive(Debug, Clone)]
pub struct ElectrodeVocabulary {
    embeddings: Tensor,
}

impl ElectrodeVocabulary {
    /// Gaussian init, std 0.02, seeded.
    pub fn init(token_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = Tensor::randn(&[vocabulary_size(), token_width], 0.02, &mut rng)
            .requires_grad(true);
        Self { embeddings }
    }

    pub fn from_embeddings(embeddings: Tensor) -> Result<Self, TokenizerError> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != vocabulary_size() {
            return Err(TokenizerError::WidthMismatch {
                got: embeddings.shape().first().copied().unwrap_or(0),
                want: vocabulary_size(),
            });
        }
        Ok(Self { embeddings })
    }

    pub fn token_width(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Tensor {
        &mut self.embeddings
    }

    /// Current embedding row of one electrode, as a plain value.
    pub fn embedding(&self, id: ElectrodeId) -> Result<Tensor, TokenizerError> {
        if id.0 as usize >= vocabulary_size() {
            return Err(TokenizerError::BadId(id.0));
        }
        let c = self.token_width();
        let row = self.embeddings.data()[id.0 as usize * c..(id.0 as usize + 1) * c].to_vec();
        Ok(Tensor::new(&[1, c], row)?)
    }

    /// Freeze for fine-tuning: embeddings stop taking gradients.
    pub fn frozen(&self) -> Self {
        Self {
            embeddings: self.embeddings.frozen(),
        }
    }
}

/// Where a block came from: sample index in the source dataset and electrode
/// row within that sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRef {
    pub sample: usize,
    pub row: usize,
}

/// Per-electrode grouping of every electrode block in a dataset. The grouping
/// is lossless: [`GroupedCorpus::reconstruct`] rebuilds the original samples.
#[derive(Debug, Clone)]
pub struct GroupedCorpus {
    groups: BTreeMap<ElectrodeId, Vec<BlockRef>>,
    samples: Vec<EegSample>,
}

impl GroupedCorpus {
    pub fn groups(&self) -> &BTreeMap<ElectrodeId, Vec<BlockRef>> {
        &self.groups
    }

    pub fn num_electrodes(&self) -> usize {
        self.groups.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    /// All `(electrode, block)` pairs in deterministic order: electrodes by
    /// vocabulary index, blocks by source sample order.
    pub fn block_index(&self) -> Vec<(ElectrodeId, BlockRef)> {
        let mut out = Vec::with_capacity(self.num_blocks());
        for (&id, blocks) in &self.groups {
            for &b in blocks {
                out.push((id, b));
            }
        }
        out
    }

    /// Materialize one block's `[T × C]` tokens.
    pub fn block_tokens(&self, r: BlockRef) -> Result<Tensor, TokenizerError> {
        Ok(self.samples[r.sample].electrode_block(r.row)?)
    }

    pub fn samples(&self) -> &[EegSample] {
        &self.samples
    }

    /// Inverse of [`reorganize`]: rebuild the dataset sample-for-sample from
    /// the grouped blocks and their provenance.
    pub fn reconstruct(&self) -> Result<Vec<EegSample>, TokenizerError> {
        let mut rebuilt: Vec<Option<Vec<Option<Tensor>>>> = self
            .samples
            .iter()
            .map(|s| Some(vec![None; s.electrodes().len()]))
            .collect();
        for (_, blocks) in &self.groups {
            for &r in blocks {
                let tokens = self.block_tokens(r)?;
                rebuilt[r.sample].as_mut().expect("slot exists")[r.row] = Some(tokens);
            }
        }
        let mut out = Vec::with_capacity(self.samples.len());
        for (i, rows) in rebuilt.into_iter().enumerate() {
            let rows = rows.expect("slot exists");
            let original = &self.samples[i];
            let (t, c) = (original.num_tokens(), original.token_width());
            let mut data = Vec::with_capacity(rows.len() * t * c);
            for row in rows {
                let tensor = row.expect("every electrode row grouped exactly once");
                data.extend_from_slice(tensor.data());
            }
            let tokens = Tensor::new(&[original.electrodes().len(), t, c], data)?;
            out.push(EegSample::new(
                original.electrodes().to_vec(),
                tokens,
                original.label(),
                original.task_id().cloned(),
            )?);
        }
        Ok(out)
    }
}

/// Group every electrode block of `samples` by electrode identity.
pub fn reorganize(samples: &[EegSample]) -> Result<GroupedCorpus, TokenizerError> {
    let mut groups: BTreeMap<ElectrodeId, Vec<BlockRef>> = BTreeMap::new();
    for (si, sample) in samples.iter().enumerate() {
        for (row, &id) in sample.electrodes().iter().enumerate() {
            if id.0 as usize >= vocabulary_size() {
                return Err(TokenizerError::BadId(id.0));
            }
            groups.entry(id).or_default().push(BlockRef { sample: si, row });
        }
    }
    Ok(GroupedCorpus {
        groups,
        samples: samples.to_vec(),
    })
}

/// A pretraining unit: condition token followed by the signal tokens.
#[derive(Debug, Clone)]
pub struct ElectrodeSequence {
    pub electrode_id: ElectrodeId,
    /// `[(T+1) × C]`; row 0 is the electrode embedding at assembly time.
    pub tokens: Tensor,
    pub source: BlockRef,
}

/// Prepend the electrode's current embedding to a `[T × C]` block. Plain-value
/// variant; the embedding row does not participate in gradients (training uses
/// [`assemble_pretrain_on`]).
pub fn assemble_pretrain(
    block: &Tensor,
    electrode_id: ElectrodeId,
    vocab: &ElectrodeVocabulary,
    source: BlockRef,
) -> Result<ElectrodeSequence, TokenizerError> {
    if block.rank() != 2 || block.cols() != vocab.token_width() {
        return Err(TokenizerError::WidthMismatch {
            got: block.cols(),
            want: vocab.token_width(),
        });
    }
    let embedding = vocab.embedding(electrode_id)?;
    let mut data = Vec::with_capacity((block.rows() + 1) * block.cols());
    data.extend_from_slice(embedding.data());
    data.extend_from_slice(block.data());
    Ok(ElectrodeSequence {
        electrode_id,
        tokens: Tensor::new(&[block.rows() + 1, block.cols()], data)?,
        source,
    })
}

/// Taped assembly for training: the condition row is sliced out of the leased
/// vocabulary table, so pretraining gradients reach exactly the rows of the
/// electrodes present in the batch.
pub fn assemble_pretrain_on(
    tape: &mut Tape,
    vocab_table: Val,
    electrode_id: ElectrodeId,
    block: &Tensor,
) -> Result<Val, NumError> {
    let row = tape.slice_rows(vocab_table, electrode_id.0 as usize, 1)?;
    let signal = tape.constant(block);
    tape.concat_rows(&[row, signal])
}

/// Append the shared summary token after the last signal token of every
/// electrode stream: `[E × T × C]` becomes `[E × (T+1) × C]` with
/// `out[:, T, :] = c`.
pub fn assemble_finetune(sample: &EegSample, special_token: &Tensor) -> Result<Tensor, TokenizerError> {
    let shape = sample.tokens().shape();
    let (e, t, c) = (shape[0], shape[1], shape[2]);
    if special_token.numel() != c {
        return Err(TokenizerError::WidthMismatch {
            got: special_token.numel(),
            want: c,
        });
    }
    let src = sample.tokens().data();
    let mut data = Vec::with_capacity(e * (t + 1) * c);
    for row in 0..e {
        data.extend_from_slice(&src[row * t * c..(row + 1) * t * c]);
        data.extend_from_slice(special_token.data());
    }
    Ok(Tensor::new(&[e, t + 1, c], data)?)
}

#[cfg(test)]
mod tests;
