//! EEG dataset container, preprocessing, and seeded synthetic corpora.
//!
//! Recordings hold raw multi-electrode signal in microvolts; the preprocessing
//! pipeline resamples to a target rate, cuts non-overlapping windows, splits
//! each window into overlapping fixed-width tokens, and z-scores each
//! electrode's token block. Storage is little-endian f32 (the EEGB container);
//! in-memory computation is always f64.

mod eegb;
mod preprocess;
mod synth;

pub use eegb::{read_dataset, write_dataset};
pub use preprocess::{
    bandpass_hook, preprocess_recording, resample, segment_and_tokenize, zscore,
    PreprocessProfile, TokenizeProfile,
};
pub use synth::{ar2_series, generate_synthetic, stationary, SyntheticSpec, TaskRule};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{NumError, Tensor};
use crate::tokenizer::{electrode_index, ElectrodeId};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty signal")]
    EmptySignal,
    #[error("unknown electrode {0:?}")]
    UnknownElectrode(String),
    #[error("duplicate electrode {0:?}")]
    DuplicateElectrode(String),
    #[error("manifest version {found} unsupported (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("{path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: String,
        expected: u64,
        actual: u64,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Task identifier for multi-task datasets.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub String);

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// One continuous multi-electrode recording segment in microvolts.
#[derive(Debug, Clone)]
pub struct EegRecording {
    electrode_names: Vec<String>,
    sample_rate: u32,
    /// `[E × total_samples]`
    signal: Tensor,
    subject_id: String,
}

impl EegRecording {
    pub fn new(
        electrode_names: Vec<String>,
        sample_rate: u32,
        signal: Tensor,
        subject_id: impl Into<String>,
    ) -> Result<Self, DataError> {
        if sample_rate == 0 {
            return Err(DataError::Config("sample_rate must be positive".into()));
        }
        let names = canonicalize_names(&electrode_names)?;
        if signal.rank() != 2 || signal.shape()[0] != names.len() {
            return Err(DataError::Shape(format!(
                "signal shape {:?} does not match {} electrodes",
                signal.shape(),
                names.len()
            )));
        }
        Ok(Self {
            electrode_names: names,
            sample_rate,
            signal,
            subject_id: subject_id.into(),
        })
    }

    pub fn electrode_names(&self) -> &[String] {
        &self.electrode_names
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn signal(&self) -> &Tensor {
        &self.signal
    }

    pub fn samples(&self) -> usize {
        self.signal.shape()[1]
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }
}

/// Uppercase, validate against the canonical vocabulary, reject duplicates.
pub(crate) fn canonicalize_names(names: &[String]) -> Result<Vec<String>, DataError> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let canonical = name.to_ascii_uppercase();
        if electrode_index(&canonical).is_none() {
            return Err(DataError::UnknownElectrode(name.clone()));
        }
        if !seen.insert(canonical.clone()) {
            return Err(DataError::DuplicateElectrode(name.clone()));
        }
        out.push(canonical);
    }
    Ok(out)
}

/// One tokenized sample: `E` electrodes × `T` tokens × `C` points per token.
#[derive(Debug, Clone)]
pub struct EegSample {
    electrodes: Vec<ElectrodeId>,
    /// `[E × T × C]`
    tokens: Tensor,
    label: Option<u32>,
    task_id: Option<TaskId>,
    subject_id: Option<u32>,
}

impl EegSample {
    pub fn new(
        electrodes: Vec<ElectrodeId>,
        tokens: Tensor,
        label: Option<u32>,
        task_id: Option<TaskId>,
    ) -> Result<Self, DataError> {
        if tokens.rank() != 3 {
            return Err(DataError::Shape(format!(
                "sample tokens must be [E, T, C], got {:?}",
                tokens.shape()
            )));
        }
        if tokens.shape()[0] != electrodes.len() {
            return Err(DataError::Shape(format!(
                "{} electrodes but token extent {}",
                electrodes.len(),
                tokens.shape()[0]
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &electrodes {
            if !seen.insert(*e) {
                return Err(DataError::DuplicateElectrode(format!("{e:?}")));
            }
        }
        Ok(Self {
            electrodes,
            tokens,
            label,
            task_id,
            subject_id: None,
        })
    }

    pub fn with_subject(mut self, subject: u32) -> Self {
        self.subject_id = Some(subject);
        self
    }

    pub fn with_task(mut self, task: TaskId) -> Self {
        self.task_id = Some(task);
        self
    }

    pub fn electrodes(&self) -> &[ElectrodeId] {
        &self.electrodes
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    /// `[T × C]` token block of one electrode row.
    pub fn electrode_block(&self, row: usize) -> Result<Tensor, DataError> {
        Ok(self.tokens.subtensor(row)?)
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn task_id(&self) -> Option<&TaskId> {
        self.task_id.as_ref()
    }

    pub fn subject_id(&self) -> Option<u32> {
        self.subject_id
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn token_width(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Whether every electrode block is z-scored to `|μ| < tol` and
    /// `|σ − 1| < tol`, with constant (all-zero) blocks allowed.
    pub fn is_normalized(&self, tol: f64) -> bool {
        let (e_count, t, c) = (
            self.tokens.shape()[0],
            self.tokens.shape()[1],
            self.tokens.shape()[2],
        );
        let block = t * c;
        let data = self.tokens.data();
        for e in 0..e_count {
            let slice = &data[e * block..(e + 1) * block];
            let mean: f64 = slice.iter().sum::<f64>() / block as f64;
            let var: f64 = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
            let std = var.sqrt();
            let constant = slice.iter().all(|&v| v == 0.0);
            if !constant && (mean.abs() >= tol || (std - 1.0).abs() >= tol) {
                return false;
            }
        }
        true
    }
}

/// In-memory dataset: uniform electrode set and sample shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub sample_rate: u32,
    pub electrode_names: Vec<String>,
    pub num_classes: Option<u32>,
    pub samples: Vec<EegSample>,
}

impl Dataset {
    pub fn sample_shape(&self) -> Result<[usize; 3], DataError> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| DataError::Config("dataset has no samples".into()))?;
        let s = first.tokens().shape();
        Ok([s[0], s[1], s[2]])
    }

    pub fn manifest(&self) -> Result<DatasetManifest, DataError> {
        let shape = self.sample_shape()?;
        let subject_ids = if self.samples.iter().all(|s| s.subject_id().is_some()) {
            Some(
                self.samples
                    .iter()
                    .map(|s| s.subject_id().expect("checked above"))
                    .collect(),
            )
        } else {
            None
        };
        Ok(DatasetManifest {
            version: MANIFEST_VERSION,
            name: self.name.clone(),
            sample_rate: self.sample_rate,
            electrode_names: self.electrode_names.clone(),
            num_samples: self.samples.len(),
            num_classes: self.num_classes,
            dtype: "f32le".into(),
            sample_shape: shape,
            subject_ids,
        })
    }

    /// Unique subject ids, sorted, when every sample carries one.
    pub fn subjects(&self) -> Option<Vec<u32>> {
        let mut set = std::collections::BTreeSet::new();
        for s in &self.samples {
            set.insert(s.subject_id()?);
        }
        Some(set.into_iter().collect())
    }
}

pub const MANIFEST_VERSION: u32 = 1;

/// On-disk description of an EEGB dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub name: String,
    pub sample_rate: u32,
    pub electrode_names: Vec<String>,
    pub num_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<u32>,
    pub dtype: String,
    /// `[E, T, C]`
    pub sample_shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_ids: Option<Vec<u32>>,
}
