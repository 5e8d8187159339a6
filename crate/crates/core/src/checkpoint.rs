//! Named-tensor checkpoint container.
//!
//! A checkpoint is a directory holding `config.json` (model kind/config plus a
//! format version), `index.json` (tensor name → shape and byte offset, sorted
//! by name), and `params.bin` (little-endian f64, concatenated in index
//! order).

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ete::{EteConfig, EteModel, MaeModel, ModelError};
use crate::numkit::{NumError, Tensor};
use crate::teg::TegModel;
use crate::tokenizer::ElectrodeVocabulary;

pub const CKPT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint metadata error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format version {found} unsupported (supported: {supported})")]
    FormatVersion { found: u32, supported: u32 },
    #[error("checkpoint {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: String,
        expected: u64,
        actual: u64,
    },
    #[error("tensor {0:?} missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor {name:?}: checkpoint shape {got:?} does not match model shape {want:?}")]
    ShapeMismatch {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint kind {found:?}, expected {expected:?}")]
    WrongKind { expected: String, found: String },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path, source: std::io::Error) -> CkptError {
    CkptError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    format_version: u32,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Write named tensors plus an arbitrary JSON config document.
pub fn save_tensors(
    dir: &Path,
    tensors: &[(String, Tensor)],
    config: &serde_json::Value,
) -> Result<(), CkptError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut sorted: Vec<&(String, Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    let mut entries = Vec::with_capacity(sorted.len());
    let mut blob = Vec::new();
    for (name, tensor) in sorted {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = IndexFile {
        format_version: CKPT_FORMAT_VERSION,
        tensors: entries,
    };
    let index_path = dir.join("index.json");
    fs::write(&index_path, serde_json::to_string_pretty(&index)?)
        .map_err(|e| io_err(&index_path, e))?;
    let params_path = dir.join("params.bin");
    fs::write(&params_path, blob).map_err(|e| io_err(&params_path, e))?;
    let config_path = dir.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(config)?)
        .map_err(|e| io_err(&config_path, e))?;
    Ok(())
}

/// Read back every tensor and the config document.
pub fn load_tensors(dir: &Path) -> Result<(BTreeMap<String, Tensor>, serde_json::Value), CkptError> {
    let index_path = dir.join("index.json");
    let text = fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
    let index: IndexFile = serde_json::from_str(&text)?;
    if index.format_version != CKPT_FORMAT_VERSION {
        return Err(CkptError::FormatVersion {
            found: index.format_version,
            supported: CKPT_FORMAT_VERSION,
        });
    }
    let params_path = dir.join("params.bin");
    let expected: u64 = index
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() as u64 * 8)
        .sum();
    let mut file = fs::File::open(&params_path).map_err(|e| io_err(&params_path, e))?;
    let actual = file.metadata().map_err(|e| io_err(&params_path, e))?.len();
    if actual != expected {
        return Err(CkptError::Truncated {
            path: params_path.display().to_string(),
            expected,
            actual,
        });
    }
    let mut blob = Vec::with_capacity(expected as usize);
    file.read_to_end(&mut blob).map_err(|e| io_err(&params_path, e))?;

    let mut out = BTreeMap::new();
    for entry in &index.tensors {
        let numel: usize = entry.shape.iter().product();
        let base = entry.offset as usize;
        let mut data = Vec::with_capacity(numel);
        for j in 0..numel {
            let off = base + j * 8;
            let bytes: [u8; 8] = blob[off..off + 8].try_into().expect("length checked");
            data.push(f64::from_le_bytes(bytes));
        }
        out.insert(entry.name.clone(), Tensor::new(&entry.shape, data)?);
    }

    let config_path = dir.join("config.json");
    let text = fs::read_to_string(&config_path).map_err(|e| io_err(&config_path, e))?;
    Ok((out, serde_json::from_str(&text)?))
}

/// Overwrite every model parameter from the loaded map, preserving grad flags.
pub fn install_params(
    params: Vec<(String, &mut Tensor)>,
    loaded: &BTreeMap<String, Tensor>,
) -> Result<(), CkptError> {
    for (name, p) in params {
        let t = loaded
            .get(&name)
            .ok_or_else(|| CkptError::MissingTensor(name.clone()))?;
        if t.shape() != p.shape() {
            return Err(CkptError::ShapeMismatch {
                name,
                want: p.shape().to_vec(),
                got: t.shape().to_vec(),
            });
        }
        *p = p.with_data(t.data().to_vec())?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EteCkptConfig {
    format_version: u32,
    kind: String,
    config: EteConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct TegCkptConfig {
    format_version: u32,
    kind: String,
    ete: EteConfig,
    layers: usize,
    tasks: Vec<(String, u32)>,
}

fn kind_of(config: &serde_json::Value) -> String {
    config
        .get("kind")
        .and_then(|k| k.as_str())
        .unwrap_or_default()
        .to_string()
}

/// Encoder + vocabulary checkpoint.
pub fn save_ete(dir: &Path, model: &EteModel, vocab: &ElectrodeVocabulary) -> Result<(), CkptError> {
    let mut tensors = model.named_params();
    tensors.push(("vocab.embeddings".to_string(), vocab.embeddings().clone()));
    let config = serde_json::to_value(EteCkptConfig {
        format_version: CKPT_FORMAT_VERSION,
        kind: "ete".to_string(),
        config: model.config.clone(),
    })?;
    save_tensors(dir, &tensors, &config)
}

pub fn load_ete(dir: &Path) -> Result<(EteModel, ElectrodeVocabulary), CkptError> {
    let (tensors, config) = load_tensors(dir)?;
    if kind_of(&config) != "ete" {
        return Err(CkptError::WrongKind {
            expected: "ete".into(),
            found: kind_of(&config),
        });
    }
    let parsed: EteCkptConfig = serde_json::from_value(config)?;
    let mut model = EteModel::init(&parsed.config, 0)?;
    install_params(model.params_mut(), &tensors)?;
    let embeddings = tensors
        .get("vocab.embeddings")
        .ok_or_else(|| CkptError::MissingTensor("vocab.embeddings".into()))?;
    let vocab = ElectrodeVocabulary::from_embeddings(embeddings.clone().requires_grad(true))
        .map_err(|e| CkptError::MissingTensor(e.to_string()))?;
    Ok((model, vocab))
}

/// Masked-autoencoder variant checkpoint (same container, extra mask token).
pub fn save_mae(dir: &Path, model: &MaeModel, vocab: &ElectrodeVocabulary) -> Result<(), CkptError> {
    let mut tensors = model.named_params();
    tensors.push(("vocab.embeddings".to_string(), vocab.embeddings().clone()));
    let config = serde_json::to_value(EteCkptConfig {
        format_version: CKPT_FORMAT_VERSION,
        kind: "mae".to_string(),
        config: model.ete.config.clone(),
    })?;
    save_tensors(dir, &tensors, &config)
}

pub fn load_mae(dir: &Path) -> Result<(MaeModel, ElectrodeVocabulary), CkptError> {
    let (tensors, config) = load_tensors(dir)?;
    if kind_of(&config) != "mae" {
        return Err(CkptError::WrongKind {
            expected: "mae".into(),
            found: kind_of(&config),
        });
    }
    let parsed: EteCkptConfig = serde_json::from_value(config)?;
    let mut model = MaeModel::init(&parsed.config, 0)?;
    install_params(model.params_mut(), &tensors)?;
    let embeddings = tensors
        .get("vocab.embeddings")
        .ok_or_else(|| CkptError::MissingTensor("vocab.embeddings".into()))?;
    let vocab = ElectrodeVocabulary::from_embeddings(embeddings.clone().requires_grad(true))
        .map_err(|e| CkptError::MissingTensor(e.to_string()))?;
    Ok((model, vocab))
}

/// Graph-network checkpoint, task-head registry in `config.json`.
pub fn save_teg(dir: &Path, model: &TegModel, ete_config: &EteConfig) -> Result<(), CkptError> {
    let tasks: Vec<(String, u32)> = model
        .task_heads
        .iter()
        .map(|(task, head)| (task.0.clone(), head.num_classes))
        .collect();
    let config = serde_json::to_value(TegCkptConfig {
        format_version: CKPT_FORMAT_VERSION,
        kind: "teg".to_string(),
        ete: ete_config.clone(),
        layers: model.layers.len(),
        tasks,
    })?;
    save_tensors(dir, &model.named_params(), &config)
}

pub fn load_teg(dir: &Path) -> Result<(TegModel, EteConfig), CkptError> {
    let (tensors, config) = load_tensors(dir)?;
    if kind_of(&config) != "teg" {
        return Err(CkptError::WrongKind {
            expected: "teg".into(),
            found: kind_of(&config),
        });
    }
    let parsed: TegCkptConfig = serde_json::from_value(config)?;
    let mut model = TegModel::init(&parsed.ete, parsed.layers, 0)?;
    for (task, classes) in &parsed.tasks {
        model.register_task(crate::dataio::TaskId(task.clone()), *classes, 0);
    }
    install_params(model.params_mut(), &tensors)?;
    Ok((model, parsed.ete))
}
