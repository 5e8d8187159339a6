//! The EEGB on-disk container: a directory holding `manifest.json`,
//! `data.bin` (little-endian f32, samples concatenated in manifest order,
//! each row-major `E×T×C`), and optionally `labels.bin` (little-endian u32,
//! one per sample).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Dataset, DatasetManifest, EegSample, TaskId, MANIFEST_VERSION};
use crate::numkit::Tensor;
use crate::tokenizer::electrode_index;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a dataset as an EEGB directory. Existing files are replaced.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest, DataError> {
    let manifest = dataset.manifest()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| io_err(&manifest_path, e))?;

    let data_path = dir.join("data.bin");
    let mut data = fs::File::create(&data_path).map_err(|e| io_err(&data_path, e))?;
    let mut buf = Vec::new();
    for sample in &dataset.samples {
        for &v in sample.tokens().data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    data.write_all(&buf).map_err(|e| io_err(&data_path, e))?;

    let all_labeled = !dataset.samples.is_empty()
        && dataset.samples.iter().all(|s| s.label().is_some());
    let labels_path = dir.join("labels.bin");
    if all_labeled {
        let mut labels = Vec::with_capacity(dataset.samples.len() * 4);
        for sample in &dataset.samples {
            labels.extend_from_slice(&sample.label().expect("checked").to_le_bytes());
        }
        fs::write(&labels_path, labels).map_err(|e| io_err(&labels_path, e))?;
    } else if labels_path.exists() {
        fs::remove_file(&labels_path).map_err(|e| io_err(&labels_path, e))?;
    }
    Ok(manifest)
}

/// Read an EEGB directory back into memory, promoting f32 payload to f64.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&json)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DataError::VersionMismatch {
            found: manifest.version,
            supported: MANIFEST_VERSION,
        });
    }
    if manifest.dtype != "f32le" {
        return Err(DataError::Config(format!(
            "unsupported dtype {:?}",
            manifest.dtype
        )));
    }
    let ids: Result<Vec<_>, _> = manifest
        .electrode_names
        .iter()
        .map(|name| {
            electrode_index(name).ok_or_else(|| DataError::UnknownElectrode(name.clone()))
        })
        .collect();
    let ids = ids?;
    let [e, t, c] = manifest.sample_shape;
    if e != ids.len() {
        return Err(DataError::Shape(format!(
            "manifest promises E={e} but lists {} electrodes",
            ids.len()
        )));
    }
    if let Some(subjects) = &manifest.subject_ids {
        if subjects.len() != manifest.num_samples {
            return Err(DataError::Shape(format!(
                "{} subject ids for {} samples",
                subjects.len(),
                manifest.num_samples
            )));
        }
    }

    let data_path = dir.join("data.bin");
    let expected = (manifest.num_samples * e * t * c * 4) as u64;
    let mut file = fs::File::open(&data_path).map_err(|e2| io_err(&data_path, e2))?;
    let actual = file.metadata().map_err(|e2| io_err(&data_path, e2))?.len();
    if actual != expected {
        return Err(DataError::Truncated {
            path: data_path.display().to_string(),
            expected,
            actual,
        });
    }
    let mut bytes = Vec::with_capacity(expected as usize);
    file.read_to_end(&mut bytes).map_err(|e2| io_err(&data_path, e2))?;

    let labels_path = dir.join("labels.bin");
    let labels: Option<Vec<u32>> = if labels_path.exists() {
        let raw = fs::read(&labels_path).map_err(|e2| io_err(&labels_path, e2))?;
        let expected_l = (manifest.num_samples * 4) as u64;
        if raw.len() as u64 != expected_l {
            return Err(DataError::Truncated {
                path: labels_path.display().to_string(),
                expected: expected_l,
                actual: raw.len() as u64,
            });
        }
        Some(
            raw.chunks_exact(4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        )
    } else {
        None
    };

    let task = labels
        .as_ref()
        .map(|_| TaskId(manifest.name.clone()));
    let per_sample = e * t * c;
    let mut samples = Vec::with_capacity(manifest.num_samples);
    for i in 0..manifest.num_samples {
        let mut values = Vec::with_capacity(per_sample);
        let base = i * per_sample * 4;
        for j in 0..per_sample {
            let off = base + j * 4;
            let v = f32::from_le_bytes([
                bytes[off],
                bytes[off + 1],
                bytes[off + 2],
                bytes[off + 3],
            ]);
            values.push(f64::from(v));
        }
        let tokens = Tensor::new(&[e, t, c], values)?;
        let mut sample = EegSample::new(
            ids.clone(),
            tokens,
            labels.as_ref().map(|l| l[i]),
            task.clone(),
        )?;
        if let Some(subjects) = &manifest.subject_ids {
            sample = sample.with_subject(subjects[i]);
        }
        samples.push(sample);
    }

    Ok(Dataset {
        name: manifest.name,
        sample_rate: manifest.sample_rate,
        electrode_names: manifest.electrode_names,
        num_classes: manifest.num_classes,
        samples,
    })
}
