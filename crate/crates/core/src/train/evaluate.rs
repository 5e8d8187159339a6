//! Accuracy evaluation and dataset splitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::{Dataset, EegSample, TaskId};
use crate::ete::EteModel;
use crate::numkit::Tape;
use crate::teg::{SubgraphActivation, TegModel};

use super::TrainError;

#[derive(Debug, Clone, Copy)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut out = items.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x73706c69);
    for i in (1..out.len()).rev() {
        let j = rng.gen_range(0..=i);
        out.swap(i, j);
    }
    out
}

/// Split a dataset into train/val/test. When every sample carries a subject
/// id the split is subject-disjoint: subjects are shuffled and partitioned, so
/// no subject appears in two splits. Otherwise samples are shuffled directly.
pub fn split_dataset(
    dataset: &Dataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Vec<EegSample>, Vec<EegSample>, Vec<EegSample>), TrainError> {
    let n = dataset.samples.len();
    if n < 3 {
        return Err(TrainError::EmptySplit(format!(
            "dataset {} has only {n} samples",
            dataset.name
        )));
    }
    let counts = |total: usize| -> Result<(usize, usize, usize), TrainError> {
        let val = ((ratios.val * total as f64).round() as usize).max(1);
        let test = ((ratios.test * total as f64).round() as usize).max(1);
        if val + test >= total {
            return Err(TrainError::EmptySplit(format!(
                "{total} units cannot fill train/val/test at {}:{}:{}",
                ratios.train, ratios.val, ratios.test
            )));
        }
        Ok((total - val - test, val, test))
    };

    if let Some(subjects) = dataset.subjects() {
        let order = shuffled(&subjects, seed);
        let (n_train, n_val, _) = counts(order.len())?;
        let train_set: std::collections::BTreeSet<u32> =
            order[..n_train].iter().copied().collect();
        let val_set: std::collections::BTreeSet<u32> =
            order[n_train..n_train + n_val].iter().copied().collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for sample in &dataset.samples {
            let subject = sample.subject_id().expect("subjects() checked all samples");
            if train_set.contains(&subject) {
                train.push(sample.clone());
            } else if val_set.contains(&subject) {
                val.push(sample.clone());
            } else {
                test.push(sample.clone());
            }
        }
        for (name, split) in [("train", &train), ("val", &val), ("test", &test)] {
            if split.is_empty() {
                return Err(TrainError::EmptySplit(format!(
                    "subject-disjoint {name} split of {}",
                    dataset.name
                )));
            }
        }
        Ok((train, val, test))
    } else {
        let indices: Vec<usize> = (0..n).collect();
        let order = shuffled(&indices, seed);
        let (n_train, n_val, _) = counts(n)?;
        let pick = |range: std::ops::Range<usize>| -> Vec<EegSample> {
            order[range].iter().map(|&i| dataset.samples[i].clone()).collect()
        };
        Ok((
            pick(0..n_train),
            pick(n_train..n_train + n_val),
            pick(n_train + n_val..n),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

/// Classify every sample (in parallel, reduced in sample order) and report
/// accuracy plus the confusion matrix.
pub fn evaluate(
    ete: &EteModel,
    teg: &TegModel,
    samples: &[EegSample],
    task: &TaskId,
) -> Result<EvalReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit(format!("evaluation of {task}")));
    }
    let num_classes = teg
        .task_heads
        .get(task)
        .ok_or_else(|| TrainError::Config(format!("task {task} has no head")))?
        .num_classes as usize;

    let outcomes: Result<Vec<(u32, u32)>, TrainError> = samples
        .par_iter()
        .map(|sample| {
            let label = sample
                .label()
                .ok_or_else(|| TrainError::Config("unlabeled sample in evaluation".into()))?;
            let activation = SubgraphActivation::from_sample(sample)?;
            let mut tape = Tape::new();
            let z = teg.extract_reprs(&mut tape, ete, sample)?;
            let logits = teg.forward(&mut tape, z, &activation, task)?;
            let row = tape.value(logits);
            let mut best = 0usize;
            for j in 1..row.cols() {
                if row.at2(0, j) > row.at2(0, best) {
                    best = j;
                }
            }
            Ok((label, best as u32))
        })
        .collect();

    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    let mut correct = 0u64;
    let outcomes = outcomes?;
    for &(truth, predicted) in &outcomes {
        if (truth as usize) < num_classes && (predicted as usize) < num_classes {
            confusion[truth as usize][predicted as usize] += 1;
        }
        if truth == predicted {
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / outcomes.len() as f64,
        correct,
        total: outcomes.len() as u64,
        confusion,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}
