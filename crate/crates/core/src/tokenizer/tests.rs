use super::*;
use crate::dataio::EegSample;
use crate::numkit::{Tape, Tensor};

fn sample_with(names: &[&str], t: usize, c: usize, fill: f64) -> EegSample {
    let ids: Vec<ElectrodeId> = names.iter().map(|n| electrode_index(n).unwrap()).collect();
    let data: Vec<f64> = (0..names.len() * t * c)
        .map(|i| fill + i as f64 * 0.01)
        .collect();
    EegSample::new(ids, Tensor::new(&[names.len(), t, c], data).unwrap(), None, None).unwrap()
}

#[test]
fn vocabulary_has_exactly_138_unique_names() {
    assert_eq!(vocabulary_size(), 138);
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..vocabulary_size() {
        let name = electrode_name(ElectrodeId(i as u16)).unwrap();
        assert!(seen.insert(name), "duplicate {name}");
        assert_eq!(electrode_index(name), Some(ElectrodeId(i as u16)));
    }
}

#[test]
fn lookup_is_case_insensitive_and_order_stable() {
    assert_eq!(electrode_index("cz"), electrode_index("CZ"));
    assert_eq!(electrode_index("Fcc5h"), electrode_index("FCC5H"));
    assert_eq!(electrode_index("PO12"), Some(ElectrodeId(0)));
    assert_eq!(electrode_index("FTT10H"), Some(ElectrodeId(137)));
    assert_eq!(electrode_index("NOPE"), None);
}

#[test]
fn reorganize_groups_by_electrode() {
    let s1 = sample_with(&["FZ", "CZ"], 2, 3, 0.0);
    let s2 = sample_with(&["CZ", "PZ"], 2, 3, 1.0);
    let corpus = reorganize(&[s1, s2]).unwrap();
    assert_eq!(corpus.num_electrodes(), 3);
    let count = |name: &str| corpus.groups()[&electrode_index(name).unwrap()].len();
    assert_eq!(count("FZ"), 1);
    assert_eq!(count("CZ"), 2);
    assert_eq!(count("PZ"), 1);
}

#[test]
fn reorganize_single_shared_electrode_gives_one_group() {
    let samples: Vec<EegSample> = (0..5).map(|i| sample_with(&["OZ"], 2, 2, i as f64)).collect();
    let corpus = reorganize(&samples).unwrap();
    assert_eq!(corpus.num_electrodes(), 1);
    assert_eq!(corpus.num_blocks(), 5);
}

#[test]
fn any_mixture_of_canonical_electrodes_reorganizes() {
    // electrode sets drawn from across the vocabulary, mixed freely
    let rosters: Vec<Vec<&str>> = vec![
        vec!["FP1", "FP2", "FZ", "CZ", "PZ", "OZ"],
        vec!["C3", "C4", "CZ"],
        vec!["PO12", "POO11H", "FTT10H", "CB1", "CB2"],
        vec!["T7", "T8", "P7", "P8", "O1", "O2", "F7", "F8"],
    ];
    let samples: Vec<EegSample> = rosters
        .iter()
        .map(|names| sample_with(names, 3, 4, 0.5))
        .collect();
    let corpus = reorganize(&samples).unwrap();
    assert_eq!(corpus.num_blocks(), rosters.iter().map(Vec::len).sum::<usize>());
}

#[test]
fn reorganize_then_reconstruct_is_lossless() {
    let samples = vec![
        sample_with(&["FZ", "CZ", "PZ"], 3, 4, 0.0),
        sample_with(&["CZ", "OZ"], 3, 4, 2.0),
        sample_with(&["FZ"], 3, 4, 5.0),
    ];
    let corpus = reorganize(&samples).unwrap();
    let rebuilt = corpus.reconstruct().unwrap();
    assert_eq!(rebuilt.len(), samples.len());
    for (orig, back) in samples.iter().zip(rebuilt.iter()) {
        assert_eq!(orig.electrodes(), back.electrodes());
        assert!(orig.tokens().bit_eq(back.tokens()));
    }
}

#[test]
fn assemble_pretrain_prepends_embedding_as_row_zero() {
    let vocab = ElectrodeVocabulary::init(4, 7);
    let id = electrode_index("CZ").unwrap();
    let block = Tensor::new(&[3, 4], (0..12).map(f64::from).collect()).unwrap();
    let seq = assemble_pretrain(&block, id, &vocab, BlockRef { sample: 0, row: 0 }).unwrap();
    assert_eq!(seq.tokens.shape(), &[4, 4]);
    let emb = vocab.embedding(id).unwrap();
    assert_eq!(&seq.tokens.data()[..4], emb.data());
    assert_eq!(&seq.tokens.data()[4..], block.data());
}

#[test]
fn assemble_pretrain_with_zero_embedding_keeps_signal_rows() {
    let vocab = ElectrodeVocabulary::from_embeddings(Tensor::zeros(&[vocabulary_size(), 4])).unwrap();
    let id = electrode_index("FZ").unwrap();
    let block = Tensor::new(&[2, 4], vec![1.0; 8]).unwrap();
    let seq = assemble_pretrain(&block, id, &vocab, BlockRef { sample: 0, row: 0 }).unwrap();
    assert_eq!(&seq.tokens.data()[..4], &[0.0; 4]);
    assert_eq!(&seq.tokens.data()[4..], &[1.0; 8]);
}

#[test]
fn assemble_pretrain_rejects_width_mismatch() {
    let vocab = ElectrodeVocabulary::init(4, 7);
    let block = Tensor::new(&[3, 5], vec![0.0; 15]).unwrap();
    let err = assemble_pretrain(
        &block,
        electrode_index("CZ").unwrap(),
        &vocab,
        BlockRef { sample: 0, row: 0 },
    )
    .unwrap_err();
    assert!(matches!(err, TokenizerError::WidthMismatch { got: 5, want: 4 }));
}

#[test]
fn pretrain_gradients_touch_only_present_electrode_rows() {
    let vocab = ElectrodeVocabulary::init(3, 7);
    let present = electrode_index("CZ").unwrap();
    let block = Tensor::new(&[2, 3], vec![0.3, -0.1, 0.8, 0.2, 0.5, -0.4]).unwrap();

    let mut tape = Tape::new();
    let table = tape.leaf(vocab.embeddings());
    let seq = assemble_pretrain_on(&mut tape, table, present, &block).unwrap();
    let sq = tape.mul(seq, seq).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(vocab.embeddings()).unwrap();
    let c = vocab.token_width();
    for row in 0..vocabulary_size() {
        let slice = &g.data()[row * c..(row + 1) * c];
        if row == present.0 as usize {
            assert!(slice.iter().any(|&v| v != 0.0), "present row has zero grad");
        } else {
            assert!(slice.iter().all(|&v| v == 0.0), "absent row {row} touched");
        }
    }
}

#[test]
fn assemble_finetune_appends_shared_token_at_position_t() {
    let sample = sample_with(&["FZ", "CZ"], 3, 4, 0.0);
    let c = Tensor::new(&[4], vec![9.0, 8.0, 7.0, 6.0]).unwrap();
    let out = assemble_finetune(&sample, &c).unwrap();
    assert_eq!(out.shape(), &[2, 4, 4]);
    for e in 0..2 {
        let stream = out.subtensor(e).unwrap();
        assert_eq!(&stream.data()[12..16], c.data());
        let orig = sample.tokens().subtensor(e).unwrap();
        assert_eq!(&stream.data()[..12], orig.data());
    }
}

#[test]
fn assemble_finetune_zero_token_leaves_prior_rows() {
    let sample = sample_with(&["PZ"], 2, 3, 1.0);
    let out = assemble_finetune(&sample, &Tensor::zeros(&[3])).unwrap();
    assert_eq!(&out.data()[6..9], &[0.0; 3]);
    assert_eq!(&out.data()[..6], sample.tokens().data());
}

#[test]
fn changing_special_token_changes_only_position_t() {
    let sample = sample_with(&["FZ", "OZ"], 3, 2, 0.25);
    let a = assemble_finetune(&sample, &Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
    let b = assemble_finetune(&sample, &Tensor::new(&[2], vec![-3.0, 4.0]).unwrap()).unwrap();
    for e in 0..2 {
        for t in 0..4 {
            for k in 0..2 {
                let idx = (e * 4 + t) * 2 + k;
                if t == 3 {
                    assert_ne!(a.data()[idx], b.data()[idx]);
                } else {
                    assert_eq!(a.data()[idx], b.data()[idx]);
                }
            }
        }
    }
}
