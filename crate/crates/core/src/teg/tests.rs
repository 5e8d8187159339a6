use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ete::{EteConfig, RMS_EPS};
use crate::numkit::Tensor;

fn id(name: &str) -> ElectrodeId {
    crate::tokenizer::electrode_index(name).unwrap()
}

fn tiny_frozen_ete(seed: u64) -> EteModel {
    let mut ete = EteModel::init(&EteConfig::tiny(), seed).unwrap();
    ete.freeze();
    ete
}

fn tiny_teg(layers: usize, seed: u64) -> TegModel {
    TegModel::init(&EteConfig::tiny(), layers, seed).unwrap()
}

fn sample_of(names: &[&str], t: usize, seed: u64) -> EegSample {
    let ids: Vec<ElectrodeId> = names.iter().map(|n| id(n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = Tensor::randn(&[names.len(), t, 6], 1.0, &mut rng);
    EegSample::new(ids, tokens, None, None).unwrap()
}

fn random_z(k: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[k, d], 1.0, &mut rng)
}

// ── activation ──

#[test]
fn activation_rejects_empty_duplicates_and_out_of_range() {
    assert!(SubgraphActivation::new(vec![]).is_err());
    assert!(SubgraphActivation::new(vec![ElectrodeId(3), ElectrodeId(3)]).is_err());
    assert!(SubgraphActivation::new(vec![ElectrodeId(138)]).is_err());
}

#[test]
fn beta_is_one_exactly_on_active_pairs() {
    let act = SubgraphActivation::new(vec![ElectrodeId(2), ElectrodeId(5)]).unwrap();
    assert_eq!(act.beta(2, 5), 1.0);
    assert_eq!(act.beta(5, 2), 1.0);
    assert_eq!(act.beta(2, 2), 1.0);
    assert_eq!(act.beta(2, 7), 0.0);
    assert_eq!(act.beta(7, 9), 0.0);
}

// ── representation extraction ──

#[test]
fn single_electrode_repr_is_the_last_hidden_state() {
    let ete = tiny_frozen_ete(3);
    let teg = tiny_teg(2, 4);
    let sample = sample_of(&["FZ"], 4, 9);

    let mut tape = Tape::new();
    let z = teg.extract_reprs(&mut tape, &ete, &sample).unwrap();
    let zv = tape.value(z);
    assert_eq!(zv.shape(), &[1, 8]);

    // manual: append the summary token, run the encoder, take the final row
    let block = sample.electrode_block(0).unwrap();
    let mut data = block.data().to_vec();
    data.extend_from_slice(teg.special_token.data());
    let seq = Tensor::new(&[5, 6], data).unwrap();
    let mut tape2 = Tape::new();
    let fwd = ete.forward(&mut tape2, &seq).unwrap();
    let hidden = tape2.value(fwd.hidden);
    for j in 0..8 {
        assert_eq!(zv.at2(0, j), hidden.at2(4, j));
    }
}

#[test]
fn final_position_differs_from_one_before_it() {
    // appending an extra summary token and reading position T instead of T+1
    // must give a different vector, so the extractor's indexing is observable
    let ete = tiny_frozen_ete(5);
    let teg = tiny_teg(1, 6);
    let sample = sample_of(&["CZ"], 4, 11);
    let block = sample.electrode_block(0).unwrap();
    let mut data = block.data().to_vec();
    data.extend_from_slice(teg.special_token.data());
    data.extend_from_slice(teg.special_token.data());
    let seq = Tensor::new(&[6, 6], data).unwrap();
    let mut tape = Tape::new();
    let fwd = ete.forward(&mut tape, &seq).unwrap();
    let hidden = tape.value(fwd.hidden);
    let differs = (0..8).any(|j| hidden.at2(4, j) != hidden.at2(5, j));
    assert!(differs);
}

#[test]
fn repr_of_an_electrode_ignores_other_electrodes() {
    let ete = tiny_frozen_ete(7);
    let teg = tiny_teg(1, 8);
    let solo = sample_of(&["FZ"], 4, 21);
    // multi-electrode sample whose FZ row carries identical tokens
    let mut data = solo.tokens().data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    data.extend(Tensor::randn(&[1, 4, 6], 1.0, &mut rng).data().iter());
    let multi = EegSample::new(
        vec![id("FZ"), id("CZ")],
        Tensor::new(&[2, 4, 6], data).unwrap(),
        None,
        None,
    )
    .unwrap();

    let mut ta = Tape::new();
    let za = teg.extract_reprs(&mut ta, &ete, &solo).unwrap();
    let mut tb = Tape::new();
    let zb = teg.extract_reprs(&mut tb, &ete, &multi).unwrap();
    let (va, vb) = (ta.value(za), tb.value(zb));
    for j in 0..8 {
        assert_eq!(va.at2(0, j).to_bits(), vb.at2(0, j).to_bits());
    }
}

#[test]
fn extraction_requires_a_frozen_encoder() {
    let ete = EteModel::init(&EteConfig::tiny(), 1).unwrap(); // not frozen
    let teg = tiny_teg(1, 2);
    let sample = sample_of(&["FZ"], 4, 1);
    assert!(matches!(
        teg.extract_reprs(&mut Tape::new(), &ete, &sample),
        Err(ModelError::Contract(_))
    ));
}

// ── activation op ──

#[test]
fn activate_adds_z_only_on_active_rows() {
    let teg = tiny_teg(1, 13);
    let act = SubgraphActivation::new(vec![ElectrodeId(0), ElectrodeId(2)]).unwrap();
    let z = random_z(2, 8, 31);

    let mut tape = Tape::new();
    let zv = tape.constant(&z);
    let features = teg.activate(&mut tape, zv, &act).unwrap();
    let fv = tape.value(features);
    for j in 0..8 {
        assert_eq!(fv.at2(0, j), teg.nodes.at2(0, j) + z.at2(0, j));
        assert_eq!(fv.at2(1, j), teg.nodes.at2(1, j));
        assert_eq!(fv.at2(2, j), teg.nodes.at2(2, j) + z.at2(1, j));
    }
}

#[test]
fn activate_with_zero_z_equals_base_and_never_mutates() {
    let teg = tiny_teg(1, 14);
    let act = SubgraphActivation::new(vec![ElectrodeId(4), ElectrodeId(9)]).unwrap();
    let before = teg.nodes.clone();

    let mut tape = Tape::new();
    let z = tape.constant(&Tensor::zeros(&[2, 8]));
    let f1 = teg.activate(&mut tape, z, &act).unwrap();
    assert!(tape.value(f1).bit_eq(&teg.nodes));
    // a second activation sees the same base: no state leaks between samples
    let z2 = tape.constant(&random_z(2, 8, 50));
    let _f2 = teg.activate(&mut tape, z2, &act).unwrap();
    let f3 = teg.activate(&mut tape, z, &act).unwrap();
    assert!(tape.value(f3).bit_eq(&before));
    assert!(teg.nodes.bit_eq(&before));
}

#[test]
fn activate_checks_row_count() {
    let teg = tiny_teg(1, 15);
    let act = SubgraphActivation::new(vec![ElectrodeId(1)]).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(&random_z(2, 8, 1));
    assert!(matches!(
        teg.activate(&mut tape, z, &act),
        Err(ModelError::Contract(_))
    ));
}

// ── graph attention ──

#[test]
fn single_active_node_attends_to_itself_with_weight_one() {
    let teg = tiny_teg(1, 16);
    let layer = &teg.layers[0];
    let mut tape = Tape::new();
    let h = tape.constant(&random_z(1, 8, 60));
    let normed = layer.norm1.apply(&mut tape, h).unwrap();
    let trace = teg.attention_trace(&mut tape, layer, normed).unwrap();
    for alpha in &trace.alphas {
        assert_eq!(tape.value(*alpha).data(), &[1.0]);
    }
    // h' before residual is σ(W ĥ) with α = 1
    let normed_v = tape.value(normed);
    let mut want = vec![0.0; 8];
    for j in 0..8 {
        let mut acc = 0.0;
        for p in 0..8 {
            acc += normed_v.at2(0, p) * layer.w.at2(p, j);
        }
        want[j] = acc.max(0.0);
    }
    let got = tape.value(trace.out);
    for j in 0..8 {
        assert!((got.at2(0, j) - want[j]).abs() < 1e-12);
    }
}

#[test]
fn two_active_nodes_with_zero_scores_split_attention_evenly() {
    let mut teg = tiny_teg(1, 17);
    let zeros = vec![0.0; teg.layers[0].a.numel()];
    teg.layers[0].a = teg.layers[0].a.with_data(zeros).unwrap();
    let layer = &teg.layers[0];
    let mut tape = Tape::new();
    let h = tape.constant(&random_z(2, 8, 61));
    let normed = layer.norm1.apply(&mut tape, h).unwrap();
    let trace = teg.attention_trace(&mut tape, layer, normed).unwrap();
    for alpha in &trace.alphas {
        assert_eq!(tape.value(*alpha).data(), &[0.5, 0.5, 0.5, 0.5]);
    }
}

// scalar oracle of the full layer, β-masked over all 138 nodes
type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows())
        .map(|i| t.data()[i * t.cols()..(i + 1) * t.cols()].to_vec())
        .collect()
}

fn oracle_rmsnorm_row(row: &[f64], w: &[f64]) -> Vec<f64> {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    row.iter().zip(w).map(|(v, s)| v * inv * s).collect()
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// β-masked attention per head plus feed-forward, expanded over the whole
/// 138-node table. Inactive pairs get exactly zero weight through β.
fn oracle_layer(
    teg: &TegModel,
    layer: &TegLayer,
    features: &Mat,
    act: &SubgraphActivation,
) -> (Vec<Mat>, Mat) {
    let v = features.len();
    let d = teg.hidden;
    let hs = teg.head_size;
    let w = to_mat(&layer.w);
    let a = to_mat(&layer.a);
    let norm1 = layer.norm1.weight.data();

    let normed: Mat = features
        .iter()
        .map(|row| oracle_rmsnorm_row(row, norm1))
        .collect();

    let mut alphas_full = Vec::with_capacity(teg.heads);
    let mut after = features.clone();
    let mut merged = vec![vec![0.0; d]; v];
    for h in 0..teg.heads {
        // g = ĥ · W_h
        let mut g = vec![vec![0.0; hs]; v];
        for m in 0..v {
            for j in 0..hs {
                let mut acc = 0.0;
                for p in 0..d {
                    acc += normed[m][p] * w[p][h * hs + j];
                }
                g[m][j] = acc;
            }
        }
        let score = |m: usize, n: usize| -> f64 {
            let mut s = 0.0;
            for p in 0..hs {
                s += a[h][p] * g[m][p] + a[h][hs + p] * g[n][p];
            }
            leaky(s)
        };
        let mut alpha = vec![vec![0.0; v]; v];
        for m in 0..v {
            if act.beta(m, m) == 0.0 {
                continue;
            }
            let mut denom = 0.0;
            for k in 0..v {
                if act.beta(m, k) == 1.0 {
                    denom += score(m, k).exp();
                }
            }
            for n in 0..v {
                if act.beta(m, n) == 1.0 {
                    alpha[m][n] = score(m, n).exp() / denom;
                }
            }
        }
        for m in 0..v {
            if act.beta(m, m) == 1.0 {
                for j in 0..hs {
                    let mut acc = 0.0;
                    for n in 0..v {
                        acc += alpha[m][n] * g[n][j];
                    }
                    merged[m][h * hs + j] = acc;
                }
            }
        }
        alphas_full.push(alpha);
    }
    for m in 0..v {
        if act.beta(m, m) == 1.0 {
            for j in 0..d {
                after[m][j] += merged[m][j].max(0.0);
            }
        }
    }

    // feed-forward sublayer on active rows
    let norm2 = layer.norm2.weight.data();
    let w1 = to_mat(&layer.ffn_w1.w);
    let w2 = to_mat(&layer.ffn_w2.w);
    let mut final_features = after.clone();
    for m in 0..v {
        if act.beta(m, m) == 0.0 {
            continue;
        }
        let x = oracle_rmsnorm_row(&after[m], norm2);
        let mut hidden = vec![0.0; teg.intermediate];
        for (j, hv) in hidden.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in 0..d {
                acc += x[p] * w1[p][j];
            }
            *hv = acc * (1.0 / (1.0 + (-acc).exp()));
        }
        for j in 0..d {
            let mut acc = 0.0;
            for (p, hv) in hidden.iter().enumerate() {
                acc += hv * w2[p][j];
            }
            final_features[m][j] += acc;
        }
    }
    (alphas_full, final_features)
}

#[test]
fn three_node_layer_matches_beta_masked_scalar_loop() {
    let teg = tiny_teg(1, 18);
    let act = SubgraphActivation::new(vec![ElectrodeId(5), ElectrodeId(40), ElectrodeId(99)]).unwrap();
    let z = random_z(3, 8, 70);

    let mut tape = Tape::new();
    let zv = tape.constant(&z);
    let features = teg.activate(&mut tape, zv, &act).unwrap();
    let features_mat = to_mat(&tape.value(features));

    // implementation path
    let layer = &teg.layers[0];
    let out = teg
        .graph_attention_layer(&mut tape, layer, features, &act)
        .unwrap();
    let got = tape.value(out);

    // trace for the α comparison
    let idx = act.indices();
    let active_in = tape.gather_rows(features, &idx).unwrap();
    let normed = layer.norm1.apply(&mut tape, active_in).unwrap();
    let trace = teg.attention_trace(&mut tape, layer, normed).unwrap();

    let (alphas_full, want) = oracle_layer(&teg, layer, &features_mat, &act);
    for (h, alpha) in trace.alphas.iter().enumerate() {
        let av = tape.value(*alpha);
        for (r, &m) in idx.iter().enumerate() {
            for (s, &n) in idx.iter().enumerate() {
                assert!(
                    (av.at2(r, s) - alphas_full[h][m][n]).abs() < 1e-12,
                    "head {h} α[{m}][{n}]"
                );
            }
        }
        // β: every pair involving an inactive node carries exactly zero
        for m in 0..138 {
            for n in 0..138 {
                if act.beta(m, n) == 0.0 {
                    assert_eq!(alphas_full[h][m][n], 0.0);
                }
            }
        }
    }
    for m in 0..138 {
        for j in 0..8 {
            assert!(
                (got.at2(m, j) - want[m][j]).abs() < 1e-12,
                "features[{m}][{j}]"
            );
        }
    }
}

#[test]
fn alpha_rows_sum_to_one_over_active_neighbors() {
    let teg = tiny_teg(1, 19);
    let act = SubgraphActivation::new(vec![ElectrodeId(1), ElectrodeId(8), ElectrodeId(63), ElectrodeId(100)])
        .unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(&random_z(4, 8, 71));
    let features = teg.activate(&mut tape, z, &act).unwrap();
    let idx = act.indices();
    let active = tape.gather_rows(features, &idx).unwrap();
    let layer = &teg.layers[0];
    let normed = layer.norm1.apply(&mut tape, active).unwrap();
    let trace = teg.attention_trace(&mut tape, layer, normed).unwrap();
    for alpha in &trace.alphas {
        let av = tape.value(*alpha);
        for r in 0..4 {
            let sum: f64 = (0..4).map(|s| av.at2(r, s)).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }
}

// ── pooling and heads ──

#[test]
fn pooling_a_single_node_returns_its_features() {
    let mut teg = tiny_teg(1, 20);
    let task = TaskId("demo".into());
    teg.register_task(task.clone(), 3, 1);
    let act = SubgraphActivation::new(vec![ElectrodeId(7)]).unwrap();

    let mut tape = Tape::new();
    let features = tape.constant(&random_z(138, 8, 80));
    let logits = teg
        .pool_and_classify(&mut tape, features, &act, &task)
        .unwrap();
    let fv = tape.value(features);
    let head = &teg.task_heads[&task].linear;
    let b = head.b.as_ref().unwrap().data();
    let lv = tape.value(logits);
    for j in 0..3 {
        let mut acc = 0.0;
        for p in 0..8 {
            acc += fv.at2(7, p) * head.w.at2(p, j);
        }
        assert!((lv.at2(0, j) - (acc + b[j])).abs() < 1e-12);
    }
}

#[test]
fn pooling_duplicated_rows_equals_single_row() {
    let mut teg = tiny_teg(1, 21);
    let task = TaskId("demo".into());
    teg.register_task(task.clone(), 2, 2);

    let mut features = random_z(138, 8, 81).data().to_vec();
    for j in 0..8 {
        features[3 * 8 + j] = features[11 * 8 + j];
    }
    let features = Tensor::new(&[138, 8], features).unwrap();

    let mut tape = Tape::new();
    let fv = tape.constant(&features);
    let pair = SubgraphActivation::new(vec![ElectrodeId(3), ElectrodeId(11)]).unwrap();
    let single = SubgraphActivation::new(vec![ElectrodeId(11)]).unwrap();
    let a = teg.pool_and_classify(&mut tape, fv, &pair, &task).unwrap();
    let b = teg.pool_and_classify(&mut tape, fv, &single, &task).unwrap();
    let (av, bv) = (tape.value(a), tape.value(b));
    for j in 0..2 {
        assert!((av.at2(0, j) - bv.at2(0, j)).abs() < 1e-12);
    }
}

#[test]
fn zero_head_weights_give_zero_logits_and_uniform_probabilities() {
    let mut teg = tiny_teg(1, 22);
    let task = TaskId("demo".into());
    teg.register_task(task.clone(), 4, 3);
    {
        let head = teg.task_heads.get_mut(&task).unwrap();
        head.linear.w = head.linear.w.with_data(vec![0.0; 32]).unwrap();
    }
    let act = SubgraphActivation::new(vec![ElectrodeId(2), ElectrodeId(4)]).unwrap();
    let mut tape = Tape::new();
    let features = tape.constant(&random_z(138, 8, 82));
    let logits = teg
        .pool_and_classify(&mut tape, features, &act, &task)
        .unwrap();
    assert_eq!(tape.value(logits).data(), &[0.0; 4]);
    let probs = tape.softmax_lastdim(logits, None).unwrap();
    assert_eq!(tape.value(probs).data(), &[0.25; 4]);
}

#[test]
fn unregistered_task_is_an_error() {
    let teg = tiny_teg(1, 23);
    let act = SubgraphActivation::new(vec![ElectrodeId(0)]).unwrap();
    let mut tape = Tape::new();
    let features = tape.constant(&random_z(138, 8, 83));
    assert!(matches!(
        teg.pool_and_classify(&mut tape, features, &act, &TaskId("nope".into())),
        Err(ModelError::UnknownTask(_))
    ));
}

// ── batching ──

#[test]
fn batch_forward_matches_solo_forwards_exactly() {
    let mut teg = tiny_teg(2, 24);
    let task_a = TaskId("a".into());
    let task_b = TaskId("b".into());
    teg.register_task(task_a.clone(), 2, 1);
    teg.register_task(task_b.clone(), 3, 2);
    // overlapping electrode sets
    let act_a = SubgraphActivation::new(vec![ElectrodeId(1), ElectrodeId(2), ElectrodeId(3)]).unwrap();
    let act_b = SubgraphActivation::new(vec![ElectrodeId(2), ElectrodeId(3), ElectrodeId(4)]).unwrap();
    let za = random_z(3, 8, 90);
    let zb = random_z(3, 8, 91);

    let mut tape = Tape::new();
    let zav = tape.constant(&za);
    let zbv = tape.constant(&zb);
    let items = vec![
        (zav, act_a.clone(), task_a.clone()),
        (zbv, act_b.clone(), task_b.clone()),
    ];
    let batch = teg.batch_forward(&mut tape, &items).unwrap();
    let batch_vals: Vec<Tensor> = batch.iter().map(|v| tape.value(*v)).collect();

    for (i, (z, act, task)) in [(za, act_a, task_a), (zb, act_b, task_b)].iter().enumerate() {
        let mut solo = Tape::new();
        let zv = solo.constant(z);
        let logits = teg.forward(&mut solo, zv, act, task).unwrap();
        let sv = solo.value(logits);
        for j in 0..sv.cols() {
            assert!(
                (batch_vals[i].at2(0, j) - sv.at2(0, j)).abs() <= 1e-12,
                "sample {i} logit {j}"
            );
        }
    }
}

#[test]
fn gradients_vanish_outside_the_active_union() {
    let mut teg = tiny_teg(2, 25);
    let task = TaskId("a".into());
    teg.register_task(task.clone(), 2, 1);
    let act_a = SubgraphActivation::new(vec![ElectrodeId(10), ElectrodeId(11)]).unwrap();
    let act_b = SubgraphActivation::new(vec![ElectrodeId(11), ElectrodeId(12)]).unwrap();

    let mut tape = Tape::new();
    let za = tape.constant(&random_z(2, 8, 92));
    let zb = tape.constant(&random_z(2, 8, 93));
    let items = vec![(za, act_a, task.clone()), (zb, act_b, task.clone())];
    let logits = teg.batch_forward(&mut tape, &items).unwrap();
    let la = cross_entropy(&mut tape, logits[0], 0).unwrap();
    let lb = cross_entropy(&mut tape, logits[1], 1).unwrap();
    let sum = tape.add(la, lb).unwrap();
    let loss = tape.scale(sum, 0.5).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(&teg.nodes).unwrap();
    for row in 0..138 {
        let slice = &g.data()[row * 8..(row + 1) * 8];
        if (10..=12).contains(&row) {
            assert!(slice.iter().any(|&v| v != 0.0), "active row {row} untouched");
        } else {
            assert!(slice.iter().all(|&v| v == 0.0), "inactive row {row} touched");
        }
    }
}

#[test]
fn permuting_the_batch_permutes_the_outputs() {
    let mut teg = tiny_teg(1, 26);
    let task = TaskId("t".into());
    teg.register_task(task.clone(), 2, 5);
    let act1 = SubgraphActivation::new(vec![ElectrodeId(0)]).unwrap();
    let act2 = SubgraphActivation::new(vec![ElectrodeId(1)]).unwrap();
    let z1 = random_z(1, 8, 94);
    let z2 = random_z(1, 8, 95);

    let mut tape = Tape::new();
    let (v1, v2) = (tape.constant(&z1), tape.constant(&z2));
    let fwd = teg
        .batch_forward(&mut tape, &[(v1, act1.clone(), task.clone()), (v2, act2.clone(), task.clone())])
        .unwrap();
    let rev = teg
        .batch_forward(&mut tape, &[(v2, act2, task.clone()), (v1, act1, task)])
        .unwrap();
    assert!(tape.value(fwd[0]).bit_eq(&tape.value(rev[1])));
    assert!(tape.value(fwd[1]).bit_eq(&tape.value(rev[0])));
}

#[test]
fn probe_reaches_all_active_nodes_after_one_layer_and_no_inactive_ever() {
    let teg = tiny_teg(3, 27);
    let act = SubgraphActivation::new(vec![ElectrodeId(3), ElectrodeId(7), ElectrodeId(12)]).unwrap();
    let z = random_z(3, 8, 96);
    let mut probed_data = z.data().to_vec();
    probed_data[8] += 1.0; // row 1 = node 7
    let probed = Tensor::new(&[3, 8], probed_data).unwrap();

    let run = |zt: &Tensor, layers: usize| -> Tensor {
        let mut tape = Tape::new();
        let zv = tape.constant(zt);
        let mut features = teg.activate(&mut tape, zv, &act).unwrap();
        for layer in teg.layers.iter().take(layers) {
            features = teg
                .graph_attention_layer(&mut tape, layer, features, &act)
                .unwrap();
        }
        tape.value(features)
    };

    for layers in 1..=3 {
        let base = run(&z, layers);
        let with_probe = run(&probed, layers);
        for m in 0..138 {
            let differs = (0..8).any(|j| base.at2(m, j).to_bits() != with_probe.at2(m, j).to_bits());
            if act.beta(m, m) == 1.0 {
                assert!(differs, "active node {m} unaffected after {layers} layers");
            } else {
                assert!(!differs, "inactive node {m} affected after {layers} layers");
            }
        }
    }
}

// ── counts and losses ──

#[test]
fn closed_form_graph_count_matches_a_built_model() {
    use crate::ete::{count_parameters, FullConfig};
    let cfg = EteConfig::tiny();
    let teg = TegModel::init(&cfg, 2, 0).unwrap();
    let full = FullConfig { ete: cfg, teg_layers: 2 };
    assert_eq!(count_parameters(&full).graph, teg.num_params_core());
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_n() {
    let mut tape = Tape::new();
    let logits = tape.constant(&Tensor::zeros(&[1, 4]));
    let ce = cross_entropy(&mut tape, logits, 2).unwrap();
    assert!((tape.scalar_value(ce).unwrap() - 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_labels() {
    let mut tape = Tape::new();
    let logits = tape.constant(&Tensor::zeros(&[1, 3]));
    assert!(cross_entropy(&mut tape, logits, 3).is_err());
}

#[test]
fn spot_gradcheck_through_the_whole_graph_pipeline() {
    use crate::numkit::{gradcheck, NumError};
    let ete = tiny_frozen_ete(33);
    let mut teg = tiny_teg(2, 34);
    let task = TaskId("demo".into());
    teg.register_task(task.clone(), 3, 7);
    let sample = sample_of(&["FZ", "CZ", "PZ", "OZ"], 4, 35);
    let act = SubgraphActivation::from_sample(&sample).unwrap();

    let head_w = teg.task_heads[&task].linear.w.clone();
    let inputs = vec![
        ("teg.c".to_string(), teg.special_token.clone()),
        ("teg.layer0.gat.a".to_string(), teg.layers[0].a.clone()),
        ("teg.head.w".to_string(), head_w),
    ];
    let report = gradcheck(
        |tape, tensors| {
            let mut m = teg.clone();
            m.special_token = tensors[0].clone();
            m.layers[0].a = tensors[1].clone();
            m.task_heads.get_mut(&task).unwrap().linear.w = tensors[2].clone();
            let wrap = |e: ModelError| NumError::GradCheck(e.to_string());
            let z = m.extract_reprs(tape, &ete, &sample).map_err(wrap)?;
            let logits = m.forward(tape, z, &act, &task).map_err(wrap)?;
            cross_entropy(tape, logits, 1).map_err(wrap)
        },
        &inputs,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "worst: {:?}", report.worst());
}
