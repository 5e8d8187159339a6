//! End-to-end gradient verification: every trainable tensor of the small
//! reference models is checked against central finite differences, under
//! every pretraining objective and distance metric, plus the kernel's
//! primitive sweep and a deliberate negative control.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataio::{EegSample, TaskId};
use crate::ete::{EteConfig, EteModel, MaeModel, ModelError, Rho};
use crate::numkit::{gradcheck, NumError, Tape, Tensor};
use crate::teg::{cross_entropy, SubgraphActivation, TegModel};
use crate::tokenizer::{assemble_pretrain_on, ElectrodeId, ElectrodeVocabulary};

pub const GRADCHECK_EPS: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Numkit,
    Ete,
    Teg,
    All,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "numkit" => Ok(Scope::Numkit),
            "ete" => Ok(Scope::Ete),
            "teg" => Ok(Scope::Teg),
            "all" => Ok(Scope::All),
            other => Err(format!("unknown scope {other:?} (numkit|ete|teg|all)")),
        }
    }
}

fn wrap(e: ModelError) -> NumError {
    NumError::GradCheck(e.to_string())
}

/// Primitive sweep on random small shapes; kinked and domain-restricted ops
/// get inputs bounded away from the bad set.
pub fn numkit_groups() -> Result<Vec<GroupResult>, NumError> {
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let tall = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let positive = Tensor::new(&[3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect())
        .expect("finite");
    let offzero = Tensor::new(
        &[3, 4],
        b.data().iter().map(|v| v.signum() * (v.abs() + 0.2)).collect(),
    )
    .expect("finite");
    let row = Tensor::randn(&[4], 1.0, &mut rng);
    let col = Tensor::randn(&[3, 1], 1.0, &mut rng);

    type Op = Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<crate::numkit::Val, NumError>>;
    let square_sum = |tape: &mut Tape, y| {
        let sq = tape.mul(y, y)?;
        tape.sum_all(sq)
    };
    let cases: Vec<(&str, Vec<Tensor>, Op)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(move |t, xs| {
            let (u, v) = (t.leaf(&xs[0]), t.leaf(&xs[1]));
            let y = t.add(u, v)?;
            square_sum(t, y)
        })),
        ("sub", vec![a.clone(), b.clone()], Box::new(move |t, xs| {
            let (u, v) = (t.leaf(&xs[0]), t.leaf(&xs[1]));
            let y = t.sub(u, v)?;
            square_sum(t, y)
        })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, xs| {
            let (u, v) = (t.leaf(&xs[0]), t.leaf(&xs[1]));
            let y = t.mul(u, v)?;
            t.sum_all(y)
        })),
        ("div", vec![a.clone(), positive.clone()], Box::new(|t, xs| {
            let (u, v) = (t.leaf(&xs[0]), t.leaf(&xs[1]));
            let y = t.div(u, v)?;
            t.sum_all(y)
        })),
        ("add_row", vec![a.clone(), row.clone()], Box::new(move |t, xs| {
            let (u, v) = (t.leaf(&xs[0]), t.leaf(&xs[1]));
            let y = t.add_row(u, v)?;
            square_sum(t, y)
        })),
        ("mul_row", vec![a.clone(), row.clone()], Box::new(|t, xs| {
            let (u, v) = (t.leaf(&xs[0]), t.leaf(&xs[1]));
            let y = t.mul_row(u, v)?;
            t.sum_all(y)
        })),
        ("mul_col", vec![a.clone(), col.clone()], Box::new(|t, xs| {
            let (u, v) = (t.leaf(&xs[0]), t.leaf(&xs[1]));
            let y = t.mul_col(u, v)?;
            t.sum_all(y)
        })),
        ("pow_const", vec![positive.clone()], Box::new(|t, xs| {
            let u = t.leaf(&xs[0]);
            let y = t.pow_const(u, -0.5)?;
            t.sum_all(y)
        })),
        ("exp", vec![a.clone()], Box::new(|t, xs| {
            let u = t.leaf(&xs[0]);
            let y = t.exp(u)?;
            t.sum_all(y)
        })),
        ("ln", vec![positive.clone()], Box::new(|t, xs| {
            let u = t.leaf(&xs[0]);
            let y = t.ln(u)?;
            t.sum_all(y)
        })),
        ("abs", vec![offzero.clone()], Box::new(|t, xs| {
            let u = t.leaf(&xs[0]);
            let y = t.abs(u)?;
            t.sum_all(y)
        })),
        ("relu", vec![offzero.clone()], Box::new(|t, xs| {
            let u = t.leaf(&xs[0]);
            let y = t.relu(u)?;
            t.sum_all(y)
        })),
        ("leaky_relu", vec![offzero.clone()], Box::new(|t, xs| {
            let u = t.leaf(&xs[0]);
            let y = t.leaky_relu(u, 0.2)?;
            t.sum_all(y)
        })),
        ("silu", vec![a.clone()], Box::new(|t, xs| {
            let u = t.leaf(&xs[0]);
            let y = t.silu(u)?;
            t.sum_all(y)
        })),
        ("matmul", vec![a.clone(), tall.clone()], Box::new(move |t, xs| {
            let (u, v) = (t.leaf(&xs[0]), t.leaf(&xs[1]));
            let y = t.matmul(u, v)?;
            square_sum(t, y)
        })),
        ("transpose", vec![a.clone()], Box::new(move |t, xs| {
            let u = t.leaf(&xs[0]);
            let y = t.transpose(u)?;
            square_sum(t, y)
        })),
        ("softmax_lastdim", vec![a.clone()], Box::new(move |t, xs| {
            let u = t.leaf(&xs[0]);
            let y = t.softmax_lastdim(u, None)?;
            square_sum(t, y)
        })),
        ("sum_lastdim", vec![a.clone()], Box::new(move |t, xs| {
            let u = t.leaf(&xs[0]);
            let y = t.sum_lastdim(u)?;
            square_sum(t, y)
        })),
        ("mean_all", vec![a.clone()], Box::new(|t, xs| {
            let u = t.leaf(&xs[0]);
            let sq = t.mul(u, u)?;
            t.mean_all(sq)
        })),
        ("slice_concat_gather_scatter", vec![a.clone(), b.clone()], Box::new(move |t, xs| {
            let (u, v) = (t.leaf(&xs[0]), t.leaf(&xs[1]));
            let top = t.slice_rows(u, 0, 2)?;
            let cols = t.slice_cols(v, 1, 2)?;
            let widened = t.concat_cols(&[cols, cols])?;
            let joined = t.concat_rows(&[top, widened])?;
            let picked = t.gather_rows(joined, &[0, 3, 1])?;
            let spread = t.scatter_rows(picked, &[2, 0, 4], 6)?;
            square_sum(t, spread)
        })),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, f) in cases {
        let named: Vec<(String, Tensor)> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("{name}[{i}]"), t))
            .collect();
        let report = gradcheck(f.as_ref(), &named, GRADCHECK_EPS, GRADCHECK_TOL)?;
        out.push(GroupResult {
            group: format!("numkit/{name}"),
            max_rel_err: report.max_rel_err(),
            passed: report.passed(),
        });
    }
    Ok(out)
}

fn tiny_sequence_block(seed: u64, t: usize, c: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[t, c], 1.0, &mut rng)
}

/// Every encoder parameter (plus vocabulary, plus the mask token for the
/// masked objective) through the full pretraining loss, for both objectives
/// and all three distances.
pub fn ete_groups() -> Result<Vec<GroupResult>, NumError> {
    let config = EteConfig::tiny();
    let block = tiny_sequence_block(202, 4, config.token_width);
    let electrode = ElectrodeId(7);
    let mask_positions = vec![1usize, 3];
    let rhos = [Rho::L2, Rho::L1, Rho::Cosine];

    let mut out = Vec::new();
    for method in ["ar", "mae"] {
        for &rho in &rhos {
            let ete = EteModel::init(&config, 301).expect("tiny config is valid");
            let mae = MaeModel::init(&config, 301).expect("tiny config is valid");
            let vocab = ElectrodeVocabulary::init(config.token_width, 302);

            // guard the l1 kink: the checked point must sit away from zero
            // differences so central differences stay one-sided
            if rho == Rho::L1 {
                let margin = l1_margin(method, &ete, &mae, &vocab, &block, electrode, &mask_positions)?;
                assert!(
                    margin > 1e-4,
                    "l1 gradcheck point too close to a kink: margin {margin}"
                );
            }

            let mut inputs: Vec<(String, Tensor)> = match method {
                "ar" => ete.named_params(),
                _ => mae.named_params(),
            };
            inputs.push(("vocab.embeddings".to_string(), vocab.embeddings().clone()));

            let report = gradcheck(
                |tape, tensors| {
                    let table = tape.leaf(&tensors[tensors.len() - 1]);
                    let seq = assemble_pretrain_on(tape, table, electrode, &block)?;
                    match method {
                        "ar" => {
                            let mut m = ete.clone();
                            for ((_, p), t) in m.params_mut().into_iter().zip(tensors) {
                                *p = t.clone();
                            }
                            m.ar_loss_on(tape, seq, rho).map_err(wrap)
                        }
                        _ => {
                            let mut m = mae.clone();
                            for ((_, p), t) in m.params_mut().into_iter().zip(tensors) {
                                *p = t.clone();
                            }
                            Ok(m.loss_on(tape, seq, &mask_positions, rho).map_err(wrap)?.loss)
                        }
                    }
                },
                &inputs,
                GRADCHECK_EPS,
                GRADCHECK_TOL,
            )?;
            for entry in report.entries {
                out.push(GroupResult {
                    group: format!("ete/{method}-{rho}/{}", entry.name),
                    max_rel_err: entry.max_rel_err,
                    passed: entry.passed,
                });
            }
        }
    }
    Ok(out)
}

/// Smallest |prediction − target| over the loss support, for the l1 guard.
fn l1_margin(
    method: &str,
    ete: &EteModel,
    mae: &MaeModel,
    vocab: &ElectrodeVocabulary,
    block: &Tensor,
    electrode: ElectrodeId,
    mask_positions: &[usize],
) -> Result<f64, NumError> {
    let mut tape = Tape::new();
    let table = tape.constant(vocab.embeddings());
    let seq = assemble_pretrain_on(&mut tape, table, electrode, block)?;
    let t = block.rows();
    let (preds, targets): (Tensor, Tensor) = if method == "ar" {
        let fwd = ete.forward_on(&mut tape, seq).map_err(wrap)?;
        let p = tape.slice_rows(fwd.predictions, 0, t)?;
        let y = tape.slice_rows(seq, 1, t)?;
        (tape.value(p), tape.value(y))
    } else {
        let fwd = mae.loss_on(&mut tape, seq, mask_positions, Rho::L1).map_err(wrap)?;
        let p = tape.gather_rows(fwd.predictions, mask_positions)?;
        let y = tape.gather_rows(seq, mask_positions)?;
        (tape.value(p), tape.value(y))
    };
    Ok(preds
        .data()
        .iter()
        .zip(targets.data())
        .map(|(a, b)| (a - b).abs())
        .fold(f64::INFINITY, f64::min))
}

/// Every graph parameter (node table, attention maps and scoring vectors,
/// norms, feed-forward, summary token, task head) through the full frozen
/// encoder → graph → cross-entropy pipeline on a four-electrode sample.
pub fn teg_groups() -> Result<Vec<GroupResult>, NumError> {
    let config = EteConfig::tiny();
    let mut ete = EteModel::init(&config, 401).expect("tiny config is valid");
    ete.freeze();
    let mut teg = TegModel::init(&config, 2, 402).expect("tiny config is valid");
    let task = TaskId("probe".into());
    teg.register_task(task.clone(), 3, 403);

    let ids = [3u16, 40, 77, 120];
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let tokens = Tensor::randn(&[4, 4, config.token_width], 1.0, &mut rng);
    let sample = EegSample::new(
        ids.iter().map(|&i| ElectrodeId(i)).collect(),
        tokens,
        Some(1),
        Some(task.clone()),
    )
    .expect("sample is valid");
    let activation = SubgraphActivation::from_sample(&sample).expect("valid activation");

    let inputs = teg.named_params();
    let report = gradcheck(
        |tape, tensors| {
            let mut m = teg.clone();
            for ((_, p), t) in m.params_mut().into_iter().zip(tensors) {
                *p = t.clone();
            }
            let z = m.extract_reprs(tape, &ete, &sample).map_err(wrap)?;
            let logits = m.forward(tape, z, &activation, &task).map_err(wrap)?;
            cross_entropy(tape, logits, 1).map_err(wrap)
        },
        &inputs,
        GRADCHECK_EPS,
        GRADCHECK_TOL,
    )?;
    Ok(report
        .entries
        .into_iter()
        .map(|entry| GroupResult {
            group: format!("teg/{}", entry.name),
            max_rel_err: entry.max_rel_err,
            passed: entry.passed,
        })
        .collect())
}

/// Negative control: a loss whose recorded gradient is wrong by construction
/// (one factor routed around the tape), which central differences must catch.
pub fn fault_injection_group() -> Result<GroupResult, NumError> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let report = gradcheck(
        |tape, tensors| {
            let live = tape.leaf(&tensors[0]);
            // same values, contributing no gradient: the analytic result is
            // x where the true derivative of sum(x²) is 2x
            let detached = tape.constant(&tensors[0].frozen());
            let prod = tape.mul(live, detached)?;
            tape.sum_all(prod)
        },
        &[("corrupted".to_string(), x)],
        GRADCHECK_EPS,
        GRADCHECK_TOL,
    )?;
    Ok(GroupResult {
        group: "fault/stop-gradient-product".to_string(),
        max_rel_err: report.max_rel_err(),
        passed: report.passed(),
    })
}

/// Run the requested scope. The boolean is the overall verdict.
pub fn run_scope(scope: Scope) -> Result<(Vec<GroupResult>, bool), NumError> {
    let mut groups = Vec::new();
    if matches!(scope, Scope::Numkit | Scope::All) {
        groups.extend(numkit_groups()?);
    }
    if matches!(scope, Scope::Ete | Scope::All) {
        groups.extend(ete_groups()?);
    }
    if matches!(scope, Scope::Teg | Scope::All) {
        groups.extend(teg_groups()?);
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok((groups, passed))
}
