//! Central-difference gradient verification.

use super::tape::{Tape, Val};
use super::tensor::Tensor;
use super::NumError;

/// Result for one checked input.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Entry with the largest error, for reporting.
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Relative error between analytic and numerical gradients. The denominator is
/// floored at 1e-3 so near-zero gradients are compared absolutely, below the
/// noise floor of f64 central differences at ε = 1e-6.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Check the analytic gradient of `f` at `inputs` against central finite
/// differences with step `eps`.
///
/// `f` receives the current probe tensors and must lease the ones it uses
/// (directly, or by installing them into a model clone) and return a scalar.
/// It must be deterministic; two forward evaluations are compared bitwise and
/// a mismatch is an error. Every element of every input is perturbed twice,
/// so keep inputs small.
pub fn gradcheck<F>(
    f: F,
    inputs: &[(String, Tensor)],
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Val, NumError>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(NumError::GradCheck(format!(
            "eps must lie in (0, 1e-3], got {eps}"
        )));
    }
    let tracked: Vec<Tensor> = inputs
        .iter()
        .map(|(_, t)| t.clone().requires_grad(true))
        .collect();

    let eval = |tensors: &[Tensor]| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let out = f(&mut tape, tensors)?;
        tape.scalar_value(out)
    };

    let base = eval(&tracked)?;
    let again = eval(&tracked)?;
    if base.to_bits() != again.to_bits() {
        return Err(NumError::Determinism(format!(
            "forward passes disagree: {base} vs {again}"
        )));
    }

    // analytic gradients
    let mut tape = Tape::new();
    let out = f(&mut tape, &tracked)?;
    let grads = tape.backward(out)?;

    let mut entries = Vec::with_capacity(inputs.len());
    for (pos, (name, _)) in inputs.iter().enumerate() {
        let tensor = &tracked[pos];
        let analytic = grads
            .get(tensor)
            .ok_or_else(|| NumError::GradCheck(format!("no gradient recorded for {name}")))?;
        let mut max_err = 0.0f64;
        for j in 0..tensor.numel() {
            let mut plus = tensor.data().to_vec();
            plus[j] += eps;
            let mut minus = tensor.data().to_vec();
            minus[j] -= eps;

            let mut probe = tracked.clone();
            probe[pos] = tensor.with_data(plus)?;
            let f_plus = eval(&probe)?;
            probe[pos] = tensor.with_data(minus)?;
            let f_minus = eval(&probe)?;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            max_err = max_err.max(rel_err(analytic.data()[j], numeric));
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: max_err,
            passed: max_err < tolerance,
        });
    }
    Ok(GradCheckReport {
        entries,
        tolerance,
    })
}
