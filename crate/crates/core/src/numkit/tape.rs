//! Wengert tape: primitive ops recorded in execution order, replayed once in
//! reverse for gradients.
//!
//! Gradient accumulation follows tape order exactly, so backward results are
//! bit-reproducible for a given forward recording. A tape is single-threaded;
//! independent tapes may run on separate threads.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{Tensor, TensorId};
use super::{NumError, MASK_NEG_INF};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

// Some recorded operands (the additive constant, the mask reference) are not
// needed by the reverse sweep but stay on the record.
#[allow(dead_code)]
#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `[m×n] + [n]` broadcast over rows.
    AddRow(usize, usize),
    /// `[m×n] ⊙ [n]` broadcast over rows.
    MulRow(usize, usize),
    /// `[m×n] ⊙ [m×1]` broadcast over columns.
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    PowConst(usize, f64),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Silu(usize),
    Matmul(usize, usize),
    Transpose(usize),
    SumAll(usize),
    MeanAll(usize),
    SumLastDim(usize),
    Softmax {
        x: usize,
        mask: Option<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    /// Rows of `x` placed at `idx` within a `[rows×n]` zero canvas.
    ScatterRows {
        x: usize,
        idx: Vec<usize>,
        rows: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    op: Op,
    /// True when a gradient path can reach a trainable leaf through this node.
    needs_grad: bool,
    /// Set for leaves only: the leased tensor's identity and grad flag.
    leaf: Option<(TensorId, bool)>,
}

/// Gradients keyed by the identity of the leased leaf tensors.
///
/// Every `requires_grad` leaf on the tape gets an entry; leaves the loss never
/// reached hold exact zeros.
#[derive(Debug, Default)]
pub struct GradMap {
    grads: HashMap<TensorId, Tensor>,
}

impl GradMap {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.grads.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Operation recorder. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leased: HashMap<TensorId, Val>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Lease a tensor onto the tape as a leaf. Leasing the same tensor (same
    /// identity) twice returns the same handle, so gradients from every use
    /// accumulate into one entry.
    pub fn leaf(&mut self, t: &Tensor) -> Val {
        if let Some(&v) = self.leased.get(&t.id()) {
            return v;
        }
        let v = self.push(Node {
            shape: t.shape().to_vec(),
            values: t.data_arc(),
            op: Op::Leaf,
            needs_grad: t.needs_grad(),
            leaf: Some((t.id(), t.needs_grad())),
        });
        self.leased.insert(t.id(), v);
        v
    }

    /// Leaf that never takes gradients, regardless of the tensor's flag.
    pub fn constant(&mut self, t: &Tensor) -> Val {
        if t.needs_grad() {
            return self.leaf(&t.frozen());
        }
        self.leaf(t)
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Materialize a recorded value as a tensor.
    pub fn value(&self, v: Val) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::from_parts(node.shape.clone(), Arc::clone(&node.values))
    }

    /// Read a scalar result.
    pub fn scalar_value(&self, v: Val) -> Result<f64, NumError> {
        let node = &self.nodes[v.0];
        if node.values.len() != 1 {
            return Err(NumError::BadShape {
                op: "scalar_value",
                expected: "a scalar",
                shape: node.shape.clone(),
            });
        }
        Ok(node.values[0])
    }

    fn push(&mut self, node: Node) -> Val {
        self.nodes.push(node);
        Val(self.nodes.len() - 1)
    }

    fn result(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        recorded: Op,
        inputs: &[usize],
    ) -> Result<Val, NumError> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite { op, index });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(Node {
            shape,
            values: Arc::new(data),
            op: recorded,
            needs_grad,
            leaf: None,
        }))
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Val,
        b: Val,
        f: impl Fn(f64, f64) -> f64,
        recorded: Op,
    ) -> Result<Val, NumError> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let data = na
            .values
            .iter()
            .zip(nb.values.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = na.shape.clone();
        self.result(op, shape, data, recorded, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val, NumError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val, NumError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val, NumError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val, NumError> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn rank2(&self, op: &'static str, v: Val) -> Result<(usize, usize), NumError> {
        let shape = &self.nodes[v.0].shape;
        if shape.len() != 2 {
            return Err(NumError::BadShape {
                op,
                expected: "rank 2",
                shape: shape.clone(),
            });
        }
        Ok((shape[0], shape[1]))
    }

    /// Broadcast-add a length-n vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Val, v: Val) -> Result<Val, NumError> {
        let (m, n) = self.rank2("add_row", a)?;
        if self.nodes[v.0].values.len() != n {
            return Err(NumError::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        let av = &self.nodes[a.0].values;
        let vv = &self.nodes[v.0].values;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(av[i * n + j] + vv[j]);
            }
        }
        self.result("add_row", vec![m, n], data, Op::AddRow(a.0, v.0), &[a.0, v.0])
    }

    /// Broadcast-multiply every row of an `[m×n]` matrix by a length-n vector.
    pub fn mul_row(&mut self, a: Val, v: Val) -> Result<Val, NumError> {
        let (m, n) = self.rank2("mul_row", a)?;
        if self.nodes[v.0].values.len() != n {
            return Err(NumError::ShapeMismatch {
                op: "mul_row",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        let av = &self.nodes[a.0].values;
        let vv = &self.nodes[v.0].values;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(av[i * n + j] * vv[j]);
            }
        }
        self.result("mul_row", vec![m, n], data, Op::MulRow(a.0, v.0), &[a.0, v.0])
    }

    /// Broadcast-multiply every column of an `[m×n]` matrix by an `[m×1]`
    /// column.
    pub fn mul_col(&mut self, a: Val, v: Val) -> Result<Val, NumError> {
        let (m, n) = self.rank2("mul_col", a)?;
        if self.nodes[v.0].values.len() != m {
            return Err(NumError::ShapeMismatch {
                op: "mul_col",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        let av = &self.nodes[a.0].values;
        let vv = &self.nodes[v.0].values;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(av[i * n + j] * vv[i]);
            }
        }
        self.result("mul_col", vec![m, n], data, Op::MulCol(a.0, v.0), &[a.0, v.0])
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Val,
        f: impl Fn(f64) -> f64,
        recorded: Op,
    ) -> Result<Val, NumError> {
        let node = &self.nodes[a.0];
        let data = node.values.iter().map(|&x| f(x)).collect();
        let shape = node.shape.clone();
        self.result(op, shape, data, recorded, &[a.0])
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Result<Val, NumError> {
        self.unary("scale", a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Val, c: f64) -> Result<Val, NumError> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a.0, c))
    }

    /// Elementwise `x^p` for constant `p`.
    pub fn pow_const(&mut self, a: Val, p: f64) -> Result<Val, NumError> {
        self.unary("pow_const", a, |x| x.powf(p), Op::PowConst(a.0, p))
    }

    pub fn exp(&mut self, a: Val) -> Result<Val, NumError> {
        self.unary("exp", a, f64::exp, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Val) -> Result<Val, NumError> {
        self.unary("ln", a, f64::ln, Op::Ln(a.0))
    }

    pub fn abs(&mut self, a: Val) -> Result<Val, NumError> {
        self.unary("abs", a, f64::abs, Op::Abs(a.0))
    }

    pub fn relu(&mut self, a: Val) -> Result<Val, NumError> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Val, slope: f64) -> Result<Val, NumError> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a.0, slope),
        )
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Val) -> Result<Val, NumError> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu(a.0))
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val, NumError> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul_data(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n);
        self.result("matmul", vec![m, n], data, Op::Matmul(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Val) -> Result<Val, NumError> {
        let (m, n) = self.rank2("transpose", a)?;
        let data = transpose_data(&self.nodes[a.0].values, m, n);
        self.result("transpose", vec![n, m], data, Op::Transpose(a.0), &[a.0])
    }

    pub fn sum_all(&mut self, a: Val) -> Result<Val, NumError> {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        self.result("sum_all", vec![], vec![s], Op::SumAll(a.0), &[a.0])
    }

    pub fn mean_all(&mut self, a: Val) -> Result<Val, NumError> {
        let n = self.nodes[a.0].values.len().max(1) as f64;
        let s: f64 = self.nodes[a.0].values.iter().sum();
        self.result("mean_all", vec![], vec![s / n], Op::MeanAll(a.0), &[a.0])
    }

    /// Row sums of an `[m×n]` matrix, kept as `[m×1]`.
    pub fn sum_lastdim(&mut self, a: Val) -> Result<Val, NumError> {
        let (m, n) = self.rank2("sum_lastdim", a)?;
        let av = &self.nodes[a.0].values;
        let data = (0..m).map(|i| av[i * n..(i + 1) * n].iter().sum()).collect();
        self.result("sum_lastdim", vec![m, 1], data, Op::SumLastDim(a.0), &[a.0])
    }

    /// Softmax over the last dimension, with an optional additive mask of the
    /// same shape (or a single row broadcast over all slices). Mask entries are
    /// 0 or [`MASK_NEG_INF`]; no gradient flows into the mask. A slice with all
    /// entries at the sentinel is an error.
    pub fn softmax_lastdim(&mut self, x: Val, mask: Option<Val>) -> Result<Val, NumError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.is_empty() {
            return Err(NumError::BadShape {
                op: "softmax_lastdim",
                expected: "rank >= 1",
                shape,
            });
        }
        let n = *shape.last().expect("rank checked");
        let slices = self.nodes[x.0].values.len() / n.max(1);
        if n == 0 {
            return Err(NumError::BadShape {
                op: "softmax_lastdim",
                expected: "non-empty last dimension",
                shape,
            });
        }
        if let Some(m) = mask {
            let mlen = self.nodes[m.0].values.len();
            if mlen != n && mlen != n * slices {
                return Err(NumError::ShapeMismatch {
                    op: "softmax_lastdim",
                    lhs: shape,
                    rhs: self.nodes[m.0].shape.clone(),
                });
            }
        }
        let xv = &self.nodes[x.0].values;
        let mv = mask.map(|m| &self.nodes[m.0].values);
        let mut data = vec![0.0; xv.len()];
        for s in 0..slices {
            let row = &xv[s * n..(s + 1) * n];
            let masked: Vec<f64> = match mv {
                Some(mvals) if mvals.len() == n => {
                    row.iter().zip(mvals.iter()).map(|(&a, &b)| a + b).collect()
                }
                Some(mvals) => row
                    .iter()
                    .zip(mvals[s * n..(s + 1) * n].iter())
                    .map(|(&a, &b)| a + b)
                    .collect(),
                None => row.to_vec(),
            };
            let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max <= MASK_NEG_INF / 2.0 {
                return Err(NumError::DegenerateSoftmax { slice: s });
            }
            let mut sum = 0.0;
            for (j, &v) in masked.iter().enumerate() {
                let e = (v - max).exp();
                data[s * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[s * n + j] /= sum;
            }
        }
        self.result(
            "softmax_lastdim",
            shape,
            data,
            Op::Softmax { x: x.0, mask: mask.map(|m| m.0) },
            &[x.0],
        )
    }

    pub fn slice_rows(&mut self, x: Val, start: usize, len: usize) -> Result<Val, NumError> {
        let (m, n) = self.rank2("slice_rows", x)?;
        if start + len > m {
            return Err(NumError::IndexOutOfBounds {
                op: "slice_rows",
                index: start + len,
                extent: m,
            });
        }
        let data = self.nodes[x.0].values[start * n..(start + len) * n].to_vec();
        self.result(
            "slice_rows",
            vec![len, n],
            data,
            Op::SliceRows { x: x.0, start, len },
            &[x.0],
        )
    }

    pub fn slice_cols(&mut self, x: Val, start: usize, len: usize) -> Result<Val, NumError> {
        let (m, n) = self.rank2("slice_cols", x)?;
        if start + len > n {
            return Err(NumError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                extent: n,
            });
        }
        let xv = &self.nodes[x.0].values;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        self.result(
            "slice_cols",
            vec![m, len],
            data,
            Op::SliceCols { x: x.0, start, len },
            &[x.0],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Val]) -> Result<Val, NumError> {
        if parts.is_empty() {
            return Err(NumError::EmptyTape);
        }
        let (_, n) = self.rank2("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.rank2("concat_rows", p)?;
            if pn != n {
                return Err(NumError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, n],
                    rhs: vec![pm, pn],
                });
            }
            rows += pm;
            data.extend_from_slice(&self.nodes[p.0].values);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.result("concat_rows", vec![rows, n], data, Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val, NumError> {
        if parts.is_empty() {
            return Err(NumError::EmptyTape);
        }
        let (m, _) = self.rank2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.rank2("concat_cols", p)?;
            if pm != m {
                return Err(NumError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m, total],
                    rhs: vec![pm, pn],
                });
            }
            widths.push(pn);
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let pv = &self.nodes[p.0].values;
                data.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.result("concat_cols", vec![m, total], data, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Copy the listed rows of `x`, in the listed order.
    pub fn gather_rows(&mut self, x: Val, idx: &[usize]) -> Result<Val, NumError> {
        let (m, n) = self.rank2("gather_rows", x)?;
        let xv = &self.nodes[x.0].values;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(NumError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    extent: m,
                });
            }
            data.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        self.result(
            "gather_rows",
            vec![idx.len(), n],
            data,
            Op::GatherRows { x: x.0, idx: idx.to_vec() },
            &[x.0],
        )
    }

    /// Place the rows of a `[k×n]` tensor at positions `idx` of a `[rows×n]`
    /// zero canvas. Indices must be unique.
    pub fn scatter_rows(&mut self, x: Val, idx: &[usize], rows: usize) -> Result<Val, NumError> {
        let (k, n) = self.rank2("scatter_rows", x)?;
        if idx.len() != k {
            return Err(NumError::ShapeMismatch {
                op: "scatter_rows",
                lhs: vec![k, n],
                rhs: vec![idx.len()],
            });
        }
        let xv = &self.nodes[x.0].values;
        let mut data = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(NumError::IndexOutOfBounds {
                    op: "scatter_rows",
                    index: i,
                    extent: rows,
                });
            }
            data[i * n..(i + 1) * n].copy_from_slice(&xv[r * n..(r + 1) * n]);
        }
        self.result(
            "scatter_rows",
            vec![rows, n],
            data,
            Op::ScatterRows { x: x.0, idx: idx.to_vec(), rows },
            &[x.0],
        )
    }

    /// Reverse sweep from a scalar loss. Visits every recorded operation once,
    /// newest first; every `requires_grad` leaf receives a gradient tensor
    /// (exact zeros when the loss never reached it).
    pub fn backward(&self, loss: Val) -> Result<GradMap, NumError> {
        if self.nodes.is_empty() {
            return Err(NumError::EmptyTape);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.values.len() != 1 {
            return Err(NumError::NonScalarLoss {
                shape: loss_node.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = self.nodes.iter().map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut map = HashMap::new();
        for node in &self.nodes {
            if let Some((id, true)) = node.leaf {
                // re-find the node index for this leaf via the leased map
                let v = self.leased[&id];
                let data = grads[v.0].take().unwrap_or_else(|| vec![0.0; node.values.len()]);
                if let Some(index) = data.iter().position(|g| !g.is_finite()) {
                    return Err(NumError::NonFinite { op: "backward", index });
                }
                map.insert(id, Tensor::from_parts(node.shape.clone(), Arc::new(data)));
            }
        }
        Ok(GradMap { grads: map })
    }

    fn input_needs_grad(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, len: usize, add: impl Fn(&mut [f64])) {
        let slot = grads[i].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |j: usize| self.nodes[j].values.len();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.input_needs_grad(*a) {
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (dst, &src) in d.iter_mut().zip(g) {
                            *dst += src;
                        }
                    });
                }
                if self.input_needs_grad(*b) {
                    Self::accumulate(grads, *b, len(*b), |d| {
                        for (dst, &src) in d.iter_mut().zip(g) {
                            *dst += src;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                if self.input_needs_grad(*a) {
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (dst, &src) in d.iter_mut().zip(g) {
                            *dst += src;
                        }
                    });
                }
                if self.input_needs_grad(*b) {
                    Self::accumulate(grads, *b, len(*b), |d| {
                        for (dst, &src) in d.iter_mut().zip(g) {
                            *dst -= src;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].values, &self.nodes[*b].values);
                if self.input_needs_grad(*a) {
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for ((dst, &src), &y) in d.iter_mut().zip(g).zip(bv.iter()) {
                            *dst += src * y;
                        }
                    });
                }
                if self.input_needs_grad(*b) {
                    Self::accumulate(grads, *b, len(*b), |d| {
                        for ((dst, &src), &x) in d.iter_mut().zip(g).zip(av.iter()) {
                            *dst += src * x;
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[*a].values, &self.nodes[*b].values);
                if self.input_needs_grad(*a) {
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for ((dst, &src), &y) in d.iter_mut().zip(g).zip(bv.iter()) {
                            *dst += src / y;
                        }
                    });
                }
                if self.input_needs_grad(*b) {
                    Self::accumulate(grads, *b, len(*b), |d| {
                        for (j, dst) in d.iter_mut().enumerate() {
                            *dst -= g[j] * av[j] / (bv[j] * bv[j]);
                        }
                    });
                }
            }
            Op::AddRow(a, v) => {
                let n = len(*v);
                if self.input_needs_grad(*a) {
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (dst, &src) in d.iter_mut().zip(g) {
                            *dst += src;
                        }
                    });
                }
                if self.input_needs_grad(*v) {
                    Self::accumulate(grads, *v, n, |d| {
                        for (j, &src) in g.iter().enumerate() {
                            d[j % n] += src;
                        }
                    });
                }
            }
            Op::MulRow(a, v) => {
                let n = len(*v);
                let (av, vv) = (&self.nodes[*a].values, &self.nodes[*v].values);
                if self.input_needs_grad(*a) {
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (j, &src) in g.iter().enumerate() {
                            d[j] += src * vv[j % n];
                        }
                    });
                }
                if self.input_needs_grad(*v) {
                    Self::accumulate(grads, *v, n, |d| {
                        for (j, &src) in g.iter().enumerate() {
                            d[j % n] += src * av[j];
                        }
                    });
                }
            }
            Op::MulCol(a, v) => {
                let m = len(*v);
                let n = len(*a) / m;
                let (av, vv) = (&self.nodes[*a].values, &self.nodes[*v].values);
                if self.input_needs_grad(*a) {
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (j, &src) in g.iter().enumerate() {
                            d[j] += src * vv[j / n];
                        }
                    });
                }
                if self.input_needs_grad(*v) {
                    Self::accumulate(grads, *v, m, |d| {
                        for (j, &src) in g.iter().enumerate() {
                            d[j / n] += src * av[j];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.input_needs_grad(*a) {
                    let c = *c;
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (dst, &src) in d.iter_mut().zip(g) {
                            *dst += src * c;
                        }
                    });
                }
            }
            Op::AddScalar(a, _) => {
                if self.input_needs_grad(*a) {
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (dst, &src) in d.iter_mut().zip(g) {
                            *dst += src;
                        }
                    });
                }
            }
            Op::PowConst(a, p) => {
                if self.input_needs_grad(*a) {
                    let p = *p;
                    let av = &self.nodes[*a].values;
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (j, &src) in g.iter().enumerate() {
                            d[j] += src * p * av[j].powf(p - 1.0);
                        }
                    });
                }
            }
            Op::Exp(a) => {
                if self.input_needs_grad(*a) {
                    let yv = &self.nodes[i].values;
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (j, &src) in g.iter().enumerate() {
                            d[j] += src * yv[j];
                        }
                    });
                }
            }
            Op::Ln(a) => {
                if self.input_needs_grad(*a) {
                    let av = &self.nodes[*a].values;
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (j, &src) in g.iter().enumerate() {
                            d[j] += src / av[j];
                        }
                    });
                }
            }
            Op::Abs(a) => {
                if self.input_needs_grad(*a) {
                    let av = &self.nodes[*a].values;
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (j, &src) in g.iter().enumerate() {
                            d[j] += src * sign(av[j]);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if self.input_needs_grad(*a) {
                    let av = &self.nodes[*a].values;
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (j, &src) in g.iter().enumerate() {
                            if av[j] > 0.0 {
                                d[j] += src;
                            }
                        }
                    });
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.input_needs_grad(*a) {
                    let slope = *slope;
                    let av = &self.nodes[*a].values;
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (j, &src) in g.iter().enumerate() {
                            d[j] += src * if av[j] > 0.0 { 1.0 } else { slope };
                        }
                    });
                }
            }
            Op::Silu(a) => {
                if self.input_needs_grad(*a) {
                    let av = &self.nodes[*a].values;
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (j, &src) in g.iter().enumerate() {
                            let s = sigmoid(av[j]);
                            d[j] += src * (s + av[j] * s * (1.0 - s));
                        }
                    });
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let (av, bv) = (&self.nodes[*a].values, &self.nodes[*b].values);
                if self.input_needs_grad(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose_data(bv, k, n);
                    let da = matmul_data(g, &bt, m, n, k);
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (dst, &src) in d.iter_mut().zip(da.iter()) {
                            *dst += src;
                        }
                    });
                }
                if self.input_needs_grad(*b) {
                    // dB = Aᵀ · G
                    let at = transpose_data(av, m, k);
                    let db = matmul_data(&at, g, k, m, n);
                    Self::accumulate(grads, *b, len(*b), |d| {
                        for (dst, &src) in d.iter_mut().zip(db.iter()) {
                            *dst += src;
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if self.input_needs_grad(*a) {
                    let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let gt = transpose_data(g, n, m);
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (dst, &src) in d.iter_mut().zip(gt.iter()) {
                            *dst += src;
                        }
                    });
                }
            }
            Op::SumAll(a) => {
                if self.input_needs_grad(*a) {
                    let src = g[0];
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for dst in d.iter_mut() {
                            *dst += src;
                        }
                    });
                }
            }
            Op::MeanAll(a) => {
                if self.input_needs_grad(*a) {
                    let src = g[0] / len(*a) as f64;
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for dst in d.iter_mut() {
                            *dst += src;
                        }
                    });
                }
            }
            Op::SumLastDim(a) => {
                if self.input_needs_grad(*a) {
                    let cols = self.nodes[*a].shape[1];
                    Self::accumulate(grads, *a, len(*a), |d| {
                        for (j, dst) in d.iter_mut().enumerate() {
                            *dst += g[j / cols];
                        }
                    });
                }
            }
            Op::Softmax { x, .. } => {
                if self.input_needs_grad(*x) {
                    let yv = &self.nodes[i].values;
                    let n = *self.nodes[i].shape.last().expect("softmax rank >= 1");
                    let slices = yv.len() / n;
                    Self::accumulate(grads, *x, len(*x), |d| {
                        for s in 0..slices {
                            let y = &yv[s * n..(s + 1) * n];
                            let gr = &g[s * n..(s + 1) * n];
                            let dot: f64 = y.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                d[s * n + j] += y[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::SliceRows { x, start, len: l } => {
                if self.input_needs_grad(*x) {
                    let n = self.nodes[*x].shape[1];
                    let (start, l) = (*start, *l);
                    Self::accumulate(grads, *x, len(*x), |d| {
                        d[start * n..(start + l) * n]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(dst, &src)| *dst += src);
                    });
                }
            }
            Op::SliceCols { x, start, len: l } => {
                if self.input_needs_grad(*x) {
                    let (m, n) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let (start, l) = (*start, *l);
                    Self::accumulate(grads, *x, len(*x), |d| {
                        for i2 in 0..m {
                            for j in 0..l {
                                d[i2 * n + start + j] += g[i2 * l + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let plen = len(p);
                    if self.input_needs_grad(p) {
                        let seg = &g[offset..offset + plen];
                        Self::accumulate(grads, p, plen, |d| {
                            for (dst, &src) in d.iter_mut().zip(seg) {
                                *dst += src;
                            }
                        });
                    }
                    offset += plen;
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    if self.input_needs_grad(p) {
                        Self::accumulate(grads, p, len(p), |d| {
                            for i2 in 0..m {
                                for j in 0..w {
                                    d[i2 * w + j] += g[i2 * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                if self.input_needs_grad(*x) {
                    let n = self.nodes[*x].shape[1];
                    Self::accumulate(grads, *x, len(*x), |d| {
                        for (r, &i2) in idx.iter().enumerate() {
                            for j in 0..n {
                                d[i2 * n + j] += g[r * n + j];
                            }
                        }
                    });
                }
            }
            Op::ScatterRows { x, idx, .. } => {
                if self.input_needs_grad(*x) {
                    let n = self.nodes[*x].shape[1];
                    Self::accumulate(grads, *x, len(*x), |d| {
                        for (r, &i2) in idx.iter().enumerate() {
                            for j in 0..n {
                                d[r * n + j] += g[i2 * n + j];
                            }
                        }
                    });
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-major `[m×k]·[k×n]` with an i-k-j loop. Exact zeros in the left operand
/// are skipped, which both speeds up masked products and keeps rows that
/// receive only zero weights bitwise untouched.
pub(crate) fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (dst, &bv) in orow.iter_mut().zip(brow) {
                *dst += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_data(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
