//! The tensor value type.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::NumError;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor value. Every constructor mints a fresh id; clones share
/// it. Because tensor data is immutable, equal ids always mean equal values,
/// which is what lets a [`super::Tape`] lease the same parameter once per pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(u64);

fn fresh_id() -> TensorId {
    TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
}

/// Dense row-major tensor of finite 64-bit floats.
///
/// Values are immutable after construction; an optimizer "update" builds a new
/// tensor via [`Tensor::with_data`]. Scalars have the empty shape `[]`.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    id: TensorId,
}

impl Tensor {
    /// Build a tensor, validating length and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NumError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NumError::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite {
                op: "tensor::new",
                index,
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            id: fresh_id(),
        })
    }

    /// Trainable-parameter constructor: like [`Tensor::new`] with
    /// `requires_grad` set.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self, NumError> {
        Ok(Self::new(shape, data)?.requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros are finite")
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![1.0; n]).expect("ones are finite")
    }

    pub fn scalar(v: f64) -> Result<Self, NumError> {
        Self::new(&[], vec![v])
    }

    /// Gaussian init, mean 0, given std.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self::new(shape, data).expect("gaussian samples are finite")
    }

    /// Same shape and grad flag, new values, fresh identity.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, NumError> {
        Ok(Self::new(&self.shape, data)?.requires_grad(self.requires_grad))
    }

    /// Toggle the gradient flag. Mints a fresh identity so a frozen view and
    /// its trainable source are never conflated on one tape.
    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self.id = fresh_id();
        self
    }

    /// Non-trainable view sharing the same storage.
    pub fn frozen(&self) -> Self {
        self.clone().requires_grad(false)
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            id: fresh_id(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.cols() + c]
    }

    /// The single value of a scalar (numel 1) tensor.
    pub fn item(&self) -> Result<f64, NumError> {
        if self.numel() != 1 {
            return Err(NumError::BadShape {
                op: "item",
                expected: "a scalar",
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Slice along the leading axis of a rank ≥ 2 tensor, copying out a
    /// tensor of rank one less. `[E, T, C]` indexed at `e` gives `[T, C]`.
    pub fn subtensor(&self, index: usize) -> Result<Self, NumError> {
        if self.rank() < 2 {
            return Err(NumError::BadShape {
                op: "subtensor",
                expected: "rank >= 2",
                shape: self.shape.clone(),
            });
        }
        let extent = self.shape[0];
        if index >= extent {
            return Err(NumError::IndexOutOfBounds {
                op: "subtensor",
                index,
                extent,
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        Self::new(&self.shape[1..], data)
    }

    /// Bitwise equality of shape and payload.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(6).copied().collect();
        write!(
            f,
            "Tensor{:?}{}{:?}{}",
            self.shape,
            if self.requires_grad { "*" } else { "" },
            preview,
            if self.numel() > 6 { "…" } else { "" }
        )
    }
}
