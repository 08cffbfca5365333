//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Two-level design: [`Tensor`] is a detached value (shape + flat f64
//! buffer) used for parameters, images and test fixtures; [`Var`] is a
//! handle into a [`Tape`] on which every differentiable operation is
//! recorded. Backward rules emit further tape operations, so gradients
//! are themselves differentiable — the gradient-penalty term in
//! adversarial training differentiates through an inner gradient.

mod conv;
mod grad_check;
mod sample;
mod tape;

pub use grad_check::grad_check;
pub use tape::{Grads, Tape, Var};

use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeLen { shape: Vec<usize>, len: usize },
    #[error("axis {axis} invalid for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{op} expects rank {expect}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expect: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("conv2d: input has {got} channels, kernel expects {expect}")]
    ChannelMismatch { got: usize, expect: usize },
    #[error("conv2d: non-positive output size for input {h}x{w}, kernel {k}, stride {stride}, pad {pad}")]
    EmptyConvOutput {
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    #[error("conv2d: kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("non-finite value first produced by op #{index} ({op})")]
    NonFinite { index: usize, op: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A detached dense tensor: row-major f64 buffer plus shape.
///
/// Rank 0 (empty shape) is a scalar. Cloning is cheap; the buffer is
/// shared and copied on write only through explicit constructors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::ShapeLen {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel(shape)]),
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel(shape)]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scalar extraction; panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (ax, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[ax]);
            flat = flat * self.shape[ax] + i;
        }
        self.data[flat]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(TensorError::ShapeLen {
                shape: shape.to_vec(),
                len: self.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        s[ax] = s[ax + 1] * shape[ax + 1];
    }
    s
}

/// Broadcast shape of `a` and `b` under numpy rules (right-aligned,
/// size-1 axes stretch). Errors when a pair of axes is incompatible.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides for iterating a tensor of `shape` as if broadcast to `target`
/// (stride 0 on stretched axes). `shape` must be broadcast-compatible.
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = target.len() - shape.len();
    let mut out = vec![0usize; target.len()];
    for i in 0..shape.len() {
        out[pad + i] = if shape[i] == 1 && target[pad + i] != 1 {
            0
        } else {
            own[i]
        };
    }
    out
}

/// Apply `f(a_i, b_i)` over the broadcast of two buffers into `out`.
pub(crate) fn zip_broadcast(
    out_shape: &[usize],
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    if a.shape() == out_shape && b.shape() == out_shape {
        // Fast path: no broadcasting.
        let (ad, bd) = (a.data(), b.data());
        for i in 0..n {
            out.push(f(ad[i], bd[i]));
        }
        return out;
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let (ad, bd) = (a.data(), b.data());
    for _ in 0..n {
        out.push(f(ad[oa], bd[ob]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    out
}

/// Sum `src` (shape `from`) into a buffer of shape `to`, where `to` is a
/// broadcast-reduced version of `from` (missing or size-1 axes collapse).
pub(crate) fn reduce_to(src: &Tensor, to: &[usize]) -> Vec<f64> {
    let from = src.shape();
    let n = numel(from);
    let mut out = vec![0.0; numel(to)];
    if from == to {
        out.copy_from_slice(src.data());
        return out;
    }
    let st = broadcast_strides(to, from);
    let rank = from.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let data = src.data();
    for i in 0..n {
        out[off] += data[i];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < from[ax] {
                break;
            }
            idx[ax] = 0;
            off -= st[ax] * from[ax];
        }
    }
    out
}
