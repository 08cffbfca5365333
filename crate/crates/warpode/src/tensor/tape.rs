//! Gradient tape: an append-only arena of recorded primitive operations.
//!
//! `backward()` walks the tape once in reverse insertion order. Each
//! backward rule *emits new tape operations* instead of writing raw
//! buffers, so a gradient is itself a differentiable tape value. The
//! primitive set is closed under this emission (conv2d's input/weight
//! gradients are primitives whose own gradients are conv2d again, and so
//! on), which is what the critic's gradient penalty relies on.
//!
//! The intended lifetime is one tape per training step: build the loss,
//! call `backward`, read the gradients, drop the tape.

use super::conv;
use super::sample;
use super::{broadcast_shape, numel, reduce_to, zip_broadcast, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`]. Only valid for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

// Payload fields record what each node computed even where the backward
// rule re-derives them from input shapes; keep them for Debug dumps.
#[derive(Clone, Debug)]
#[allow(dead_code)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Neg,
    Abs,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sqrt,
    Recip,
    Heaviside,
    Sign,
    Matmul,
    Transpose2,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    Conv2dIGrad {
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
    },
    Conv2dWGrad {
        stride: usize,
        pad: usize,
        k: usize,
    },
    SumTo(Vec<usize>),
    BroadcastTo(Vec<usize>),
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    PadAxis {
        axis: usize,
        before: usize,
        after: usize,
    },
    AvgPool2,
    UpsampleNearest2,
    GridSample,
    GridScatter {
        h: usize,
        w: usize,
    },
    GridSampleCoordGrad,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Neg => "neg",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Sqrt => "sqrt",
            Op::Recip => "recip",
            Op::Heaviside => "heaviside",
            Op::Sign => "sign",
            Op::Matmul => "matmul",
            Op::Transpose2 => "transpose2",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dIGrad { .. } => "conv2d_input_grad",
            Op::Conv2dWGrad { .. } => "conv2d_weight_grad",
            Op::SumTo(_) => "sum_to",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::PadAxis { .. } => "pad_axis",
            Op::AvgPool2 => "avg_pool2",
            Op::UpsampleNearest2 => "upsample_nearest2",
            Op::GridSample => "grid_sample",
            Op::GridScatter { .. } => "grid_scatter",
            Op::GridSampleCoordGrad => "grid_sample_coord_grad",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one `backward` pass, indexed by the node ids
/// that existed when it started.
pub struct Grads {
    grads: Vec<Option<Var>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if `v` was reachable.
    /// Unreached variables have gradient zero and return `None`.
    pub fn get(&self, v: Var) -> Option<Var> {
        self.grads.get(v.id).copied().flatten()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vjp_invocations: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many backward rules have been invoked on this tape (test hook).
    pub fn vjp_invocations(&self) -> usize {
        self.vjp_invocations
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// First node (in insertion order) whose value holds a NaN/Inf,
    /// reported as (index, op name). Used for loss-abort diagnostics.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Register a tensor as a tape input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Op::Leaf, vec![], value, requires_grad)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push_node(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        value: Tensor,
        requires_grad: bool,
    ) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var { id }
    }

    fn push_op(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push_node(op, ids, value, requires_grad)
    }

    // ---- elementwise ----

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op.name(), ta.shape(), tb.shape())?;
        let data = zip_broadcast(&shape, ta, tb, f);
        Ok(self.push_op(op, vec![a, b], Tensor::from_parts(shape, data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push_op(op, vec![a], value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::AddScalar(c), a, |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Op::Abs, a, f64::abs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        self.unary(Op::LeakyRelu(alpha), a, |x| if x > 0.0 { x } else { alpha * x })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(Op::Recip, a, f64::recip)
    }

    /// 1 where x > 0, else 0. Gradient is zero everywhere.
    pub fn heaviside(&mut self, a: Var) -> Var {
        self.unary(Op::Heaviside, a, |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// -1 / 0 / +1. Gradient is zero everywhere.
    pub fn sign(&mut self, a: Var) -> Var {
        self.unary(Op::Sign, a, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 {
            return Err(TensorError::Rank {
                op: "matmul",
                expect: 2,
                shape: ta.shape().to_vec(),
            });
        }
        if tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = conv::matmul(ta.data(), tb.data(), m, k, n);
        Ok(self.push_op(Op::Matmul, vec![a, b], Tensor::from_parts(vec![m, n], data)))
    }

    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(TensorError::Rank {
                op: "transpose2",
                expect: 2,
                shape: ta.shape().to_vec(),
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push_op(Op::Transpose2, vec![a], Tensor::from_parts(vec![c, r], data)))
    }

    // ---- convolution family ----

    fn conv_dims(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    ) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expect: 4,
                shape: tx.shape().to_vec(),
            });
        }
        if tw.shape().len() != 4 || tw.shape()[2] != tw.shape()[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (n, i_ch, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o_ch, wi, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        if wi != i_ch {
            return Err(TensorError::ChannelMismatch {
                got: i_ch,
                expect: wi,
            });
        }
        let oh = conv::conv_out(h, k, stride, pad);
        let ow = conv::conv_out(wd, k, stride, pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((n, i_ch, h, wd, o_ch, k, oh, ow)),
            _ => Err(TensorError::EmptyConvOutput {
                h,
                w: wd,
                k,
                stride,
                pad,
            }),
        }
    }

    /// 2-d cross-correlation of NCHW input with OIKK kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, i_ch, h, wd, o_ch, k, oh, ow) = self.conv_dims(x, w, stride, pad)?;
        let data = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            n,
            i_ch,
            h,
            wd,
            o_ch,
            k,
            stride,
            pad,
            oh,
            ow,
        );
        Ok(self.push_op(
            Op::Conv2d { stride, pad },
            vec![x, w],
            Tensor::from_parts(vec![n, o_ch, oh, ow], data),
        ))
    }

    fn conv2d_igrad(
        &mut self,
        g: Var,
        w: Var,
        stride: usize,
        pad: usize,
        h: usize,
        wd: usize,
    ) -> Var {
        let gs = self.shape(g).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, o_ch, oh, ow) = (gs[0], gs[1], gs[2], gs[3]);
        let (i_ch, k) = (ws[1], ws[2]);
        debug_assert_eq!(conv::conv_out(h, k, stride, pad), Some(oh));
        let data = conv::conv2d_input_grad(
            self.value(g).data(),
            self.value(w).data(),
            n,
            i_ch,
            h,
            wd,
            o_ch,
            k,
            stride,
            pad,
            oh,
            ow,
        );
        self.push_op(
            Op::Conv2dIGrad { stride, pad, h, w: wd },
            vec![g, w],
            Tensor::from_parts(vec![n, i_ch, h, wd], data),
        )
    }

    fn conv2d_wgrad(&mut self, x: Var, g: Var, stride: usize, pad: usize, k: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(g).to_vec();
        let (n, i_ch, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o_ch, oh, ow) = (gs[1], gs[2], gs[3]);
        let data = conv::conv2d_weight_grad(
            self.value(x).data(),
            self.value(g).data(),
            n,
            i_ch,
            h,
            wd,
            o_ch,
            k,
            stride,
            pad,
            oh,
            ow,
        );
        self.push_op(
            Op::Conv2dWGrad { stride, pad, k },
            vec![x, g],
            Tensor::from_parts(vec![o_ch, i_ch, k, k], data),
        )
    }

    // ---- shape ops ----

    /// Reduce by summation down to `target`, the inverse of broadcasting.
    pub fn sum_to(&mut self, a: Var, target: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let bc = broadcast_shape("sum_to", ta.shape(), target)?;
        if bc != ta.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sum_to",
                lhs: ta.shape().to_vec(),
                rhs: target.to_vec(),
            });
        }
        let data = reduce_to(ta, target);
        Ok(self.push_op(
            Op::SumTo(target.to_vec()),
            vec![a],
            Tensor::from_parts(target.to_vec(), data),
        ))
    }

    pub fn broadcast_to(&mut self, a: Var, target: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let bc = broadcast_shape("broadcast_to", ta.shape(), target)?;
        if bc != target {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: ta.shape().to_vec(),
                rhs: target.to_vec(),
            });
        }
        let data = zip_broadcast(target, ta, &Tensor::scalar(0.0), |x, _| x);
        Ok(self.push_op(
            Op::BroadcastTo(target.to_vec()),
            vec![a],
            Tensor::from_parts(target.to_vec(), data),
        ))
    }

    pub fn reshape(&mut self, a: Var, target: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(target)?;
        Ok(self.push_op(Op::Reshape(target.to_vec()), vec![a], value))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: first.len(),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(ax, (a, b))| ax != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&out_shape)];
        let mut offset = 0usize;
        for &p in parts {
            let s = self.shape(p).to_vec();
            let src = self.value(p).data();
            let span = s[axis] * inner;
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + span].copy_from_slice(&src[o * span..(o + 1) * span]);
            }
            offset += s[axis];
        }
        Ok(self.push_op(
            Op::Concat { axis },
            parts.to_vec(),
            Tensor::from_parts(out_shape, data),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "narrow {}..{} exceeds axis {} of size {}",
                start,
                start + len,
                axis,
                shape[axis]
            )));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = vec![0.0; numel(&out_shape)];
        for o in 0..outer {
            let s = (o * shape[axis] + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[s..s + len * inner]);
        }
        Ok(self.push_op(
            Op::Narrow { axis, start, len },
            vec![a],
            Tensor::from_parts(out_shape, data),
        ))
    }

    /// Zero-pad along one axis.
    fn pad_axis(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let mut out_shape = shape.clone();
        out_shape[axis] += before + after;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = vec![0.0; numel(&out_shape)];
        for o in 0..outer {
            let dst = (o * out_shape[axis] + before) * inner;
            let span = shape[axis] * inner;
            data[dst..dst + span].copy_from_slice(&src[o * span..(o + 1) * span]);
        }
        self.push_op(
            Op::PadAxis { axis, before, after },
            vec![a],
            Tensor::from_parts(out_shape, data),
        )
    }

    // ---- pooling / resampling ----

    /// 2x2 average pooling on NCHW; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Rank {
                op: "avg_pool2",
                expect: 4,
                shape: s,
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid(format!(
                "avg_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut data = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let pl = &src[nc * h * w..][..h * w];
            let out = &mut data[nc * oh * ow..][..oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    out[i * ow + j] = 0.25
                        * (pl[2 * i * w + 2 * j]
                            + pl[2 * i * w + 2 * j + 1]
                            + pl[(2 * i + 1) * w + 2 * j]
                            + pl[(2 * i + 1) * w + 2 * j + 1]);
                }
            }
        }
        Ok(self.push_op(
            Op::AvgPool2,
            vec![a],
            Tensor::from_parts(vec![n, c, oh, ow], data),
        ))
    }

    /// Nearest-neighbor 2x upsampling on NCHW.
    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Rank {
                op: "upsample_nearest2",
                expect: 4,
                shape: s,
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(a).data();
        let mut data = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let pl = &src[nc * h * w..][..h * w];
            let out = &mut data[nc * oh * ow..][..oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    out[i * ow + j] = pl[(i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push_op(
            Op::UpsampleNearest2,
            vec![a],
            Tensor::from_parts(vec![n, c, oh, ow], data),
        ))
    }

    // ---- sampling ----

    /// Bilinear sample of `img` (N,C,H,W) at absolute positions `coords`
    /// (N,2,H',W'), channel 0 = row, channel 1 = col. Out-of-range
    /// positions clamp to the border pixel.
    pub fn grid_sample(&mut self, img: Var, coords: Var) -> Result<Var> {
        let si = self.shape(img).to_vec();
        let sc = self.shape(coords).to_vec();
        if si.len() != 4 || sc.len() != 4 || sc[1] != 2 || si[0] != sc[0] {
            return Err(TensorError::ShapeMismatch {
                op: "grid_sample",
                lhs: si,
                rhs: sc,
            });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (oh, ow) = (sc[2], sc[3]);
        let data = sample::grid_sample(
            self.value(img).data(),
            self.value(coords).data(),
            n,
            c,
            h,
            w,
            oh,
            ow,
        );
        Ok(self.push_op(
            Op::GridSample,
            vec![img, coords],
            Tensor::from_parts(vec![n, c, oh, ow], data),
        ))
    }

    fn grid_scatter(&mut self, vals: Var, coords: Var, h: usize, w: usize) -> Var {
        let sv = self.shape(vals).to_vec();
        let (n, c, oh, ow) = (sv[0], sv[1], sv[2], sv[3]);
        let data = sample::grid_scatter(
            self.value(vals).data(),
            self.value(coords).data(),
            n,
            c,
            h,
            w,
            oh,
            ow,
        );
        self.push_op(
            Op::GridScatter { h, w },
            vec![vals, coords],
            Tensor::from_parts(vec![n, c, h, w], data),
        )
    }

    fn grid_sample_coord_grad(&mut self, img: Var, coords: Var, upstream: Var) -> Var {
        let si = self.shape(img).to_vec();
        let sc = self.shape(coords).to_vec();
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (oh, ow) = (sc[2], sc[3]);
        let data = sample::grid_sample_coord_grad(
            self.value(img).data(),
            self.value(coords).data(),
            self.value(upstream).data(),
            n,
            c,
            h,
            w,
            oh,
            ow,
        );
        self.push_op(
            Op::GridSampleCoordGrad,
            vec![img, coords, upstream],
            Tensor::from_parts(vec![n, 2, oh, ow], data),
        )
    }

    // ---- reductions ----

    /// Sum over `axes` (all axes when empty), removing the reduced dims.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (keep, out) = self.reduced_shapes(a, axes)?;
        let summed = self.sum_to(a, &keep)?;
        self.reshape(summed, &out)
    }

    /// Mean over `axes` (full-tensor mean when empty).
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let count: usize = if axes.is_empty() {
            shape.iter().product()
        } else {
            axes.iter().map(|&ax| shape[ax]).product()
        };
        let s = self.sum(a, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.sum(a, &[])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.mean(a, &[])
    }

    fn reduced_shapes(&self, a: Var, axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        if axes.is_empty() {
            return Ok((vec![1; rank], vec![]));
        }
        let mut hit = vec![false; rank];
        for &ax in axes {
            if ax >= rank || hit[ax] {
                return Err(TensorError::InvalidAxis { axis: ax, rank });
            }
            hit[ax] = true;
        }
        let keep: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if hit[i] { 1 } else { d })
            .collect();
        let out: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !hit[*i])
            .map(|(_, &d)| d)
            .collect();
        Ok((keep, out))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Visits nodes exactly once, in
    /// reverse insertion order, emitting the gradient computation onto
    /// this same tape (so gradients are differentiable in turn).
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grad: Vec<Option<Var>> = vec![None; n];
        let seed_shape = self.shape(loss).to_vec();
        let seed = self.constant(Tensor::full(&seed_shape, 1.0));
        grad[loss.id] = Some(seed);
        for id in (0..n).rev() {
            let Some(g) = grad[id] else { continue };
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            self.vjp_invocations += 1;
            let contributions = self.vjp(id, g)?;
            for (input_id, gv) in contributions {
                if !self.nodes[input_id].requires_grad {
                    continue;
                }
                grad[input_id] = Some(match grad[input_id] {
                    None => gv,
                    Some(prev) => self.add(prev, gv)?,
                });
            }
        }
        Ok(Grads { grads: grad })
    }

    /// `sum_to` that skips the op when shapes already match.
    fn sum_to_maybe(&mut self, g: Var, target: &[usize]) -> Result<Var> {
        if self.shape(g) == target {
            Ok(g)
        } else {
            self.sum_to(g, target)
        }
    }

    /// Emit the backward rule of node `id` given upstream gradient `g`.
    /// Returns (input id, gradient var) pairs.
    fn vjp(&mut self, id: usize, g: Var) -> Result<Vec<(usize, Var)>> {
        let op = self.nodes[id].op.clone();
        let inputs = self.nodes[id].inputs.clone();
        let out = Var { id };
        let iv = |k: usize| Var { id: inputs[k] };
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add => {
                let sa = self.shape(iv(0)).to_vec();
                let sb = self.shape(iv(1)).to_vec();
                let ga = self.sum_to_maybe(g, &sa)?;
                let gb = self.sum_to_maybe(g, &sb)?;
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::Sub => {
                let sa = self.shape(iv(0)).to_vec();
                let sb = self.shape(iv(1)).to_vec();
                let ga = self.sum_to_maybe(g, &sa)?;
                let ng = self.neg(g);
                let gb = self.sum_to_maybe(ng, &sb)?;
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::Mul => {
                let sa = self.shape(iv(0)).to_vec();
                let sb = self.shape(iv(1)).to_vec();
                let gb_full = self.mul(g, iv(0))?;
                let ga_full = self.mul(g, iv(1))?;
                let ga = self.sum_to_maybe(ga_full, &sa)?;
                let gb = self.sum_to_maybe(gb_full, &sb)?;
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::Scale(c) => vec![(inputs[0], self.scale(g, c))],
            Op::AddScalar(_) => vec![(inputs[0], g)],
            Op::Neg => vec![(inputs[0], self.neg(g))],
            Op::Abs => {
                let s = self.sign(iv(0));
                vec![(inputs[0], self.mul(g, s)?)]
            }
            Op::Relu => {
                let m = self.heaviside(iv(0));
                vec![(inputs[0], self.mul(g, m)?)]
            }
            Op::LeakyRelu(alpha) => {
                let m = self.heaviside(iv(0));
                let scaled = self.scale(m, 1.0 - alpha);
                let factor = self.add_scalar(scaled, alpha);
                vec![(inputs[0], self.mul(g, factor)?)]
            }
            Op::Tanh => {
                // d tanh = 1 - y^2
                let y2 = self.mul(out, out)?;
                let ny2 = self.neg(y2);
                let d = self.add_scalar(ny2, 1.0);
                vec![(inputs[0], self.mul(g, d)?)]
            }
            Op::Sqrt => {
                // d sqrt = 1 / (2 y)
                let r = self.recip(out);
                let half = self.scale(r, 0.5);
                vec![(inputs[0], self.mul(g, half)?)]
            }
            Op::Recip => {
                // d (1/x) = -y^2
                let y2 = self.mul(out, out)?;
                let gy = self.mul(g, y2)?;
                vec![(inputs[0], self.neg(gy))]
            }
            Op::Heaviside | Op::Sign => vec![],
            Op::Matmul => {
                let bt = self.transpose2(iv(1))?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose2(iv(0))?;
                let gb = self.matmul(at, g)?;
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::Transpose2 => vec![(inputs[0], self.transpose2(g)?)],
            Op::Conv2d { stride, pad } => {
                let xs = self.shape(iv(0)).to_vec();
                let k = self.shape(iv(1))[2];
                let gx = self.conv2d_igrad(g, iv(1), stride, pad, xs[2], xs[3]);
                let gw = self.conv2d_wgrad(iv(0), g, stride, pad, k);
                vec![(inputs[0], gx), (inputs[1], gw)]
            }
            Op::Conv2dIGrad { stride, pad, .. } => {
                // out = igrad(go, w); d/d go = conv2d(U, w); d/d w = wgrad(U, go)
                let k = self.shape(iv(1))[2];
                let gg = self.conv2d(g, iv(1), stride, pad)?;
                let gw = self.conv2d_wgrad(g, iv(0), stride, pad, k);
                vec![(inputs[0], gg), (inputs[1], gw)]
            }
            Op::Conv2dWGrad { stride, pad, .. } => {
                // out = wgrad(x, go); d/d x = igrad(go, U); d/d go = conv2d(x, U)
                let xs = self.shape(iv(0)).to_vec();
                let gx = self.conv2d_igrad(iv(1), g, stride, pad, xs[2], xs[3]);
                let gg = self.conv2d(iv(0), g, stride, pad)?;
                vec![(inputs[0], gx), (inputs[1], gg)]
            }
            Op::SumTo(_) => {
                let sa = self.shape(iv(0)).to_vec();
                vec![(inputs[0], self.broadcast_to(g, &sa)?)]
            }
            Op::BroadcastTo(_) => {
                let sa = self.shape(iv(0)).to_vec();
                vec![(inputs[0], self.sum_to(g, &sa)?)]
            }
            Op::Reshape(_) => {
                let sa = self.shape(iv(0)).to_vec();
                vec![(inputs[0], self.reshape(g, &sa)?)]
            }
            Op::Concat { axis } => {
                let mut offset = 0usize;
                let mut grads = Vec::with_capacity(inputs.len());
                for &inp in &inputs {
                    let len = self.nodes[inp].value.shape()[axis];
                    let slice = self.narrow(g, axis, offset, len)?;
                    grads.push((inp, slice));
                    offset += len;
                }
                grads
            }
            Op::Narrow { axis, start, len } => {
                let total = self.shape(iv(0))[axis];
                let padded = self.pad_axis(g, axis, start, total - start - len);
                vec![(inputs[0], padded)]
            }
            Op::PadAxis { axis, before, .. } => {
                let len = self.shape(iv(0))[axis];
                vec![(inputs[0], self.narrow(g, axis, before, len)?)]
            }
            Op::AvgPool2 => {
                let up = self.upsample_nearest2(g)?;
                vec![(inputs[0], self.scale(up, 0.25))]
            }
            Op::UpsampleNearest2 => {
                let pooled = self.avg_pool2(g)?;
                vec![(inputs[0], self.scale(pooled, 4.0))]
            }
            Op::GridSample => {
                let si = self.shape(iv(0)).to_vec();
                let gimg = self.grid_scatter(g, iv(1), si[2], si[3]);
                let gcoords = self.grid_sample_coord_grad(iv(0), iv(1), g);
                vec![(inputs[0], gimg), (inputs[1], gcoords)]
            }
            Op::GridScatter { .. } => {
                // Gradient flows to the scattered values; higher-order
                // gradients through the coordinates are out of scope
                // (nothing in the training losses differentiates a
                // sampler twice).
                let gv = self.grid_sample(g, iv(1))?;
                vec![(inputs[0], gv)]
            }
            Op::GridSampleCoordGrad => vec![],
        })
    }
}
