//! Define-by-run tape. Every op appends a node holding its output value and
//! whatever the backward rule needs; [`Graph::backward`] walks the nodes once
//! in reverse.

use std::collections::HashMap;

use super::kernels::{col2im, im2col, maxpool2x2, ConvGeometry, Padding};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::wavelet::WaveletLayout;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied moving statistics.
    Infer,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
        relu: bool,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        relu: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine {
        input: NodeId,
        scale: T,
    },
    Square(NodeId),
    Clamp {
        input: NodeId,
        lo: T,
        hi: T,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    BroadcastTo {
        input: NodeId,
    },
    Reshape(NodeId),
    GlobalAvgPool(NodeId),
    GlobalMaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    ChannelMean(NodeId),
    ChannelMax {
        input: NodeId,
        argmax: Vec<u32>,
    },
    ConcatChannels(NodeId, NodeId),
    ScaleChannels {
        input: NodeId,
        gate: NodeId,
    },
    ScaleSpatial {
        input: NodeId,
        gate: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        var: Vec<T>,
        inv_std: Vec<T>,
        mode: NormMode,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Dropout {
        input: NodeId,
        mask: Vec<T>,
    },
    SelectColumn {
        input: NodeId,
        column: usize,
    },
    SparseCrossEntropy {
        input: NodeId,
        labels: Vec<usize>,
        eps: T,
    },
    Idwt2 {
        input: NodeId,
        layout: WaveletLayout,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    map: HashMap<NodeId, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.map.remove(&id)
    }
}

/// Probability floor used by the cross-entropy op.
pub const PROB_EPSILON: f64 = 1e-7;

/// A single forward computation recorded for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

fn dims4(op: &'static str, t: &Tensor<impl Element>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected rank-4 N x C x H x W input, got {s:?}"))),
    }
}

fn dims2(op: &'static str, t: &Tensor<impl Element>) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, k] => Ok([n, k]),
        ref s => Err(Error::shape(op, format!("expected rank-2 input, got {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes already checked")
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index, the flat index of the broadcast source.
fn broadcast_index(from: &[usize], to: &[usize]) -> Vec<usize> {
    let pad = to.len() - from.len();
    let from_padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(from.iter().copied()).collect();
    let fs = strides(&from_padded);
    let ts = strides(to);
    let n: usize = to.iter().product();
    (0..n)
        .map(|flat| {
            let mut src = 0;
            for d in 0..to.len() {
                let coord = (flat / ts[d]) % to[d];
                if from_padded[d] != 1 {
                    src += coord * fs[d];
                }
            }
            src
        })
        .collect()
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf whose gradient [`Graph::backward`] reports.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        if requires_grad {
            self.variable(value)
        } else {
            self.constant(value)
        }
    }

    /// Batch-norm statistics recorded by a train-mode [`Graph::batch_norm`]
    /// node: `(mean, biased variance)` per channel.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                mean,
                var,
                mode: NormMode::Train,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    // ---------------------------------------------------------------------
    // Convolution and dense layers
    // ---------------------------------------------------------------------

    /// 2-D convolution of `N x C x H x W` input with `O x C x K x K` weights,
    /// optionally followed by ReLU.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
        relu: bool,
    ) -> Result<NodeId> {
        let [n, c, h, w] = dims4("conv2d", self.value(input))?;
        let &[o, wc, kh, kw] = self.value(weight).shape() else {
            return Err(Error::shape(
                "conv2d",
                format!("weights must be O x C x KH x KW, got {:?}", self.value(weight).shape()),
            ));
        };
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c} do not match weight channel dimension {wc}"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias must have {o} entries, got shape {:?}", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeometry::new(c, h, w, kh, kw, stride, padding)?;
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = bias.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * o * cols];
        let mut col = vec![T::zero(); rows * cols];
        for (img, y) in x.chunks(c * h * w).zip(out.chunks_mut(o * cols)) {
            im2col(&geom, img, &mut col);
            T::gemm(o, rows, cols, wt, false, &col, false, y, false);
            for (oc, plane) in y.chunks_mut(cols).enumerate() {
                let bias = b.map_or(T::zero(), |b| b[oc]);
                for v in plane {
                    *v += bias;
                    if relu && *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
        }
        let value = Tensor::new([n, o, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                relu,
            },
            &inputs,
        ))
    }

    /// Affine map `x W + b` of an `N x F` input with `F x U` weights.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>, relu: bool) -> Result<NodeId> {
        let [n, f] = dims2("dense", self.value(input))?;
        let [wf, u] = dims2("dense", self.value(weight))?;
        if wf != f {
            return Err(Error::shape(
                "dense",
                format!("input features {f} do not match weight rows {wf}"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [u] {
                return Err(Error::shape(
                    "dense",
                    format!("bias must have {u} entries, got shape {:?}", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![T::zero(); n * u];
        T::gemm(n, f, u, self.value(input).data(), false, self.value(weight).data(), false, &mut out, false);
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(u) {
                for (v, &bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        if relu {
            for v in &mut out {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        let value = Tensor::new([n, u], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
                relu,
            },
            &inputs,
        ))
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis of an `N x K` tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let [_, k] = dims2("softmax", self.value(x))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let v = self.value(x).map(|v| scale * v + shift);
        self.push(v, Op::Affine { input: x, scale }, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v * v);
        self.push(v, Op::Square(x), &[x])
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(v, Op::Clamp { input: x, lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let total: T = t.data().iter().copied().sum();
        let v = total / T::from_usize(t.len()).expect("length fits");
        self.push(Tensor::scalar(v), Op::MeanAll(x), &[x])
    }

    /// Repeats size-1 (or missing leading) axes to reach `shape`.
    pub fn broadcast_to(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let from = self.value(x).shape().to_vec();
        if from.len() > shape.len() {
            return Err(Error::shape(
                "broadcast_to",
                format!("cannot broadcast {from:?} to lower rank {shape:?}"),
            ));
        }
        let pad = shape.len() - from.len();
        for (i, &d) in from.iter().enumerate() {
            if d != 1 && d != shape[pad + i] {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("dimension {i} of {from:?} is incompatible with {shape:?}"),
                ));
            }
        }
        let src = self.value(x).data();
        let data = broadcast_index(&from, shape).into_iter().map(|i| src[i]).collect();
        let v = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(v, Op::BroadcastTo { input: x }, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Column `column` of an `N x K` tensor as a length-`N` vector.
    pub fn select_column(&mut self, x: NodeId, column: usize) -> Result<NodeId> {
        let [n, k] = dims2("select_column", self.value(x))?;
        if column >= k {
            return Err(Error::shape(
                "select_column",
                format!("column {column} out of range for {k} columns"),
            ));
        }
        let data = self.value(x).data().chunks(k).map(|r| r[column]).collect();
        let v = Tensor::new([n], data)?;
        Ok(self.push(v, Op::SelectColumn { input: x, column }, &[x]))
    }

    // ---------------------------------------------------------------------
    // Pooling and attention plumbing
    // ---------------------------------------------------------------------

    /// Spatial average per channel: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = dims4("global_avg_pool", self.value(x))?;
        let hw = T::from_usize(h * w).expect("size fits");
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        let v = Tensor::new([n, c], data)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    /// Spatial max per channel: `N x C x H x W -> N x C`.
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = dims4("global_max_pool", self.value(x))?;
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for p in self.value(x).data().chunks(h * w) {
            let mut best = 0;
            for (i, v) in p.iter().enumerate() {
                if *v > p[best] {
                    best = i;
                }
            }
            data.push(p[best]);
            argmax.push(best as u32);
        }
        let v = Tensor::new([n, c], data)?;
        Ok(self.push(v, Op::GlobalMaxPool { input: x, argmax }, &[x]))
    }

    /// Mean over the channel axis: `N x C x H x W -> N x 1 x H x W`.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = dims4("channel_mean", self.value(x))?;
        let hw = h * w;
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize(c).expect("size fits");
        let mut data = vec![T::zero(); n * hw];
        for b in 0..n {
            let out = &mut data[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (o, v) in out.iter_mut().zip(plane) {
                    *o += *v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let v = Tensor::new([n, 1, h, w], data)?;
        Ok(self.push(v, Op::ChannelMean(x), &[x]))
    }

    /// Max over the channel axis: `N x C x H x W -> N x 1 x H x W`.
    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = dims4("channel_max", self.value(x))?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * hw];
        let mut argmax = vec![0u32; n * hw];
        for b in 0..n {
            let out = &mut data[b * hw..(b + 1) * hw];
            out.copy_from_slice(&src[b * c * hw..b * c * hw + hw]);
            let arg = &mut argmax[b * hw..(b + 1) * hw];
            for ch in 1..c {
                let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for i in 0..hw {
                    if plane[i] > out[i] {
                        out[i] = plane[i];
                        arg[i] = ch as u32;
                    }
                }
            }
        }
        let v = Tensor::new([n, 1, h, w], data)?;
        Ok(self.push(v, Op::ChannelMax { input: x, argmax }, &[x]))
    }

    /// Concatenates two `N x Ci x H x W` tensors along channels.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [n, ca, h, w] = dims4("concat_channels", self.value(a))?;
        let [nb, cb, hb, wb] = dims4("concat_channels", self.value(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("batch/spatial mismatch: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let hw = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&da[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&db[i * cb * hw..(i + 1) * cb * hw]);
        }
        let v = Tensor::new([n, ca + cb, h, w], data)?;
        Ok(self.push(v, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// `x * gate` with an `N x C` gate broadcast over space.
    pub fn scale_channels(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = dims4("scale_channels", self.value(x))?;
        if self.value(gate).shape() != [n, c] {
            return Err(Error::shape(
                "scale_channels",
                format!("gate must be {n} x {c}, got {:?}", self.value(gate).shape()),
            ));
        }
        let g = self.value(gate).data();
        let mut v = self.value(x).clone();
        for (plane, &s) in v.data_mut().chunks_mut(h * w).zip(g) {
            for e in plane {
                *e *= s;
            }
        }
        Ok(self.push(v, Op::ScaleChannels { input: x, gate }, &[x, gate]))
    }

    /// `x * gate` with an `N x 1 x H x W` gate broadcast over channels.
    pub fn scale_spatial(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = dims4("scale_spatial", self.value(x))?;
        if self.value(gate).shape() != [n, 1, h, w] {
            return Err(Error::shape(
                "scale_spatial",
                format!("gate must be {n} x 1 x {h} x {w}, got {:?}", self.value(gate).shape()),
            ));
        }
        let hw = h * w;
        let g = self.value(gate).data();
        let mut v = self.value(x).clone();
        for (i, plane) in v.data_mut().chunks_mut(hw).enumerate() {
            let gp = &g[(i / c) * hw..(i / c + 1) * hw];
            for (e, &s) in plane.iter_mut().zip(gp) {
                *e *= s;
            }
        }
        Ok(self.push(v, Op::ScaleSpatial { input: x, gate }, &[x, gate]))
    }

    /// Per-channel batch normalization. `moving_mean`/`moving_var` are only
    /// read in [`NormMode::Infer`]; train mode records the batch statistics
    /// (see [`Graph::batch_stats`]).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        moving_mean: &[T],
        moving_var: &[T],
        mode: NormMode,
        epsilon: T,
    ) -> Result<NodeId> {
        let [n, c, h, w] = dims4("batch_norm", self.value(x))?;
        for (name, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("moving_mean", moving_mean.len()),
            ("moving_var", moving_var.len()),
        ] {
            if len != c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has {len} entries but input has {c} channels"),
                ));
            }
        }
        let hw = h * w;
        let src = self.value(x).data();
        let (mean, var) = match mode {
            NormMode::Infer => (moving_mean.to_vec(), moving_var.to_vec()),
            NormMode::Train => {
                let count = (n * hw) as f64;
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut s, mut s2) = (0.0f64, 0.0f64);
                    for b in 0..n {
                        for &v in &src[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            s += v.as_f64();
                        }
                    }
                    let m = s / count;
                    for b in 0..n {
                        for &v in &src[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            s2 += (v.as_f64() - m).powi(2);
                        }
                    }
                    mean[ch] = T::from_f64_lossy(m);
                    var[ch] = T::from_f64_lossy(s2 / count);
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            let (m, s, g, b) = (mean[ch], inv_std[ch], gm[ch], bt[ch]);
            for e in plane {
                *e = g * (*e - m) * s + b;
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                mean,
                var,
                inv_std,
                mode,
            },
            &[x, gamma, beta],
        ))
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = dims4("maxpool2d", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("spatial size {h}x{w} is not divisible by the 2x2 pool"),
            ));
        }
        let (data, argmax) = maxpool2x2(self.value(x).data(), n * c, h, w);
        let v = Tensor::new([n, c, h / 2, w / 2], data)?;
        Ok(self.push(v, Op::MaxPool2d { input: x, argmax }, &[x]))
    }

    /// Multiplies by a precomputed dropout mask (0 or `1/(1-rate)` entries).
    pub fn dropout_with_mask(&mut self, x: NodeId, mask: Vec<T>) -> Result<NodeId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape(
                "dropout",
                format!("mask has {} entries for {} inputs", mask.len(), self.value(x).len()),
            ));
        }
        let mut v = self.value(x).clone();
        for (e, &m) in v.data_mut().iter_mut().zip(&mask) {
            *e *= m;
        }
        Ok(self.push(v, Op::Dropout { input: x, mask }, &[x]))
    }

    /// Mean negative log-probability of the true class for `N x K` probabilities.
    pub fn sparse_cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let [n, k] = dims2("sparse_cross_entropy", self.value(probs))?;
        if labels.len() != n {
            return Err(Error::shape(
                "sparse_cross_entropy",
                format!("{} labels for a batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("label", format!("{bad} is outside [0, {k})")));
        }
        let eps = T::from_f64_lossy(PROB_EPSILON);
        let p = self.value(probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(p[i * k + l].max(eps).min(T::one() - eps)).as_f64().ln())
            .sum();
        let v = Tensor::scalar(T::from_f64_lossy(total / n as f64));
        Ok(self.push(
            v,
            Op::SparseCrossEntropy {
                input: probs,
                labels: labels.to_vec(),
                eps,
            },
            &[probs],
        ))
    }

    /// Wavelet synthesis of `B x C x coeff_len` coefficients into `B x C x H x W`.
    pub fn idwt2(&mut self, coeffs: NodeId, layout: &WaveletLayout) -> Result<NodeId> {
        let shape = self.value(coeffs).shape().to_vec();
        let n = layout.coeff_len();
        let &[b, c, len] = shape.as_slice() else {
            return Err(Error::shape("idwt2", format!("expected B x C x coeffs, got {shape:?}")));
        };
        if c != layout.channels || len != n {
            return Err(Error::shape(
                "idwt2",
                format!("layout expects {} x {n} coefficients per item, got {c} x {len}", layout.channels),
            ));
        }
        let mut out = Vec::with_capacity(b * c * layout.height * layout.width);
        for ch in self.value(coeffs).data().chunks(n) {
            out.extend(layout.synthesize(ch));
        }
        let v = Tensor::new([b, c, layout.height, layout.width], out)?;
        Ok(self.push(
            v,
            Op::Idwt2 {
                input: coeffs,
                layout: layout.clone(),
            },
            &[coeffs],
        ))
    }

    // ---------------------------------------------------------------------
    // Reverse pass
    // ---------------------------------------------------------------------

    /// Differentiates the scalar `output`. Gradients are kept for every
    /// differentiable leaf and for the nodes listed in `retain`.
    pub fn backward(&self, output: NodeId, retain: &[NodeId]) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be a scalar, got shape {:?}", self.value(output).shape()),
            ));
        }
        let seed = Tensor::full(self.value(output).shape().to_vec(), T::one());
        self.backward_from(output, seed, retain)
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_from(&self, output: NodeId, seed: Tensor<T>, retain: &[NodeId]) -> Result<Gradients<T>> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape("backward", "seed shape differs from output shape"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut result = Gradients::default();
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let id = NodeId(idx);
            if !matches!(node.op, Op::Leaf) {
                self.backprop_node(node, &g, &mut grads)?;
            }
            if matches!(node.op, Op::Leaf) || retain.contains(&id) {
                result.map.insert(id, g);
            }
        }
        Ok(result)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.wants(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, id: NodeId, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.value(id).shape().to_vec(), data).expect("gradient matches input shape")
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                relu,
            } => {
                let mut gy = g.clone();
                if *relu {
                    for (d, &y) in gy.data_mut().iter_mut().zip(out.data()) {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }
                }
                let x = self.value(*input);
                let wt = self.value(*weight).data();
                let o = self.value(*weight).shape()[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_size = geom.in_channels * geom.height * geom.width;
                let want_x = self.wants(*input);
                let want_w = self.wants(*weight);
                let mut gw = vec![T::zero(); o * rows];
                let mut gx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
                let mut col = vec![T::zero(); rows * cols];
                for (i, gyi) in gy.data().chunks(o * cols).enumerate() {
                    if want_w {
                        im2col(geom, &x.data()[i * in_size..(i + 1) * in_size], &mut col);
                        T::gemm(o, cols, rows, gyi, false, &col, true, &mut gw, true);
                    }
                    if want_x {
                        T::gemm(rows, o, cols, wt, true, gyi, false, &mut col, false);
                        col2im(geom, &col, &mut gx[i * in_size..(i + 1) * in_size]);
                    }
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); o];
                        for (i, plane) in gy.data().chunks(cols).enumerate() {
                            gb[i % o] += plane.iter().copied().sum::<T>();
                        }
                        self.accumulate(grads, *b, self.like(*b, gb));
                    }
                }
                if want_w {
                    self.accumulate(grads, *weight, self.like(*weight, gw));
                }
                if want_x {
                    self.accumulate(grads, *input, self.like(*input, gx));
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                relu,
            } => {
                let mut gy = g.clone();
                if *relu {
                    for (d, &y) in gy.data_mut().iter_mut().zip(out.data()) {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }
                }
                let x = self.value(*input);
                let [n, f] = [x.shape()[0], x.shape()[1]];
                let u = out.shape()[1];
                if self.wants(*weight) {
                    let mut gw = vec![T::zero(); f * u];
                    T::gemm(f, n, u, x.data(), true, gy.data(), false, &mut gw, false);
                    self.accumulate(grads, *weight, self.like(*weight, gw));
                }
                if self.wants(*input) {
                    let mut gx = vec![T::zero(); n * f];
                    T::gemm(n, u, f, gy.data(), false, self.value(*weight).data(), true, &mut gx, false);
                    self.accumulate(grads, *input, self.like(*input, gx));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); u];
                        for row in gy.data().chunks(u) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.accumulate(grads, *b, self.like(*b, gb));
                    }
                }
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Softmax(x) => {
                let k = out.shape()[1];
                let mut d = Vec::with_capacity(out.len());
                for (gr, yr) in g.data().chunks(k).zip(out.data().chunks(k)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(&a, &y)| y * (a - dot)));
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Affine { input, scale } => {
                let s = *scale;
                self.accumulate(grads, *input, g.map(|v| v * s));
            }
            Op::Square(x) => {
                let two = T::from_f64_lossy(2.0);
                self.accumulate(grads, *x, zip_map(g, self.value(*x), |gv, xv| two * gv * xv));
            }
            Op::Clamp { input, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = zip_map(g, self.value(*input), |gv, xv| {
                    if xv >= lo && xv <= hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *input, d);
            }
            Op::SumAll(x) => {
                let s = g.data()[0];
                let t = Tensor::full(self.value(*x).shape().to_vec(), s);
                self.accumulate(grads, *x, t);
            }
            Op::MeanAll(x) => {
                let n = T::from_usize(self.value(*x).len()).expect("length fits");
                let t = Tensor::full(self.value(*x).shape().to_vec(), g.data()[0] / n);
                self.accumulate(grads, *x, t);
            }
            Op::BroadcastTo { input } => {
                let from = self.value(*input).shape();
                let mut d = vec![T::zero(); self.value(*input).len()];
                for (o, src) in broadcast_index(from, out.shape()).into_iter().enumerate() {
                    d[src] += g.data()[o];
                }
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, g.data().to_vec()));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).expect("size fits");
                let mut d = Vec::with_capacity(self.value(*x).len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::GlobalMaxPool { input, argmax } => {
                let s = self.value(*input).shape();
                let hw = s[2] * s[3];
                let mut d = vec![T::zero(); self.value(*input).len()];
                for (i, (&gv, &a)) in g.data().iter().zip(argmax).enumerate() {
                    d[i * hw + a as usize] += gv;
                }
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::ChannelMean(x) => {
                let s = self.value(*x).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let inv = T::one() / T::from_usize(c).expect("size fits");
                let mut d = Vec::with_capacity(self.value(*x).len());
                for gp in g.data().chunks(hw) {
                    for _ in 0..c {
                        d.extend(gp.iter().map(|&v| v * inv));
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::ChannelMax { input, argmax } => {
                let s = self.value(*input).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut d = vec![T::zero(); self.value(*input).len()];
                for (i, (&gv, &a)) in g.data().iter().zip(argmax).enumerate() {
                    let (b, p) = (i / hw, i % hw);
                    d[(b * c + a as usize) * hw + p] += gv;
                }
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.value(*a).shape()[1];
                let s = out.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for i in 0..n {
                    let item = &g.data()[i * c * hw..(i + 1) * c * hw];
                    da.extend_from_slice(&item[..ca * hw]);
                    db.extend_from_slice(&item[ca * hw..]);
                }
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::ScaleChannels { input, gate } => {
                let s = out.shape();
                let hw = s[2] * s[3];
                let gt = self.value(*gate).data();
                let x = self.value(*input).data();
                if self.wants(*input) {
                    let mut d = g.clone();
                    for (plane, &s) in d.data_mut().chunks_mut(hw).zip(gt) {
                        for e in plane {
                            *e *= s;
                        }
                    }
                    self.accumulate(grads, *input, d);
                }
                if self.wants(*gate) {
                    let d = g
                        .data()
                        .chunks(hw)
                        .zip(x.chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *gate, self.like(*gate, d));
                }
            }
            Op::ScaleSpatial { input, gate } => {
                let s = out.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let gt = self.value(*gate).data();
                let x = self.value(*input).data();
                if self.wants(*input) {
                    let mut d = g.clone();
                    for (i, plane) in d.data_mut().chunks_mut(hw).enumerate() {
                        let gp = &gt[(i / c) * hw..(i / c + 1) * hw];
                        for (e, &s) in plane.iter_mut().zip(gp) {
                            *e *= s;
                        }
                    }
                    self.accumulate(grads, *input, d);
                }
                if self.wants(*gate) {
                    let mut d = vec![T::zero(); self.value(*gate).len()];
                    for (i, (gp, xp)) in g.data().chunks(hw).zip(x.chunks(hw)).enumerate() {
                        let dst = &mut d[(i / c) * hw..(i / c + 1) * hw];
                        for ((o, &a), &b) in dst.iter_mut().zip(gp).zip(xp) {
                            *o += a * b;
                        }
                    }
                    self.accumulate(grads, *gate, self.like(*gate, d));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                mode,
                ..
            } => {
                let s = out.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let x = self.value(*input).data();
                let gm = self.value(*gamma).data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for (i, (gp, xp)) in g.data().chunks(hw).zip(x.chunks(hw)).enumerate() {
                    let ch = i % c;
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        let xhat = (xv - mean[ch]) * inv_std[ch];
                        sum_g[ch] += gv.as_f64();
                        sum_gx[ch] += (gv * xhat).as_f64();
                    }
                }
                if self.wants(*gamma) {
                    let d = sum_gx.iter().map(|&v| T::from_f64_lossy(v)).collect();
                    self.accumulate(grads, *gamma, self.like(*gamma, d));
                }
                if self.wants(*beta) {
                    let d = sum_g.iter().map(|&v| T::from_f64_lossy(v)).collect();
                    self.accumulate(grads, *beta, self.like(*beta, d));
                }
                if self.wants(*input) {
                    let m = (n * hw) as f64;
                    let mut d = g.clone();
                    for (i, (dp, xp)) in d.data_mut().chunks_mut(hw).zip(x.chunks(hw)).enumerate() {
                        let ch = i % c;
                        let scale = gm[ch] * inv_std[ch];
                        match mode {
                            NormMode::Infer => {
                                for e in dp.iter_mut() {
                                    *e *= scale;
                                }
                            }
                            NormMode::Train => {
                                let mg = T::from_f64_lossy(sum_g[ch] / m);
                                let mgx = T::from_f64_lossy(sum_gx[ch] / m);
                                for (e, &xv) in dp.iter_mut().zip(xp) {
                                    let xhat = (xv - mean[ch]) * inv_std[ch];
                                    *e = scale * (*e - mg - xhat * mgx);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, d);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).len()];
                for (&gv, &a) in g.data().iter().zip(argmax) {
                    d[a as usize] += gv;
                }
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::Dropout { input, mask } => {
                let d = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::SelectColumn { input, column } => {
                let k = self.value(*input).shape()[1];
                let mut d = vec![T::zero(); self.value(*input).len()];
                for (i, &gv) in g.data().iter().enumerate() {
                    d[i * k + column] = gv;
                }
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::SparseCrossEntropy { input, labels, eps } => {
                let p = self.value(*input);
                let k = p.shape()[1];
                let n = T::from_usize(labels.len()).expect("size fits");
                let scale = g.data()[0];
                let mut d = vec![T::zero(); p.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let pv = p.data()[i * k + l];
                    if pv >= *eps && pv <= T::one() - *eps {
                        d[i * k + l] = -scale / (n * pv);
                    }
                }
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::Idwt2 { input, layout } => {
                let plane = layout.height * layout.width;
                let mut d = Vec::with_capacity(self.value(*input).len());
                for gp in g.data().chunks(plane) {
                    d.extend(layout.analyze(gp));
                }
                self.accumulate(grads, *input, self.like(*input, d));
            }
        }
        Ok(())
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<T: Element, R: rand::Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout rate", format!("{rate} is outside [0, 1)")));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect())
}
