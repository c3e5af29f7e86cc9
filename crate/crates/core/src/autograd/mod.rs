//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every training step. Parameters enter as
//! leaves copied out of a [`ParamStore`]; [`Graph::backward`] walks the tape in
//! reverse insertion order (which is a topological order, since every op only
//! references earlier nodes) and accumulates leaf gradients into the store.
//!
//! `sign` is the only non-smooth op. Its backward pass uses a straight-through
//! estimator ([`SteKind`]). For gradient checking the graph can run `sign` in a
//! linearized mode around previously recorded pre-activations, see
//! [`gradcheck`].

pub mod gradcheck;
mod param;
mod ste;

pub use param::{ParamClass, ParamId, ParamStore, Parameter};
pub use ste::{sign_value, SteKind};

use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm2d, batchnorm2d_backward, conv2d, conv2d_backward, global_avg_pool, gemm, linear,
    maxpool2d, sigmoid_scalar, softmax_cross_entropy, BatchNormCache, BnMode, BnState, ConvGeometry,
    MatRef, Real, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// How `sign` nodes evaluate their forward pass.
#[derive(Clone, Debug, Default)]
pub enum SignMode<T> {
    #[default]
    Exact,
    /// Exact forward; every sign input is also recorded in tape order.
    Record,
    /// `sign(a) + ste'(a) * (x - a)` around the recorded anchor `a` of the
    /// sign node with the same ordinal.
    Linearized(Vec<Tensor<T>>),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBroadcast { x: NodeId, b: NodeId, inner: usize },
    MulBroadcast { x: NodeId, b: NodeId, inner: usize },
    Sign { x: NodeId, kind: SteKind },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Hardtanh(NodeId),
    Abs(NodeId),
    RowMean { x: NodeId, row_len: usize },
    Reshape(NodeId),
    Conv2d { x: NodeId, w: NodeId, bias: Option<NodeId>, geom: ConvGeometry, pad: T },
    Linear { x: NodeId, w: NodeId, bias: Option<NodeId> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: BatchNormCache<T> },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    GlobalAvgPool(NodeId),
    Downsample { x: NodeId, stride: usize, front: usize },
    SoftmaxCe { grad: Tensor<T>, logits: NodeId },
    Sum(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// One forward/backward tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    sign_mode: SignMode<T>,
    sign_cursor: usize,
    recorded: Vec<Tensor<T>>,
    ste_override: Option<SteKind>,
    /// A leaf or parameter held a non-finite value, so downstream
    /// non-finite results are expected rather than a bug.
    tainted: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every node from one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn broadcast_len<T: Real>(x: &Tensor<T>, b: &Tensor<T>, inner: usize) -> Result<()> {
    let l = b.len();
    if inner == 0 || l == 0 || !x.len().is_multiple_of(l * inner) {
        return Err(Error::shape(format!(
            "cannot broadcast {:?} over {:?} with inner extent {inner}",
            b.shape(),
            x.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            sign_mode: SignMode::Exact,
            sign_cursor: 0,
            recorded: Vec::new(),
            ste_override: None,
            tainted: false,
        }
    }

    pub fn with_sign_mode(mode: SignMode<T>) -> Self {
        Graph { sign_mode: mode, ..Self::new() }
    }

    /// Uses `kind` for every sign backward regardless of what the op was
    /// recorded with. Only meant for negative controls in gradient checks.
    pub fn override_ste_backward(&mut self, kind: SteKind) {
        self.ste_override = Some(kind);
    }

    /// Sign inputs captured in [`SignMode::Record`].
    pub fn take_recorded(&mut self) -> Vec<Tensor<T>> {
        std::mem::take(&mut self.recorded)
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        if cfg!(debug_assertions) {
            if matches!(op, Op::Leaf | Op::Param(_)) {
                self.tainted |= !value.is_finite();
            } else if !self.tainted {
                value.debug_check_finite("graph op", &[]);
            }
        }
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `x[i] + b[(i / inner) % len(b)]`: adds a per-channel (or per
    /// sample-channel) vector to every element of the matching slab.
    pub fn add_broadcast(&mut self, x: NodeId, b: NodeId, inner: usize) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        broadcast_len(xv, bv, inner)?;
        let l = bv.len();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[(i / inner) % l];
        }
        Ok(self.push(out, Op::AddBroadcast { x, b, inner }))
    }

    /// Multiplicative counterpart of [`Graph::add_broadcast`].
    pub fn mul_broadcast(&mut self, x: NodeId, b: NodeId, inner: usize) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        broadcast_len(xv, bv, inner)?;
        let l = bv.len();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= bv.data()[(i / inner) % l];
        }
        Ok(self.push(out, Op::MulBroadcast { x, b, inner }))
    }

    pub fn sign(&mut self, x: NodeId, kind: SteKind) -> Result<NodeId> {
        let xv = self.value(x);
        let out = match &self.sign_mode {
            SignMode::Exact | SignMode::Record => xv.map(sign_value),
            SignMode::Linearized(anchors) => {
                let anchor = anchors.get(self.sign_cursor).ok_or_else(|| {
                    Error::State("linearized sign mode ran out of recorded anchors".into())
                })?;
                anchor.expect_shape(xv.shape())?;
                let data = xv
                    .data()
                    .iter()
                    .zip(anchor.data())
                    .map(|(&v, &a)| sign_value(a) + kind.derivative(a) * (v - a))
                    .collect();
                Tensor::new(xv.shape().to_vec(), data)?
            }
        };
        if matches!(self.sign_mode, SignMode::Record) {
            let rec = xv.clone();
            self.recorded.push(rec);
        }
        self.sign_cursor += 1;
        Ok(self.push(out, Op::Sign { x, kind }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid_scalar);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(T::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn hardtanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.max(-T::one()).min(T::one()));
        self.push(v, Op::Hardtanh(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(T::abs);
        self.push(v, Op::Abs(x))
    }

    /// Mean of each contiguous run of `row_len` elements.
    pub fn row_mean(&mut self, x: NodeId, row_len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if row_len == 0 || !xv.len().is_multiple_of(row_len) {
            return Err(Error::shape(format!("row_mean of {:?} by {row_len}", xv.shape())));
        }
        let inv = T::from_f64(1.0 / row_len as f64);
        let data: Vec<T> = xv.data().chunks(row_len).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        let n = data.len();
        let v = Tensor::new([n], data)?;
        Ok(self.push(v, Op::RowMean { x, row_len }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
        pad: T,
    ) -> Result<NodeId> {
        let v = conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)), &geom, pad)?;
        Ok(self.push(v, Op::Conv2d { x, w, bias, geom, pad }))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let v = linear(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        Ok(self.push(v, Op::Linear { x, w, bias }))
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState<T>,
        mode: BnMode,
    ) -> Result<NodeId> {
        let (v, cache) = batchnorm2d(self.value(x), self.value(gamma), self.value(beta), state, mode)?;
        Ok(self.push(v, Op::BatchNorm { x, gamma, beta, cache }))
    }

    pub fn maxpool(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (v, argmax) = maxpool2d(self.value(x), kernel, stride)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = global_avg_pool(self.value(x))?;
        Ok(self.push(v, Op::GlobalAvgPool(x)))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride` and
    /// zero channels split evenly before and after, up to `out_channels`.
    pub fn downsample(&mut self, x: NodeId, stride: usize, out_channels: usize) -> Result<NodeId> {
        let v = downsample_forward(self.value(x), stride, out_channels)?;
        let front = (out_channels - self.value(x).shape()[1]) / 2;
        Ok(self.push(v, Op::Downsample { x, stride, front }))
    }

    /// Mean cross-entropy; the result is a one-element tensor.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, grad) = softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { grad, logits }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before the loss was computed".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape().to_vec()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs backward from `loss` and adds every parameter gradient into `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let p = store.get_mut(*id);
                p.grad.expect_shape(g.shape())?;
                for (acc, &v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |g, y| g * y)?)?;
                accumulate(grads, *b, g.zip_map(val(*a), |g, x| g * x)?)?;
            }
            Op::AddBroadcast { x, b, inner } => {
                let bv = val(*b);
                let l = bv.len();
                let mut gb = Tensor::zeros(bv.shape().to_vec());
                for (i, &gv) in g.data().iter().enumerate() {
                    gb.data_mut()[(i / inner) % l] += gv;
                }
                accumulate(grads, *x, g.clone())?;
                accumulate(grads, *b, gb)?;
            }
            Op::MulBroadcast { x, b, inner } => {
                let (xv, bv) = (val(*x), val(*b));
                let l = bv.len();
                let mut gx = g.clone();
                let mut gb = Tensor::zeros(bv.shape().to_vec());
                for (i, gv) in gx.data_mut().iter_mut().enumerate() {
                    let j = (i / inner) % l;
                    gb.data_mut()[j] += *gv * xv.data()[i];
                    *gv *= bv.data()[j];
                }
                accumulate(grads, *x, gx)?;
                accumulate(grads, *b, gb)?;
            }
            Op::Sign { x, kind } => {
                let kind = self.ste_override.unwrap_or(*kind);
                let gx = g.zip_map(val(*x), |g, v| g * kind.derivative(v))?;
                accumulate(grads, *x, gx)?;
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |g, s| g * s * (T::one() - s))?;
                accumulate(grads, *x, gx)?;
            }
            Op::Tanh(x) => {
                let gx = g.zip_map(&node.value, |g, t| g * (T::one() - t * t))?;
                accumulate(grads, *x, gx)?;
            }
            Op::Relu(x) => {
                let gx = g.zip_map(val(*x), |g, v| if v > T::zero() { g } else { T::zero() })?;
                accumulate(grads, *x, gx)?;
            }
            Op::Hardtanh(x) => {
                let one = T::one();
                let gx = g.zip_map(val(*x), |g, v| if v >= -one && v <= one { g } else { T::zero() })?;
                accumulate(grads, *x, gx)?;
            }
            Op::Abs(x) => {
                let gx = g.zip_map(val(*x), |g, v| if v >= T::zero() { g } else { -g })?;
                accumulate(grads, *x, gx)?;
            }
            Op::RowMean { x, row_len } => {
                let inv = T::from_f64(1.0 / *row_len as f64);
                let xv = val(*x);
                let gx = Tensor::from_fn(xv.shape().to_vec(), |i| g.data()[i / row_len] * inv);
                accumulate(grads, *x, gx)?;
            }
            Op::Reshape(x) => {
                let gx = g.reshaped(val(*x).shape().to_vec())?;
                accumulate(grads, *x, gx)?;
            }
            Op::Conv2d { x, w, bias, geom, pad } => {
                let (gx, gw, gb) = conv2d_backward(val(*x), val(*w), g, geom, *pad)?;
                accumulate(grads, *x, gx)?;
                accumulate(grads, *w, gw)?;
                if let Some(b) = bias {
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::Linear { x, w, bias } => {
                let [n, f] = val(*x).dims2()?;
                let gcols = val(*w).shape()[0];
                let mut gx = Tensor::zeros([n, f]);
                gemm(MatRef::new(g.data(), n, gcols), MatRef::new(val(*w).data(), gcols, f), gx.data_mut(), false);
                let mut gw = Tensor::zeros([gcols, f]);
                gemm(MatRef::transposed(g.data(), gcols, n), MatRef::new(val(*x).data(), n, f), gw.data_mut(), false);
                accumulate(grads, *x, gx)?;
                accumulate(grads, *w, gw)?;
                if let Some(b) = bias {
                    let mut gb = Tensor::zeros([gcols]);
                    for row in g.data().chunks(gcols) {
                        gb.data_mut().iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let (gx, gg, gbeta) = batchnorm2d_backward(g, val(*gamma), cache)?;
                accumulate(grads, *x, gx)?;
                accumulate(grads, *gamma, gg)?;
                accumulate(grads, *beta, gbeta)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape().to_vec());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                accumulate(grads, *x, gx)?;
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let inv = T::from_f64(1.0 / plane as f64);
                let gx = Tensor::from_fn(val(*x).shape().to_vec(), |i| g.data()[i / plane] * inv);
                accumulate(grads, *x, gx)?;
            }
            Op::Downsample { x, stride, front } => {
                let [n, c, h, w] = val(*x).dims4()?;
                let [_, oc, oh, ow] = g.dims4()?;
                let mut gx = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx.data_mut()[((b * c + ch) * h + y * stride) * w + xx * stride] +=
                                    g.data()[((b * oc + ch + front) * oh + y) * ow + xx];
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx)?;
            }
            Op::SoftmaxCe { grad, logits } => {
                let scale = g.data()[0];
                accumulate(grads, *logits, grad.scale(scale))?;
            }
            Op::Sum(x) => {
                let scale = g.data()[0];
                accumulate(grads, *x, Tensor::full(val(*x).shape().to_vec(), scale))?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            existing.expect_shape(g.shape())?;
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Forward of [`Graph::downsample`], shared with the packed inference path.
pub fn downsample_forward<T: Real>(x: &Tensor<T>, stride: usize, out_channels: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if stride == 0 || out_channels < c {
        return Err(Error::shape(format!("downsample {c}->{out_channels} channels, stride {stride}")));
    }
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let front = (out_channels - c) / 2;
    let mut out = Tensor::zeros([n, out_channels, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out.data_mut()[((b * out_channels + ch + front) * oh + y) * ow + xx] =
                        x.data()[((b * c + ch) * h + y * stride) * w + xx * stride];
                }
            }
        }
    }
    Ok(out)
}
