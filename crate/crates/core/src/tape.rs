//! Reverse-mode autodiff on a linear tape.
//!
//! Operations execute eagerly and record themselves; `backward` replays the
//! record in reverse, accumulating vector-Jacobian products. Node order is
//! construction order, so topological order holds by construction. A tape is
//! single-shot: running backward twice is an error, not silent accumulation.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geometry;
use crate::kernels;
use crate::param::Param;
use crate::scalar::{r, Real};
use crate::tensor::{strides, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    Spatial,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Silu,
    Relu,
}

/// Batch statistics produced by a train-mode batch norm, for running-stat
/// updates owned by the calling layer.
#[derive(Debug, Clone)]
pub struct BatchStats<R> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

const BCE_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: R },
    AddConst { x: TensorId },
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Reshape { x: TensorId },
    Gather { x: TensorId, idx: Rc<Vec<usize>> },
    Concat { parts: Vec<TensorId>, axis: usize },
    PadHw { x: TensorId, top: usize, bottom: usize, left: usize, right: usize },
    Conv2d { x: TensorId, k: TensorId, stride: usize, pad: usize },
    Unfold { x: TensorId, k: usize, stride: usize, pad: usize },
    MaxPool2d { x: TensorId, argmax: Vec<usize> },
    PoolGlobal { x: TensorId, axis: PoolAxis, mode: PoolMode, argmax: Vec<usize> },
    GroupPool { x: TensorId, n_groups: usize, mode: PoolMode, argmax: Vec<usize> },
    Softmax { x: TensorId, axis: usize },
    Pointwise { x: TensorId, f: Activation },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<R>, inv_std: Vec<R> },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<R>, inv_std: Vec<R> },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    Bce { a: TensorId, y: Rc<Vec<R>> },
    BcePair { a: TensorId, y: TensorId },
    CiouLoss { pred: TensorId, gt: Rc<Vec<R>> },
    CiouValues { pred: TensorId, gt: Rc<Vec<R>> },
    Clamp01 { x: TensorId },
    ScatterAdd { src: TensorId, idx: Rc<Vec<usize>>, out_len: usize },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs: bool,
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    params: HashMap<u64, TensorId>,
    done: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), params: HashMap::new(), done: false }
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs
    }

    /// Insert a leaf tensor; gradients flow to it iff `requires_grad` is set.
    pub fn input(&mut self, t: Tensor<R>) -> TensorId {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Insert a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<R>) -> TensorId {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Register a parameter, deduplicated by parameter id: repeated uses of
    /// the same parameter share one node, so their gradients accumulate.
    pub fn param(&mut self, p: &Param<R>) -> TensorId {
        if let Some(&id) = self.params.get(&p.id()) {
            return id;
        }
        let id = self.push(p.value.clone(), Op::Leaf, true);
        self.params.insert(p.id(), id);
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor<R> {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[R] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[R]> {
        self.grads[id.0].as_deref()
    }

    pub fn grad_of(&self, p: &Param<R>) -> Option<&[R]> {
        self.params.get(&p.id()).and_then(|id| self.grads[id.0].as_deref())
    }

    // ── Elementwise / broadcast ─────────────────────────────────────

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        make: impl FnOnce(TensorId, TensorId) -> Op<R>,
        f: impl Fn(R, R) -> R,
    ) -> Result<TensorId> {
        let (asx, bsx) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&asx, &bsx).ok_or_else(|| {
            Error::shape(format!("cannot broadcast {asx:?} with {bsx:?}"))
        })?;
        let out = kernels::binary_broadcast(self.data(a), &asx, self.data(b), &bsx, &out_shape, f);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(out_shape, out)?, make(a, b), needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn scale(&mut self, x: TensorId, c: R) -> TensorId {
        let shape = self.shape(x).to_vec();
        let data: Vec<R> = self.data(x).iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale { x, c }, needs)
    }

    pub fn add_const(&mut self, x: TensorId, c: R) -> TensorId {
        let shape = self.shape(x).to_vec();
        let data: Vec<R> = self.data(x).iter().map(|&v| v + c).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data).unwrap(), Op::AddConst { x }, needs)
    }

    // ── Linear algebra / shape ──────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (asx, bsx) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asx.len() != 2 || bsx.len() != 2 || asx[1] != bsx[0] {
            return Err(Error::shape(format!("matmul mismatch: {asx:?} x {bsx:?}")));
        }
        let (m, k, n) = (asx[0], asx[1], bsx[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, needs))
    }

    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape(format!("transpose needs rank 2, got {sx:?}")));
        }
        let out = kernels::transpose(self.data(x), sx[0], sx[1]);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![sx[1], sx[0]], out)?, Op::Transpose { x }, needs))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let t = self.nodes[x.0].value.clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// out[i] = x[idx[i]]; repeated indices accumulate in the adjoint.
    pub fn gather(&mut self, x: TensorId, idx: Vec<usize>, out_shape: Vec<usize>) -> Result<TensorId> {
        let n: usize = out_shape.iter().product();
        if n != idx.len() {
            return Err(Error::shape(format!(
                "gather: {} indices for shape {out_shape:?}",
                idx.len()
            )));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(n);
        for &i in &idx {
            if i >= src.len() {
                return Err(Error::shape(format!("gather index {i} out of bounds ({})", src.len())));
            }
            out.push(src[i]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Gather { x, idx: Rc::new(idx) }, needs))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors".to_string()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(format!("concat mismatch: {s:?} vs {first:?}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![R::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let len = self.shape(p)[axis];
            let data = self.data(p);
            for o in 0..outer {
                let src = &data[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    /// Zero-pad the spatial dims of a [C,H,W] tensor.
    pub fn pad_hw(
        &mut self,
        x: TensorId,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("pad_hw needs rank 3, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (nh, nw) = (h + top + bottom, w + left + right);
        let data = self.data(x);
        let mut out = vec![R::zero(); c * nh * nw];
        for ic in 0..c {
            for iy in 0..h {
                let src = &data[(ic * h + iy) * w..(ic * h + iy + 1) * w];
                let dst = (ic * nh + iy + top) * nw + left;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![c, nh, nw], out)?,
            Op::PadHw { x, top, bottom, left, right },
            needs,
        ))
    }

    // ── Convolution family ──────────────────────────────────────────

    pub fn conv2d(&mut self, x: TensorId, k: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[2] != ks[3] || xs[0] != ks[1] {
            return Err(Error::shape(format!("conv2d mismatch: input {xs:?}, kernel {ks:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (n, ksz) = (ks[0], ks[2]);
        let oh = kernels::conv_extent(h, ksz, stride, pad)?;
        let ow = kernels::conv_extent(w, ksz, stride, pad)?;
        let out = kernels::conv2d(self.data(x), self.data(k), c, h, w, n, ksz, stride, pad, oh, ow);
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(Tensor::new(vec![n, oh, ow], out)?, Op::Conv2d { x, k, stride, pad }, needs))
    }

    pub fn unfold(&mut self, x: TensorId, k: usize, stride: usize, pad: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(format!("unfold needs rank 3, got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let oh = kernels::conv_extent(h, k, stride, pad)?;
        let ow = kernels::conv_extent(w, k, stride, pad)?;
        let out = kernels::unfold(self.data(x), c, h, w, k, stride, pad, oh, ow);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![k * k * c, oh * ow], out)?,
            Op::Unfold { x, k, stride, pad },
            needs,
        ))
    }

    pub fn maxpool2d(&mut self, x: TensorId, k: usize, stride: usize, pad: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(format!("maxpool2d needs rank 3, got {xs:?}")));
        }
        if pad >= k {
            return Err(Error::config(format!("maxpool2d pad {pad} must be < window {k}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let oh = kernels::conv_extent(h, k, stride, pad)?;
        let ow = kernels::conv_extent(w, k, stride, pad)?;
        let (out, argmax) = kernels::maxpool2d(self.data(x), c, h, w, k, stride, pad, oh, ow);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::MaxPool2d { x, argmax }, needs))
    }

    // ── Pooling reductions ──────────────────────────────────────────

    /// Global pooling of a [C,H,W] map: spatial axis yields [C,1,1], channel
    /// axis yields [1,H,W]. Max routes its gradient to the first argmax.
    pub fn pool_global(&mut self, x: TensorId, mode: PoolMode, axis: PoolAxis) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(format!("pool_global needs rank 3, got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = h * w;
        let data = self.data(x);
        let (out_shape, out, argmax) = match axis {
            PoolAxis::Spatial => {
                let mut out = Vec::with_capacity(c);
                let mut arg = Vec::new();
                for ic in 0..c {
                    let block = &data[ic * hw..(ic + 1) * hw];
                    match mode {
                        PoolMode::Avg => {
                            let s = block.iter().fold(R::zero(), |a, &v| a + v);
                            out.push(s / r(hw as f64));
                        }
                        PoolMode::Max => {
                            let (mut bi, mut bv) = (0usize, block[0]);
                            for (i, &v) in block.iter().enumerate().skip(1) {
                                if v > bv {
                                    bv = v;
                                    bi = i;
                                }
                            }
                            out.push(bv);
                            arg.push(ic * hw + bi);
                        }
                    }
                }
                (vec![c, 1, 1], out, arg)
            }
            PoolAxis::Channel => {
                let mut out = Vec::with_capacity(hw);
                let mut arg = Vec::new();
                for p in 0..hw {
                    match mode {
                        PoolMode::Avg => {
                            let mut s = R::zero();
                            for ic in 0..c {
                                s += data[ic * hw + p];
                            }
                            out.push(s / r(c as f64));
                        }
                        PoolMode::Max => {
                            let (mut bi, mut bv) = (0usize, data[p]);
                            for ic in 1..c {
                                let v = data[ic * hw + p];
                                if v > bv {
                                    bv = v;
                                    bi = ic;
                                }
                            }
                            out.push(bv);
                            arg.push(bi * hw + p);
                        }
                    }
                }
                (vec![1, h, w], out, arg)
            }
        };
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::PoolGlobal { x, axis, mode, argmax }, needs))
    }

    /// Reduce the P columns of a [D,P] map into `n_groups` contiguous groups,
    /// as equal as possible (the first P mod n groups take one extra column).
    pub fn group_pool(&mut self, x: TensorId, n_groups: usize, mode: PoolMode) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape(format!("group_pool needs rank 2, got {xs:?}")));
        }
        let (d, p) = (xs[0], xs[1]);
        if p < n_groups || n_groups == 0 {
            return Err(Error::shape(format!(
                "fewer patches than output channels: {p} patches, {n_groups} groups"
            )));
        }
        let data = self.data(x);
        let mut out = vec![R::zero(); d * n_groups];
        let mut argmax = Vec::new();
        for row in 0..d {
            for (g, (start, end)) in group_bounds(p, n_groups).enumerate() {
                let o = row * n_groups + g;
                match mode {
                    PoolMode::Avg => {
                        let mut s = R::zero();
                        for col in start..end {
                            s += data[row * p + col];
                        }
                        out[o] = s / r((end - start) as f64);
                    }
                    PoolMode::Max => {
                        let (mut bi, mut bv) = (start, data[row * p + start]);
                        for col in start + 1..end {
                            let v = data[row * p + col];
                            if v > bv {
                                bv = v;
                                bi = col;
                            }
                        }
                        out[o] = bv;
                        argmax.push(row * p + bi);
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![d, n_groups], out)?,
            Op::GroupPool { x, n_groups, mode, argmax },
            needs,
        ))
    }

    // ── Nonlinearities / normalization ──────────────────────────────

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {xs:?}")));
        }
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let outer: usize = xs[..axis].iter().product();
        let data = self.data(x);
        let mut out = vec![R::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = R::neg_infinity();
                for j in 0..len {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut sum = R::zero();
                for j in 0..len {
                    let e = (data[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(xs, out)?, Op::Softmax { x, axis }, needs))
    }

    pub fn pointwise(&mut self, x: TensorId, f: Activation) -> TensorId {
        let shape = self.shape(x).to_vec();
        let data: Vec<R> = self
            .data(x)
            .iter()
            .map(|&v| match f {
                Activation::Sigmoid => v.sigmoid(),
                Activation::Silu => v * v.sigmoid(),
                Activation::Relu => v.max(R::zero()),
            })
            .collect();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data).unwrap(), Op::Pointwise { x, f }, needs)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.pointwise(x, Activation::Sigmoid)
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        self.pointwise(x, Activation::Silu)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.pointwise(x, Activation::Relu)
    }

    /// Per-sample normalization over the last axis, then affine.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: R,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::shape("layer_norm on rank-0".to_string()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm affine shapes {:?}/{:?} do not match feature width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.data(x).len() / d;
        let data = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![R::zero(); data.len()];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for row in 0..rows {
            let xr = &data[row * d..(row + 1) * d];
            let mean = xr.iter().fold(R::zero(), |a, &v| a + v) / r(d as f64);
            let var = xr.iter().fold(R::zero(), |a, &v| a + (v - mean) * (v - mean)) / r(d as f64);
            let inv_std = R::one() / (var + eps).sqrt();
            for j in 0..d {
                out[row * d + j] = (xr[j] - mean) * inv_std * g[j] + b[j];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::LayerNorm { x, gamma, beta, mean: means, inv_std: inv_stds },
            needs,
        ))
    }

    /// Train-mode batch normalization over [C,H,W] (implicit batch of one) or
    /// [B,C,H,W]. Normalizes per channel over all remaining elements and
    /// returns the batch statistics for running-stat updates.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: R,
    ) -> Result<(TensorId, BatchStats<R>)> {
        let xs = self.shape(x).to_vec();
        let (bsz, c, hw) = match xs.len() {
            3 => (1usize, xs[0], xs[1] * xs[2]),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => return Err(Error::shape(format!("batch_norm needs rank 3 or 4, got {xs:?}"))),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!("batch_norm affine mismatch for {c} channels")));
        }
        let m = bsz * hw;
        if m <= 1 {
            return Err(Error::config(
                "degenerate batch: batch_norm needs more than one element per channel".to_string(),
            ));
        }
        let data = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut mean = vec![R::zero(); c];
        let mut var = vec![R::zero(); c];
        for ib in 0..bsz {
            for ic in 0..c {
                let block = &data[(ib * c + ic) * hw..(ib * c + ic + 1) * hw];
                mean[ic] += block.iter().fold(R::zero(), |a, &v| a + v);
            }
        }
        for v in mean.iter_mut() {
            *v /= r(m as f64);
        }
        for ib in 0..bsz {
            for ic in 0..c {
                let block = &data[(ib * c + ic) * hw..(ib * c + ic + 1) * hw];
                var[ic] += block.iter().fold(R::zero(), |a, &v| a + (v - mean[ic]) * (v - mean[ic]));
            }
        }
        for v in var.iter_mut() {
            *v /= r(m as f64);
        }
        let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let mut out = vec![R::zero(); data.len()];
        for ib in 0..bsz {
            for ic in 0..c {
                let base = (ib * c + ic) * hw;
                for p in 0..hw {
                    out[base + p] = (data[base + p] - mean[ic]) * inv_std[ic] * g[ic] + b[ic];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = BatchStats { mean: mean.clone(), var: var.clone() };
        let id = self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm { x, gamma, beta, mean, inv_std },
            needs,
        );
        Ok((id, stats))
    }

    // ── Reductions / losses ─────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s = self.data(x).iter().fold(R::zero(), |a, &v| a + v);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x);
        let s = data.iter().fold(R::zero(), |a, &v| a + v) / r(data.len() as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, needs)
    }

    /// Mean binary cross-entropy of activations `a` in (0,1) against fixed
    /// targets `y` in [0,1]; activations are clamped to [eps, 1-eps].
    pub fn bce(&mut self, a: TensorId, y: Vec<R>) -> Result<TensorId> {
        let data = self.data(a);
        if data.len() != y.len() {
            return Err(Error::shape(format!(
                "bce: {} activations vs {} targets",
                data.len(),
                y.len()
            )));
        }
        let eps = r::<R>(BCE_EPS);
        let one = R::one();
        let mut total = R::zero();
        for (&av, &yv) in data.iter().zip(&y) {
            let ac = av.max(eps).min(one - eps);
            total += yv * ac.ln() + (one - yv) * (one - ac).ln();
        }
        let loss = -total / r(data.len() as f64);
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { a, y: Rc::new(y) }, needs))
    }

    /// Mean of 1 - CIoU over the rows of pred [M,4] against fixed boxes
    /// gt (flat M*4), all in (cx, cy, w, h) form.
    pub fn ciou_loss(&mut self, pred: TensorId, gt: Vec<R>) -> Result<TensorId> {
        let ps = self.shape(pred).to_vec();
        if ps.len() != 2 || ps[1] != 4 || ps[0] * 4 != gt.len() {
            return Err(Error::shape(format!(
                "ciou_loss: pred {ps:?} vs {} ground-truth values",
                gt.len()
            )));
        }
        let m = ps[0];
        let data = self.data(pred);
        let mut total = R::zero();
        for i in 0..m {
            let p: [R; 4] = data[i * 4..i * 4 + 4].try_into().unwrap();
            let g: [R; 4] = gt[i * 4..i * 4 + 4].try_into().unwrap();
            total += R::one() - geometry::ciou(p, g);
        }
        let loss = total / r(m as f64);
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss), Op::CiouLoss { pred, gt: Rc::new(gt) }, needs))
    }

    /// Binary cross-entropy where the targets are tape tensors too, so the
    /// gradient also flows into the target path.
    pub fn bce_pair(&mut self, a: TensorId, y: TensorId) -> Result<TensorId> {
        let (ad, yd) = (self.data(a), self.data(y));
        if ad.len() != yd.len() {
            return Err(Error::shape(format!(
                "bce_pair: {} activations vs {} targets",
                ad.len(),
                yd.len()
            )));
        }
        let eps = r::<R>(BCE_EPS);
        let one = R::one();
        let mut total = R::zero();
        for (&av, &yv) in ad.iter().zip(yd) {
            let ac = av.max(eps).min(one - eps);
            total += yv * ac.ln() + (one - yv) * (one - ac).ln();
        }
        let loss = -total / r(ad.len() as f64);
        let needs = self.needs(a) || self.needs(y);
        Ok(self.push(Tensor::scalar(loss), Op::BcePair { a, y }, needs))
    }

    /// Per-row CIoU of pred [M,4] against fixed boxes, as an [M] tensor.
    pub fn ciou_values(&mut self, pred: TensorId, gt: Vec<R>) -> Result<TensorId> {
        let ps = self.shape(pred).to_vec();
        if ps.len() != 2 || ps[1] != 4 || ps[0] * 4 != gt.len() {
            return Err(Error::shape(format!(
                "ciou_values: pred {ps:?} vs {} ground-truth values",
                gt.len()
            )));
        }
        let m = ps[0];
        let data = self.data(pred);
        let mut vals = Vec::with_capacity(m);
        for i in 0..m {
            let p: [R; 4] = data[i * 4..i * 4 + 4].try_into().unwrap();
            let g: [R; 4] = gt[i * 4..i * 4 + 4].try_into().unwrap();
            vals.push(geometry::ciou(p, g));
        }
        let needs = self.needs(pred);
        Ok(self.push(Tensor::new(vec![m], vals)?, Op::CiouValues { pred, gt: Rc::new(gt) }, needs))
    }

    /// Clamp to [0,1]; gradient passes through strictly inside the interval.
    pub fn clamp01(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let data: Vec<R> = self.data(x).iter().map(|&v| v.max(R::zero()).min(R::one())).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data).unwrap(), Op::Clamp01 { x }, needs)
    }

    /// Scatter a vector into a zero vector of length `out_len`; adjoint of
    /// gather. Repeated indices accumulate.
    pub fn scatter_add(&mut self, src: TensorId, idx: Vec<usize>, out_len: usize) -> Result<TensorId> {
        let data = self.data(src);
        if data.len() != idx.len() {
            return Err(Error::shape(format!(
                "scatter_add: {} values for {} indices",
                data.len(),
                idx.len()
            )));
        }
        let mut out = vec![R::zero(); out_len];
        for (&v, &i) in data.iter().zip(&idx) {
            if i >= out_len {
                return Err(Error::shape(format!("scatter index {i} out of bounds ({out_len})")));
            }
            out[i] += v;
        }
        let needs = self.needs(src);
        Ok(self.push(
            Tensor::new(vec![out_len], out)?,
            Op::ScatterAdd { src, idx: Rc::new(idx), out_len },
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-accumulate gradients from a scalar loss. Single-shot.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.done {
            return Err(Error::Tape("backward already ran on this tape".to_string()));
        }
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.needs {
            return Err(Error::Tape(
                "loss is detached from every gradient-tracked tensor".to_string(),
            ));
        }
        self.done = true;
        self.grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let Some(d) = self.grads[i].take() else { continue };
            self.backward_op(i, &d);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(d);
            }
        }
        Ok(())
    }

    fn acc(&mut self, id: TensorId, g: Vec<R>) {
        if !self.nodes[id.0].needs {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backward_op(&mut self, i: usize, d: &[R]) {
        // The op is read via raw pointer-free re-borrow: clone cheap ids out.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = self.shape(TensorId(i)).to_vec();
                let ga = kernels::reduce_to_shape(d, &out_shape, self.shape(a));
                let gb = kernels::reduce_to_shape(d, &out_shape, self.shape(b));
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = self.shape(TensorId(i)).to_vec();
                let ga = kernels::reduce_to_shape(d, &out_shape, self.shape(a));
                let neg: Vec<R> = d.iter().map(|&v| -v).collect();
                let gb = kernels::reduce_to_shape(&neg, &out_shape, self.shape(b));
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = self.shape(TensorId(i)).to_vec();
                let (asx, bsx) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let da = kernels::binary_broadcast(d, &out_shape, self.data(b), &bsx, &out_shape, |g, bv| g * bv);
                let db = kernels::binary_broadcast(d, &out_shape, self.data(a), &asx, &out_shape, |g, av| g * av);
                let ga = kernels::reduce_to_shape(&da, &out_shape, &asx);
                let gb = kernels::reduce_to_shape(&db, &out_shape, &bsx);
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.acc(x, d.iter().map(|&v| v * c).collect());
            }
            Op::AddConst { x } => {
                let x = *x;
                self.acc(x, d.to_vec());
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].needs {
                    let bt = kernels::transpose(self.data(b), k, n);
                    let ga = kernels::matmul(d, &bt, m, n, k);
                    self.acc(a, ga);
                }
                if self.nodes[b.0].needs {
                    let at = kernels::transpose(self.data(a), m, k);
                    let gb = kernels::matmul(&at, d, k, m, n);
                    self.acc(b, gb);
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                self.acc(x, kernels::transpose(d, n, m));
            }
            Op::Reshape { x } => {
                let x = *x;
                self.acc(x, d.to_vec());
            }
            Op::Gather { x, idx } => {
                let x = *x;
                let idx = Rc::clone(idx);
                let mut g = vec![R::zero(); self.data(x).len()];
                for (o, &src) in idx.iter().enumerate() {
                    g[src] += d[o];
                }
                self.acc(x, g);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = self.shape(TensorId(i)).to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0usize;
                for p in parts {
                    let len = self.shape(p)[axis];
                    let mut g = vec![R::zero(); outer * len * inner];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        g[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&d[src..src + len * inner]);
                    }
                    offset += len;
                    self.acc(p, g);
                }
            }
            Op::PadHw { x, top, left, .. } => {
                let (x, top, left) = (*x, *top, *left);
                let xs = self.shape(x).to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let out_shape = self.shape(TensorId(i)).to_vec();
                let (nh, nw) = (out_shape[1], out_shape[2]);
                let mut g = vec![R::zero(); c * h * w];
                for ic in 0..c {
                    for iy in 0..h {
                        let src = (ic * nh + iy + top) * nw + left;
                        g[(ic * h + iy) * w..(ic * h + iy + 1) * w]
                            .copy_from_slice(&d[src..src + w]);
                    }
                }
                self.acc(x, g);
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                let xs = self.shape(x).to_vec();
                let ks = self.shape(k).to_vec();
                let os = self.shape(TensorId(i)).to_vec();
                let (dx, dk) = kernels::conv2d_backward(
                    d,
                    self.data(x),
                    self.data(k),
                    xs[0],
                    xs[1],
                    xs[2],
                    ks[0],
                    ks[2],
                    stride,
                    pad,
                    os[1],
                    os[2],
                );
                self.acc(x, dx);
                self.acc(k, dk);
            }
            Op::Unfold { x, k, stride, pad } => {
                let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                let xs = self.shape(x).to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let oh = kernels::conv_extent(h, k, stride, pad).unwrap();
                let ow = kernels::conv_extent(w, k, stride, pad).unwrap();
                let g = kernels::unfold_backward(d, c, h, w, k, stride, pad, oh, ow);
                self.acc(x, g);
            }
            Op::MaxPool2d { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let mut g = vec![R::zero(); self.data(x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        g[src] += d[o];
                    }
                }
                self.acc(x, g);
            }
            Op::PoolGlobal { x, axis, mode, argmax } => {
                let (x, axis, mode) = (*x, *axis, *mode);
                let argmax = argmax.clone();
                let xs = self.shape(x).to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let hw = h * w;
                let mut g = vec![R::zero(); c * hw];
                match (axis, mode) {
                    (PoolAxis::Spatial, PoolMode::Avg) => {
                        let inv = r::<R>(1.0 / hw as f64);
                        for ic in 0..c {
                            for p in 0..hw {
                                g[ic * hw + p] = d[ic] * inv;
                            }
                        }
                    }
                    (PoolAxis::Spatial, PoolMode::Max) => {
                        for (ic, &src) in argmax.iter().enumerate() {
                            g[src] += d[ic];
                        }
                    }
                    (PoolAxis::Channel, PoolMode::Avg) => {
                        let inv = r::<R>(1.0 / c as f64);
                        for ic in 0..c {
                            for p in 0..hw {
                                g[ic * hw + p] = d[p] * inv;
                            }
                        }
                    }
                    (PoolAxis::Channel, PoolMode::Max) => {
                        for (p, &src) in argmax.iter().enumerate() {
                            g[src] += d[p];
                        }
                    }
                }
                self.acc(x, g);
            }
            Op::GroupPool { x, n_groups, mode, argmax } => {
                let (x, n_groups, mode) = (*x, *n_groups, *mode);
                let argmax = argmax.clone();
                let xs = self.shape(x).to_vec();
                let (rows, p) = (xs[0], xs[1]);
                let mut g = vec![R::zero(); rows * p];
                match mode {
                    PoolMode::Avg => {
                        for row in 0..rows {
                            for (gi, (start, end)) in group_bounds(p, n_groups).enumerate() {
                                let share = d[row * n_groups + gi] / r((end - start) as f64);
                                for col in start..end {
                                    g[row * p + col] = share;
                                }
                            }
                        }
                    }
                    PoolMode::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            g[src] += d[o];
                        }
                    }
                }
                self.acc(x, g);
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let xs = self.shape(x).to_vec();
                let len = xs[axis];
                let inner: usize = xs[axis + 1..].iter().product();
                let outer: usize = xs[..axis].iter().product();
                let y = self.data(TensorId(i));
                let mut g = vec![R::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut dot = R::zero();
                        for j in 0..len {
                            dot += d[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let yi = y[base + j * inner];
                            g[base + j * inner] = yi * (d[base + j * inner] - dot);
                        }
                    }
                }
                self.acc(x, g);
            }
            Op::Pointwise { x, f } => {
                let (x, f) = (*x, *f);
                let xv = self.data(x);
                let g: Vec<R> = match f {
                    Activation::Sigmoid => {
                        let y = self.data(TensorId(i));
                        d.iter().zip(y).map(|(&dv, &yv)| dv * yv * (R::one() - yv)).collect()
                    }
                    Activation::Silu => d
                        .iter()
                        .zip(xv)
                        .map(|(&dv, &v)| {
                            let s = v.sigmoid();
                            dv * (s + v * s * (R::one() - s))
                        })
                        .collect(),
                    Activation::Relu => d
                        .iter()
                        .zip(xv)
                        .map(|(&dv, &v)| if v > R::zero() { dv } else { R::zero() })
                        .collect(),
                };
                self.acc(x, g);
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let dd = self.shape(gamma)[0];
                let rows = self.data(x).len() / dd;
                let xv = self.data(x);
                let gv = self.data(gamma);
                let inv_d = r::<R>(1.0 / dd as f64);
                let mut gx = vec![R::zero(); xv.len()];
                let mut ggamma = vec![R::zero(); dd];
                let mut gbeta = vec![R::zero(); dd];
                for row in 0..rows {
                    let base = row * dd;
                    let mut sum_dxhat = R::zero();
                    let mut sum_dxhat_xhat = R::zero();
                    for j in 0..dd {
                        let xhat = (xv[base + j] - mean[row]) * inv_std[row];
                        let dxhat = d[base + j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        ggamma[j] += d[base + j] * xhat;
                        gbeta[j] += d[base + j];
                    }
                    for j in 0..dd {
                        let xhat = (xv[base + j] - mean[row]) * inv_std[row];
                        let dxhat = d[base + j] * gv[j];
                        gx[base + j] = inv_std[row]
                            * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
                    }
                }
                self.acc(x, gx);
                self.acc(gamma, ggamma);
                self.acc(beta, gbeta);
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let xs = self.shape(x).to_vec();
                let (bsz, c, hw) = match xs.len() {
                    3 => (1usize, xs[0], xs[1] * xs[2]),
                    _ => (xs[0], xs[1], xs[2] * xs[3]),
                };
                let m = r::<R>((bsz * hw) as f64);
                let xv = self.data(x);
                let gv = self.data(gamma);
                let mut sum_d = vec![R::zero(); c];
                let mut sum_d_xhat = vec![R::zero(); c];
                for ib in 0..bsz {
                    for ic in 0..c {
                        let base = (ib * c + ic) * hw;
                        for p in 0..hw {
                            let xhat = (xv[base + p] - mean[ic]) * inv_std[ic];
                            sum_d[ic] += d[base + p];
                            sum_d_xhat[ic] += d[base + p] * xhat;
                        }
                    }
                }
                let mut gx = vec![R::zero(); xv.len()];
                for ib in 0..bsz {
                    for ic in 0..c {
                        let base = (ib * c + ic) * hw;
                        for p in 0..hw {
                            let xhat = (xv[base + p] - mean[ic]) * inv_std[ic];
                            gx[base + p] = gv[ic]
                                * inv_std[ic]
                                * (d[base + p] - sum_d[ic] / m - xhat * sum_d_xhat[ic] / m);
                        }
                    }
                }
                self.acc(x, gx);
                self.acc(gamma, sum_d_xhat);
                self.acc(beta, sum_d);
            }
            Op::SumAll { x } => {
                let x = *x;
                let n = self.data(x).len();
                self.acc(x, vec![d[0]; n]);
            }
            Op::MeanAll { x } => {
                let x = *x;
                let n = self.data(x).len();
                let share = d[0] / r(n as f64);
                self.acc(x, vec![share; n]);
            }
            Op::Bce { a, y } => {
                let a = *a;
                let y = Rc::clone(y);
                let av = self.data(a);
                let n = av.len();
                let eps = r::<R>(BCE_EPS);
                let one = R::one();
                let scale = d[0] / r(n as f64);
                let g: Vec<R> = av
                    .iter()
                    .zip(y.iter())
                    .map(|(&avv, &yv)| {
                        let ac = avv.max(eps).min(one - eps);
                        -scale * (yv / ac - (one - yv) / (one - ac))
                    })
                    .collect();
                self.acc(a, g);
            }
            Op::BcePair { a, y } => {
                let (a, y) = (*a, *y);
                let av = self.data(a).to_vec();
                let yv = self.data(y).to_vec();
                let n = av.len();
                let eps = r::<R>(BCE_EPS);
                let one = R::one();
                let scale = d[0] / r(n as f64);
                if self.nodes[a.0].needs {
                    let g: Vec<R> = av
                        .iter()
                        .zip(&yv)
                        .map(|(&avv, &t)| {
                            let ac = avv.max(eps).min(one - eps);
                            -scale * (t / ac - (one - t) / (one - ac))
                        })
                        .collect();
                    self.acc(a, g);
                }
                if self.nodes[y.0].needs {
                    let g: Vec<R> = av
                        .iter()
                        .map(|&avv| {
                            let ac = avv.max(eps).min(one - eps);
                            -scale * (ac.ln() - (one - ac).ln())
                        })
                        .collect();
                    self.acc(y, g);
                }
            }
            Op::CiouValues { pred, gt } => {
                let pred = *pred;
                let gt = Rc::clone(gt);
                let pv = self.data(pred);
                let m = pv.len() / 4;
                let mut g = vec![R::zero(); pv.len()];
                for row in 0..m {
                    let p: [R; 4] = pv[row * 4..row * 4 + 4].try_into().unwrap();
                    let gtb: [R; 4] = gt[row * 4..row * 4 + 4].try_into().unwrap();
                    let dc = geometry::ciou_grad_pred(p, gtb);
                    for j in 0..4 {
                        g[row * 4 + j] = d[row] * dc[j];
                    }
                }
                self.acc(pred, g);
            }
            Op::Clamp01 { x } => {
                let x = *x;
                let xv = self.data(x);
                let g: Vec<R> = d
                    .iter()
                    .zip(xv)
                    .map(|(&dv, &v)| if v > R::zero() && v < R::one() { dv } else { R::zero() })
                    .collect();
                self.acc(x, g);
            }
            Op::ScatterAdd { src, idx, .. } => {
                let src = *src;
                let idx = Rc::clone(idx);
                let g: Vec<R> = idx.iter().map(|&i| d[i]).collect();
                self.acc(src, g);
            }
            Op::CiouLoss { pred, gt } => {
                let pred = *pred;
                let gt = Rc::clone(gt);
                let pv = self.data(pred);
                let m = pv.len() / 4;
                let scale = d[0] / r(m as f64);
                let mut g = vec![R::zero(); pv.len()];
                for row in 0..m {
                    let p: [R; 4] = pv[row * 4..row * 4 + 4].try_into().unwrap();
                    let gtb: [R; 4] = gt[row * 4..row * 4 + 4].try_into().unwrap();
                    // d(1 - ciou)/dpred = -d(ciou)/dpred
                    let dc = geometry::ciou_grad_pred(p, gtb);
                    for j in 0..4 {
                        g[row * 4 + j] = -scale * dc[j];
                    }
                }
                self.acc(pred, g);
            }
        }
    }
}

/// Contiguous nearly-equal split of `p` columns into `n` groups; the first
/// `p % n` groups take one extra column.
pub fn group_bounds(p: usize, n: usize) -> impl Iterator<Item = (usize, usize)> {
    let base = p / n;
    let rem = p % n;
    (0..n).scan(0usize, move |start, g| {
        let size = base + usize::from(g < rem);
        let s = *start;
        *start += size;
        Some((s, s + size))
    })
}

/// Row-major flat index helper for building gather maps.
pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    strides(shape).iter().zip(idx).map(|(s, i)| s * i).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, weighted_sum, TOLERANCE};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
    }

    /// Random tensor whose values are pairwise separated by much more than
    /// the finite-difference step, so argmax routing cannot flip under
    /// perturbation: a shuffled, centered arithmetic progression.
    fn randsep(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut vals: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.025 * n as f64).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            vals.swap(i, j);
        }
        Tensor::new(shape.to_vec(), vals).unwrap()
    }

    fn check_op(
        name: &str,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Tape<f64>, &[TensorId]) -> crate::error::Result<TensorId>,
    ) {
        let res = gradcheck::check_op(name, inputs, f);
        assert!(res.passed(), "{}: max rel err {} > {}", res.name, res.max_rel_err, TOLERANCE);
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::<f64>::new();
        let i2 = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.matmul(i2, a).unwrap();
        assert_eq!(t.data(y), &[1.0, 2.0, 3.0, 4.0]);

        let row = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let col = t.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let prod = t.matmul(row, col).unwrap();
        assert_eq!(t.data(prod), &[11.0]);

        let err = t.matmul(col, a).map(|_| ()).unwrap_err().to_string();
        assert!(err.contains("[2, 1]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transposed() {
        // loss = sum(A x B) => dA = ones * B^T
        let mut t = Tape::<f64>::new();
        let a = t.input(
            Tensor::new(vec![2, 3], vec![0.3, -0.4, 0.8, 1.2, 0.1, -0.7]).unwrap().with_grad(),
        );
        let b = t.constant(Tensor::new(vec![3, 2], vec![2.0, -1.0, 0.5, 3.0, 1.5, 0.25]).unwrap());
        let y = t.matmul(a, b).unwrap();
        let loss = t.sum_all(y);
        t.backward(loss).unwrap();
        let g = t.grad(a).unwrap();
        // row sums of B: [1.0, 3.5, 1.75] repeated per row of A
        for row in 0..2 {
            assert!((g[row * 3] - 1.0).abs() < 1e-12);
            assert!((g[row * 3 + 1] - 3.5).abs() < 1e-12);
            assert!((g[row * 3 + 2] - 1.75).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        assert!((t.data(y)[0] - 0.5).abs() < 1e-12);

        let x2 = t.constant(Tensor::new(vec![2], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap());
        let y2 = t.softmax(x2, 0).unwrap();
        assert!((t.data(y2)[0] - 0.25).abs() < 1e-12);
        assert!((t.data(y2)[1] - 0.75).abs() < 1e-12);

        // -100 offset slot carries weight below 1e-20
        let x3 = t.constant(Tensor::new(vec![3], vec![0.0, -100.0, 1.0]).unwrap());
        let y3 = t.softmax(x3, 0).unwrap();
        assert!(t.data(y3)[1] < 1e-20);

        // shift invariance and normalization
        let x4 = t.constant(Tensor::new(vec![4], vec![0.3, -0.2, 1.4, 0.9]).unwrap());
        let y4 = t.softmax(x4, 0).unwrap();
        let x5 = t.constant(Tensor::new(vec![4], vec![100.3, 99.8, 101.4, 100.9]).unwrap());
        let y5 = t.softmax(x5, 0).unwrap();
        let s: f64 = t.data(y4).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        for (a, b) in t.data(y4).iter().zip(t.data(y5)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pointwise_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::new(vec![1], vec![0.0]).unwrap().with_grad());
        let s = t.sigmoid(x);
        assert!((t.data(s)[0] - 0.5).abs() < 1e-12);
        let loss = t.sum_all(s);
        t.backward(loss).unwrap();
        assert!((t.grad(x).unwrap()[0] - 0.25).abs() < 1e-6);

        let mut t2 = Tape::<f64>::new();
        let x2 = t2.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y2 = t2.silu(x2);
        assert_eq!(t2.data(y2)[0], 0.0);
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::<f64>::new();
        let g = t.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let b = t.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let x = t.constant(Tensor::new(vec![1, 3], vec![4.0, 4.0, 4.0]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.data(y).iter().all(|v| v.abs() < 1e-2));

        let g2 = t.constant(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
        let b2 = t.constant(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
        let x2 = t.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let y2 = t.layer_norm(x2, g2, b2, 1e-12).unwrap();
        assert!((t.data(y2)[0] + 1.0).abs() < 1e-5);
        assert!((t.data(y2)[1] - 1.0).abs() < 1e-5);

        // batch independence: one row normalized alone equals the same row
        // normalized inside a batch
        let x3 = t.constant(Tensor::new(vec![2, 2], vec![1.0, 3.0, -2.0, 7.0]).unwrap());
        let y3 = t.layer_norm(x3, g2, b2, 1e-12).unwrap();
        assert!((t.data(y3)[0] - t.data(y2)[0]).abs() < 1e-12);
        assert!((t.data(y3)[1] - t.data(y2)[1]).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_examples() {
        // train on channel values {0, 2} -> normalized {-1, 1}
        let mut t = Tape::<f64>::new();
        let g = t.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let b = t.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let x = t.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap());
        let (y, stats) = t.batch_norm(x, g, b, 1e-12).unwrap();
        assert!((t.data(y)[0] + 1.0).abs() < 1e-5);
        assert!((t.data(y)[1] - 1.0).abs() < 1e-5);
        assert!((stats.mean[0] - 1.0).abs() < 1e-12);

        // per-channel mean of train-mode output ~ 0
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x2 = t.constant(randt(&[3, 4, 4], &mut rng));
        let g3 = t.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let b3 = t.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let (y2, _) = t.batch_norm(x2, g3, b3, 1e-3).unwrap();
        for c in 0..3 {
            let m: f64 = t.data(y2)[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-5);
        }

        // degenerate batch errors out
        let x1 = t.constant(Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap());
        assert!(t.batch_norm(x1, g, b, 1e-3).is_err());
    }

    #[test]
    fn unfold_conv_shape_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::<f64>::new();
        // C=2,H=W=4,K=2,s=2 -> 8x4
        let x = t.constant(randt(&[2, 4, 4], &mut rng));
        let u = t.unfold(x, 2, 2, 0).unwrap();
        assert_eq!(t.shape(u), &[8, 4]);
        // one window when H=W=K
        let x2 = t.constant(randt(&[1, 3, 3], &mut rng));
        let u2 = t.unfold(x2, 3, 3, 0).unwrap();
        assert_eq!(t.shape(u2), &[9, 1]);
        assert_eq!(t.data(u2), t.data(x2));
        // stem shape: 3x160x160, 64 kernels of 6x6, s=2, p=2 -> 64x80x80
        let x3 = t.constant(Tensor::zeros(&[3, 160, 160]));
        let k3 = t.constant(Tensor::zeros(&[64, 3, 6, 6]));
        let y3 = t.conv2d(x3, k3, 2, 2).unwrap();
        assert_eq!(t.shape(y3), &[64, 80, 80]);
        // oversized kernel errors
        let k4 = t.constant(Tensor::zeros(&[1, 3, 7, 7]));
        let x4 = t.constant(Tensor::zeros(&[3, 4, 4]));
        assert!(t.conv2d(x4, k4, 1, 1).is_err());
    }

    #[test]
    fn im2col_equivalence_on_random_inputs() {
        // conv2d (direct loops) must match unfold + matmul (im2col route)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(c, h, w, n, k, s, p) in
            &[(2usize, 5usize, 6usize, 3usize, 3usize, 1usize, 1usize), (3, 8, 8, 4, 2, 2, 0), (1, 7, 5, 2, 3, 2, 1)]
        {
            let mut t = Tape::<f64>::new();
            let x = t.constant(randt(&[c, h, w], &mut rng));
            let kt = t.constant(randt(&[n, c, k, k], &mut rng));
            let direct = t.conv2d(x, kt, s, p).unwrap();
            let cols = t.unfold(x, k, s, p).unwrap();
            let kflat = t.reshape(kt, &[n, c * k * k]).unwrap();
            let viacols = t.matmul(kflat, cols).unwrap();
            let oh = t.shape(direct)[1];
            let ow = t.shape(direct)[2];
            let reshaped = t.reshape(viacols, &[n, oh, ow]).unwrap();
            for (a, b) in t.data(direct).iter().zip(t.data(reshaped)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn unfold_recovers_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::<f64>::new();
        let x = randt(&[2, 6, 6], &mut rng);
        let xid = t.constant(x.clone());
        let u = t.unfold(xid, 3, 3, 0).unwrap();
        // column for window (1,1) starts at pixel (3,3)
        let p = 4;
        let col: Vec<f64> = (0..18).map(|r| t.data(u)[r * p + 3]).collect();
        let mut expect = Vec::new();
        for c in 0..2 {
            for ki in 0..3 {
                for kj in 0..3 {
                    expect.push(x.data()[c * 36 + (3 + ki) * 6 + (3 + kj)]);
                }
            }
        }
        assert_eq!(col, expect);
    }

    #[test]
    fn pool_examples() {
        let mut t = Tape::<f64>::new();
        // constant map: avg == max == v on both axes
        let x = t.constant(Tensor::full(&[3, 2, 2], 2.5));
        for axis in [PoolAxis::Spatial, PoolAxis::Channel] {
            for mode in [PoolMode::Avg, PoolMode::Max] {
                let y = t.pool_global(x, mode, axis).unwrap();
                assert!(t.data(y).iter().all(|&v| (v - 2.5).abs() < 1e-12));
            }
        }
        // channel values {1,2,3,4} on one pixel
        let x2 = t.constant(Tensor::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mx = t.pool_global(x2, PoolMode::Max, PoolAxis::Channel).unwrap();
        let av = t.pool_global(x2, PoolMode::Avg, PoolAxis::Channel).unwrap();
        assert_eq!(t.data(mx), &[4.0]);
        assert_eq!(t.data(av), &[2.5]);
        // spatial avg of [1,2,3,4] -> 2.5
        let x3 = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let av3 = t.pool_global(x3, PoolMode::Avg, PoolAxis::Spatial).unwrap();
        assert_eq!(t.data(av3), &[2.5]);
    }

    #[test]
    fn group_pool_examples() {
        assert_eq!(group_bounds(5, 2).collect::<Vec<_>>(), vec![(0, 3), (3, 5)]);
        assert_eq!(group_bounds(8, 4).collect::<Vec<_>>(), vec![(0, 2), (2, 4), (4, 6), (6, 8)]);

        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![1, 3], vec![1.0, 5.0, 3.0]).unwrap());
        let mx = t.group_pool(x, 1, PoolMode::Max).unwrap();
        let av = t.group_pool(x, 1, PoolMode::Avg).unwrap();
        assert_eq!(t.data(mx), &[5.0]);
        assert_eq!(t.data(av), &[3.0]);

        let x2 = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.group_pool(x2, 4, PoolMode::Avg).map(|_| ()).unwrap_err().to_string();
        assert!(err.contains("fewer patches than output channels"), "{err}");
    }

    #[test]
    fn backward_error_paths() {
        // non-scalar loss
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(t.backward(x).is_err());

        // detached loss
        let mut t2 = Tape::<f64>::new();
        let c = t2.constant(Tensor::scalar(3.0));
        let y = t2.scale(c, 2.0);
        assert!(t2.backward(y).is_err());

        // double backward
        let mut t3 = Tape::<f64>::new();
        let x3 = t3.input(Tensor::scalar(2.0).with_grad());
        let y3 = t3.mul(x3, x3).unwrap();
        t3.backward(y3).unwrap();
        assert!((t3.grad(x3).unwrap()[0] - 4.0).abs() < 1e-12);
        assert!(t3.backward(y3).is_err());
    }

    #[test]
    fn backward_simple_examples() {
        // loss = sum(x) -> grad ones
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::new(vec![3], vec![5.0, -1.0, 2.0]).unwrap().with_grad());
        let loss = t.sum_all(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        // loss = sum(x^2) at [1,2] -> [2,4]
        let mut t2 = Tape::<f64>::new();
        let x2 = t2.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = t2.mul(x2, x2).unwrap();
        let loss2 = t2.sum_all(sq);
        t2.backward(loss2).unwrap();
        assert_eq!(t2.grad(x2).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn param_reuse_accumulates() {
        // y = p * x1 + p * x2 -> dp = x1 + x2
        let p = Param::new(Tensor::<f64>::scalar(3.0));
        let mut t = Tape::<f64>::new();
        let pid1 = t.param(&p);
        let pid2 = t.param(&p);
        assert_eq!(pid1, pid2);
        let x1 = t.constant(Tensor::scalar(2.0));
        let x2 = t.constant(Tensor::scalar(5.0));
        let a = t.mul(pid1, x1).unwrap();
        let b = t.mul(pid2, x2).unwrap();
        let y = t.add(a, b).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad_of(&p).unwrap(), &[7.0]);
    }

    // ── finite-difference checks for every primitive ────────────────

    #[test]
    fn fd_elementwise_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let a = randt(&[3, 4], &mut rng);
            let b = randt(&[4], &mut rng);
            check_op("add", vec![a.clone(), b.clone()], |t, ids| {
                let y = t.add(ids[0], ids[1])?;
                weighted_sum(t, y)
            });
            check_op("sub", vec![a.clone(), b.clone()], |t, ids| {
                let y = t.sub(ids[0], ids[1])?;
                weighted_sum(t, y)
            });
            check_op("mul", vec![a.clone(), b.clone()], |t, ids| {
                let y = t.mul(ids[0], ids[1])?;
                weighted_sum(t, y)
            });
            let _ = trial;
        }
    }

    #[test]
    fn fd_matmul_transpose_reshape_gather_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let a = randt(&[3, 4], &mut rng);
            let b = randt(&[4, 2], &mut rng);
            check_op("matmul", vec![a.clone(), b.clone()], |t, ids| {
                let y = t.matmul(ids[0], ids[1])?;
                weighted_sum(t, y)
            });
            check_op("transpose", vec![a.clone()], |t, ids| {
                let y = t.transpose2d(ids[0])?;
                weighted_sum(t, y)
            });
            check_op("reshape", vec![a.clone()], |t, ids| {
                let y = t.reshape(ids[0], &[2, 6])?;
                weighted_sum(t, y)
            });
            check_op("gather", vec![a.clone()], |t, ids| {
                let y = t.gather(ids[0], vec![0, 5, 5, 3, 11, 2], vec![6])?;
                weighted_sum(t, y)
            });
            check_op("concat", vec![a.clone(), randt(&[3, 2], &mut rng)], |t, ids| {
                let y = t.concat(&[ids[0], ids[1]], 1)?;
                weighted_sum(t, y)
            });
        }
    }

    #[test]
    fn fd_conv_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let x = randt(&[2, 6, 6], &mut rng);
            let k = randt(&[3, 2, 3, 3], &mut rng);
            check_op("conv2d", vec![x.clone(), k.clone()], |t, ids| {
                let y = t.conv2d(ids[0], ids[1], 2, 1)?;
                weighted_sum(t, y)
            });
            check_op("unfold", vec![x.clone()], |t, ids| {
                let y = t.unfold(ids[0], 2, 2, 0)?;
                weighted_sum(t, y)
            });
            check_op("pad_hw", vec![x.clone()], |t, ids| {
                let y = t.pad_hw(ids[0], 0, 2, 0, 1)?;
                weighted_sum(t, y)
            });
            check_op("maxpool2d", vec![randsep(&[2, 6, 6], &mut rng)], |t, ids| {
                let y = t.maxpool2d(ids[0], 3, 1, 1)?;
                weighted_sum(t, y)
            });
        }
    }

    #[test]
    fn fd_pools_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..5 {
            let x = randsep(&[3, 4, 4], &mut rng);
            for (name, mode, axis) in [
                ("pool_spatial_avg", PoolMode::Avg, PoolAxis::Spatial),
                ("pool_spatial_max", PoolMode::Max, PoolAxis::Spatial),
                ("pool_channel_avg", PoolMode::Avg, PoolAxis::Channel),
                ("pool_channel_max", PoolMode::Max, PoolAxis::Channel),
            ] {
                check_op(name, vec![x.clone()], move |t, ids| {
                    let y = t.pool_global(ids[0], mode, axis)?;
                    weighted_sum(t, y)
                });
            }
            let g = randsep(&[3, 7], &mut rng);
            check_op("group_pool_avg", vec![g.clone()], |t, ids| {
                let y = t.group_pool(ids[0], 3, PoolMode::Avg)?;
                weighted_sum(t, y)
            });
            check_op("group_pool_max", vec![g.clone()], |t, ids| {
                let y = t.group_pool(ids[0], 3, PoolMode::Max)?;
                weighted_sum(t, y)
            });
            check_op("mean_all", vec![x.clone()], |t, ids| Ok(t.mean_all(ids[0])));
        }
    }

    #[test]
    fn fd_activations_softmax_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let x = randt(&[2, 5], &mut rng);
            check_op("sigmoid", vec![x.clone()], |t, ids| {
                let y = t.sigmoid(ids[0]);
                weighted_sum(t, y)
            });
            check_op("silu", vec![x.clone()], |t, ids| {
                let y = t.silu(ids[0]);
                weighted_sum(t, y)
            });
            // keep relu inputs away from the kink
            let xr = Tensor::from_fn(&[2, 5], |_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            });
            check_op("relu", vec![xr], |t, ids| {
                let y = t.relu(ids[0]);
                weighted_sum(t, y)
            });
            check_op("softmax", vec![x.clone()], |t, ids| {
                let y = t.softmax(ids[0], 1)?;
                weighted_sum(t, y)
            });
            let g = randt(&[5], &mut rng);
            let b = randt(&[5], &mut rng);
            check_op("layer_norm", vec![x.clone(), g.clone(), b.clone()], |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                weighted_sum(t, y)
            });
            let xb = randt(&[3, 4, 4], &mut rng);
            let gb = randt(&[3], &mut rng);
            let bb = randt(&[3], &mut rng);
            check_op("batch_norm", vec![xb, gb, bb], |t, ids| {
                let (y, _) = t.batch_norm(ids[0], ids[1], ids[2], 1e-3)?;
                weighted_sum(t, y)
            });
        }
    }

    #[test]
    fn fd_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..5 {
            let logits = randt(&[8], &mut rng);
            let targets: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
            let tgt = targets.clone();
            check_op("bce", vec![logits.clone()], move |t, ids| {
                let a = t.sigmoid(ids[0]);
                t.bce(a, tgt.clone())
            });

            // keep every pred/gt corner pair separated so min/max branches
            // cannot flip inside the finite-difference stencil
            let sample_boxes = |rng: &mut ChaCha8Rng| loop {
                let p: Vec<f64> = (0..12)
                    .map(|j| match j % 4 {
                        0 | 1 => rng.gen_range(0.3..0.7),
                        _ => rng.gen_range(0.15..0.45),
                    })
                    .collect();
                let g: Vec<f64> = (0..12)
                    .map(|j| match j % 4 {
                        0 | 1 => rng.gen_range(0.3..0.7),
                        _ => rng.gen_range(0.15..0.45),
                    })
                    .collect();
                let mut ok = true;
                for row in 0..3 {
                    let corners = |b: &[f64]| {
                        [b[0] - b[2] / 2.0, b[0] + b[2] / 2.0, b[1] - b[3] / 2.0, b[1] + b[3] / 2.0]
                    };
                    let pc = corners(&p[row * 4..row * 4 + 4]);
                    let gc = corners(&g[row * 4..row * 4 + 4]);
                    for j in 0..4 {
                        if (pc[j] - gc[j]).abs() < 0.02 {
                            ok = false;
                        }
                    }
                }
                if ok {
                    return (p, g);
                }
            };
            let (pvals, gt) = sample_boxes(&mut rng);
            let pred = Tensor::new(vec![3, 4], pvals).unwrap();
            let gtc = gt.clone();
            check_op("ciou_loss", vec![pred], move |t, ids| t.ciou_loss(ids[0], gtc.clone()));
        }
    }

    #[test]
    fn bce_hand_values() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = t.bce(a, vec![1.0]).unwrap();
        assert!(t.data(y)[0].abs() < 1e-6);

        let a2 = t.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y2 = t.bce(a2, vec![1.0]).unwrap();
        assert!((t.data(y2)[0] - std::f64::consts::LN_2).abs() < 1e-9);

        let a3 = t.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y3 = t.bce(a3, vec![0.5]).unwrap();
        assert!((t.data(y3)[0] - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn maxpool_chain_equals_wider_window() {
        // two chained 5-pools (s=1, p=2) equal one 9-pool (s=1, p=4)
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = randt(&[2, 10, 10], &mut rng);
        let mut t = Tape::<f64>::new();
        let xid = t.constant(x);
        let five = t.maxpool2d(xid, 5, 1, 2).unwrap();
        let five2 = t.maxpool2d(five, 5, 1, 2).unwrap();
        let nine = t.maxpool2d(xid, 9, 1, 4).unwrap();
        assert_eq!(t.data(five2), t.data(nine));
    }
}
