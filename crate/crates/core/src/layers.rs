//! Parameterized building blocks: linear, norms, conv blocks, CSP-style C3,
//! and the fast spatial-pyramid block.

use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{scoped, uniform_fan_in, Named, NamedMut, Param};
use crate::scalar::{r, Real};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.03;
pub const BN_EPS: f64 = 1e-3;
pub const LN_EPS: f64 = 1e-5;

/// Whether a forward pass updates batch statistics, trains against frozen
/// ones, or runs pure inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Normalize by batch statistics and update the running ones.
    Train,
    /// Normalize by the frozen running statistics but keep gradients
    /// flowing; late-stage training uses this so the network adapts to
    /// exactly the normalization inference will see.
    Tune,
    /// Frozen statistics, no gradient bookkeeping needed.
    Infer,
}

pub struct Linear<R> {
    /// [in, out] so the forward pass is a plain x @ w.
    pub w: Param<R>,
    pub b: Option<Param<R>>,
}

impl<R: Real> Linear<R> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::new(uniform_fan_in(&[d_in, d_out], d_in, rng)),
            b: bias.then(|| Param::no_decay(Tensor::zeros(&[d_out]))),
        }
    }

    pub fn forward(&self, t: &mut Tape<R>, x: TensorId) -> Result<TensorId> {
        let w = t.param(&self.w);
        let y = t.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let b = t.param(b);
                t.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Named<'_, R> {
        let mut v: Named<'_, R> = vec![("w".into(), &self.w)];
        if let Some(b) = &self.b {
            v.push(("b".into(), b));
        }
        v
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        let mut v: NamedMut<'_, R> = vec![("w".into(), &mut self.w)];
        if let Some(b) = &mut self.b {
            v.push(("b".into(), b));
        }
        v
    }
}

pub struct LayerNorm<R> {
    pub gamma: Param<R>,
    pub beta: Param<R>,
    pub eps: R,
}

impl<R: Real> LayerNorm<R> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Param::no_decay(Tensor::full(&[d], R::one())),
            beta: Param::no_decay(Tensor::zeros(&[d])),
            eps: r(LN_EPS),
        }
    }

    pub fn forward(&self, t: &mut Tape<R>, x: TensorId) -> Result<TensorId> {
        let g = t.param(&self.gamma);
        let b = t.param(&self.beta);
        t.layer_norm(x, g, b, self.eps)
    }

    pub fn params(&self) -> Named<'_, R> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }
}

pub struct BatchNorm2d<R> {
    pub gamma: Param<R>,
    pub beta: Param<R>,
    pub running_mean: RefCell<Vec<R>>,
    pub running_var: RefCell<Vec<R>>,
    pub momentum: R,
    pub eps: R,
    /// Accumulators for exact post-training statistics: per-channel sum,
    /// sum of squares and element count over a calibration sweep.
    calib: RefCell<Option<(Vec<f64>, Vec<f64>, f64)>>,
}

impl<R: Real> BatchNorm2d<R> {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Param::no_decay(Tensor::full(&[c], R::one())),
            beta: Param::no_decay(Tensor::zeros(&[c])),
            running_mean: RefCell::new(vec![R::zero(); c]),
            running_var: RefCell::new(vec![R::one(); c]),
            momentum: r(BN_MOMENTUM),
            eps: r(BN_EPS),
            calib: RefCell::new(None),
        }
    }

    /// Begin collecting exact population statistics; subsequent train-mode
    /// forwards accumulate raw per-channel sums.
    pub fn start_calibration(&self) {
        let c = self.gamma.value.numel();
        *self.calib.borrow_mut() = Some((vec![0.0; c], vec![0.0; c], 0.0));
    }

    /// Replace the running statistics with the exact mean/variance gathered
    /// since [`Self::start_calibration`].
    pub fn finish_calibration(&self) {
        if let Some((sum, sqsum, count)) = self.calib.borrow_mut().take() {
            if count > 0.0 {
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                for i in 0..rm.len() {
                    let mean = sum[i] / count;
                    let var = (sqsum[i] / count - mean * mean).max(0.0);
                    rm[i] = r(mean);
                    rv[i] = r(var);
                }
            }
        }
    }

    pub fn forward(&self, t: &mut Tape<R>, x: TensorId, phase: Phase) -> Result<TensorId> {
        match phase {
            Phase::Train => {
                // exact-statistics collection, when active, sees the raw input
                if let Some((sum, sqsum, count)) = self.calib.borrow_mut().as_mut() {
                    let xs = t.shape(x).to_vec();
                    let (c, hw) = (xs[0], xs[1] * xs[2]);
                    let data = t.data(x);
                    for ic in 0..c {
                        for v in &data[ic * hw..(ic + 1) * hw] {
                            let v = v.as_f64();
                            sum[ic] += v;
                            sqsum[ic] += v * v;
                        }
                    }
                    *count += hw as f64;
                }
                let g = t.param(&self.gamma);
                let b = t.param(&self.beta);
                let (y, stats) = t.batch_norm(x, g, b, self.eps)?;
                let m = self.momentum;
                let keep = R::one() - m;
                for (rm, bm) in self.running_mean.borrow_mut().iter_mut().zip(&stats.mean) {
                    *rm = keep * *rm + m * *bm;
                }
                for (rv, bv) in self.running_var.borrow_mut().iter_mut().zip(&stats.var) {
                    *rv = keep * *rv + m * *bv;
                }
                Ok(y)
            }
            Phase::Tune => {
                // frozen statistics, differentiable affine
                let c = self.gamma.value.numel();
                let rm = self.running_mean.borrow();
                let rv = self.running_var.borrow();
                let mut neg_mean = Vec::with_capacity(c);
                let mut inv_std = Vec::with_capacity(c);
                for i in 0..c {
                    neg_mean.push(-rm[i]);
                    inv_std.push(R::one() / (rv[i] + self.eps).sqrt());
                }
                drop(rm);
                drop(rv);
                let nm = t.constant(Tensor::new(vec![c, 1, 1], neg_mean)?);
                let inv = t.constant(Tensor::new(vec![c, 1, 1], inv_std)?);
                let centered = t.add(x, nm)?;
                let xhat = t.mul(centered, inv)?;
                let g = t.param(&self.gamma);
                let gid = t.reshape(g, &[c, 1, 1])?;
                let scaled = t.mul(xhat, gid)?;
                let b = t.param(&self.beta);
                let bid = t.reshape(b, &[c, 1, 1])?;
                t.add(scaled, bid)
            }
            Phase::Infer => {
                // y = x * scale_c + shift_c from frozen running statistics
                let c = self.gamma.value.numel();
                let rm = self.running_mean.borrow();
                let rv = self.running_var.borrow();
                let gd = self.gamma.value.data();
                let bd = self.beta.value.data();
                let mut scale = Vec::with_capacity(c);
                let mut shift = Vec::with_capacity(c);
                for i in 0..c {
                    let s = gd[i] / (rv[i] + self.eps).sqrt();
                    scale.push(s);
                    shift.push(bd[i] - rm[i] * s);
                }
                let sid = t.constant(Tensor::new(vec![c, 1, 1], scale)?);
                let hid = t.constant(Tensor::new(vec![c, 1, 1], shift)?);
                let y = t.mul(x, sid)?;
                t.add(y, hid)
            }
        }
    }

    pub fn params(&self) -> Named<'_, R> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }

    pub fn buffers(&self) -> Vec<(String, Vec<R>)> {
        vec![
            ("running_mean".into(), self.running_mean.borrow().clone()),
            ("running_var".into(), self.running_var.borrow().clone()),
        ]
    }

    pub fn load_buffer(&self, name: &str, data: &[R]) -> Result<()> {
        let slot = match name {
            "running_mean" => &self.running_mean,
            "running_var" => &self.running_var,
            _ => return Err(Error::Checkpoint(format!("unknown buffer {name}"))),
        };
        if slot.borrow().len() != data.len() {
            return Err(Error::Checkpoint(format!("buffer {name} length mismatch")));
        }
        slot.borrow_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Conv -> BN -> SiLU, the basic convolution unit of the graph.
pub struct ConvBlock<R> {
    pub kernel: Param<R>,
    pub bn: BatchNorm2d<R>,
    pub stride: usize,
    pub pad: usize,
}

impl<R: Real> ConvBlock<R> {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            kernel: Param::new(uniform_fan_in(&[c_out, c_in, k, k], c_in * k * k, rng)),
            bn: BatchNorm2d::new(c_out),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, t: &mut Tape<R>, x: TensorId, phase: Phase) -> Result<TensorId> {
        let k = t.param(&self.kernel);
        let y = t.conv2d(x, k, self.stride, self.pad)?;
        let y = self.bn.forward(t, y, phase)?;
        Ok(t.silu(y))
    }

    pub fn params(&self) -> Named<'_, R> {
        let mut v: Named<'_, R> = vec![("kernel".into(), &self.kernel)];
        v.extend(scoped("bn", self.bn.params()));
        v
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        let mut v: NamedMut<'_, R> = vec![("kernel".into(), &mut self.kernel)];
        v.extend(scoped("bn", self.bn.params_mut()));
        v
    }

    pub fn buffers(&self) -> Vec<(String, Vec<R>)> {
        scoped("bn", self.bn.buffers())
    }

    pub fn load_buffer(&self, name: &str, data: &[R]) -> Result<()> {
        match name.strip_prefix("bn.") {
            Some(rest) => self.bn.load_buffer(rest, data),
            None => Err(Error::Checkpoint(format!("unknown buffer {name}"))),
        }
    }

    pub fn norms(&self) -> Vec<&BatchNorm2d<R>> {
        vec![&self.bn]
    }
}

/// 1x1 reduce -> 3x3 conv, with an optional residual shortcut.
pub struct Bottleneck<R> {
    pub cv1: ConvBlock<R>,
    pub cv2: ConvBlock<R>,
    pub shortcut: bool,
}

impl<R: Real> Bottleneck<R> {
    pub fn new(c_in: usize, c_out: usize, shortcut: bool, rng: &mut impl Rng) -> Self {
        Bottleneck {
            cv1: ConvBlock::new(c_in, c_out, 1, 1, rng),
            cv2: ConvBlock::new(c_out, c_out, 3, 1, rng),
            shortcut: shortcut && c_in == c_out,
        }
    }

    pub fn forward(&self, t: &mut Tape<R>, x: TensorId, phase: Phase) -> Result<TensorId> {
        let y = self.cv1.forward(t, x, phase)?;
        let y = self.cv2.forward(t, y, phase)?;
        if self.shortcut {
            t.add(x, y)
        } else {
            Ok(y)
        }
    }

    pub fn params(&self) -> Named<'_, R> {
        let mut v = scoped("cv1", self.cv1.params());
        v.extend(scoped("cv2", self.cv2.params()));
        v
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        let mut v = scoped("cv1", self.cv1.params_mut());
        v.extend(scoped("cv2", self.cv2.params_mut()));
        v
    }

    pub fn buffers(&self) -> Vec<(String, Vec<R>)> {
        let mut v = scoped("cv1", self.cv1.buffers());
        v.extend(scoped("cv2", self.cv2.buffers()));
        v
    }

    pub fn load_buffer(&self, name: &str, data: &[R]) -> Result<()> {
        if let Some(rest) = name.strip_prefix("cv1.") {
            self.cv1.load_buffer(rest, data)
        } else if let Some(rest) = name.strip_prefix("cv2.") {
            self.cv2.load_buffer(rest, data)
        } else {
            Err(Error::Checkpoint(format!("unknown buffer {name}")))
        }
    }

    pub fn norms(&self) -> Vec<&BatchNorm2d<R>> {
        let mut v = self.cv1.norms();
        v.extend(self.cv2.norms());
        v
    }
}

/// CSP-style split/transform/merge block: half the width runs through n
/// bottlenecks, half bypasses, then a 1x1 fuse.
pub struct C3<R> {
    pub cv1: ConvBlock<R>,
    pub cv2: ConvBlock<R>,
    pub cv3: ConvBlock<R>,
    pub blocks: Vec<Bottleneck<R>>,
}

impl<R: Real> C3<R> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        n: usize,
        shortcut: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c_out % 2 != 0 {
            return Err(Error::config(format!("c3 hidden width must be even, got c_out {c_out}")));
        }
        let h = c_out / 2;
        Ok(C3 {
            cv1: ConvBlock::new(c_in, h, 1, 1, rng),
            cv2: ConvBlock::new(c_in, h, 1, 1, rng),
            cv3: ConvBlock::new(2 * h, c_out, 1, 1, rng),
            blocks: (0..n).map(|_| Bottleneck::new(h, h, shortcut, rng)).collect(),
        })
    }

    pub fn forward(&self, t: &mut Tape<R>, x: TensorId, phase: Phase) -> Result<TensorId> {
        let mut main = self.cv1.forward(t, x, phase)?;
        for b in &self.blocks {
            main = b.forward(t, main, phase)?;
        }
        let bypass = self.cv2.forward(t, x, phase)?;
        let cat = t.concat(&[main, bypass], 0)?;
        self.cv3.forward(t, cat, phase)
    }

    pub fn params(&self) -> Named<'_, R> {
        let mut v = scoped("cv1", self.cv1.params());
        v.extend(scoped("cv2", self.cv2.params()));
        v.extend(scoped("cv3", self.cv3.params()));
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(scoped(&format!("m{i}"), b.params()));
        }
        v
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        let mut v = scoped("cv1", self.cv1.params_mut());
        v.extend(scoped("cv2", self.cv2.params_mut()));
        v.extend(scoped("cv3", self.cv3.params_mut()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(scoped(&format!("m{i}"), b.params_mut()));
        }
        v
    }

    pub fn buffers(&self) -> Vec<(String, Vec<R>)> {
        let mut v = scoped("cv1", self.cv1.buffers());
        v.extend(scoped("cv2", self.cv2.buffers()));
        v.extend(scoped("cv3", self.cv3.buffers()));
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(scoped(&format!("m{i}"), b.buffers()));
        }
        v
    }

    pub fn load_buffer(&self, name: &str, data: &[R]) -> Result<()> {
        if let Some(rest) = name.strip_prefix("cv1.") {
            return self.cv1.load_buffer(rest, data);
        }
        if let Some(rest) = name.strip_prefix("cv2.") {
            return self.cv2.load_buffer(rest, data);
        }
        if let Some(rest) = name.strip_prefix("cv3.") {
            return self.cv3.load_buffer(rest, data);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(rest) = name.strip_prefix(&format!("m{i}.")) {
                return b.load_buffer(rest, data);
            }
        }
        Err(Error::Checkpoint(format!("unknown buffer {name}")))
    }

    pub fn norms(&self) -> Vec<&BatchNorm2d<R>> {
        let mut v = self.cv1.norms();
        v.extend(self.cv2.norms());
        v.extend(self.cv3.norms());
        for b in &self.blocks {
            v.extend(b.norms());
        }
        v
    }
}

/// Spatial pyramid: 1x1 reduce, three chained stride-1 max pools, concat of
/// the four maps, 1x1 fuse. Chained small pools emulate one large window.
pub struct Sppf<R> {
    pub cv1: ConvBlock<R>,
    pub cv2: ConvBlock<R>,
    pub pool_k: usize,
}

impl<R: Real> Sppf<R> {
    pub fn new(c_in: usize, c_out: usize, pool_k: usize, rng: &mut impl Rng) -> Result<Self> {
        if pool_k % 2 == 0 {
            return Err(Error::config(format!("sppf pool size must be odd, got {pool_k}")));
        }
        let h = c_in / 2;
        Ok(Sppf {
            cv1: ConvBlock::new(c_in, h, 1, 1, rng),
            cv2: ConvBlock::new(4 * h, c_out, 1, 1, rng),
            pool_k,
        })
    }

    pub fn forward(&self, t: &mut Tape<R>, x: TensorId, phase: Phase) -> Result<TensorId> {
        let y = self.cv1.forward(t, x, phase)?;
        let k = self.pool_k;
        let p1 = t.maxpool2d(y, k, 1, k / 2)?;
        let p2 = t.maxpool2d(p1, k, 1, k / 2)?;
        let p3 = t.maxpool2d(p2, k, 1, k / 2)?;
        let cat = t.concat(&[y, p1, p2, p3], 0)?;
        self.cv2.forward(t, cat, phase)
    }

    pub fn params(&self) -> Named<'_, R> {
        let mut v = scoped("cv1", self.cv1.params());
        v.extend(scoped("cv2", self.cv2.params()));
        v
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        let mut v = scoped("cv1", self.cv1.params_mut());
        v.extend(scoped("cv2", self.cv2.params_mut()));
        v
    }

    pub fn buffers(&self) -> Vec<(String, Vec<R>)> {
        let mut v = scoped("cv1", self.cv1.buffers());
        v.extend(scoped("cv2", self.cv2.buffers()));
        v
    }

    pub fn load_buffer(&self, name: &str, data: &[R]) -> Result<()> {
        if let Some(rest) = name.strip_prefix("cv1.") {
            self.cv1.load_buffer(rest, data)
        } else if let Some(rest) = name.strip_prefix("cv2.") {
            self.cv2.load_buffer(rest, data)
        } else {
            Err(Error::Checkpoint(format!("unknown buffer {name}")))
        }
    }

    pub fn norms(&self) -> Vec<&BatchNorm2d<R>> {
        let mut v = self.cv1.norms();
        v.extend(self.cv2.norms());
        v
    }
}

/// Nearest-neighbour 2x upsampling of a [C,H,W] map.
pub fn upsample2x<R: Real>(t: &mut Tape<R>, x: TensorId) -> Result<TensorId> {
    let s = t.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("upsample2x needs rank 3, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut idx = Vec::with_capacity(c * h * w * 4);
    for ic in 0..c {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                idx.push((ic * h + oy / 2) * w + ox / 2);
            }
        }
    }
    t.gather(x, idx, vec![c, 2 * h, 2 * w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bn_infer_identity_with_unit_stats() {
        let bn = BatchNorm2d::<f64>::new(2);
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64 * 0.25 - 1.0));
        let y = bn.forward(&mut t, x, Phase::Infer).unwrap();
        // identity up to the eps guard inside 1/sqrt(var + eps)
        for (a, b) in t.data(y).iter().zip(t.data(x)) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn c3_shape_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c3 = C3::<f64>::new(4, 8, 1, true, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[4, 6, 6]));
        let y = c3.forward(&mut t, x, Phase::Infer).unwrap();
        assert_eq!(t.shape(y), &[8, 6, 6]);
        assert!(t.value(y).is_finite());
        assert!(C3::<f64>::new(4, 7, 1, true, &mut rng).is_err());
    }

    #[test]
    fn sppf_preserves_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sppf = Sppf::<f64>::new(8, 8, 5, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[8, 20, 20], |i| (i as f64 * 0.37).sin()));
        let y = sppf.forward(&mut t, x, Phase::Infer).unwrap();
        assert_eq!(t.shape(y), &[8, 20, 20]);
        assert!(Sppf::<f64>::new(8, 8, 4, &mut rng).is_err());
    }

    #[test]
    fn sppf_constant_input_gives_constant_pool_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sppf = Sppf::<f64>::new(4, 4, 5, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[4, 8, 8], 0.7));
        let y = sppf.cv1.forward(&mut t, x, Phase::Infer).unwrap();
        let p = t.maxpool2d(y, 5, 1, 2).unwrap();
        // stride-1 max pool of a constant map is the same constant map
        assert_eq!(t.data(p), t.data(y));
    }

    #[test]
    fn upsample_doubles_nearest() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = upsample2x(&mut t, x).unwrap();
        assert_eq!(t.shape(y), &[1, 4, 4]);
        assert_eq!(
            t.data(y),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bn_running_stats_move_toward_batch() {
        let bn = BatchNorm2d::<f64>::new(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 1, 4], vec![4.0, 4.0, 4.0, 4.0]).unwrap());
        bn.forward(&mut t, x, Phase::Train).unwrap();
        let rm = bn.running_mean.borrow()[0];
        assert!((rm - BN_MOMENTUM * 4.0).abs() < 1e-12);
    }
}
