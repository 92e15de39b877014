//! Channel-then-spatial attention gates.
//!
//! The channel gate squeezes the map spatially through parallel avg/max
//! pooling, pushes both vectors through one shared bias-free two-layer MLP,
//! sums, and applies a sigmoid. The spatial gate pools along the channel
//! axis, convolves the avg and max maps with two independent 7x7 kernels,
//! sums, and applies a sigmoid. Both gates multiply into the feature map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{uniform_fan_in, Named, NamedMut, Param};
use crate::scalar::Real;
use crate::tape::{PoolAxis, PoolMode, Tape, TensorId};

pub struct CamParams<R> {
    /// [C, C/r]
    pub w0: Param<R>,
    /// [C/r, C]
    pub w1: Param<R>,
    pub channels: usize,
    pub reduction: usize,
}

impl<R: Real> CamParams<R> {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "reduction {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(CamParams {
            w0: Param::new(uniform_fan_in(&[channels, hidden], channels, rng)),
            w1: Param::new(uniform_fan_in(&[hidden, channels], hidden, rng)),
            channels,
            reduction,
        })
    }

    pub fn params(&self) -> Named<'_, R> {
        vec![("w0".into(), &self.w0), ("w1".into(), &self.w1)]
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        vec![("w0".into(), &mut self.w0), ("w1".into(), &mut self.w1)]
    }
}

pub struct IsamParams<R> {
    /// [1,1,7,7] kernel for the channel-average map.
    pub k_avg: Param<R>,
    /// [1,1,7,7] kernel for the channel-max map.
    pub k_max: Param<R>,
}

impl<R: Real> IsamParams<R> {
    pub const KERNEL: usize = 7;

    pub fn new(rng: &mut impl Rng) -> Self {
        let k = Self::KERNEL;
        IsamParams {
            k_avg: Param::new(uniform_fan_in(&[1, 1, k, k], k * k, rng)),
            k_max: Param::new(uniform_fan_in(&[1, 1, k, k], k * k, rng)),
        }
    }

    pub fn params(&self) -> Named<'_, R> {
        vec![("k_avg".into(), &self.k_avg), ("k_max".into(), &self.k_max)]
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        vec![("k_avg".into(), &mut self.k_avg), ("k_max".into(), &mut self.k_max)]
    }
}

/// sigmoid(MLP(avgpool(F)) + MLP(maxpool(F))) as a [C,1,1] gate.
pub fn channel_attention<R: Real>(
    t: &mut Tape<R>,
    f: TensorId,
    p: &CamParams<R>,
) -> Result<TensorId> {
    let fs = t.shape(f).to_vec();
    if fs.len() != 3 || fs[0] != p.channels {
        return Err(Error::shape(format!(
            "channel_attention: input {fs:?} does not match {} channels",
            p.channels
        )));
    }
    let c = p.channels;
    let w0 = t.param(&p.w0);
    let w1 = t.param(&p.w1);
    let mut branches = Vec::with_capacity(2);
    for mode in [PoolMode::Avg, PoolMode::Max] {
        let pooled = t.pool_global(f, mode, PoolAxis::Spatial)?;
        let vec = t.reshape(pooled, &[1, c])?;
        let h = t.matmul(vec, w0)?;
        let out = t.matmul(h, w1)?;
        branches.push(out);
    }
    let sum = t.add(branches[0], branches[1])?;
    let gate = t.sigmoid(sum);
    t.reshape(gate, &[c, 1, 1])
}

/// sigmoid(conv7x7(channel-avg) + conv7x7(channel-max)) as a [1,H,W] gate.
pub fn spatial_attention_i<R: Real>(
    t: &mut Tape<R>,
    f: TensorId,
    p: &IsamParams<R>,
) -> Result<TensorId> {
    let fs = t.shape(f).to_vec();
    if fs.len() != 3 {
        return Err(Error::shape(format!("spatial_attention: need [C,H,W], got {fs:?}")));
    }
    let pad = IsamParams::<R>::KERNEL / 2;
    let avg = t.pool_global(f, PoolMode::Avg, PoolAxis::Channel)?;
    let mx = t.pool_global(f, PoolMode::Max, PoolAxis::Channel)?;
    let ka = t.param(&p.k_avg);
    let km = t.param(&p.k_max);
    let ca = t.conv2d(avg, ka, 1, pad)?;
    let cm = t.conv2d(mx, km, 1, pad)?;
    let sum = t.add(ca, cm)?;
    Ok(t.sigmoid(sum))
}

/// Sequential channel-then-spatial gating: F' = M1(F) * F, out = M2(F') * F'.
pub fn icbam<R: Real>(
    t: &mut Tape<R>,
    f: TensorId,
    cam: &CamParams<R>,
    isam: &IsamParams<R>,
) -> Result<TensorId> {
    let m1 = channel_attention(t, f, cam)?;
    let f1 = t.mul(f, m1)?;
    let m2 = spatial_attention_i(t, f1, isam)?;
    t.mul(f1, m2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_module, weighted_sum};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_cam(c: usize) -> CamParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = CamParams::new(c, 1, &mut rng).unwrap();
        p.w0.value = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        p.w1.value = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        p
    }

    fn delta_isam() -> IsamParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = IsamParams::new(&mut rng);
        let mut delta = vec![0.0; 49];
        delta[24] = 1.0;
        p.k_avg.value = Tensor::new(vec![1, 1, 7, 7], delta.clone()).unwrap();
        p.k_max.value = Tensor::new(vec![1, 1, 7, 7], delta).unwrap();
        p
    }

    #[test]
    fn constant_map_identity_mlp_gives_sigmoid_2v() {
        let p = identity_cam(3);
        let mut t = Tape::new();
        let v = 0.37;
        let f = t.constant(Tensor::full(&[3, 5, 4], v));
        let gate = channel_attention(&mut t, f, &p).unwrap();
        assert_eq!(t.shape(gate), &[3, 1, 1]);
        let expect = 1.0 / (1.0 + (-2.0 * v as f64).exp());
        assert!(t.data(gate).iter().all(|g| (g - expect).abs() < 1e-9));
    }

    #[test]
    fn channel_gate_shape_is_c11_and_spatially_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = CamParams::<f64>::new(4, 2, &mut rng).unwrap();
        let data = Tensor::from_fn(&[4, 3, 3], |_| rng.gen_range(-1.0..1.0));
        // spatial permutation: reverse pixel order per channel
        let permuted = Tensor::from_fn(&[4, 3, 3], |i| {
            let c = i / 9;
            let p = i % 9;
            data.data()[c * 9 + (8 - p)]
        });
        let mut t = Tape::new();
        let a = t.constant(data);
        let b = t.constant(permuted);
        let ga = channel_attention(&mut t, a, &p).unwrap();
        let gb = channel_attention(&mut t, b, &p).unwrap();
        assert_eq!(t.shape(ga), &[4, 1, 1]);
        for (x, y) in t.data(ga).iter().zip(t.data(gb)) {
            assert!((x - y).abs() < 1e-12);
        }
        // channel mismatch errors
        let bad = t.constant(Tensor::zeros(&[3, 3, 3]));
        assert!(channel_attention(&mut t, bad, &p).is_err());
    }

    #[test]
    fn delta_kernels_on_constant_input_give_sigmoid_2v() {
        let p = delta_isam();
        let mut t = Tape::new();
        let v = -0.21;
        let f = t.constant(Tensor::full(&[2, 6, 6], v));
        let gate = spatial_attention_i(&mut t, f, &p).unwrap();
        assert_eq!(t.shape(gate), &[1, 6, 6]);
        let expect = 1.0 / (1.0 + (-2.0 * v as f64).exp());
        assert!(t.data(gate).iter().all(|g| (g - expect).abs() < 1e-9));
        assert!(t.data(gate).iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn bright_spot_peaks_spatial_attention() {
        let p = delta_isam();
        let mut t = Tape::new();
        let mut f = Tensor::zeros(&[2, 5, 5]);
        f.data_mut()[2 * 5 + 3] = 3.0; // channel 0, pixel (2,3)
        let fid = t.constant(f);
        let gate = spatial_attention_i(&mut t, fid, &p).unwrap();
        let g = t.data(gate);
        let peak = g[2 * 5 + 3];
        for (i, &v) in g.iter().enumerate() {
            if i != 2 * 5 + 3 {
                assert!(peak > v);
            }
        }
    }

    #[test]
    fn gates_shrink_magnitudes_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = CamParams::<f64>::new(4, 2, &mut rng).unwrap();
        let isam = IsamParams::new(&mut rng);
        let f = Tensor::from_fn(&[4, 6, 6], |_| rng.gen_range(-2.0..2.0));
        let mut t = Tape::new();
        let fid = t.constant(f.clone());
        let out = icbam(&mut t, fid, &cam, &isam).unwrap();
        assert_eq!(t.shape(out), &[4, 6, 6]);
        for (o, x) in t.data(out).iter().zip(f.data()) {
            assert!(o.abs() <= x.abs() + 1e-12);
        }
    }

    #[test]
    fn saturated_gates_approach_identity() {
        // force both pre-sigmoid sums strongly positive via huge weights
        let mut cam = identity_cam(2);
        cam.w1.value = Tensor::from_fn(&[2, 2], |i| if i / 2 == i % 2 { 500.0 } else { 0.0 });
        let mut isam = delta_isam();
        isam.k_avg.value = Tensor::from_fn(&[1, 1, 7, 7], |i| if i == 24 { 500.0 } else { 0.0 });
        isam.k_max.value = isam.k_avg.value.clone();
        let mut t = Tape::new();
        let f = t.constant(Tensor::full(&[2, 4, 4], 0.8));
        let out = icbam(&mut t, f, &cam, &isam).unwrap();
        for (o, x) in t.data(out).iter().zip(t.data(f)) {
            assert!((o - x).abs() < 1e-6);
        }
    }

    #[test]
    fn icbam_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        struct Both {
            cam: CamParams<f64>,
            isam: IsamParams<f64>,
        }
        let mut m =
            Both { cam: CamParams::new(4, 2, &mut rng).unwrap(), isam: IsamParams::new(&mut rng) };
        let f = Tensor::from_fn(&[4, 6, 6], |_| rng.gen_range(-1.0..1.0));
        let res = check_module(
            "icbam",
            &mut m,
            vec![f],
            |m| {
                let mut v: Vec<&mut Param<f64>> =
                    m.cam.params_mut().into_iter().map(|(_, p)| p).collect();
                v.extend(m.isam.params_mut().into_iter().map(|(_, p)| p));
                v
            },
            |m, t, ids| {
                let y = icbam(t, ids[0], &m.cam, &m.isam)?;
                weighted_sum(t, y)
            },
        );
        assert!(res.passed(), "icbam rel err {}", res.max_rel_err);
    }
}
