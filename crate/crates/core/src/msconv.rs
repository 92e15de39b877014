//! Attention-generated self-convolution.
//!
//! Instead of learning a convolution kernel directly, the module derives one
//! from the input feature map: non-overlapping K x K patches are unfolded
//! into a (K*K*C) x P column map, the P columns are reduced into N groups by
//! parallel max and average pooling, the two pooled maps are added, and a
//! transformer encoder refines the fused (K*K*C) x N map. Its output is
//! reshaped into N kernels of C x K x K, which then convolve the original
//! input. Kernel values are differentiable functions of the input and of the
//! encoder parameters.

use rand::Rng;

use crate::attention::{encoder_block, positional_encoding, EncoderParams};
use crate::error::{Error, Result};
use crate::param::{scoped, Named, NamedMut};
use crate::scalar::Real;
use crate::tape::{PoolMode, Tape, TensorId};

#[derive(Debug, Clone, Copy)]
pub struct MsconvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    pub n_heads: usize,
}

impl MsconvConfig {
    pub fn stem(in_channels: usize, out_channels: usize) -> Self {
        MsconvConfig {
            in_channels,
            out_channels,
            kernel: 6,
            conv_stride: 2,
            conv_padding: 2,
            n_heads: 4,
        }
    }
}

pub struct Msconv<R> {
    pub cfg: MsconvConfig,
    pub encoder: EncoderParams<R>,
}

impl<R: Real> Msconv<R> {
    pub fn new(cfg: MsconvConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.kernel == 0 || cfg.conv_stride == 0 {
            return Err(Error::config("kernel and stride must be >= 1".to_string()));
        }
        if cfg.out_channels % 2 != 0 {
            return Err(Error::config(format!(
                "position encoding needs an even token width, got {}",
                cfg.out_channels
            )));
        }
        // encoder token width equals the output-channel count
        let encoder = EncoderParams::new(cfg.out_channels, cfg.n_heads, rng)?;
        Ok(Msconv { cfg, encoder })
    }

    /// Derive the [N, C, K, K] kernel tensor from the input map.
    pub fn generate_kernels(&self, t: &mut Tape<R>, x: TensorId) -> Result<TensorId> {
        let cfg = &self.cfg;
        let xs = t.shape(x).to_vec();
        if xs.len() != 3 || xs[0] != cfg.in_channels {
            return Err(Error::shape(format!(
                "expected [{}, H, W] input, got {xs:?}",
                cfg.in_channels
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let k = cfg.kernel;
        // ragged edges are zero-padded bottom/right up to multiples of K
        let pad_b = (k - h % k) % k;
        let pad_r = (k - w % k) % k;
        let patches = h.div_ceil(k) * w.div_ceil(k);
        if patches < cfg.out_channels {
            return Err(Error::shape(format!(
                "fewer patches than output channels: {patches} patches for {} kernels",
                cfg.out_channels
            )));
        }
        let padded = if pad_b > 0 || pad_r > 0 { t.pad_hw(x, 0, pad_b, 0, pad_r)? } else { x };
        // [(K*K*C), P] columns of non-overlapping patches
        let cols = t.unfold(padded, k, k, 0)?;
        let pooled_max = t.group_pool(cols, cfg.out_channels, PoolMode::Max)?;
        let pooled_avg = t.group_pool(cols, cfg.out_channels, PoolMode::Avg)?;
        let fused = t.add(pooled_max, pooled_avg)?;
        // rows are the token sequence (length K*K*C), width N
        let pe = t.constant(positional_encoding(k * k * c, cfg.out_channels)?);
        let tokens = t.add(fused, pe)?;
        let encoded = encoder_block(t, tokens, &self.encoder)?;
        let kt = t.transpose2d(encoded)?;
        t.reshape(kt, &[cfg.out_channels, c, k, k])
    }

    /// Convolve the input with its own generated kernels.
    pub fn forward(&self, t: &mut Tape<R>, x: TensorId) -> Result<TensorId> {
        let kernels = self.generate_kernels(t, x)?;
        t.conv2d(x, kernels, self.cfg.conv_stride, self.cfg.conv_padding)
    }

    pub fn params(&self) -> Named<'_, R> {
        scoped("encoder", self.encoder.params())
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        scoped("encoder", self.encoder.params_mut())
    }
}
