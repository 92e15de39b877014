//! Scaled dot-product attention, multi-head attention with per-head
//! projections, sinusoidal positional encoding, and the post-norm encoder
//! block shared by the kernel-generating stem and the windowed attention
//! block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::param::{scoped, uniform_fan_in, Named, NamedMut, Param};
use crate::scalar::{r, Real};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Per-head projection matrices plus the output projection.
pub struct MultiHeadParams<R> {
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub w_q: Vec<Param<R>>,
    pub w_k: Vec<Param<R>>,
    pub w_v: Vec<Param<R>>,
    pub w_o: Param<R>,
}

impl<R: Real> MultiHeadParams<R> {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::config(format!(
                "head count {n_heads} must divide model width {d_model}"
            )));
        }
        let d_head = d_model / n_heads;
        let mut proj =
            |rng: &mut dyn FnMut() -> Tensor<R>| -> Vec<Param<R>> { (0..n_heads).map(|_| Param::new(rng())).collect() };
        let mut gen = || uniform_fan_in(&[d_model, d_head], d_model, rng);
        let w_q = proj(&mut gen);
        let w_k = proj(&mut gen);
        let w_v = proj(&mut gen);
        drop(gen);
        Ok(MultiHeadParams {
            n_heads,
            d_model,
            d_head,
            w_q,
            w_k,
            w_v,
            w_o: Param::new(uniform_fan_in(&[d_model, d_model], d_model, rng)),
        })
    }

    pub fn params(&self) -> Named<'_, R> {
        let mut v: Named<'_, R> = Vec::new();
        for (i, p) in self.w_q.iter().enumerate() {
            v.push((format!("wq{i}"), p));
        }
        for (i, p) in self.w_k.iter().enumerate() {
            v.push((format!("wk{i}"), p));
        }
        for (i, p) in self.w_v.iter().enumerate() {
            v.push((format!("wv{i}"), p));
        }
        v.push(("wo".into(), &self.w_o));
        v
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        let mut v: NamedMut<'_, R> = Vec::new();
        for (i, p) in self.w_q.iter_mut().enumerate() {
            v.push((format!("wq{i}"), p));
        }
        for (i, p) in self.w_k.iter_mut().enumerate() {
            v.push((format!("wk{i}"), p));
        }
        for (i, p) in self.w_v.iter_mut().enumerate() {
            v.push((format!("wv{i}"), p));
        }
        v.push(("wo".into(), &mut self.w_o));
        v
    }
}

/// Softmax(Q K^T / sqrt(d) + bias + mask) V on [L,d] operands. `bias` and
/// `mask` are additive [L,L] terms; masks use large negative entries.
pub fn scaled_attention<R: Real>(
    t: &mut Tape<R>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    bias: Option<TensorId>,
    mask: Option<TensorId>,
) -> Result<TensorId> {
    let (qs, ks, vs) = (t.shape(q).to_vec(), t.shape(k).to_vec(), t.shape(v).to_vec());
    if qs.len() != 2 || qs != ks || qs != vs {
        return Err(Error::shape(format!(
            "scaled_attention expects matching [L,d] operands, got {qs:?}/{ks:?}/{vs:?}"
        )));
    }
    let l = qs[0];
    let d = qs[1];
    for extra in [bias, mask].into_iter().flatten() {
        if t.shape(extra) != [l, l] {
            return Err(Error::shape(format!(
                "attention bias/mask must be [{l},{l}], got {:?}",
                t.shape(extra)
            )));
        }
    }
    let kt = t.transpose2d(k)?;
    let scores = t.matmul(q, kt)?;
    let mut scores = t.scale(scores, r::<R>(1.0 / (d as f64).sqrt()));
    if let Some(b) = bias {
        scores = t.add(scores, b)?;
    }
    if let Some(m) = mask {
        scores = t.add(scores, m)?;
    }
    let weights = t.softmax(scores, 1)?;
    t.matmul(weights, v)
}

/// Multi-head self-attention: per-head projections of x, attention per head
/// (optionally with a per-head additive bias and a shared mask), concat,
/// output projection.
pub fn multi_head<R: Real>(
    t: &mut Tape<R>,
    x: TensorId,
    p: &MultiHeadParams<R>,
    head_bias: Option<&[TensorId]>,
    mask: Option<TensorId>,
) -> Result<TensorId> {
    let xs = t.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != p.d_model {
        return Err(Error::shape(format!(
            "multi_head: input {xs:?} does not match model width {}",
            p.d_model
        )));
    }
    if let Some(hb) = head_bias {
        if hb.len() != p.n_heads {
            return Err(Error::shape(format!(
                "multi_head: {} bias tensors for {} heads",
                hb.len(),
                p.n_heads
            )));
        }
    }
    let mut heads = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let wq = t.param(&p.w_q[h]);
        let wk = t.param(&p.w_k[h]);
        let wv = t.param(&p.w_v[h]);
        let qh = t.matmul(x, wq)?;
        let kh = t.matmul(x, wk)?;
        let vh = t.matmul(x, wv)?;
        let bias = head_bias.map(|hb| hb[h]);
        heads.push(scaled_attention(t, qh, kh, vh, bias, mask)?);
    }
    let cat = t.concat(&heads, 1)?;
    let wo = t.param(&p.w_o);
    t.matmul(cat, wo)
}

/// Sinusoidal position table: pe[i,2j] = sin(i / 10000^(2j/d)),
/// pe[i,2j+1] = cos(i / 10000^(2j/d)).
pub fn positional_encoding<R: Real>(l: usize, d: usize) -> Result<Tensor<R>> {
    if d % 2 != 0 {
        return Err(Error::config(format!("positional encoding width must be even, got {d}")));
    }
    let mut data = Vec::with_capacity(l * d);
    for i in 0..l {
        for j in 0..d {
            let pair = (j / 2) * 2;
            let angle = i as f64 / 10000f64.powf(pair as f64 / d as f64);
            data.push(r(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![l, d], data)
}

/// Post-norm transformer encoder: LN(x + MHA(x)) then LN(y + FFN(y)), with a
/// 4x SiLU feed-forward.
pub struct EncoderParams<R> {
    pub mha: MultiHeadParams<R>,
    pub ln1: LayerNorm<R>,
    pub ln2: LayerNorm<R>,
    pub ffn1: Linear<R>,
    pub ffn2: Linear<R>,
}

impl<R: Real> EncoderParams<R> {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let d_ff = 4 * d_model;
        Ok(EncoderParams {
            mha: MultiHeadParams::new(d_model, n_heads, rng)?,
            ln1: LayerNorm::new(d_model),
            ln2: LayerNorm::new(d_model),
            ffn1: Linear::new(d_model, d_ff, true, rng),
            ffn2: Linear::new(d_ff, d_model, true, rng),
        })
    }

    pub fn params(&self) -> Named<'_, R> {
        let mut v = scoped("mha", self.mha.params());
        v.extend(scoped("ln1", self.ln1.params()));
        v.extend(scoped("ln2", self.ln2.params()));
        v.extend(scoped("ffn1", self.ffn1.params()));
        v.extend(scoped("ffn2", self.ffn2.params()));
        v
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        let mut v = scoped("mha", self.mha.params_mut());
        v.extend(scoped("ln1", self.ln1.params_mut()));
        v.extend(scoped("ln2", self.ln2.params_mut()));
        v.extend(scoped("ffn1", self.ffn1.params_mut()));
        v.extend(scoped("ffn2", self.ffn2.params_mut()));
        v
    }
}

pub fn encoder_block<R: Real>(
    t: &mut Tape<R>,
    x: TensorId,
    p: &EncoderParams<R>,
) -> Result<TensorId> {
    let attn = multi_head(t, x, &p.mha, None, None)?;
    let res1 = t.add(x, attn)?;
    let y = p.ln1.forward(t, res1)?;
    let h = p.ffn1.forward(t, y)?;
    let h = t.silu(h);
    let f = p.ffn2.forward(t, h)?;
    let res2 = t.add(y, f)?;
    p.ln2.forward(t, res2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_module, weighted_sum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_token_returns_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::<f64>::new();
        let q = t.constant(randt(&[1, 4], &mut rng));
        let k = t.constant(randt(&[1, 4], &mut rng));
        let v = t.constant(randt(&[1, 4], &mut rng));
        let y = scaled_attention(&mut t, q, k, v, None, None).unwrap();
        for (a, b) in t.data(y).iter().zip(t.data(v)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::<f64>::new();
        let q = t.constant(randt(&[3, 4], &mut rng));
        let krow = randt(&[1, 4], &mut rng);
        let k = t.constant(Tensor::from_fn(&[3, 4], |i| krow.data()[i % 4]));
        let v = t.constant(randt(&[3, 4], &mut rng));
        let y = scaled_attention(&mut t, q, k, v, None, None).unwrap();
        let vd = t.data(v);
        for row in 0..3 {
            for col in 0..4 {
                let mean = (vd[col] + vd[4 + col] + vd[8 + col]) / 3.0;
                assert!((t.data(y)[row * 4 + col] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_bias_matches_no_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::<f64>::new();
        let q = t.constant(randt(&[5, 4], &mut rng));
        let k = t.constant(randt(&[5, 4], &mut rng));
        let v = t.constant(randt(&[5, 4], &mut rng));
        let zero = t.constant(Tensor::zeros(&[5, 5]));
        let plain = scaled_attention(&mut t, q, k, v, None, None).unwrap();
        let biased = scaled_attention(&mut t, q, k, v, Some(zero), None).unwrap();
        for (a, b) in t.data(plain).iter().zip(t.data(biased)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::<f64>::new();
        let q = t.constant(randt(&[6, 4], &mut rng));
        let k = t.constant(randt(&[6, 4], &mut rng));
        let kt = t.transpose2d(k).unwrap();
        let s = t.matmul(q, kt).unwrap();
        let s = t.scale(s, 0.5);
        let w = t.softmax(s, 1).unwrap();
        for row in 0..6 {
            let sum: f64 = t.data(w)[row * 6..(row + 1) * 6].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(t.data(w)[row * 6..(row + 1) * 6].iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randt(&[4, 6], &mut rng);
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::from_fn(&[4, 6], |i| x.data()[perm[i / 6] * 6 + i % 6]);

        let mut t = Tape::<f64>::new();
        let a = t.constant(x);
        let ya = scaled_attention(&mut t, a, a, a, None, None).unwrap();
        let b = t.constant(xp);
        let yb = scaled_attention(&mut t, b, b, b, None, None).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for col in 0..6 {
                let (a, b) = (t.data(yb)[i * 6 + col], t.data(ya)[p * 6 + col]);
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_head_identity_projections_reduce_to_scaled_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = MultiHeadParams::<f64>::new(4, 1, &mut rng).unwrap();
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        p.w_q[0].value = eye.clone();
        p.w_k[0].value = eye.clone();
        p.w_v[0].value = eye.clone();
        p.w_o.value = eye;
        let x = randt(&[5, 4], &mut rng);
        let mut t = Tape::<f64>::new();
        let xid = t.constant(x);
        let direct = scaled_attention(&mut t, xid, xid, xid, None, None).unwrap();
        let viahead = multi_head(&mut t, xid, &p, None, None).unwrap();
        for (a, b) in t.data(direct).iter().zip(t.data(viahead)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn multi_head_shape_and_config_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(MultiHeadParams::<f64>::new(6, 4, &mut rng).is_err());
        let p = MultiHeadParams::<f64>::new(8, 2, &mut rng).unwrap();
        let mut t = Tape::<f64>::new();
        let x = t.constant(randt(&[3, 8], &mut rng));
        let y = multi_head(&mut t, x, &p, None, None).unwrap();
        assert_eq!(t.shape(y), &[3, 8]);
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding::<f64>(4, 6).unwrap();
        // row 0: sin slots 0, cos slots 1
        for j in 0..6 {
            let expect = if j % 2 == 0 { 0.0 } else { 1.0 };
            assert!((pe.data()[j] - expect).abs() < 1e-12);
        }
        // pe[1,0] = sin(1)
        assert!((pe.data()[6] - 1f64.sin()).abs() < 1e-9);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(positional_encoding::<f64>(4, 5).is_err());
    }

    #[test]
    fn encoder_preserves_shape_and_zero_branches_give_iterated_ln() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = EncoderParams::<f64>::new(6, 2, &mut rng).unwrap();
        // zero the output projections: attention and ffn branches vanish
        p.mha.w_o.value = Tensor::zeros(&[6, 6]);
        p.ffn2.w.value = Tensor::zeros(&[24, 6]);
        let x = randt(&[3, 6], &mut rng);
        let mut t = Tape::<f64>::new();
        let xid = t.constant(x);
        let y = encoder_block(&mut t, xid, &p).unwrap();
        assert_eq!(t.shape(y), &[3, 6]);
        let g = t.param(&p.ln1.gamma);
        let b = t.param(&p.ln1.beta);
        let ln1 = t.layer_norm(xid, g, b, p.ln1.eps).unwrap();
        let g2 = t.param(&p.ln2.gamma);
        let b2 = t.param(&p.ln2.beta);
        let ln2 = t.layer_norm(ln1, g2, b2, p.ln2.eps).unwrap();
        for (a, b) in t.data(y).iter().zip(t.data(ln2)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = EncoderParams::<f64>::new(4, 2, &mut rng).unwrap();
        let x = randt(&[3, 4], &mut rng);
        let res = check_module(
            "encoder_block",
            &mut p,
            vec![x],
            |m| m.params_mut().into_iter().map(|(_, p)| p).collect(),
            |m, t, ids| {
                let y = encoder_block(t, ids[0], m)?;
                weighted_sum(t, y)
            },
        );
        assert!(res.passed(), "encoder_block rel err {}", res.max_rel_err);
    }
}
