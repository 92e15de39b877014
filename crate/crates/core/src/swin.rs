//! Windowed self-attention block: window partition/merge, per-window
//! multi-head attention with a learned relative-position bias, and a second
//! half that cyclically shifts the map, masks cross-region pairs, attends,
//! and shifts back. Both halves are post-norm residual blocks with a 4x SiLU
//! MLP.

use rand::Rng;

use crate::attention::{multi_head, MultiHeadParams};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::param::{scoped, trunc_normal, Named, NamedMut, Param};
use crate::scalar::{r, Real};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Additive mask value for cross-region pairs: large enough that the
/// post-softmax weight is below 1e-20, finite so gradients stay clean.
pub const MASK_VALUE: f64 = -100.0;

#[derive(Debug, Clone, Copy)]
pub struct WindowConfig {
    pub window: usize,
    pub shift: usize,
    pub n_heads: usize,
    pub d_model: usize,
}

fn check_divisible(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::config(format!(
            "feature extents {h}x{w} must be divisible by window {m}"
        )));
    }
    Ok(())
}

/// [H,W,d] -> [nW, M*M, d] with windows in row-major order.
pub fn window_partition<R: Real>(t: &mut Tape<R>, x: TensorId, m: usize) -> Result<TensorId> {
    let s = t.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("window_partition needs [H,W,d], got {s:?}")));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    check_divisible(h, w, m)?;
    let (wy_n, wx_n) = (h / m, w / m);
    let mut idx = Vec::with_capacity(h * w * d);
    for wy in 0..wy_n {
        for wx in 0..wx_n {
            for ty in 0..m {
                for tx in 0..m {
                    let base = ((wy * m + ty) * w + wx * m + tx) * d;
                    for c in 0..d {
                        idx.push(base + c);
                    }
                }
            }
        }
    }
    t.gather(x, idx, vec![wy_n * wx_n, m * m, d])
}

/// Inverse of [`window_partition`].
pub fn window_merge<R: Real>(
    t: &mut Tape<R>,
    wins: TensorId,
    h: usize,
    w: usize,
) -> Result<TensorId> {
    let s = t.shape(wins).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("window_merge needs [nW,M*M,d], got {s:?}")));
    }
    let d = s[2];
    let m = (s[1] as f64).sqrt() as usize;
    if m * m != s[1] {
        return Err(Error::shape(format!("window_merge: {} tokens is not square", s[1])));
    }
    check_divisible(h, w, m)?;
    if s[0] != (h / m) * (w / m) {
        return Err(Error::shape(format!("window_merge: {} windows for {h}x{w}/{m}", s[0])));
    }
    let wx_n = w / m;
    let mut idx = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            let win = (y / m) * wx_n + x / m;
            let tok = (y % m) * m + x % m;
            let base = (win * m * m + tok) * d;
            for c in 0..d {
                idx.push(base + c);
            }
        }
    }
    t.gather(wins, idx, vec![h, w, d])
}

/// Toroidal roll: out[i,j] = x[(i+s) mod H, (j+s) mod W] — the top s rows
/// move to the bottom and the leftmost s columns to the right.
pub fn cyclic_shift<R: Real>(t: &mut Tape<R>, x: TensorId, s: usize) -> Result<TensorId> {
    roll(t, x, s, true)
}

/// Exact inverse of [`cyclic_shift`].
pub fn reverse_cyclic_shift<R: Real>(t: &mut Tape<R>, x: TensorId, s: usize) -> Result<TensorId> {
    roll(t, x, s, false)
}

fn roll<R: Real>(t: &mut Tape<R>, x: TensorId, s: usize, forward: bool) -> Result<TensorId> {
    let sh = t.shape(x).to_vec();
    if sh.len() != 3 {
        return Err(Error::shape(format!("cyclic shift needs [H,W,d], got {sh:?}")));
    }
    let (h, w, d) = (sh[0], sh[1], sh[2]);
    if s >= h.min(w) {
        return Err(Error::config(format!("shift {s} out of range for {h}x{w}")));
    }
    if s == 0 {
        return t.reshape(x, &sh);
    }
    let mut idx = Vec::with_capacity(h * w * d);
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = if forward {
                ((i + s) % h, (j + s) % w)
            } else {
                ((i + h - s) % h, (j + w - s) % w)
            };
            let base = (si * w + sj) * d;
            for c in 0..d {
                idx.push(base + c);
            }
        }
    }
    t.gather(x, idx, vec![h, w, d])
}

/// Region id of a shifted-map coordinate: the canonical three-band split
/// (interior rows, tail rows that stayed, wrapped rows). When the whole axis
/// is a single window there is nothing to separate, so it collapses to one
/// band.
fn band(i: usize, extent: usize, m: usize, s: usize) -> usize {
    if extent == m {
        0
    } else if i < extent - m {
        0
    } else if i < extent - s {
        1
    } else {
        2
    }
}

/// Additive attention mask for the shifted half: [nW, M*M, M*M], zero for
/// same-region pairs and MASK_VALUE for cross-region pairs.
pub fn build_shift_mask<R: Real>(h: usize, w: usize, m: usize, s: usize) -> Result<Tensor<R>> {
    check_divisible(h, w, m)?;
    if s == 0 || s >= m {
        return Err(Error::config(format!("shift {s} must satisfy 0 < s < window {m}")));
    }
    let (wy_n, wx_n) = (h / m, w / m);
    let nw = wy_n * wx_n;
    let mm = m * m;
    let mut data = vec![R::zero(); nw * mm * mm];
    let masked = r::<R>(MASK_VALUE);
    for wy in 0..wy_n {
        for wx in 0..wx_n {
            let win = wy * wx_n + wx;
            let mut ids = Vec::with_capacity(mm);
            for ty in 0..m {
                for tx in 0..m {
                    let row = band(wy * m + ty, h, m, s);
                    let col = band(wx * m + tx, w, m, s);
                    ids.push(row * 3 + col);
                }
            }
            for a in 0..mm {
                for b in 0..mm {
                    if ids[a] != ids[b] {
                        data[(win * mm + a) * mm + b] = masked;
                    }
                }
            }
        }
    }
    Tensor::new(vec![nw, mm, mm], data)
}

/// Per-head learned relative-position table of shape (2M-1)^2, expanded into
/// an M^2 x M^2 bias shared by every window.
pub struct RelPosBias<R> {
    pub tables: Vec<Param<R>>,
    pub window: usize,
}

impl<R: Real> RelPosBias<R> {
    pub fn new(window: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        let side = 2 * window - 1;
        RelPosBias {
            tables: (0..n_heads)
                .map(|_| Param::no_decay(trunc_normal(&[side * side], 0.02, rng)))
                .collect(),
            window,
        }
    }

    fn index_map(&self) -> Vec<usize> {
        let m = self.window;
        let side = 2 * m - 1;
        let mm = m * m;
        let mut idx = Vec::with_capacity(mm * mm);
        for a in 0..mm {
            let (ay, ax) = (a / m, a % m);
            for b in 0..mm {
                let (by, bx) = (b / m, b % m);
                let dy = ay + m - 1 - by;
                let dx = ax + m - 1 - bx;
                idx.push(dy * side + dx);
            }
        }
        idx
    }

    /// One [M^2, M^2] bias tensor per head, gathered from the tables.
    pub fn bias_ids(&self, t: &mut Tape<R>) -> Result<Vec<TensorId>> {
        let idx = self.index_map();
        let mm = self.window * self.window;
        self.tables
            .iter()
            .map(|table| {
                let tid = t.param(table);
                t.gather(tid, idx.clone(), vec![mm, mm])
            })
            .collect()
    }

    pub fn params(&self) -> Named<'_, R> {
        self.tables.iter().enumerate().map(|(i, p)| (format!("table{i}"), p)).collect()
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        self.tables.iter_mut().enumerate().map(|(i, p)| (format!("table{i}"), p)).collect()
    }
}

struct Mlp<R> {
    fc1: Linear<R>,
    fc2: Linear<R>,
}

impl<R: Real> Mlp<R> {
    fn new(d: usize, rng: &mut impl Rng) -> Self {
        Mlp { fc1: Linear::new(d, 4 * d, true, rng), fc2: Linear::new(4 * d, d, true, rng) }
    }

    fn forward(&self, t: &mut Tape<R>, x: TensorId) -> Result<TensorId> {
        let h = self.fc1.forward(t, x)?;
        let h = t.silu(h);
        self.fc2.forward(t, h)
    }

    fn params(&self) -> Named<'_, R> {
        let mut v = scoped("fc1", self.fc1.params());
        v.extend(scoped("fc2", self.fc2.params()));
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, R> {
        let mut v = scoped("fc1", self.fc1.params_mut());
        v.extend(scoped("fc2", self.fc2.params_mut()));
        v
    }
}

pub struct SwinBlockParams<R> {
    pub cfg: WindowConfig,
    wmsa: MultiHeadParams<R>,
    bias_w: RelPosBias<R>,
    ln1a: LayerNorm<R>,
    ln1b: LayerNorm<R>,
    mlp1: Mlp<R>,
    swmsa: MultiHeadParams<R>,
    bias_sw: RelPosBias<R>,
    ln2a: LayerNorm<R>,
    ln2b: LayerNorm<R>,
    mlp2: Mlp<R>,
}

impl<R: Real> SwinBlockParams<R> {
    pub fn new(d_model: usize, window: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let cfg = WindowConfig { window, shift: window / 2, n_heads, d_model };
        if cfg.shift == 0 {
            return Err(Error::config(format!("window {window} too small to shift")));
        }
        Ok(SwinBlockParams {
            cfg,
            wmsa: MultiHeadParams::new(d_model, n_heads, rng)?,
            bias_w: RelPosBias::new(window, n_heads, rng),
            ln1a: LayerNorm::new(d_model),
            ln1b: LayerNorm::new(d_model),
            mlp1: Mlp::new(d_model, rng),
            swmsa: MultiHeadParams::new(d_model, n_heads, rng)?,
            bias_sw: RelPosBias::new(window, n_heads, rng),
            ln2a: LayerNorm::new(d_model),
            ln2b: LayerNorm::new(d_model),
            mlp2: Mlp::new(d_model, rng),
        })
    }

    pub fn params(&self) -> Named<'_, R> {
        let mut v = scoped("wmsa", self.wmsa.params());
        v.extend(scoped("bias_w", self.bias_w.params()));
        v.extend(scoped("ln1a", self.ln1a.params()));
        v.extend(scoped("ln1b", self.ln1b.params()));
        v.extend(scoped("mlp1", self.mlp1.params()));
        v.extend(scoped("swmsa", self.swmsa.params()));
        v.extend(scoped("bias_sw", self.bias_sw.params()));
        v.extend(scoped("ln2a", self.ln2a.params()));
        v.extend(scoped("ln2b", self.ln2b.params()));
        v.extend(scoped("mlp2", self.mlp2.params()));
        v
    }

    pub fn params_mut(&mut self) -> NamedMut<'_, R> {
        let mut v = scoped("wmsa", self.wmsa.params_mut());
        v.extend(scoped("bias_w", self.bias_w.params_mut()));
        v.extend(scoped("ln1a", self.ln1a.params_mut()));
        v.extend(scoped("ln1b", self.ln1b.params_mut()));
        v.extend(scoped("mlp1", self.mlp1.params_mut()));
        v.extend(scoped("swmsa", self.swmsa.params_mut()));
        v.extend(scoped("bias_sw", self.bias_sw.params_mut()));
        v.extend(scoped("ln2a", self.ln2a.params_mut()));
        v.extend(scoped("ln2b", self.ln2b.params_mut()));
        v.extend(scoped("mlp2", self.mlp2.params_mut()));
        v
    }
}

/// Windowed multi-head attention over every window of x, with shared
/// relative-position bias and an optional per-window additive mask.
fn window_msa<R: Real>(
    t: &mut Tape<R>,
    x: TensorId,
    mha: &MultiHeadParams<R>,
    rel: &RelPosBias<R>,
    mask: Option<&Tensor<R>>,
    m: usize,
) -> Result<TensorId> {
    let sh = t.shape(x).to_vec();
    let (h, w, d) = (sh[0], sh[1], sh[2]);
    let wins = window_partition(t, x, m)?;
    let nw = t.shape(wins)[0];
    let mm = m * m;
    let bias = rel.bias_ids(t)?;
    let mut outs = Vec::with_capacity(nw);
    for wi in 0..nw {
        let idx: Vec<usize> = (wi * mm * d..(wi + 1) * mm * d).collect();
        let win = t.gather(wins, idx, vec![mm, d])?;
        let mask_id = match mask {
            Some(mk) => {
                let slice = &mk.data()[wi * mm * mm..(wi + 1) * mm * mm];
                Some(t.constant(Tensor::new(vec![mm, mm], slice.to_vec())?))
            }
            None => None,
        };
        let y = multi_head(t, win, mha, Some(&bias), mask_id)?;
        outs.push(t.reshape(y, &[1, mm, d])?);
    }
    let cat = t.concat(&outs, 0)?;
    window_merge(t, cat, h, w)
}

/// Two coupled halves: plain windowed attention, then shifted windowed
/// attention with cross-region masking, each followed by a post-norm MLP.
pub fn swin_block<R: Real>(
    t: &mut Tape<R>,
    x: TensorId,
    p: &SwinBlockParams<R>,
) -> Result<TensorId> {
    let sh = t.shape(x).to_vec();
    if sh.len() != 3 || sh[2] != p.cfg.d_model {
        return Err(Error::shape(format!(
            "swin_block: input {sh:?} does not match width {}",
            p.cfg.d_model
        )));
    }
    let (h, w, d) = (sh[0], sh[1], sh[2]);
    let m = p.cfg.window;
    check_divisible(h, w, m)?;

    // half 1: W-MSA
    let attn = window_msa(t, x, &p.wmsa, &p.bias_w, None, m)?;
    let res = t.add(x, attn)?;
    let u = p.ln1a.forward(t, res)?;
    let uf = t.reshape(u, &[h * w, d])?;
    let mlp = p.mlp1.forward(t, uf)?;
    let mlp = t.reshape(mlp, &[h, w, d])?;
    let res = t.add(u, mlp)?;
    let y1 = p.ln1b.forward(t, res)?;

    // half 2: SW-MSA under cyclic shift and region masking
    let s = p.cfg.shift;
    let shifted = cyclic_shift(t, y1, s)?;
    let mask = build_shift_mask::<R>(h, w, m, s)?;
    let attn2 = window_msa(t, shifted, &p.swmsa, &p.bias_sw, Some(&mask), m)?;
    let attn2 = reverse_cyclic_shift(t, attn2, s)?;
    let res = t.add(y1, attn2)?;
    let u2 = p.ln2a.forward(t, res)?;
    let uf2 = t.reshape(u2, &[h * w, d])?;
    let mlp2 = p.mlp2.forward(t, uf2)?;
    let mlp2 = t.reshape(mlp2, &[h, w, d])?;
    let res = t.add(u2, mlp2)?;
    p.ln2b.forward(t, res)
}
