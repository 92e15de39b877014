//! Raw numeric kernels on flat row-major slices.
//!
//! Everything here is pure and allocation-explicit; the tape layer wraps
//! these with gradient bookkeeping. Loop order is chosen so the innermost
//! loop walks contiguous memory (ikj matmul, row-wise conv accumulation).

use crate::error::{Error, Result};
use crate::scalar::Real;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![R::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == R::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
    c
}

/// B[n,m] = A[m,n] transposed.
pub fn transpose<R: Real>(a: &[R], m: usize, n: usize) -> Vec<R> {
    let mut t = vec![R::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Output extent of a conv/pool window sweep.
pub fn conv_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be >= 1"));
    }
    let padded = input + 2 * pad;
    if k > padded {
        return Err(Error::shape(format!(
            "window {k} larger than padded input {padded} (input {input}, pad {pad})"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Copy the (ki,kj)-shifted, stride-subsampled view of one input channel
/// into a contiguous [OH,OW] plane (zeros where the window leaves the
/// input). Hoisting this makes every accumulation loop contiguous.
#[allow(clippy::too_many_arguments)]
fn patch_plane<R: Real>(
    x: &[R],
    ic: usize,
    h: usize,
    w: usize,
    ki: usize,
    kj: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    plane: &mut [R],
) {
    plane.fill(R::zero());
    for oy in 0..oh {
        let iy = (oy * stride + ki) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let xrow = &x[(ic * h + iy as usize) * w..(ic * h + iy as usize + 1) * w];
        let prow = &mut plane[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            // contiguous segment copy
            let start = kj as isize - pad as isize;
            let lo = (-start).max(0) as usize;
            let hi = ow.min(((w as isize) - start).max(0) as usize);
            if lo < hi {
                let s = (start + lo as isize) as usize;
                prow[lo..hi].copy_from_slice(&xrow[s..s + (hi - lo)]);
            }
        } else {
            for (ox, pv) in prow.iter_mut().enumerate() {
                let ix = (ox * stride + kj) as isize - pad as isize;
                if ix >= 0 && ix < w as isize {
                    *pv = xrow[ix as usize];
                }
            }
        }
    }
}

/// x[C,H,W] * kernel[N,C,K,K] -> out[N,OH,OW], zero padding.
pub fn conv2d<R: Real>(
    x: &[R],
    k: &[R],
    c: usize,
    h: usize,
    w: usize,
    n: usize,
    ksz: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<R> {
    // 1x1 stride-1 convolution is a plain matmul over pixels.
    if ksz == 1 && stride == 1 && pad == 0 {
        return matmul(k, x, n, c, h * w);
    }
    let mut out = vec![R::zero(); n * oh * ow];
    let mut plane = vec![R::zero(); oh * ow];
    for ic in 0..c {
        for ki in 0..ksz {
            for kj in 0..ksz {
                patch_plane(x, ic, h, w, ki, kj, stride, pad, oh, ow, &mut plane);
                for on in 0..n {
                    let kv = k[((on * c + ic) * ksz + ki) * ksz + kj];
                    if kv == R::zero() {
                        continue;
                    }
                    let orow = &mut out[on * oh * ow..(on + 1) * oh * ow];
                    for (o, p) in orow.iter_mut().zip(&plane) {
                        *o += kv * *p;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d` w.r.t. input and kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<R: Real>(
    d_out: &[R],
    x: &[R],
    k: &[R],
    c: usize,
    h: usize,
    w: usize,
    n: usize,
    ksz: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<R>, Vec<R>) {
    if ksz == 1 && stride == 1 && pad == 0 {
        // dX = K^T(c,n) @ dY(n,hw); dK = dY(n,hw) @ X^T(hw,c)
        let kt = transpose(k, n, c);
        let dx = matmul(&kt, d_out, c, n, h * w);
        let xt = transpose(x, c, h * w);
        let dk = matmul(d_out, &xt, n, h * w, c);
        return (dx, dk);
    }
    let mut dx = vec![R::zero(); c * h * w];
    let mut dk = vec![R::zero(); n * c * ksz * ksz];
    let mut plane = vec![R::zero(); oh * ow];
    let mut dplane = vec![R::zero(); oh * ow];
    for ic in 0..c {
        for ki in 0..ksz {
            for kj in 0..ksz {
                patch_plane(x, ic, h, w, ki, kj, stride, pad, oh, ow, &mut plane);
                dplane.fill(R::zero());
                for on in 0..n {
                    let kv = k[((on * c + ic) * ksz + ki) * ksz + kj];
                    let drow = &d_out[on * oh * ow..(on + 1) * oh * ow];
                    // dK: dot of the upstream plane with the patch plane;
                    // four independent accumulators so the sum vectorizes
                    let mut acc = [R::zero(); 4];
                    let mut i = 0;
                    while i + 4 <= drow.len() {
                        acc[0] += drow[i] * plane[i];
                        acc[1] += drow[i + 1] * plane[i + 1];
                        acc[2] += drow[i + 2] * plane[i + 2];
                        acc[3] += drow[i + 3] * plane[i + 3];
                        i += 4;
                    }
                    let mut total = acc[0] + acc[1] + acc[2] + acc[3];
                    for j in i..drow.len() {
                        total += drow[j] * plane[j];
                    }
                    dk[((on * c + ic) * ksz + ki) * ksz + kj] += total;
                    // dX accumulates kv * dY into the shifted plane first
                    for (dp, dv) in dplane.iter_mut().zip(drow) {
                        *dp += kv * *dv;
                    }
                }
                // scatter the accumulated plane back into dx
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xbase = (ic * h + iy as usize) * w;
                    let prow = &dplane[oy * ow..(oy + 1) * ow];
                    for (ox, pv) in prow.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[xbase + ix as usize] += *pv;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// im2col: x[C,H,W] -> columns[(K*K*C), P], one column per window position
/// (row-major positions), each column the patch flattened channel-major.
pub fn unfold<R: Real>(
    x: &[R],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<R> {
    let p = oh * ow;
    let mut out = vec![R::zero(); k * k * c * p];
    for ic in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ic * k * k + ki * k + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[row * p + oy * ow + ox] = x[(ic * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add adjoint of `unfold`.
pub fn unfold_backward<R: Real>(
    d_cols: &[R],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<R> {
    let p = oh * ow;
    let mut dx = vec![R::zero(); c * h * w];
    for ic in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ic * k * k + ki * k + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ic * h + iy as usize) * w + ix as usize] += d_cols[row * p + oy * ow + ox];
                    }
                }
            }
        }
    }
    dx
}

/// Max pool over k*k windows; out-of-bounds positions are skipped (acts as
/// negative-infinity padding). Returns (values, argmax flat indices into x).
pub fn maxpool2d<R: Real>(
    x: &[R],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<R>, Vec<usize>) {
    let mut out = vec![R::zero(); c * oh * ow];
    let mut arg = vec![0usize; c * oh * ow];
    for ic in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = R::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (ic * h + iy as usize) * w + ix as usize;
                        if x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (ic * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

// ── Broadcasting ─────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes, or None when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ad = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let bd = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ad == bd {
            ad
        } else if ad == 1 {
            bd
        } else if bd == 1 {
            ad
        } else {
            return None;
        };
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let off = rank - shape.len();
    let base = crate::tensor::strides(shape);
    let mut s = vec![0usize; rank];
    for i in 0..rank {
        if i >= off && shape[i - off] != 1 {
            s[i] = base[i - off];
        }
    }
    s
}

/// Elementwise binary op with broadcasting.
pub fn binary_broadcast<R: Real>(
    a: &[R],
    a_shape: &[usize],
    b: &[R],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(R, R) -> R,
) -> Vec<R> {
    let n: usize = out_shape.iter().product();
    // Fast path: identical shapes.
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f(a[oa], b[ob]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape` by summing over
/// broadcast axes; adjoint of broadcasting.
pub fn reduce_to_shape<R: Real>(grad: &[R], grad_shape: &[usize], target_shape: &[usize]) -> Vec<R> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let tn: usize = target_shape.iter().product();
    let mut out = vec![R::zero(); tn];
    let st = broadcast_strides(target_shape, grad_shape);
    let rank = grad_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for &g in grad {
        out[ot] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < grad_shape[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * grad_shape[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let c = matmul(&[1.0f64, 2.0], &[3.0, 4.0], 1, 2, 1);
        assert_eq!(c, vec![11.0]);
    }

    #[test]
    fn matmul_identity() {
        let i2 = [1.0f32, 0.0, 0.0, 1.0];
        let a = [1.0f32, 2.0, 3.0, 4.0];
        assert_eq!(matmul(&i2, &a, 2, 2, 2), a.to_vec());
    }

    #[test]
    fn conv_extent_rejects_oversized_kernel() {
        assert_eq!(conv_extent(160, 6, 2, 2).unwrap(), 80);
        assert_eq!(conv_extent(3, 2, 1, 0).unwrap(), 2);
        assert!(conv_extent(3, 6, 1, 1).is_err());
        assert!(conv_extent(3, 3, 0, 0).is_err());
    }

    #[test]
    fn conv2d_ones_case() {
        // 1x3x3 ones, 1x1x2x2 ones kernel -> 2x2 of fours
        let x = vec![1.0f64; 9];
        let k = vec![1.0f64; 4];
        let y = conv2d(&x, &k, 1, 3, 3, 1, 2, 1, 0, 2, 2);
        assert_eq!(y, vec![4.0; 4]);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let x: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64 * 0.3 - 2.0).collect();
        // single output channel per input channel is not identity; use C=1
        let x1 = &x[..16];
        let mut k = vec![0.0f64; 9];
        k[4] = 1.0; // center of 3x3
        let y = conv2d(x1, &k, 1, 4, 4, 1, 3, 1, 1, 4, 4);
        assert_eq!(y, x1.to_vec());
    }

    #[test]
    fn unfold_k1_enumerates_pixels() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let u = unfold(&x, 1, 2, 2, 1, 1, 0, 2, 2);
        assert_eq!(u, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unfold_shape_counts() {
        // C=2, H=W=4, K=2, stride 2 -> 8 x 4
        let x: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let u = unfold(&x, 2, 4, 4, 2, 2, 0, 2, 2);
        assert_eq!(u.len(), 8 * 4);
        // first column = first 2x2 patch of channel 0 then channel 1
        let col0: Vec<f64> = (0..8).map(|r| u[r * 4]).collect();
        assert_eq!(col0, vec![0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 1, 5], &[4, 5]).unwrap(), vec![3, 4, 5]);
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]).unwrap(), vec![2, 3]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_none());
    }

    #[test]
    fn binary_and_reduce_roundtrip() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [10.0f64, 20.0, 30.0]; // [3]
        let s = binary_broadcast(&a, &[2, 3], &b, &[3], &[2, 3], |x, y| x + y);
        assert_eq!(s, vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let g = reduce_to_shape(&[1.0f64; 6], &[2, 3], &[3]);
        assert_eq!(g, vec![2.0, 2.0, 2.0]);
    }
}
