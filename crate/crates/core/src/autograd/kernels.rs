//! Raw slice kernels behind the differentiable ops. All loops run in a fixed
//! sequential order so results are bitwise reproducible.

use crate::tensor::Scalar;

/// Shape of a `[B, C, H, W]` activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn from_shape(s: &[usize]) -> Option<Self> {
        match *s {
            [b, c, h, w] => Some(Dims4 { b, c, h, w }),
            _ => None,
        }
    }
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// Valid output column range for kernel tap `kx` with padding `pad`.
#[inline]
fn tap_range(len: usize, k_off: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k_off);
    let hi = (len + pad).saturating_sub(k_off).min(len);
    (lo, hi.max(lo))
}

// ── convolution (stride 1, same padding, odd kernel) ─────────────────────

pub fn conv2d_forward<T: Scalar>(x: &[T], xd: Dims4, w: &[T], co: usize, k: usize) -> Vec<T> {
    let pad = (k - 1) / 2;
    let (h, wd, plane) = (xd.h, xd.w, xd.plane());
    let mut out = vec![T::zero(); xd.b * co * plane];
    for b in 0..xd.b {
        for o in 0..co {
            let out_plane = &mut out[(b * co + o) * plane..(b * co + o + 1) * plane];
            for ci in 0..xd.c {
                let x_plane = &x[(b * xd.c + ci) * plane..(b * xd.c + ci + 1) * plane];
                let wbase = (o * xd.c + ci) * k * k;
                if k == 1 {
                    axpy(w[wbase], x_plane, out_plane);
                    continue;
                }
                for ky in 0..k {
                    let (y0, y1) = tap_range(h, ky, pad);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let (x0, x1) = tap_range(wd, kx, pad);
                        for oy in y0..y1 {
                            let iy = oy + ky - pad;
                            let src = &x_plane[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad];
                            axpy(wv, src, &mut out_plane[oy * wd + x0..oy * wd + x1]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the input of [`conv2d_forward`].
pub fn conv2d_backward_input<T: Scalar>(g: &[T], xd: Dims4, w: &[T], co: usize, k: usize) -> Vec<T> {
    let pad = (k - 1) / 2;
    let (h, wd, plane) = (xd.h, xd.w, xd.plane());
    let mut gx = vec![T::zero(); xd.b * xd.c * plane];
    for b in 0..xd.b {
        for ci in 0..xd.c {
            let gx_plane = &mut gx[(b * xd.c + ci) * plane..(b * xd.c + ci + 1) * plane];
            for o in 0..co {
                let g_plane = &g[(b * co + o) * plane..(b * co + o + 1) * plane];
                let wbase = (o * xd.c + ci) * k * k;
                if k == 1 {
                    axpy(w[wbase], g_plane, gx_plane);
                    continue;
                }
                for ky in 0..k {
                    let (y0, y1) = tap_range(h, ky, pad);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let (x0, x1) = tap_range(wd, kx, pad);
                        for oy in y0..y1 {
                            let iy = oy + ky - pad;
                            let src = &g_plane[oy * wd + x0..oy * wd + x1];
                            axpy(
                                wv,
                                src,
                                &mut gx_plane[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad],
                            );
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient w.r.t. the weight of [`conv2d_forward`].
pub fn conv2d_backward_weight<T: Scalar>(g: &[T], x: &[T], xd: Dims4, co: usize, k: usize) -> Vec<T> {
    let pad = (k - 1) / 2;
    let (h, wd, plane) = (xd.h, xd.w, xd.plane());
    let mut gw = vec![T::zero(); co * xd.c * k * k];
    for b in 0..xd.b {
        for o in 0..co {
            let g_plane = &g[(b * co + o) * plane..(b * co + o + 1) * plane];
            for ci in 0..xd.c {
                let x_plane = &x[(b * xd.c + ci) * plane..(b * xd.c + ci + 1) * plane];
                let wbase = (o * xd.c + ci) * k * k;
                if k == 1 {
                    gw[wbase] += dot(g_plane, x_plane);
                    continue;
                }
                for ky in 0..k {
                    let (y0, y1) = tap_range(h, ky, pad);
                    for kx in 0..k {
                        let (x0, x1) = tap_range(wd, kx, pad);
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy + ky - pad;
                            acc += dot(
                                &g_plane[oy * wd + x0..oy * wd + x1],
                                &x_plane[iy * wd + x0 + kx - pad..iy * wd + x1 + kx - pad],
                            );
                        }
                        gw[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

// ── transposed convolution, kernel 2 stride 2 ───────────────────────────

/// `w` has shape `[C_in, C_out, 2, 2]`; output is `[B, C_out, 2H, 2W]`.
pub fn conv_t2_forward<T: Scalar>(x: &[T], xd: Dims4, w: &[T], co: usize) -> Vec<T> {
    let (h, wd) = (xd.h, xd.w);
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![T::zero(); xd.b * co * oh * ow];
    for b in 0..xd.b {
        for ci in 0..xd.c {
            let x_plane = &x[(b * xd.c + ci) * h * wd..(b * xd.c + ci + 1) * h * wd];
            for o in 0..co {
                let wb = (ci * co + o) * 4;
                let out_plane = &mut out[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
                for i in 0..h {
                    for j in 0..wd {
                        let xv = x_plane[i * wd + j];
                        let r0 = (2 * i) * ow + 2 * j;
                        let r1 = r0 + ow;
                        out_plane[r0] += xv * w[wb];
                        out_plane[r0 + 1] += xv * w[wb + 1];
                        out_plane[r1] += xv * w[wb + 2];
                        out_plane[r1 + 1] += xv * w[wb + 3];
                    }
                }
            }
        }
    }
    out
}

pub fn conv_t2_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    xd: Dims4,
    w: &[T],
    co: usize,
) -> (Vec<T>, Vec<T>) {
    let (h, wd) = (xd.h, xd.w);
    let (oh, ow) = (2 * h, 2 * wd);
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for b in 0..xd.b {
        for ci in 0..xd.c {
            let xoff = (b * xd.c + ci) * h * wd;
            for o in 0..co {
                let wb = (ci * co + o) * 4;
                let g_plane = &g[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
                let mut acc = [T::zero(); 4];
                for i in 0..h {
                    for j in 0..wd {
                        let r0 = (2 * i) * ow + 2 * j;
                        let r1 = r0 + ow;
                        let gs = [g_plane[r0], g_plane[r0 + 1], g_plane[r1], g_plane[r1 + 1]];
                        let xv = x[xoff + i * wd + j];
                        let mut s = T::zero();
                        for t in 0..4 {
                            s += gs[t] * w[wb + t];
                            acc[t] += gs[t] * xv;
                        }
                        gx[xoff + i * wd + j] += s;
                    }
                }
                for t in 0..4 {
                    gw[wb + t] += acc[t];
                }
            }
        }
    }
    (gx, gw)
}

// ── pooling and resampling ───────────────────────────────────────────────

/// 2x2 stride-2 max pool; returns (output, flat argmax index into `x` per output).
/// Ties resolve to the first element in row-major window order.
pub fn maxpool2_forward<T: Scalar>(x: &[T], xd: Dims4) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (xd.h / 2, xd.w / 2);
    let n = xd.b * xd.c * oh * ow;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for bc in 0..xd.b * xd.c {
        let base = bc * xd.plane();
        for i in 0..oh {
            for j in 0..ow {
                let cands = [
                    base + 2 * i * xd.w + 2 * j,
                    base + 2 * i * xd.w + 2 * j + 1,
                    base + (2 * i + 1) * xd.w + 2 * j,
                    base + (2 * i + 1) * xd.w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if x[c] > x[best] {
                        best = c;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Source taps for one output coordinate under align_corners=false.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub l1: T,
}

pub fn bilinear_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                l1: T::from_f64(if i1 == i0 { 0.0 } else { l1 }),
            }
        })
        .collect()
}

pub fn upsample_forward<T: Scalar>(x: &[T], xd: Dims4, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps::<T>(xd.h, oh);
    let tx = bilinear_taps::<T>(xd.w, ow);
    let mut out = Vec::with_capacity(xd.b * xd.c * oh * ow);
    for bc in 0..xd.b * xd.c {
        let p = &x[bc * xd.plane()..(bc + 1) * xd.plane()];
        for a in &ty {
            let l0y = T::one() - a.l1;
            for c in &tx {
                let l0x = T::one() - c.l1;
                let v = l0y * (l0x * p[a.i0 * xd.w + c.i0] + c.l1 * p[a.i0 * xd.w + c.i1])
                    + a.l1 * (l0x * p[a.i1 * xd.w + c.i0] + c.l1 * p[a.i1 * xd.w + c.i1]);
                out.push(v);
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(g: &[T], xd: Dims4, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps::<T>(xd.h, oh);
    let tx = bilinear_taps::<T>(xd.w, ow);
    let mut gx = vec![T::zero(); xd.b * xd.c * xd.plane()];
    for bc in 0..xd.b * xd.c {
        let gp = &mut gx[bc * xd.plane()..(bc + 1) * xd.plane()];
        let go = &g[bc * oh * ow..(bc + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let l0y = T::one() - a.l1;
            for (ox, c) in tx.iter().enumerate() {
                let gv = go[oy * ow + ox];
                let l0x = T::one() - c.l1;
                gp[a.i0 * xd.w + c.i0] += gv * l0y * l0x;
                gp[a.i0 * xd.w + c.i1] += gv * l0y * c.l1;
                gp[a.i1 * xd.w + c.i0] += gv * a.l1 * l0x;
                gp[a.i1 * xd.w + c.i1] += gv * a.l1 * c.l1;
            }
        }
    }
    gx
}

// ── normalization ────────────────────────────────────────────────────────

/// Statistics layout: the normalized channel axis has `c` entries, and the
/// tensor is viewed as `[outer, c, inner]`.
#[derive(Clone, Copy, Debug)]
pub struct AxisLayout {
    pub outer: usize,
    pub c: usize,
    pub inner: usize,
}

impl AxisLayout {
    #[inline]
    pub fn at(&self, o: usize, ch: usize, i: usize) -> usize {
        (o * self.c + ch) * self.inner + i
    }
}

/// Standardize over the channel axis at each (outer, inner) position.
/// Returns (xhat, rstd per position).
pub fn layer_norm_forward<T: Scalar>(x: &[T], l: AxisLayout, eps: T) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(l.outer * l.inner);
    let n = T::from_usize(l.c);
    for o in 0..l.outer {
        for i in 0..l.inner {
            let mut mean = T::zero();
            for ch in 0..l.c {
                mean += x[l.at(o, ch, i)];
            }
            mean /= n;
            let mut var = T::zero();
            for ch in 0..l.c {
                let d = x[l.at(o, ch, i)] - mean;
                var += d * d;
            }
            var /= n;
            let r = T::one() / (var + eps).sqrt();
            for ch in 0..l.c {
                let idx = l.at(o, ch, i);
                xhat[idx] = (x[idx] - mean) * r;
            }
            rstd.push(r);
        }
    }
    (xhat, rstd)
}

/// Input gradient of layer norm given `gy_hat = dL/dxhat`.
pub fn layer_norm_backward<T: Scalar>(gy_hat: &[T], xhat: &[T], rstd: &[T], l: AxisLayout) -> Vec<T> {
    let mut gx = vec![T::zero(); gy_hat.len()];
    let n = T::from_usize(l.c);
    for o in 0..l.outer {
        for i in 0..l.inner {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for ch in 0..l.c {
                let idx = l.at(o, ch, i);
                s1 += gy_hat[idx];
                s2 += gy_hat[idx] * xhat[idx];
            }
            let (m1, m2) = (s1 / n, s2 / n);
            let r = rstd[o * l.inner + i];
            for ch in 0..l.c {
                let idx = l.at(o, ch, i);
                gx[idx] = r * (gy_hat[idx] - m1 - xhat[idx] * m2);
            }
        }
    }
    gx
}

/// Per-channel batch statistics over all (outer, inner) positions.
/// Returns (mean, biased variance) per channel.
pub fn channel_stats<T: Scalar>(x: &[T], l: AxisLayout) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(l.outer * l.inner);
    let mut mean = vec![T::zero(); l.c];
    let mut var = vec![T::zero(); l.c];
    for ch in 0..l.c {
        let mut s = T::zero();
        for o in 0..l.outer {
            for i in 0..l.inner {
                s += x[l.at(o, ch, i)];
            }
        }
        let m = s / n;
        let mut v = T::zero();
        for o in 0..l.outer {
            for i in 0..l.inner {
                let d = x[l.at(o, ch, i)] - m;
                v += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = v / n;
    }
    (mean, var)
}

/// Input gradient of train-mode batch norm given `gy_hat = dL/dxhat`.
pub fn batch_norm_backward<T: Scalar>(gy_hat: &[T], xhat: &[T], rstd: &[T], l: AxisLayout) -> Vec<T> {
    let mut gx = vec![T::zero(); gy_hat.len()];
    let n = T::from_usize(l.outer * l.inner);
    for ch in 0..l.c {
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for o in 0..l.outer {
            for i in 0..l.inner {
                let idx = l.at(o, ch, i);
                s1 += gy_hat[idx];
                s2 += gy_hat[idx] * xhat[idx];
            }
        }
        let (m1, m2) = (s1 / n, s2 / n);
        for o in 0..l.outer {
            for i in 0..l.inner {
                let idx = l.at(o, ch, i);
                gx[idx] = rstd[ch] * (gy_hat[idx] - m1 - xhat[idx] * m2);
            }
        }
    }
    gx
}

/// Per-channel reduction of `a * b` (or `a` when `b` is `None`).
pub fn channel_sum<T: Scalar>(a: &[T], b: Option<&[T]>, l: AxisLayout) -> Vec<T> {
    let mut out = vec![T::zero(); l.c];
    for o in 0..l.outer {
        for (ch, acc) in out.iter_mut().enumerate() {
            let base = l.at(o, ch, 0);
            match b {
                Some(b) => *acc += dot(&a[base..base + l.inner], &b[base..base + l.inner]),
                None => {
                    for &v in &a[base..base + l.inner] {
                        *acc += v;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_range_covers_valid_outputs() {
        // 3-wide row, pad 1: tap 0 reads x[ox-1], valid for ox in 1..3
        assert_eq!(tap_range(3, 0, 1), (1, 3));
        assert_eq!(tap_range(3, 1, 1), (0, 3));
        assert_eq!(tap_range(3, 2, 1), (0, 2));
        // width 1 with a 3x3 kernel: only the center tap contributes
        assert_eq!(tap_range(1, 0, 1), (1, 1));
        assert_eq!(tap_range(1, 2, 1), (0, 0));
    }

    #[test]
    fn bilinear_taps_match_half_pixel_centers() {
        let t = bilinear_taps::<f64>(2, 4);
        // out 0 -> src -0.25 clamped to 0; out 1 -> 0.25; out 2 -> 0.75; out 3 -> 1.25 -> i0 = 1
        assert_eq!((t[0].i0, t[0].i1, t[0].l1), (0, 1, 0.0));
        assert_eq!((t[1].i0, t[1].i1, t[1].l1), (0, 1, 0.25));
        assert_eq!((t[2].i0, t[2].i1, t[2].l1), (0, 1, 0.75));
        assert_eq!((t[3].i0, t[3].i1, t[3].l1), (1, 1, 0.0));
    }

    #[test]
    fn maxpool_first_found_tie_break() {
        let x = [5.0f32, 5.0, 5.0, 5.0];
        let (out, arg) = maxpool2_forward(&x, Dims4 { b: 1, c: 1, h: 2, w: 2 });
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![0]);
    }
}
