//! Forward and backward kernels on flat row-major buffers.
//!
//! Batch-level work is split per sample through [`crate::par`]; reductions
//! across samples (weight and bias gradients) are summed in sample order.

use crate::par;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output-column range `[lo, hi)` for kernel column `kj` at stride 1.
#[inline]
fn valid_cols(g: &ConvGeom, kj: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(ow);
    let hi = (g.w + g.pad).saturating_sub(kj).min(ow).max(lo);
    (lo, hi)
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(g, kj, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let start = lo + kj - g.pad;
                        line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        continue;
                    }
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for c in 0..g.c {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(g, kj, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    let line = &src[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let start = base + lo + kj - g.pad;
                        for (d, v) in plane[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                            *d += *v;
                        }
                        continue;
                    }
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let ohw = g.out_h() * g.out_w();
    let in_len = g.c * g.h * g.w;
    let rows = g.col_rows();
    let mut out = Vec::with_capacity(g.n * g.f * ohw);
    for _ in 0..g.n {
        for bias in &b[..g.f] {
            out.extend(std::iter::repeat_n(*bias, ohw));
        }
    }
    let scratch_len = if g.is_pointwise() { 0 } else { rows * ohw };
    par::for_each_chunk(&mut out, g.f * ohw, |n, out_n| {
        let xn = &x[n * in_len..(n + 1) * in_len];
        T::with_scratch(scratch_len, |cols| {
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, cols);
                cols
            };
            T::gemm(g.f, rows, ohw, w, rows as isize, 1, cols, ohw as isize, 1, T::one(), out_n, ohw as isize, 1);
        });
    });
    out
}

pub struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_x: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let ohw = g.out_h() * g.out_w();
    let in_len = g.c * g.h * g.w;
    let rows = g.col_rows();
    let scratch_len = if g.is_pointwise() { 0 } else { rows * ohw };

    let gx = need_x.then(|| {
        let mut gx = vec![T::zero(); g.n * in_len];
        par::for_each_chunk(&mut gx, in_len, |n, gx_n| {
            let go = &gout[n * g.f * ohw..(n + 1) * g.f * ohw];
            if g.is_pointwise() {
                T::gemm(rows, g.f, ohw, w, 1, rows as isize, go, ohw as isize, 1, T::zero(), gx_n, ohw as isize, 1);
                return;
            }
            T::with_scratch(scratch_len, |gcols| {
                T::gemm(rows, g.f, ohw, w, 1, rows as isize, go, ohw as isize, 1, T::zero(), gcols, ohw as isize, 1);
                col2im(g, gcols, gx_n);
            });
        });
        gx
    });

    let (gw, gb) = if need_params {
        let parts = par::map(g.n, |n| {
            let go = &gout[n * g.f * ohw..(n + 1) * g.f * ohw];
            let xn = &x[n * in_len..(n + 1) * in_len];
            let mut acc = vec![T::zero(); g.f * rows];
            T::with_scratch(scratch_len, |cols| {
                let cols: &[T] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(g, xn, cols);
                    cols
                };
                T::gemm(g.f, ohw, rows, go, ohw as isize, 1, cols, 1, ohw as isize, T::zero(), &mut acc, rows as isize, 1);
            });
            let gb: Vec<T> = go.chunks(ohw).map(|l| l.iter().copied().sum()).collect();
            (acc, gb)
        });
        let (gws, gbs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        (Some(par::sum_in_order(gws)), Some(par::sum_in_order(gbs)))
    } else {
        (None, None)
    };
    ConvGrads { x: gx, w: gw, b: gb }
}

pub fn avg_pool2_forward<T: Scalar>(planes: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                dst[i * ow + j] = (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(planes: usize, h: usize, w: usize, gout: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let v = src[i * ow + j] * quarter;
                let r0 = 2 * i * w + 2 * j;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r0 + w] = v;
                dst[r0 + w + 1] = v;
            }
        }
    }
    gx
}

pub fn upsample_forward<T: Scalar>(planes: usize, h: usize, w: usize, f: usize, x: &[T]) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let row = &src[(y / f) * w..(y / f + 1) * w];
            for (xo, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *d = row[xo / f];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
    gout: &[T],
) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                dst[(y / f) * w + xo / f] += src[y * ow + xo];
            }
        }
    }
    gx
}

/// `y[N,O] = x[N,D] · w[O,D]ᵀ + b[O]`.
pub fn linear_forward<T: Scalar>(n: usize, d: usize, o: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut y: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
    T::gemm(n, d, o, x, d as isize, 1, w, 1, d as isize, T::one(), &mut y, o as isize, 1);
    y
}

pub fn linear_backward<T: Scalar>(
    n: usize,
    d: usize,
    o: usize,
    x: &[T],
    w: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); n * d];
    T::gemm(n, o, d, gy, o as isize, 1, w, d as isize, 1, T::zero(), &mut gx, d as isize, 1);
    let mut gw = vec![T::zero(); o * d];
    T::gemm(o, n, d, gy, 1, o as isize, x, d as isize, 1, T::zero(), &mut gw, d as isize, 1);
    let mut gb = vec![T::zero(); o];
    for row in gy.chunks(o) {
        for (a, v) in gb.iter_mut().zip(row) {
            *a += *v;
        }
    }
    (gx, gw, gb)
}

/// Per-position focal terms for a softmax over axis 1 of `[N, K, S]`.
///
/// Returns the mean loss and, when requested, the gradient with respect to
/// the logits scaled by `upstream`.
pub fn softmax_focal<T: Scalar>(
    n: usize,
    k: usize,
    s: usize,
    logits: &[T],
    targets: &[usize],
    gamma: f64,
    alpha: f64,
    upstream: Option<T>,
) -> (T, Option<Vec<T>>) {
    let count = (n * s) as f64;
    let mut total = 0.0f64;
    let mut grad = upstream.map(|_| vec![T::zero(); logits.len()]);
    let up = upstream.map(|u| u.to_f64().unwrap_or(0.0)).unwrap_or(0.0);
    let mut probs = vec![0.0f64; k];
    for ni in 0..n {
        for si in 0..s {
            let at = |ki: usize| (ni * k + ki) * s + si;
            let mut max = f64::NEG_INFINITY;
            for ki in 0..k {
                max = max.max(logits[at(ki)].to_f64().unwrap_or(f64::NAN));
            }
            let mut denom = 0.0;
            for (ki, p) in probs.iter_mut().enumerate() {
                *p = (logits[at(ki)].to_f64().unwrap_or(f64::NAN) - max).exp();
                denom += *p;
            }
            for p in probs.iter_mut() {
                *p /= denom;
            }
            let t = targets[ni * s + si];
            let pt = probs[t];
            let clamped = pt < FOCAL_PROB_FLOOR;
            let ptc = pt.max(FOCAL_PROB_FLOOR);
            let one_minus = 1.0 - ptc;
            let log_p = ptc.ln();
            total += -alpha * one_minus.powf(gamma) * log_p;

            if let Some(g) = grad.as_mut() {
                if clamped {
                    continue;
                }
                let focusing = if gamma == 0.0 || one_minus <= 0.0 {
                    0.0
                } else {
                    gamma * one_minus.powf(gamma - 1.0) * log_p
                };
                let dl_dp = -alpha * (one_minus.powf(gamma) / ptc - focusing);
                let scale = dl_dp * pt * up / count;
                for (ki, p) in probs.iter().enumerate() {
                    let delta = if ki == t { 1.0 } else { 0.0 };
                    g[at(ki)] = T::from_f64_lossy(scale * (delta - p));
                }
            }
        }
    }
    (T::from_f64_lossy(total / count), grad)
}

pub const FOCAL_PROB_FLOOR: f64 = 1e-7;

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.n * g.f * oh * ow];
        for n in 0..g.n {
            for f in 0..g.f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[f];
                        for c in 0..g.c {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((f * g.c + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((n * g.f + f) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeom { n: 2, c: 3, h: 7, w: 6, f: 4, kh: 3, kw: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..g.f * g.c * 9).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.5).collect();
        let b = vec![0.5, -1.0, 0.0, 2.0];
        let fast = conv2d_forward(&g, &x, &w, &b);
        let slow = naive_conv(&g, &x, &w, &b);
        for (a, e) in fast.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
    }

    #[test]
    fn upsample_duplicates_pixels() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let y = upsample_forward(1, 2, 2, 2, &x);
        assert_eq!(
            y,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let g = upsample_backward(1, 2, 2, 2, &[1.0f32; 16]);
        assert_eq!(g, vec![4.0; 4]);
    }
}
