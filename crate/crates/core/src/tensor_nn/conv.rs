//! Strided 1-D cross-correlation kernels.
//!
//! Inputs are split into `stride` polyphase components so every inner loop is
//! a contiguous axpy or dot product. Work is split over batch items (forward,
//! input gradient) or output channels (weight gradient); each worker owns a
//! disjoint slice of the result, so results are identical for any thread count.

use super::tensor::{axpy, dot};
use crate::par;

/// Output length of a zero-padded strided correlation.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct Geom {
    c_in: usize,
    stride: usize,
    pad: usize,
    l_in: usize,
    l_out: usize,
    /// Polyphase length: ceil(l_in / stride).
    m: usize,
}

impl Geom {
    /// Phase and offset of tap `k`: input index `t*s + k - p == (t + q)*s + r`.
    #[inline]
    fn tap(&self, k: usize) -> (usize, isize) {
        let off = k as isize - self.pad as isize;
        let s = self.stride as isize;
        (off.rem_euclid(s) as usize, off.div_euclid(s))
    }

    /// Output positions `t` for which `t + q` lies in the polyphase range.
    #[inline]
    fn t_range(&self, q: isize) -> (usize, usize) {
        let lo = (-q).max(0) as usize;
        let hi = (self.m as isize - q).clamp(0, self.l_out as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// Rearrange one item `[C, L]` into `[C, stride, M]` zero-filled phases.
fn polyphase(x: &[f64], g: &Geom) -> Vec<f64> {
    let (s, m) = (g.stride, g.m);
    let mut out = vec![0.0; g.c_in * s * m];
    for c in 0..g.c_in {
        let row = &x[c * g.l_in..(c + 1) * g.l_in];
        for (i, &v) in row.iter().enumerate() {
            out[(c * s + i % s) * m + i / s] = v;
        }
    }
    out
}

fn geom(x_shape: (usize, usize), w_shape: (usize, usize, usize), stride: usize, pad: usize, l_out: usize) -> Geom {
    let (c_in, l_in) = x_shape;
    let (_, wc, _) = w_shape;
    assert_eq!(wc, c_in, "weight expects {wc} input channels, got {c_in}");
    Geom {
        c_in,
        stride,
        pad,
        l_in,
        l_out,
        m: l_in.div_ceil(stride),
    }
}

/// `y[b,o,t] = bias[o] + sum_{c,k} w[o,c,k] x[b,c,t*stride + k - pad]`.
///
/// `x` is `[B, C, L]`, `w` is `[O, C, K]`; returns `[B, O, L_out]` flattened.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_forward(
    x: &[f64],
    batch: usize,
    c_in: usize,
    l_in: usize,
    w: &[f64],
    c_out: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize) {
    let l_out = conv_out_len(l_in, k, stride, pad);
    let g = geom((c_in, l_in), (c_out, c_in, k), stride, pad, l_out);
    let mut y = vec![0.0; batch * c_out * l_out];
    par::for_each_chunk_mut(&mut y, c_out * l_out, |b, yb| {
        let poly = polyphase(&x[b * c_in * l_in..(b + 1) * c_in * l_in], &g);
        for o in 0..c_out {
            let yo = &mut yb[o * l_out..(o + 1) * l_out];
            if let Some(bias) = bias {
                yo.iter_mut().for_each(|v| *v = bias[o]);
            }
            for c in 0..c_in {
                let wrow = &w[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let (r, q) = g.tap(kk);
                    let (t0, t1) = g.t_range(q);
                    if t0 >= t1 {
                        continue;
                    }
                    let base = (c * g.stride + r) * g.m;
                    let src = &poly[base + (t0 as isize + q) as usize..base + (t1 as isize + q) as usize];
                    axpy(&mut yo[t0..t1], wv, src);
                }
            }
        }
    });
    (y, l_out)
}

/// Gradient of [`conv1d_forward`] with respect to its input: the adjoint map
/// from `[B, O, L_out]` back to `[B, C, l_in]`. Also serves as the forward
/// pass of the transposed convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward_input(
    gy: &[f64],
    batch: usize,
    c_out: usize,
    l_out: usize,
    w: &[f64],
    c_in: usize,
    k: usize,
    l_in: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let g = geom((c_in, l_in), (c_out, c_in, k), stride, pad, l_out);
    let mut gx = vec![0.0; batch * c_in * l_in];
    par::for_each_chunk_mut(&mut gx, c_in * l_in, |b, gxb| {
        let gyb = &gy[b * c_out * l_out..(b + 1) * c_out * l_out];
        let mut gpoly = vec![0.0; c_in * g.stride * g.m];
        for c in 0..c_in {
            for o in 0..c_out {
                let go = &gyb[o * l_out..(o + 1) * l_out];
                let wrow = &w[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let (r, q) = g.tap(kk);
                    let (t0, t1) = g.t_range(q);
                    if t0 >= t1 {
                        continue;
                    }
                    let base = (c * g.stride + r) * g.m;
                    let dst = &mut gpoly[base + (t0 as isize + q) as usize..base + (t1 as isize + q) as usize];
                    axpy(dst, wv, &go[t0..t1]);
                }
            }
        }
        for c in 0..c_in {
            for i in 0..l_in {
                gxb[c * l_in + i] = gpoly[(c * g.stride + i % g.stride) * g.m + i / g.stride];
            }
        }
    });
    gx
}

/// Gradient of [`conv1d_forward`] with respect to the weight, `[O, C, K]`,
/// summed over the batch in item order.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward_weight(
    gy: &[f64],
    x: &[f64],
    batch: usize,
    c_in: usize,
    l_in: usize,
    c_out: usize,
    k: usize,
    l_out: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let g = geom((c_in, l_in), (c_out, c_in, k), stride, pad, l_out);
    let polys: Vec<Vec<f64>> = par::map_range(batch, |b| polyphase(&x[b * c_in * l_in..(b + 1) * c_in * l_in], &g));
    let mut gw = vec![0.0; c_out * c_in * k];
    par::for_each_chunk_mut(&mut gw, c_in * k, |o, gwo| {
        for (b, poly) in polys.iter().enumerate() {
            let go = &gy[(b * c_out + o) * l_out..(b * c_out + o + 1) * l_out];
            for c in 0..c_in {
                for kk in 0..k {
                    let (r, q) = g.tap(kk);
                    let (t0, t1) = g.t_range(q);
                    if t0 >= t1 {
                        continue;
                    }
                    let base = (c * g.stride + r) * g.m;
                    let src = &poly[base + (t0 as isize + q) as usize..base + (t1 as isize + q) as usize];
                    gwo[c * k + kk] += dot(&go[t0..t1], src);
                }
            }
        }
    });
    gw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[allow(clippy::too_many_arguments)]
    fn naive(x: &[f64], c_in: usize, l: usize, w: &[f64], c_out: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let lo = conv_out_len(l, k, s, p);
        let mut y = vec![0.0; c_out * lo];
        for o in 0..c_out {
            for t in 0..lo {
                for c in 0..c_in {
                    for kk in 0..k {
                        let i = (t * s + kk) as isize - p as isize;
                        if i >= 0 && (i as usize) < l {
                            y[o * lo + t] += w[(o * c_in + c) * k + kk] * x[c * l + i as usize];
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn hand_computed_three_tap() {
        let (y, l) = conv1d_forward(&[1.0, 2.0, 3.0, 4.0], 1, 1, 4, &[1.0; 3], 1, 3, None, 1, 1);
        assert_eq!(l, 4);
        assert_eq!(y, vec![3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn matches_naive_for_awkward_shapes() {
        let mut r = rng::from_seed(3);
        for &(c_in, c_out, l, k, s, p) in &[(2, 3, 37, 5, 2, 2), (1, 2, 64, 31, 4, 15), (3, 1, 10, 7, 3, 0), (2, 2, 9, 3, 1, 1)] {
            let x: Vec<f64> = (0..c_in * l).map(|_| r.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..c_out * c_in * k).map(|_| r.random_range(-1.0..1.0)).collect();
            let (y, _) = conv1d_forward(&x, 1, c_in, l, &w, c_out, k, None, s, p);
            let e = naive(&x, c_in, l, &w, c_out, k, s, p);
            for (a, b) in y.iter().zip(&e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_style_padding_gives_ceil_length() {
        for l in [16usize, 17, 1000, 1024, 16384] {
            assert_eq!(conv_out_len(l, 31, 4, 15), l.div_ceil(4));
        }
    }
}
