//! Raw NHWC kernels used by the graph ops, forward and adjoint.

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        [n, h, w, cin]: [usize; 4],
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            n,
            h,
            w,
            cin,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x` into a `(rows, k·k·cin)` matrix of zero-padded patches.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let c = g.cin;
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * c;
                        let dst = row + (ky * g.k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    let c = g.cin;
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * c;
                        let src = row + (ky * g.k + kx) * c;
                        for (d, s) in dx[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Sampling table for one axis of an align-corners=false bilinear resize.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (pos.floor() as usize).min(src - 1);
            lo.push(l);
            hi.push((l + 1).min(src - 1));
            frac.push(pos - l as f64);
        }
        Self { lo, hi, frac }
    }
}

pub fn resize_forward<T: Real>(
    x: &[T],
    [n, h, w, c]: [usize; 4],
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ty = AxisTaps::new(h, ho);
    let tx = AxisTaps::new(w, wo);
    let mut out = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for oy in 0..ho {
            let fy = T::lit(ty.frac[oy]);
            for ox in 0..wo {
                let fx = T::lit(tx.frac[ox]);
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let p00 = ((b * h + ty.lo[oy]) * w + tx.lo[ox]) * c;
                let p01 = ((b * h + ty.lo[oy]) * w + tx.hi[ox]) * c;
                let p10 = ((b * h + ty.hi[oy]) * w + tx.lo[ox]) * c;
                let p11 = ((b * h + ty.hi[oy]) * w + tx.hi[ox]) * c;
                let o = ((b * ho + oy) * wo + ox) * c;
                for ch in 0..c {
                    out[o + ch] = w00 * x[p00 + ch]
                        + w01 * x[p01 + ch]
                        + w10 * x[p10 + ch]
                        + w11 * x[p11 + ch];
                }
            }
        }
    }
    out
}

pub fn resize_backward<T: Real>(
    gy: &[T],
    [n, h, w, c]: [usize; 4],
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let ty = AxisTaps::new(h, ho);
    let tx = AxisTaps::new(w, wo);
    for b in 0..n {
        for oy in 0..ho {
            let fy = T::lit(ty.frac[oy]);
            for ox in 0..wo {
                let fx = T::lit(tx.frac[ox]);
                let taps = [
                    ((T::one() - fy) * (T::one() - fx), ty.lo[oy], tx.lo[ox]),
                    ((T::one() - fy) * fx, ty.lo[oy], tx.hi[ox]),
                    (fy * (T::one() - fx), ty.hi[oy], tx.lo[ox]),
                    (fy * fx, ty.hi[oy], tx.hi[ox]),
                ];
                let o = ((b * ho + oy) * wo + ox) * c;
                for (wt, yy, xx) in taps {
                    let p = ((b * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        dx[p + ch] += wt * gy[o + ch];
                    }
                }
            }
        }
    }
}

/// Output shape and source strides for an axis permutation.
fn permute_plan(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = axes.iter().map(|&a| strides[a]).collect();
    (out_shape, src_strides)
}

/// Gathers `x` (shape `shape`) into the layout given by `axes`.
/// When `scatter` is set the roles flip: `x` is in permuted layout and is
/// accumulated into `out` in the original layout.
fn permute_walk<T: Real>(x: &[T], shape: &[usize], axes: &[usize], out: &mut [T], scatter: bool) {
    let (out_shape, src_strides) = permute_plan(shape, axes);
    let rank = out_shape.len();
    if rank == 0 || x.is_empty() {
        if scatter {
            out.iter_mut().zip(x).for_each(|(o, v)| *o += *v);
        } else {
            out.copy_from_slice(x);
        }
        return;
    }
    // Keep the innermost axis contiguous when it is not moved.
    let chunk = if axes[rank - 1] == rank - 1 {
        out_shape[rank - 1]
    } else {
        1
    };
    let outer_rank = if chunk > 1 { rank - 1 } else { rank };
    let mut idx = vec![0usize; outer_rank];
    let total: usize = out_shape[..outer_rank].iter().product();
    for linear in 0..total {
        let src: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        let dst = linear * chunk;
        if scatter {
            for (o, v) in out[src..src + chunk].iter_mut().zip(&x[dst..dst + chunk]) {
                *o += *v;
            }
        } else {
            out[dst..dst + chunk].copy_from_slice(&x[src..src + chunk]);
        }
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn permute_forward<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    permute_walk(x, shape, axes, &mut out, false);
    out
}

/// Accumulates a gradient in permuted layout back into the source layout.
pub fn permute_backward<T: Real>(gy: &[T], shape: &[usize], axes: &[usize], dx: &mut [T]) {
    permute_walk(gy, shape, axes, dx, true);
}

pub fn softmax_rows<T: Real>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - m).exp();
            sum += *oi;
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering over H and W with the same 1-D taps.
pub fn blur_valid<T: Real>(x: &[T], [n, h, w, c]: [usize; 4], taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); n * h * wo * c];
    for b in 0..n {
        for y in 0..h {
            for ox in 0..wo {
                let o = ((b * h + y) * wo + ox) * c;
                for (t, &wt) in taps.iter().enumerate() {
                    let s = ((b * h + y) * w + ox + t) * c;
                    for ch in 0..c {
                        tmp[o + ch] += wt * x[s + ch];
                    }
                }
            }
        }
    }
    let mut out = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = ((b * ho + oy) * wo + ox) * c;
                for (t, &wt) in taps.iter().enumerate() {
                    let s = ((b * h + oy + t) * wo + ox) * c;
                    for ch in 0..c {
                        out[o + ch] += wt * tmp[s + ch];
                    }
                }
            }
        }
    }
    out
}

pub fn blur_valid_adjoint<T: Real>(
    gy: &[T],
    [n, h, w, c]: [usize; 4],
    taps: &[T],
    dx: &mut [T],
) {
    let k = taps.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); n * h * wo * c];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = ((b * ho + oy) * wo + ox) * c;
                for (t, &wt) in taps.iter().enumerate() {
                    let s = ((b * h + oy + t) * wo + ox) * c;
                    for ch in 0..c {
                        tmp[s + ch] += wt * gy[o + ch];
                    }
                }
            }
        }
    }
    for b in 0..n {
        for y in 0..h {
            for ox in 0..wo {
                let o = ((b * h + y) * wo + ox) * c;
                for (t, &wt) in taps.iter().enumerate() {
                    let s = ((b * h + y) * w + ox + t) * c;
                    for ch in 0..c {
                        dx[s + ch] += wt * tmp[o + ch];
                    }
                }
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trip() {
        let shape = [2, 3, 4, 5];
        let x: Vec<f64> = (0..120).map(|i| i as f64).collect();
        let axes = [0, 2, 1, 3];
        let y = permute_forward(&x, &shape, &axes);
        assert_eq!(y[5], x[20]); // (0,1,0,0) in output is (0,0,1,0) in input
        let mut back = vec![0.0; 120];
        permute_backward(&y, &shape, &axes, &mut back);
        assert_eq!(back, x);
    }

    #[test]
    fn permute_moving_last_axis() {
        let shape = [2, 3];
        let x = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(permute_forward(&x, &shape, &[1, 0]), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let x: Vec<f64> = (0..2 * 3 * 4 * 2).map(|i| (i as f64).sqrt()).collect();
        let y = resize_forward(&x, [2, 3, 4, 2], 3, 4);
        assert_eq!(x, y);
    }

    #[test]
    fn resize_upsample_constant_stays_constant() {
        let x = vec![0.25f64; 4 * 4 * 3];
        let y = resize_forward(&x, [1, 4, 4, 3], 8, 8);
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new([1, 5, 4, 2], 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let cols = im2col(&x, &g);
        let r: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.17).cos()).collect();
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 40];
        col2im(&r, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
