//! Orthonormal real 2-D FFTs over the spatial axes of NHWC tensors.
//!
//! The half spectrum keeps `W/2 + 1` columns. Frequency tensors are laid out as
//! `(N, H, W/2 + 1, 2C)` with all real parts first, then all imaginary parts.

use crate::scalar::Real;
use num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

/// Number of non-redundant columns of a real FFT of width `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Multiplicity of column `l` when the half spectrum stands in for the full one.
pub fn hermitian_weight(l: usize, w: usize) -> usize {
    if l == 0 || (w.is_multiple_of(2) && l == w / 2) {
        1
    } else {
        2
    }
}

/// Plans are cached by the underlying planner.
pub struct FftCache<T: Real> {
    planner: FftPlanner<T>,
}

impl<T: Real> Default for FftCache<T> {
    fn default() -> Self {
        Self {
            planner: FftPlanner::new(),
        }
    }
}

impl<T: Real> FftCache<T> {
    /// Unnormalized in-place 2-D transform of an `h×w` row-major plane.
    fn fft2(&mut self, buf: &mut [Complex<T>], h: usize, w: usize, direction: FftDirection) {
        let rows = self.planner.plan_fft(w, direction);
        rows.process(buf);
        if h > 1 {
            let cols = self.planner.plan_fft(h, direction);
            let mut t = vec![Complex::new(T::zero(), T::zero()); h * w];
            for y in 0..h {
                for x in 0..w {
                    t[x * h + y] = buf[y * w + x];
                }
            }
            cols.process(&mut t);
            for y in 0..h {
                for x in 0..w {
                    buf[y * w + x] = t[x * h + y];
                }
            }
        }
    }

    /// Forward orthonormal real FFT: `(N,H,W,C)` → `(N,H,W/2+1,2C)`.
    pub fn rfft2(&mut self, x: &[T], [n, h, w, c]: [usize; 4]) -> Vec<T> {
        let wf = half_width(w);
        let scale = T::one() / T::lit((h * w) as f64).sqrt();
        let mut out = vec![T::zero(); n * h * wf * 2 * c];
        let mut plane = vec![Complex::new(T::zero(), T::zero()); h * w];
        for b in 0..n {
            for ch in 0..c {
                for (i, p) in plane.iter_mut().enumerate() {
                    *p = Complex::new(x[(b * h * w + i) * c + ch], T::zero());
                }
                self.fft2(&mut plane, h, w, FftDirection::Forward);
                for y in 0..h {
                    for l in 0..wf {
                        let v = plane[y * w + l] * scale;
                        let base = ((b * h + y) * wf + l) * 2 * c;
                        out[base + ch] = v.re;
                        out[base + c + ch] = v.im;
                    }
                }
            }
        }
        out
    }

    /// `Re( Σ_{l<W/2+1} k_l · Z[k,l] · e^{+iθ} ) / sqrt(HW)` for every plane,
    /// where `k_l` is the Hermitian weight when `hermitian` holds and 1 otherwise.
    fn half_inverse(&mut self, z: &[T], [n, h, w, c]: [usize; 4], hermitian: bool) -> Vec<T> {
        let wf = half_width(w);
        let scale = T::one() / T::lit((h * w) as f64).sqrt();
        let mut out = vec![T::zero(); n * h * w * c];
        let mut plane = vec![Complex::new(T::zero(), T::zero()); h * w];
        for b in 0..n {
            for ch in 0..c {
                plane
                    .iter_mut()
                    .for_each(|p| *p = Complex::new(T::zero(), T::zero()));
                for y in 0..h {
                    for l in 0..wf {
                        let base = ((b * h + y) * wf + l) * 2 * c;
                        let k = if hermitian {
                            T::lit(hermitian_weight(l, w) as f64)
                        } else {
                            T::one()
                        };
                        plane[y * w + l] = Complex::new(z[base + ch] * k, z[base + c + ch] * k);
                    }
                }
                self.fft2(&mut plane, h, w, FftDirection::Inverse);
                for (i, p) in plane.iter().enumerate() {
                    out[(b * h * w + i) * c + ch] = p.re * scale;
                }
            }
        }
        out
    }

    /// Inverse orthonormal real FFT: `(N,H,W/2+1,2C)` → `(N,H,W,C)`.
    ///
    /// Imaginary parts of self-conjugate bins are ignored, matching the usual
    /// complex-to-real convention.
    pub fn irfft2(&mut self, z: &[T], dims: [usize; 4]) -> Vec<T> {
        self.half_inverse(z, dims, true)
    }

    /// Adjoint of [`FftCache::rfft2`] applied to a frequency-domain gradient.
    pub fn rfft2_adjoint(&mut self, g: &[T], dims: [usize; 4]) -> Vec<T> {
        self.half_inverse(g, dims, false)
    }

    /// Adjoint of [`FftCache::irfft2`] applied to a spatial gradient.
    pub fn irfft2_adjoint(&mut self, g: &[T], dims: [usize; 4]) -> Vec<T> {
        let [_, _, w, c] = dims;
        let wf = half_width(w);
        let mut out = self.rfft2(g, dims);
        for (pos, chunk) in out.chunks_mut(2 * c).enumerate() {
            let l = pos % wf;
            let k = T::lit(hermitian_weight(l, w) as f64);
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct DFT oracle for one real plane, orthonormal scaling.
    fn naive_rfft(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
        let wf = half_width(w);
        let mut out = vec![(0.0, 0.0); h * wf];
        let s = 1.0 / ((h * w) as f64).sqrt();
        for k in 0..h {
            for l in 0..wf {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let th = 2.0
                            * std::f64::consts::PI
                            * ((k * y) as f64 / h as f64 + (l * xx) as f64 / w as f64);
                        re += x[y * w + xx] * th.cos();
                        im -= x[y * w + xx] * th.sin();
                    }
                }
                out[k * wf + l] = (re * s, im * s);
            }
        }
        out
    }

    fn signal(len: usize, seed: f64) -> Vec<f64> {
        (0..len)
            .map(|i| ((i as f64 + 1.0) * seed).sin() + 0.3 * ((i * i) as f64 * 0.01).cos())
            .collect()
    }

    #[test]
    fn rfft_matches_direct_dft() {
        let (h, w) = (5, 6);
        let x = signal(h * w, 0.7);
        let mut cache = FftCache::<f64>::default();
        let got = cache.rfft2(&x, [1, h, w, 1]);
        let want = naive_rfft(&x, h, w);
        for (i, (re, im)) in want.iter().enumerate() {
            assert!((got[i * 2] - re).abs() < 1e-12);
            assert!((got[i * 2 + 1] - im).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_even_and_odd_widths() {
        let mut cache = FftCache::<f64>::default();
        for (h, w, c) in [(4, 4, 2), (3, 5, 1), (6, 7, 3), (1, 8, 2)] {
            let x = signal(h * w * c * 2, 1.3);
            let z = cache.rfft2(&x, [2, h, w, c]);
            let back = cache.irfft2(&z, [2, h, w, c]);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12, "{h}x{w}");
            }
        }
    }

    #[test]
    fn parseval_holds_with_hermitian_weights() {
        let mut cache = FftCache::<f64>::default();
        for (h, w) in [(4, 6), (5, 5), (3, 8)] {
            let x = signal(h * w, 0.53);
            let z = cache.rfft2(&x, [1, h, w, 1]);
            let wf = half_width(w);
            let spectral: f64 = z
                .chunks(2)
                .enumerate()
                .map(|(i, re_im)| hermitian_weight(i % wf, w) as f64 * (re_im[0].powi(2) + re_im[1].powi(2)))
                .sum();
            let spatial: f64 = x.iter().map(|v| v * v).sum();
            assert!((spectral - spatial).abs() < 1e-10 * spatial, "{h}x{w}");
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let mut cache = FftCache::<f64>::default();
        for (h, w, c) in [(4, 6, 2), (5, 5, 1), (2, 3, 2)] {
            let dims = [1, h, w, c];
            let x = signal(h * w * c, 0.91);
            let z = signal(h * half_width(w) * 2 * c, 0.37);
            // <F x, z> == <x, F* z>
            let fx = cache.rfft2(&x, dims);
            let ftz = cache.rfft2_adjoint(&z, dims);
            assert!((dot(&fx, &z) - dot(&x, &ftz)).abs() < 1e-10);
            // <G z, x> == <z, G* x>
            let gz = cache.irfft2(&z, dims);
            let gtx = cache.irfft2_adjoint(&x, dims);
            assert!((dot(&gz, &x) - dot(&z, &gtx)).abs() < 1e-10);
        }
    }
}
