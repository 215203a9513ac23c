//! Full-reference image quality metrics, evaluated in f64.

use crate::autograd::kernels::{blur_valid, gaussian_taps};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio over all elements, capped at `cap_db`.
pub fn psnr_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64, cap_db: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if a.is_empty() {
        return Err(Error::shape("psnr", "empty images"));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let mse = sse / a.len() as f64;
    let peak = max_val * max_val;
    if mse < peak * 10f64.powf(-cap_db / 10.0) {
        return Ok(cap_db);
    }
    Ok(10.0 * (peak / mse).log10())
}

/// PSNR for images in [0, 1].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    psnr_with(a, b, 1.0, PSNR_CAP_DB)
}

/// Mean structural similarity of NHWC images with dynamic range `range`.
///
/// Local statistics use a Gaussian window and valid filtering; the map is
/// averaged over positions, then over channels and batch.
pub fn ssim_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, window: usize, k1: f64, k2: f64, range: f64) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let dims = a.dims4()?;
    if window == 0 || dims[1] < window || dims[2] < window {
        return Err(Error::shape(
            "ssim",
            format!("image {}x{} smaller than the {window}-pixel window", dims[1], dims[2]),
        ));
    }
    let taps = gaussian_taps(window, SSIM_SIGMA);
    let x: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = blur_valid(&x, dims, &taps);
    let my = blur_valid(&y, dims, &taps);
    let mxx = blur_valid(&prod(&x, &x), dims, &taps);
    let myy = blur_valid(&prod(&y, &y), dims, &taps);
    let mxy = blur_valid(&prod(&x, &y), dims, &taps);
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// SSIM with the usual constants for images in [0, 1].
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed | 1;
        Tensor::from_fn(shape.to_vec(), |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    /// Direct per-window SSIM with explicit 2-D Gaussian weights.
    fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let [n, h, w, c] = a.dims4().unwrap();
        let k = 11;
        let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
        let norm: f64 = g.iter().sum::<f64>().powi(2);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for bi in 0..n {
            for ch in 0..c {
                for y0 in 0..=h - k {
                    for x0 in 0..=w - k {
                        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for dy in 0..k {
                            for dx in 0..k {
                                let wt = g[dy] * g[dx] / norm;
                                let p = a.at4(bi, y0 + dy, x0 + dx, ch);
                                let q = b.at4(bi, y0 + dy, x0 + dx, ch);
                                mx += wt * p;
                                my += wt * q;
                                sxx += wt * p * p;
                                syy += wt * q * q;
                                sxy += wt * p * q;
                            }
                        }
                        let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                        total += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                            / ((mx * mx + my * my + c1) * (vx + vy + c2));
                        count += 1;
                    }
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let a = noise(&[1, 16, 16, 3], 3);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn one_level_offset_gives_known_psnr() {
        let a = Tensor::full(vec![1, 8, 8, 3], 0.5f64);
        let b = a.map(|v| v + 1.0 / 255.0);
        let expected = 20.0 * 255f64.log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 48.1308).abs() < 1e-4);
    }

    #[test]
    fn constant_black_versus_white() {
        let a = Tensor::zeros(vec![1, 12, 12, 1]);
        let b = Tensor::full(vec![1, 12, 12, 1], 1.0f64);
        let c1 = 0.01f64.powi(2);
        let expected = c1 / (1.0 + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros(vec![1, 10, 20, 1]);
        assert!(matches!(ssim::<f64>(&a, &a), Err(Error::Shape { .. })));
        assert!(psnr(&a, &Tensor::zeros(vec![1, 10, 20, 2])).is_err());
    }

    #[test]
    fn matches_direct_oracle_on_random_pairs() {
        for seed in 0..20u64 {
            let a = noise(&[1, 16, 19, 3], 2 * seed + 1);
            let b = noise(&[1, 16, 19, 3], 2 * seed + 2).map(|v| 0.5 * v);
            let o = ssim_oracle(&a, &b);
            assert!((ssim(&a, &b).unwrap() - o).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_finite(s1 in 1u64..10_000, s2 in 1u64..10_000) {
            let a = noise(&[1, 12, 12, 2], s1);
            let b = noise(&[1, 12, 12, 2], s2);
            let (p, q) = (psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!(p.is_finite() && p == q && p <= 100.0);
            let (s, t) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((s - t).abs() < 1e-12 && (-1.0..=1.0).contains(&s));
        }
    }
}
