use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Original spatial size of an image padded by [`reflect_pad_to`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

/// Mirror index without edge repetition, periodic so any pad width works.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads an NHWC image at the bottom and right to `height × width` by reflection.
pub fn reflect_pad_to<T: Real>(x: &Tensor<T>, height: usize, width: usize) -> Result<(Tensor<T>, CropRecord)> {
    let [n, h, w, c] = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("reflect_pad", "empty image"));
    }
    if height < h || width < w {
        return Err(Error::shape("reflect_pad", format!("target {height}x{width} smaller than {h}x{w}")));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n * height * width * c);
    for b in 0..n {
        for y in 0..height {
            let sy = reflect(y, h);
            for xx in 0..width {
                let sx = reflect(xx, w);
                let at = ((b * h + sy) * w + sx) * c;
                out.extend_from_slice(&src[at..at + c]);
            }
        }
    }
    Ok((Tensor::new(vec![n, height, width, c], out)?, CropRecord { height: h, width: w }))
}

impl CropRecord {
    /// Cuts the top-left `height × width` region back out.
    pub fn crop<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, h, w, c] = x.dims4()?;
        if self.height > h || self.width > w {
            return Err(Error::shape("crop", format!("{}x{} exceeds {h}x{w}", self.height, self.width)));
        }
        let mut out = Vec::with_capacity(n * self.height * self.width * c);
        for b in 0..n {
            for y in 0..self.height {
                let at = ((b * h + y) * w) * c;
                out.extend_from_slice(&x.data()[at..at + self.width * c]);
            }
        }
        Tensor::new(vec![n, self.height, self.width, c], out)
    }
}

/// Pads bottom and right up to the next multiple of `multiple` on each side.
pub fn reflect_pad_to_multiple<T: Real>(x: &Tensor<T>, multiple: usize) -> Result<(Tensor<T>, CropRecord)> {
    let [_, h, w, _] = x.dims4()?;
    let m = multiple.max(1);
    reflect_pad_to(x, padded_side(h, m, 0), padded_side(w, m, 0))
}

/// Smallest multiple of `m` that is at least `max(n, floor)`.
pub fn padded_side(n: usize, m: usize, floor: usize) -> usize {
    n.max(floor).div_ceil(m) * m
}
