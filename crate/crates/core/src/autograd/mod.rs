//! Tape-based reverse-mode differentiation over NHWC tensors.
//!
//! A [`Graph`] records every op applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar with respect to every node that requires one. The tape is strictly
//! sequential, so results are bit-reproducible.

pub mod kernels;

use crate::error::{Error, Result};
use crate::fft::{half_width, FftCache};
use crate::scalar::{gemm, Real};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm behaviour for one call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormMode<'a, T> {
    /// Normalize with batch statistics; the call reports them for running updates.
    Batch { eps: T },
    /// Normalize with fixed running statistics.
    Running { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-average updates.
    pub var_unbiased: Vec<T>,
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Tile {
        x: Var,
        times: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        n: usize,
        k: usize,
    },
    Softmax(Var),
    Resize(Var),
    Rfft2(Var),
    Irfft2(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Mix {
        down: Var,
        up: Var,
        theta: Var,
        index: usize,
    },
    Charbonnier {
        pred: Var,
        target: Var,
        eps: T,
    },
    Mean(Var),
    Blur {
        x: Var,
        taps: Vec<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    fft: FftCache<T>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("operand shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fft: FftCache::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Parameters require gradients; inputs and targets do not.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Values of every softmax evaluated so far, in tape order.
    pub fn softmax_outputs(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Softmax(_)))
            .map(|n| &n.value)
    }

    /// 2-D convolution with weights `(k, k, cin, cout)` and optional bias `(cout)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let (k, cin, cout) = match self.shape(w) {
            &[kh, kw, ci, co] if kh == kw => (kh, ci, co),
            s => return Err(Error::shape("conv2d", format!("weight shape {s:?} is not (k,k,cin,cout)"))),
        };
        if cin != dims[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {cin}", dims[3]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(dims, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {k} does not fit input {dims:?}")))?;
        let mut out = vec![T::zero(); geom.rows() * cout];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if geom.is_pointwise() {
                gemm(geom.rows(), cout, cin, xv, false, wv, false, &mut out, false);
            } else {
                let cols = kernels::im2col(xv, &geom);
                gemm(geom.rows(), cout, geom.patch(), &cols, false, wv, false, &mut out, false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                out.chunks_mut(cout).for_each(|row| add_into(row, bv));
            }
        }
        let value = Tensor::new(vec![dims[0], geom.ho, geom.wo, cout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cout }, &inputs))
    }

    /// Affine map over the last axis with weights `(cin, cout)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (cin, cout) = match self.shape(w) {
            &[ci, co] => (ci, co),
            s => return Err(Error::shape("linear", format!("weight shape {s:?} is not (cin,cout)"))),
        };
        if xs.last() != Some(&cin) {
            return Err(Error::shape(
                "linear",
                format!("input shape {xs:?} does not end in {cin}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("linear", format!("bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / cin;
        let mut out = vec![T::zero(); rows * cout];
        gemm(rows, cout, cin, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            out.chunks_mut(cout).for_each(|row| add_into(row, bv));
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.push(v, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Var {
        let v = self.value(x).map(|e| e + offset);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(T::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Concatenates along the last axis; all other axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat", format!("{s:?} incompatible with leading {lead:?}")));
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), widths }, parts))
    }

    /// Takes `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().ok_or_else(|| Error::shape("slice", "scalar operand"))?;
        if start + len > width {
            return Err(Error::shape("slice", format!("{start}+{len} exceeds width {width}")));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, start, len }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} invalid for {shape:?}")));
        }
        let data = kernels::permute_forward(self.value(x).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Repeats `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, times: usize) -> Result<Var> {
        let src = self.value(x);
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src.data());
        }
        let mut shape = vec![times];
        shape.extend_from_slice(src.shape());
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Tile { x, times }, &[x]))
    }

    /// Batched product of rank-3 operands: `op(a)[B,M,K] · op(b)[B,K,N]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("operands {sa:?} and {sb:?}")));
        }
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(Error::shape("bmm", format!("inner dims {ka} and {kb} differ ({sa:?}, {sb:?})")));
        }
        let batch = sa[0];
        let k = ka;
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    n,
                    k,
                    &av[i * m * k..(i + 1) * m * k],
                    ta,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b, ta, tb, batch, m, n, k }, &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().ok_or_else(|| Error::shape("softmax", "scalar operand"))?;
        let data = kernels::softmax_rows(self.value(x).data(), width);
        let value = Tensor::new(s, data)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Bilinear resize of an NHWC map (half-pixel centers).
    pub fn resize(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if ho == 0 || wo == 0 {
            return Err(Error::shape("resize", "target size must be positive"));
        }
        let data = kernels::resize_forward(self.value(x).data(), dims, ho, wo);
        let value = Tensor::new(vec![dims[0], ho, wo, dims[3]], data)?;
        Ok(self.push(value, Op::Resize(x), &[x]))
    }

    /// Orthonormal real 2-D FFT: `(N,H,W,C)` → `(N,H,W/2+1,2C)`, real parts then imaginary parts.
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if !self.value(x).all_finite() {
            return Err(Error::Numeric("non-finite input to rfft2".into()));
        }
        let data = self.fft.rfft2(self.nodes[x.0].value.data(), dims);
        let value = Tensor::new(vec![dims[0], dims[1], half_width(dims[2]), 2 * dims[3]], data)?;
        Ok(self.push(value, Op::Rfft2(x), &[x]))
    }

    /// Inverse of [`Graph::rfft2`] back to spatial width `width`.
    pub fn irfft2(&mut self, z: Var, width: usize) -> Result<Var> {
        let [n, h, wf, c2] = self.value(z).dims4()?;
        if wf != half_width(width) || c2 % 2 != 0 {
            return Err(Error::shape(
                "irfft2",
                format!("spectrum {:?} does not match width {width}", self.shape(z)),
            ));
        }
        let dims = [n, h, width, c2 / 2];
        let data = self.fft.irfft2(self.nodes[z.0].value.data(), dims);
        let value = Tensor::new(dims.to_vec(), data)?;
        Ok(self.push(value, Op::Irfft2(z), &[z]))
    }

    /// Batch normalization over the last axis.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| Error::shape("batch_norm", "scalar operand"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", format!("affine params must be [{c}]")));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / c;
        let (mean, var, eps, stats) = match mode {
            NormMode::Batch { eps } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for row in xv.chunks(c) {
                    add_into(&mut mean, row);
                }
                let inv_rows = T::one() / T::lit(rows as f64);
                mean.iter_mut().for_each(|m| *m *= inv_rows);
                for row in xv.chunks(c) {
                    for ((v, &e), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (e - m) * (e - m);
                    }
                }
                let unbiased = T::one() / T::lit((rows.max(2) - 1) as f64);
                let var_unbiased = var.iter().map(|&v| v * unbiased).collect();
                var.iter_mut().for_each(|v| *v *= inv_rows);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased,
                };
                (mean, var, eps, Some(stats))
            }
            NormMode::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics width"));
                }
                (mean.to_vec(), var.to_vec(), eps, None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ((row, hrow), orow) in xv.chunks(c).zip(xhat.chunks_mut(c)).zip(out.chunks_mut(c)) {
            for ch in 0..c {
                hrow[ch] = (row[ch] - mean[ch]) * inv_std[ch];
                orow[ch] = g[ch] * hrow[ch] + b[ch];
            }
        }
        let value = Tensor::new(s, out)?;
        let batch_stats = stats.is_some();
        let v = self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// `σ(θ[index])·down + (1 − σ(θ[index]))·up`.
    pub fn mix(&mut self, down: Var, up: Var, theta: Var, index: usize) -> Result<Var> {
        same_shape("adaptive_mixup", self.shape(down), self.shape(up))?;
        let th = self.value(theta).data();
        let t = *th.get(index).ok_or_else(|| {
            Error::shape("adaptive_mixup", format!("gate index {index} outside {} gates", th.len()))
        })?;
        let s = kernels::sigmoid(t);
        let v = self.zip_op(down, up, "adaptive_mixup", |d, u| s * d + (T::one() - s) * u)?;
        Ok(self.push(v, Op::Mix { down, up, theta, index }, &[down, up, theta]))
    }

    /// Mean Charbonnier penalty `sqrt((p − t)² + ε²)`.
    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: T) -> Result<Var> {
        same_shape("charbonnier", self.shape(pred), self.shape(target))?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let sum: T = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| ((a - b) * (a - b) + eps * eps).sqrt())
            .sum();
        let value = Tensor::scalar(sum / T::lit(p.len() as f64));
        Ok(self.push(value, Op::Charbonnier { pred, target, eps }, &[pred, target]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().copied().sum::<T>() / T::lit(xv.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Separable valid filtering over H and W with symmetric taps.
    pub fn blur(&mut self, x: Var, taps: &[T]) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let k = taps.len();
        if k == 0 || dims[1] < k || dims[2] < k {
            return Err(Error::shape("blur", format!("window {k} larger than {dims:?}")));
        }
        let data = kernels::blur_valid(self.value(x).data(), dims, taps);
        let value = Tensor::new(vec![dims[0], dims[1] + 1 - k, dims[2] + 1 - k, dims[3]], data)?;
        Ok(self.push(value, Op::Blur { x, taps: taps.to_vec() }, &[x]))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let requires: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(requires)
                .map(|(g, r)| if r { g } else { None })
                .collect(),
        })
    }

    fn backprop_node(&mut self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, $v, nodes[($v).0].value.len())
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, geom, cout } => {
                let rows = geom.rows();
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let db = acc!(b);
                    gy.chunks(cout).for_each(|r| add_into(db, r));
                }
                let xv = val(x);
                let cols_owned;
                let cols: &[T] = if geom.is_pointwise() {
                    xv
                } else {
                    cols_owned = kernels::im2col(xv, &geom);
                    &cols_owned
                };
                if needs(w) {
                    gemm(geom.patch(), cout, rows, cols, true, gy, false, acc!(w), true);
                }
                if needs(x) {
                    if geom.is_pointwise() {
                        gemm(rows, geom.cin, cout, gy, false, val(w), true, acc!(x), true);
                    } else {
                        let mut dcols = vec![T::zero(); rows * geom.patch()];
                        gemm(rows, geom.patch(), cout, gy, false, val(w), true, &mut dcols, false);
                        kernels::col2im(&dcols, &geom, acc!(x));
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let (cin, cout) = {
                    let s = nodes[w.0].value.shape();
                    (s[0], s[1])
                };
                let rows = gy.len() / cout;
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let db = acc!(b);
                    gy.chunks(cout).for_each(|r| add_into(db, r));
                }
                if needs(w) {
                    gemm(cin, cout, rows, val(x), true, gy, false, acc!(w), true);
                }
                if needs(x) {
                    gemm(rows, cin, cout, gy, false, val(w), true, acc!(x), true);
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    add_into(acc!(a), gy);
                }
                if needs(b) {
                    add_into(acc!(b), gy);
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    add_into(acc!(a), gy);
                }
                if needs(b) {
                    acc!(b).iter_mut().zip(gy).for_each(|(d, &g)| *d -= g);
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let bv = val(b);
                    acc!(a).iter_mut().zip(gy).zip(bv).for_each(|((d, &g), &y)| *d += g * y);
                }
                if needs(b) {
                    let av = val(a);
                    acc!(b).iter_mut().zip(gy).zip(av).for_each(|((d, &g), &y)| *d += g * y);
                }
            }
            &Op::Div(a, b) => {
                let bv = val(b);
                if needs(a) {
                    acc!(a).iter_mut().zip(gy).zip(bv).for_each(|((d, &g), &y)| *d += g / y);
                }
                if needs(b) {
                    // d(a/b)/db = -(a/b)/b
                    acc!(b)
                        .iter_mut()
                        .zip(gy)
                        .zip(out.iter().zip(bv))
                        .for_each(|((d, &g), (&q, &y))| *d -= g * q / y);
                }
            }
            &Op::Scale(x, f) => {
                acc!(x).iter_mut().zip(gy).for_each(|(d, &g)| *d += g * f);
            }
            &Op::AddScalar(x) => add_into(acc!(x), gy),
            &Op::Relu(x) => {
                acc!(x)
                    .iter_mut()
                    .zip(gy)
                    .zip(out)
                    .for_each(|((d, &g), &y)| {
                        if y > T::zero() {
                            *d += g
                        }
                    });
            }
            &Op::Gelu(x) => {
                let xv = val(x);
                acc!(x)
                    .iter_mut()
                    .zip(gy)
                    .zip(xv)
                    .for_each(|((d, &g), &e)| *d += g * kernels::gelu_grad(e));
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if needs(p) {
                        let dp = acc!(p);
                        for (drow, grow) in dp.chunks_mut(w).zip(gy.chunks(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            &Op::Slice { x, start, len } => {
                let width = *nodes[x.0].value.shape().last().unwrap();
                for (drow, grow) in acc!(x).chunks_mut(width).zip(gy.chunks(len)) {
                    add_into(&mut drow[start..start + len], grow);
                }
            }
            &Op::Reshape(x) => add_into(acc!(x), gy),
            Op::Permute { x, axes } => {
                let shape = nodes[x.0].value.shape();
                kernels::permute_backward(gy, shape, axes, acc!(*x));
            }
            &Op::Tile { x, times } => {
                let len = nodes[x.0].value.len();
                let dx = acc!(x);
                for t in 0..times {
                    add_into(dx, &gy[t * len..(t + 1) * len]);
                }
            }
            &Op::Bmm { a, b, ta, tb, batch, m, n, k } => {
                let (av, bv) = (val(a), val(b));
                if needs(a) {
                    let da = acc!(a);
                    for i in 0..batch {
                        let g = &gy[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(k, m, n, bi, tb, g, true, dai, true);
                        } else {
                            gemm(m, k, n, g, false, bi, !tb, dai, true);
                        }
                    }
                }
                if needs(b) {
                    let db = acc!(b);
                    for i in 0..batch {
                        let g = &gy[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(n, k, m, g, true, ai, ta, dbi, true);
                        } else {
                            gemm(k, n, m, ai, !ta, g, false, dbi, true);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let width = *nodes[i].value.shape().last().unwrap();
                let dx = acc!(x);
                for ((drow, grow), yrow) in dx.chunks_mut(width).zip(gy.chunks(width)).zip(out.chunks(width)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dot);
                    }
                }
            }
            &Op::Resize(x) => {
                let dims = nodes[x.0].value.dims4().unwrap();
                let s = nodes[i].value.shape();
                let (ho, wo) = (s[1], s[2]);
                kernels::resize_backward(gy, dims, ho, wo, acc!(x));
            }
            &Op::Rfft2(x) => {
                let dims = nodes[x.0].value.dims4().unwrap();
                let dx = self.fft.rfft2_adjoint(gy, dims);
                add_into(acc!(x), &dx);
            }
            &Op::Irfft2(z) => {
                let dims = nodes[i].value.dims4().unwrap();
                let dz = self.fft.irfft2_adjoint(gy, dims);
                add_into(acc!(z), &dz);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let rows = gy.len() / c;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (grow, hrow) in gy.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dgamma[ch] += grow[ch] * hrow[ch];
                        dbeta[ch] += grow[ch];
                    }
                }
                if needs(*x) {
                    let g = val(*gamma);
                    let dx = acc!(*x);
                    if *batch_stats {
                        let inv_rows = T::one() / T::lit(rows as f64);
                        for ((drow, grow), hrow) in dx.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                let dxhat = grow[ch] * g[ch];
                                // dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                                let s1 = dbeta[ch] * g[ch];
                                let s2 = dgamma[ch] * g[ch];
                                drow[ch] += inv_std[ch]
                                    * (dxhat - inv_rows * s1 - hrow[ch] * inv_rows * s2);
                            }
                        }
                    } else {
                        for (drow, grow) in dx.chunks_mut(c).zip(gy.chunks(c)) {
                            for ch in 0..c {
                                drow[ch] += grow[ch] * g[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                if needs(*gamma) {
                    add_into(acc!(*gamma), &dgamma);
                }
                if needs(*beta) {
                    add_into(acc!(*beta), &dbeta);
                }
            }
            &Op::Mix { down, up, theta, index } => {
                let s = kernels::sigmoid(val(theta)[index]);
                if needs(down) {
                    acc!(down).iter_mut().zip(gy).for_each(|(d, &g)| *d += g * s);
                }
                if needs(up) {
                    acc!(up).iter_mut().zip(gy).for_each(|(d, &g)| *d += g * (T::one() - s));
                }
                if needs(theta) {
                    let dot: T = gy
                        .iter()
                        .zip(val(down).iter().zip(val(up)))
                        .map(|(&g, (&d, &u))| g * (d - u))
                        .sum();
                    acc!(theta)[index] += dot * s * (T::one() - s);
                }
            }
            &Op::Charbonnier { pred, target, eps } => {
                let (p, t) = (val(pred), val(target));
                let scale = gy[0] / T::lit(p.len() as f64);
                let dr: Vec<T> = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        scale * d / (d * d + eps * eps).sqrt()
                    })
                    .collect();
                if needs(pred) {
                    add_into(acc!(pred), &dr);
                }
                if needs(target) {
                    acc!(target).iter_mut().zip(&dr).for_each(|(d, &g)| *d -= g);
                }
            }
            &Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                let g = gy[0] / T::lit(n as f64);
                acc!(x).iter_mut().for_each(|d| *d += g);
            }
            Op::Blur { x, taps } => {
                let dims = nodes[x.0].value.dims4().unwrap();
                kernels::blur_valid_adjoint(gy, dims, taps, acc!(*x));
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient buffer for `v`, shaped like its value; `None` if `v` does not
    /// require a gradient or did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
