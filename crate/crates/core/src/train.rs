//! Loss, optimizer and the deterministic training / evaluation loops.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::kernels::gaussian_taps;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use crate::model::blocks::{ForwardCtx, BN_MOMENTUM};
use crate::model::Network;
use crate::params::ParameterStore;
use crate::synth::PairedSample;
use crate::tensor::Tensor;

pub const CHARBONNIER_EPS: f32 = 1e-3;
pub const SSIM_LOSS_WEIGHT: f32 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    Charbonnier,
    CharbonnierSsim,
    /// Mean squared error, the quantity PSNR measures.
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Charbonnier => "charbonnier",
            LossKind::CharbonnierSsim => "charbonnier+ssim",
            LossKind::Mse => "mse",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "charbonnier" => Ok(LossKind::Charbonnier),
            "charbonnier+ssim" => Ok(LossKind::CharbonnierSsim),
            "mse" => Ok(LossKind::Mse),
            _ => Err(Error::Config(format!("unknown loss `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays along a half cosine to `lr·min_lr_ratio`.
    pub lr: f64,
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Random horizontal / vertical flips of each training pair.
    pub augment: bool,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 2e-4,
            min_lr_ratio: 0.01,
            warmup_steps: 0,
            seed: 0,
            loss: LossKind::Charbonnier,
            checkpoint_every: 0,
            eval_every: 0,
            augment: true,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.steps == 0 {
            bad.push("steps must be ≥ 1".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be ≥ 1".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bad.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            bad.push(format!("min_lr_ratio must lie in [0, 1], got {}", self.min_lr_ratio));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            bad.push(format!("clip_norm must be ≥ 0, got {}", self.clip_norm));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Learning rate used for the update that completes step `step + 1`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps.min(self.steps)).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn for_params(params: &ParameterStore) -> Self {
        let mut s = Self::default();
        for (name, p) in params.iter().filter(|(_, p)| p.trainable) {
            s.m.insert(name.to_string(), Tensor::zeros(p.tensor.shape().to_vec()));
            s.v.insert(name.to_string(), Tensor::zeros(p.tensor.shape().to_vec()));
        }
        s
    }

    /// One bias-corrected Adam update; `t` counts updates from 1.
    fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32], lr: f64, t: usize, scale: f32) -> Result<()> {
        let missing = || Error::MissingParam(format!("optimizer state for `{name}`"));
        let m = self.m.get_mut(name).ok_or_else(missing)?.data_mut();
        let v = self.v.get_mut(name).ok_or_else(missing)?.data_mut();
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (ADAM_EPS * c2.sqrt()) as f32;
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g * scale;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
        Ok(())
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParameterStore,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: usize,
}

impl TrainState {
    pub fn fresh(net: &Network, seed: u64) -> Result<Self> {
        let params = net.init_parameters(seed)?;
        let adam = AdamState::for_params(&params);
        Ok(Self { params, adam, step: 0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len().max(1) as f64;
        Self {
            psnr_db: per_sample.iter().map(|s| s.psnr_db).sum::<f64>() / n,
            ssim: per_sample.iter().map(|s| s.ssim).sum::<f64>() / n,
            per_sample,
        }
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "psnr={:.4} ssim={:.4} n={}", self.psnr_db, self.ssim, self.per_sample.len())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub eval: Option<(f64, f64)>,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} loss={:.6}", self.step, self.loss)?;
        if let Some((p, s)) = self.eval {
            write!(f, " psnr={p:.4} ssim={s:.4}")?;
        }
        Ok(())
    }
}

/// Progress notifications from [`train`].
pub enum TrainEvent<'a> {
    Log(&'a LogLine),
    /// Emitted every `checkpoint_every` steps.
    Checkpoint(&'a TrainState),
}

/// Mean Charbonnier penalty of two plain tensors.
pub fn charbonnier_loss(pred: &Tensor, gt: &Tensor, eps: f32) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let l = g.charbonnier(p, t, eps)?;
    Ok(g.value(l).data()[0] as f64)
}

/// Differentiable mean squared error.
pub fn mse_graph(g: &mut Graph<f32>, x: Var, y: Var) -> Result<Var> {
    let d = g.sub(x, y)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Differentiable mean SSIM with the metric's window and constants.
pub fn ssim_graph(g: &mut Graph<f32>, x: Var, y: Var) -> Result<Var> {
    let taps: Vec<f32> = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(|t| t as f32).collect();
    let c1 = (SSIM_K1 * SSIM_K1) as f32;
    let c2 = (SSIM_K2 * SSIM_K2) as f32;
    let mx = g.blur(x, &taps)?;
    let my = g.blur(y, &taps)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let sxx = g.blur(xx, &taps)?;
    let syy = g.blur(yy, &taps)?;
    let sxy = g.blur(xy, &taps)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(sxx, mx2)?;
    let vy = g.sub(syy, my2)?;
    let cov = g.sub(sxy, mxy)?;
    let a = g.scale(mxy, 2.0);
    let a = g.add_scalar(a, c1);
    let b = g.scale(cov, 2.0);
    let b = g.add_scalar(b, c2);
    let num = g.mul(a, b)?;
    let c = g.add(mx2, my2)?;
    let c = g.add_scalar(c, c1);
    let d = g.add(vx, vy)?;
    let d = g.add_scalar(d, c2);
    let den = g.mul(c, d)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

fn flip(img: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    if !horizontal && !vertical {
        return img.clone();
    }
    let [n, h, w, c] = img.dims4().expect("rank-4 sample");
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..n {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                let at = ((b * h + sy) * w + sx) * c;
                out.extend_from_slice(&src[at..at + c]);
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

fn step_rng(seed: u64, step: usize, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(purpose);
    r
}

/// Dataset indices of the batch for step `step` (0-based). Samples are drawn
/// through a fresh seeded permutation each epoch.
pub fn batch_indices(seed: u64, step: usize, batch: usize, len: usize) -> Vec<usize> {
    let start = step * batch;
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    (start..start + batch)
        .map(|i| {
            let e = i / len;
            if e != epoch {
                epoch = e;
                perm = (0..len).collect();
                perm.shuffle(&mut step_rng(seed, e, 1));
            }
            perm[i % len]
        })
        .collect()
}

fn make_batch(cfg: &TrainConfig, step: usize, data: &[PairedSample]) -> Result<(Tensor, Tensor)> {
    let idx = batch_indices(cfg.seed, step, cfg.batch_size, data.len());
    let mut r = step_rng(cfg.seed, step, 2);
    let mut xs = Vec::with_capacity(idx.len());
    let mut ys = Vec::with_capacity(idx.len());
    for &i in &idx {
        let (h, v) = if cfg.augment { (r.random_bool(0.5), r.random_bool(0.5)) } else { (false, false) };
        xs.push(flip(&data[i].degraded, h, v));
        ys.push(flip(&data[i].clean, h, v));
    }
    let x = Tensor::concat_batch(&xs.iter().collect::<Vec<_>>())?;
    let y = Tensor::concat_batch(&ys.iter().collect::<Vec<_>>())?;
    Ok((x, y))
}

/// Forward, backward and one optimizer update. Returns the loss before the update.
pub fn train_step(net: &Network, cfg: &TrainConfig, state: &mut TrainState, x: Tensor, y: Tensor) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let bound = state.params.bind(&mut g);
    let xv = g.constant(x);
    let yv = g.constant(y);
    let mut ctx = ForwardCtx::train();
    let out = net.forward(&mut g, &bound, xv, &mut ctx)?.output;
    let mut loss = match cfg.loss {
        LossKind::Mse => mse_graph(&mut g, out, yv)?,
        _ => g.charbonnier(out, yv, CHARBONNIER_EPS)?,
    };
    if cfg.loss == LossKind::CharbonnierSsim {
        let s = ssim_graph(&mut g, out, yv)?;
        let s = g.scale(s, -SSIM_LOSS_WEIGHT);
        let s = g.add_scalar(s, SSIM_LOSS_WEIGHT);
        loss = g.add(loss, s)?;
    }
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            value,
        });
    }
    let grads = g.backward(loss)?;
    let mut sq = 0f64;
    for (_, v) in bound.iter() {
        if let Some(d) = grads.get(v) {
            sq += d.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        (cfg.clip_norm / norm) as f32
    } else {
        1.0
    };
    let lr = cfg.lr_at(state.step);
    let t = state.step + 1;
    for (name, v) in bound.iter() {
        let Some(d) = grads.get(v) else { continue };
        let p = state.params.tensor_mut(name)?;
        state.adam.update(name, p.data_mut(), d, lr, t, scale)?;
    }
    for (prefix, stats) in &ctx.bn_stats {
        state.params.update_running_stats(prefix, stats, BN_MOMENTUM as f32)?;
    }
    state.step = t;
    Ok(value)
}

/// Continues `state` up to `cfg.steps` optimizer steps, or up to `stop_after`
/// if that comes first, reporting progress to `observer`.
///
/// Batches, flips and updates depend only on `(cfg.seed, step)` and the
/// state, so a run resumed from a checkpoint continues bit-exactly.
pub fn train(
    net: &Network,
    cfg: &TrainConfig,
    data: &[PairedSample],
    eval_data: &[PairedSample],
    mut state: TrainState,
    stop_after: Option<usize>,
    mut observer: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let end = stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    while state.step < end {
        let (x, y) = make_batch(cfg, state.step, data)?;
        let loss = train_step(net, cfg, &mut state, x, y)?;
        let step = state.step;
        let eval = if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every) && !eval_data.is_empty() {
            let r = evaluate(net, &state.params, eval_data, 1)?;
            Some((r.psnr_db, r.ssim))
        } else {
            None
        };
        observer(TrainEvent::Log(&LogLine { step, loss, eval }))?;
        if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) {
            observer(TrainEvent::Checkpoint(&state))?;
        }
    }
    Ok(state)
}

/// Restores every degraded image and scores it against its clean target.
/// Samples are independent, so `threads > 1` splits them across workers
/// without changing any result.
pub fn evaluate(net: &Network, params: &ParameterStore, data: &[PairedSample], threads: usize) -> Result<MetricReport> {
    let score = |s: &PairedSample| -> Result<SampleMetrics> {
        let restored = net.restore(&s.degraded, params)?;
        Ok(SampleMetrics {
            psnr_db: psnr(&restored, &s.clean)?,
            ssim: ssim(&restored, &s.clean)?,
        })
    };
    let threads = threads.clamp(1, data.len().max(1));
    let per_sample = if threads == 1 {
        data.iter().map(score).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = data.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = data
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(score).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(data.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    Ok(MetricReport::from_samples(per_sample))
}

/// Scores the degraded inputs themselves, the no-op restoration baseline.
pub fn identity_baseline(data: &[PairedSample]) -> Result<MetricReport> {
    let per_sample = data
        .iter()
        .map(|s| {
            Ok(SampleMetrics {
                psnr_db: psnr(&s.degraded, &s.clean)?,
                ssim: ssim(&s.degraded, &s.clean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_samples(per_sample))
}
