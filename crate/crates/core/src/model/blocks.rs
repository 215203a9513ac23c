//! Building blocks of the restoration network, expressed as graph ops.

use crate::autograd::{BatchStats, Graph, NormMode, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::config::NetworkConfig;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Mode switches and side outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCtx<T> {
    /// Batch statistics in normalization layers (and reporting them).
    pub training: bool,
    /// ReLU after the frequency-domain normalization. Disabled only by tests
    /// that need the spectral path to be linear.
    pub spectral_relu: bool,
    /// Batch statistics observed by training-mode norms, keyed by param prefix.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T> ForwardCtx<T> {
    pub fn train() -> Self {
        Self {
            training: true,
            spectral_relu: true,
            bn_stats: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            spectral_relu: true,
            bn_stats: Vec::new(),
        }
    }
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    out.push(ParamSpec::weight(format!("{prefix}.w"), vec![cin, cout]));
    out.push(ParamSpec::bias(format!("{prefix}.b"), cout));
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, k: usize, cin: usize, cout: usize, bias: bool) {
    out.push(ParamSpec::conv(format!("{prefix}.w"), [k, k, cin, cout]));
    if bias {
        out.push(ParamSpec::bias(format!("{prefix}.b"), cout));
    }
}

fn apply_linear<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}

fn apply_conv<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    stride: usize,
    bias: bool,
) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let k = g.shape(w)[0];
    let b = if bias {
        Some(p.get(&format!("{prefix}.b"))?)
    } else {
        None
    };
    g.conv2d(x, w, b, stride, k / 2)
}

/// Residual two-layer feed-forward sub-block: `x + W2·gelu(W1·x)`.
#[derive(Clone, Debug)]
pub struct Ffn {
    prefix: String,
    channels: usize,
    hidden: usize,
}

impl Ffn {
    pub fn new(prefix: impl Into<String>, channels: usize, expansion: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            hidden: channels * expansion,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        linear_specs(out, &format!("{}.fc1", self.prefix), self.channels, self.hidden);
        linear_specs(out, &format!("{}.fc2", self.prefix), self.hidden, self.channels);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = apply_linear(g, p, &format!("{}.fc1", self.prefix), x)?;
        let h = g.gelu(h);
        let h = apply_linear(g, p, &format!("{}.fc2", self.prefix), h)?;
        g.add(x, h)
    }
}

/// `[B, T, C]` → `[B·heads, T, C/heads]`.
pub fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let [b, t, c] = match g.shape(x) {
        &[b, t, c] => [b, t, c],
        s => return Err(Error::shape("split_heads", format!("expected rank 3, got {s:?}"))),
    };
    if c % heads != 0 {
        return Err(Error::shape("split_heads", format!("{heads} heads do not divide {c} channels")));
    }
    let d = c / heads;
    let x = g.reshape(x, &[b, t, heads, d])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, d])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let [bh, t, d] = match g.shape(x) {
        &[bh, t, d] => [bh, t, d],
        s => return Err(Error::shape("merge_heads", format!("expected rank 3, got {s:?}"))),
    };
    let b = bh / heads;
    let x = g.reshape(x, &[b, heads, t, d])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, t, heads * d])
}

/// Scaled dot-product logits `q·kᵀ/√d` for batched `[B, L, d]` and `[B, M, d]`.
pub fn attention_logits<T: Real>(g: &mut Graph<T>, q: Var, k: Var) -> Result<Var> {
    let d = *g.shape(q).last().unwrap_or(&0);
    if d == 0 {
        return Err(Error::Config("attention key width must be positive".into()));
    }
    let logits = g.bmm(q, k, false, true)?;
    Ok(g.scale(logits, T::one() / T::lit(d as f64).sqrt()))
}

/// Partitions `[N, H, W, C]` into `[N·(H/wh)·(W/ww), wh·ww, C]` windows.
pub fn to_windows<T: Real>(g: &mut Graph<T>, x: Var, wh: usize, ww: usize) -> Result<Var> {
    let [n, h, w, c] = g.value(x).dims4()?;
    if h % wh != 0 || w % ww != 0 {
        return Err(Error::shape("to_windows", format!("{h}x{w} not divisible by {wh}x{ww}")));
    }
    let (nh, nw) = (h / wh, w / ww);
    let x = g.reshape(x, &[n, nh, wh, nw, ww, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(x, &[n * nh * nw, wh * ww, c])
}

/// Inverse of [`to_windows`] for an `[n, h, w, ·]` layout.
pub fn from_windows<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    [n, h, w]: [usize; 3],
    wh: usize,
    ww: usize,
) -> Result<Var> {
    let c = *g.shape(x).last().unwrap();
    let (nh, nw) = (h / wh, w / ww);
    let x = g.reshape(x, &[n, nh, nw, wh, ww, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(x, &[n, h, w, c])
}

/// Largest divisor of `n` not exceeding `cap`.
fn window_side(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

/// Strided conv downsampling followed by a residual token feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    prefix: String,
    cin: usize,
    ffn: Ffn,
}

impl EncoderStage {
    pub fn new(prefix: impl Into<String>, cin: usize, expansion: usize) -> Self {
        let prefix = prefix.into();
        let ffn = Ffn::new(format!("{prefix}.ffn"), 2 * cin, expansion);
        Self { prefix, cin, ffn }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        conv_specs(out, &format!("{}.down", self.prefix), 3, self.cin, 2 * self.cin, true);
        self.ffn.specs(out);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let [_, h, w, _] = g.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "encoder_stage",
                format!("spatial dims {h}x{w} must be even"),
            ));
        }
        let y = apply_conv(g, p, &format!("{}.down", self.prefix), x, 2, true)?;
        let y = g.gelu(y);
        self.ffn.forward(g, p, y)
    }
}

/// Task intra-patch block: attention over half-size patches whose queries are
/// a learnable sequence.
///
/// Per patch, the learnable queries read a task summary from the patch tokens
/// (`softmax(Q·Kᵀ/√d)·V`). The same logits, normalized over the queries,
/// write that summary back onto the tokens so the block keeps the patch
/// resolution. The result passes through the output projection, the residual
/// add and the residual FFN.
#[derive(Clone, Debug)]
pub struct Tipb {
    prefix: String,
    channels: usize,
    heads: usize,
    query_len: usize,
    ffn: Ffn,
}

impl Tipb {
    pub fn new(prefix: impl Into<String>, channels: usize, heads: usize, query_len: usize, expansion: usize) -> Self {
        let prefix = prefix.into();
        let ffn = Ffn::new(format!("{prefix}.ffn"), channels, expansion);
        Self {
            prefix,
            channels,
            heads,
            query_len,
            ffn,
        }
    }

    pub fn query_name(&self) -> String {
        format!("{}.query", self.prefix)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(
            ParamSpec::weight(self.query_name(), vec![self.query_len, self.channels])
                .with_init(Init::Normal { std: 0.02 }),
        );
        for proj in ["k", "v", "o"] {
            linear_specs(out, &format!("{}.{proj}", self.prefix), self.channels, self.channels);
        }
        self.ffn.specs(out);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let [n, h, w, c] = g.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "tipb",
                format!("odd spatial dims {h}x{w}; pad the input first"),
            ));
        }
        if c != self.channels {
            return Err(Error::shape("tipb", format!("expected {} channels, got {c}", self.channels)));
        }
        let query = p.get(&self.query_name())?;
        if g.shape(query) != [self.query_len, c] {
            return Err(Error::shape(
                "tipb",
                format!("learnable query is {:?}, expected [{}, {c}]", g.shape(query), self.query_len),
            ));
        }
        let (ph, pw) = (h / 2, w / 2);
        let tokens = to_windows(g, x, ph, pw)?;
        let batch = 4 * n;
        let heads = self.heads;
        let d = c / heads;

        let k = apply_linear(g, p, &format!("{}.k", self.prefix), tokens)?;
        let v = apply_linear(g, p, &format!("{}.v", self.prefix), tokens)?;
        let kh = split_heads(g, k, heads)?;
        let vh = split_heads(g, v, heads)?;

        let q = g.reshape(query, &[self.query_len, heads, d])?;
        let q = g.permute(q, &[1, 0, 2])?;
        let q = g.tile(q, batch)?;
        let qh = g.reshape(q, &[batch * heads, self.query_len, d])?;

        let logits = attention_logits(g, qh, kh)?;
        let read = g.softmax(logits)?;
        let summary = g.bmm(read, vh, false, false)?;
        let logits_t = g.permute(logits, &[0, 2, 1])?;
        let write = g.softmax(logits_t)?;
        let spread = g.bmm(write, summary, false, false)?;

        let merged = merge_heads(g, spread, heads)?;
        let attended = apply_linear(g, p, &format!("{}.o", self.prefix), merged)?;
        let h1 = g.add(attended, tokens)?;
        let out = self.ffn.forward(g, p, h1)?;
        from_windows(g, out, [n, h, w], ph, pw)
    }
}

/// Fuses the first three TIPB outputs into the task query map:
/// `conv3(conv7(T1) + conv5(T2) + conv3(T3))`, resampled to T3's grid.
#[derive(Clone, Debug)]
pub struct TaskQueryFuse {
    prefix: String,
    widths: [usize; 3],
    task_channels: usize,
}

impl TaskQueryFuse {
    pub const KERNELS: [usize; 3] = [7, 5, 3];

    pub fn new(prefix: impl Into<String>, widths: [usize; 3], task_channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            widths,
            task_channels,
        }
    }

    pub fn branch_name(&self, i: usize) -> String {
        format!("{}.c{}", self.prefix, Self::KERNELS[i])
    }

    pub fn out_name(&self) -> String {
        format!("{}.out", self.prefix)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for i in 0..3 {
            conv_specs(out, &self.branch_name(i), Self::KERNELS[i], self.widths[i], self.task_channels, true);
        }
        conv_specs(out, &self.out_name(), 3, self.task_channels, self.task_channels, true);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, stages: &[Var]) -> Result<Var> {
        if stages.len() < 3 {
            return Err(Error::Config(format!(
                "task query fusion needs 3 stage outputs, got {}",
                stages.len()
            )));
        }
        let [_, th, tw, _] = g.value(stages[2]).dims4()?;
        let mut acc: Option<Var> = None;
        for (i, &t) in stages[..3].iter().enumerate() {
            let mut y = apply_conv(g, p, &self.branch_name(i), t, 1, true)?;
            let [_, h, w, _] = g.value(y).dims4()?;
            if (h, w) != (th, tw) {
                y = g.resize(y, th, tw)?;
            }
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        apply_conv(g, p, &self.out_name(), acc.unwrap(), 1, true)
    }
}

/// Cross-attention of decoder tokens against the task query map:
/// `FFN(MSA(I, Q_task) + I)` with Q from the task map and K, V from `I`.
///
/// Attention runs inside non-overlapping windows of at most
/// `window × window` tokens.
#[derive(Clone, Debug)]
pub struct TaskSequenceGenerator {
    prefix: String,
    channels: usize,
    task_channels: usize,
    heads: usize,
    window: usize,
    ffn: Ffn,
}

impl TaskSequenceGenerator {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        task_channels: usize,
        heads: usize,
        window: usize,
        expansion: usize,
    ) -> Self {
        let prefix = prefix.into();
        let ffn = Ffn::new(format!("{prefix}.ffn"), channels, expansion);
        Self {
            prefix,
            channels,
            task_channels,
            heads,
            window,
            ffn,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        linear_specs(out, &format!("{}.q", self.prefix), self.task_channels, self.channels);
        for proj in ["k", "v", "o"] {
            linear_specs(out, &format!("{}.{proj}", self.prefix), self.channels, self.channels);
        }
        self.ffn.specs(out);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, task: Var) -> Result<Var> {
        let [n, h, w, c] = g.value(x).dims4()?;
        let [tn, th, tw, tc] = g.value(task).dims4()?;
        if c != self.channels {
            return Err(Error::shape("task_sequence_generator", format!("expected {} channels, got {c}", self.channels)));
        }
        if tc != self.task_channels {
            return Err(Error::shape(
                "task_sequence_generator",
                format!("task query has {tc} channels, projection expects {}", self.task_channels),
            ));
        }
        if tn != n {
            return Err(Error::shape("task_sequence_generator", format!("batch {tn} vs {n}")));
        }
        let task = if (th, tw) != (h, w) { g.resize(task, h, w)? } else { task };
        let (wh, ww) = (window_side(h, self.window), window_side(w, self.window));
        let xt = to_windows(g, x, wh, ww)?;
        let qt = to_windows(g, task, wh, ww)?;

        let q = apply_linear(g, p, &format!("{}.q", self.prefix), qt)?;
        let k = apply_linear(g, p, &format!("{}.k", self.prefix), xt)?;
        let v = apply_linear(g, p, &format!("{}.v", self.prefix), xt)?;
        let qh = split_heads(g, q, self.heads)?;
        let kh = split_heads(g, k, self.heads)?;
        let vh = split_heads(g, v, self.heads)?;
        let logits = attention_logits(g, qh, kh)?;
        let attn = g.softmax(logits)?;
        let mixed = g.bmm(attn, vh, false, false)?;
        let merged = merge_heads(g, mixed, self.heads)?;
        let o = apply_linear(g, p, &format!("{}.o", self.prefix), merged)?;
        let h1 = g.add(xt, o)?;
        let out = self.ffn.forward(g, p, h1)?;
        from_windows(g, out, [n, h, w], wh, ww)
    }
}

/// Global branch of the FFC: real FFT, pointwise conv → BN → ReLU on the
/// stacked real/imaginary channels, inverse real FFT.
#[derive(Clone, Debug)]
pub struct SpectralTransform {
    prefix: String,
    channels: usize,
}

impl SpectralTransform {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
        }
    }

    pub fn conv_name(&self) -> String {
        format!("{}.conv.w", self.prefix)
    }

    pub fn bn_prefix(&self) -> String {
        format!("{}.bn", self.prefix)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let c2 = 2 * self.channels;
        out.push(ParamSpec::conv(self.conv_name(), [1, 1, c2, c2]));
        let bn = self.bn_prefix();
        out.push(ParamSpec::bias(format!("{bn}.gamma"), c2).with_init(Init::Ones));
        out.push(ParamSpec::bias(format!("{bn}.beta"), c2));
        out.push(ParamSpec::bias(format!("{bn}.running_mean"), c2).buffer());
        out.push(ParamSpec::bias(format!("{bn}.running_var"), c2).with_init(Init::Ones).buffer());
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let [_, h, w, c] = g.value(x).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::Precondition(format!(
                "spectral transform needs H, W >= 2, got {h}x{w}"
            )));
        }
        if c != self.channels {
            return Err(Error::shape("spectral_transform", format!("expected {} channels, got {c}", self.channels)));
        }
        let z = g.rfft2(x)?;
        let z = g.conv2d(z, p.get(&self.conv_name())?, None, 1, 0)?;
        let bn = self.bn_prefix();
        let gamma = p.get(&format!("{bn}.gamma"))?;
        let beta = p.get(&format!("{bn}.beta"))?;
        let eps = T::lit(BN_EPS);
        let z = if ctx.training {
            let (z, stats) = g.batch_norm(z, gamma, beta, NormMode::Batch { eps })?;
            if let Some(stats) = stats {
                ctx.bn_stats.push((bn, stats));
            }
            z
        } else {
            let mean = g.value(p.get(&format!("{bn}.running_mean"))?).data().to_vec();
            let var = g.value(p.get(&format!("{bn}.running_var"))?).data().to_vec();
            g.batch_norm(z, gamma, beta, NormMode::Running { mean: &mean, var: &var, eps })?.0
        };
        let z = if ctx.spectral_relu { g.relu(z) } else { z };
        g.irfft2(z, w)
    }
}

/// Fast Fourier convolution: a local 3×3 branch and a spectral branch with
/// pointwise cross terms, `Y_l = f_ll(X_l) + f_gl(X_g)`, `Y_g = f_gg(X_g) + f_lg(X_l)`.
#[derive(Clone, Debug)]
pub struct Ffc {
    prefix: String,
    local: usize,
    global: usize,
    spectral: SpectralTransform,
}

impl Ffc {
    pub fn new(prefix: impl Into<String>, channels: usize, ratio: f64) -> Result<Self> {
        let prefix = prefix.into();
        let (local, global) = NetworkConfig::ffc_split(ratio, channels)?;
        let spectral = SpectralTransform::new(format!("{prefix}.st"), global);
        Ok(Self {
            prefix,
            local,
            global,
            spectral,
        })
    }

    pub fn split(&self) -> (usize, usize) {
        (self.local, self.global)
    }

    pub fn spectral(&self) -> &SpectralTransform {
        &self.spectral
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let (l, gl) = (self.local, self.global);
        if l > 0 {
            conv_specs(out, &format!("{}.ll", self.prefix), 3, l, l, true);
        }
        if gl > 0 {
            self.spectral.specs(out);
        }
        if l > 0 && gl > 0 {
            conv_specs(out, &format!("{}.gl", self.prefix), 1, gl, l, false);
            conv_specs(out, &format!("{}.lg", self.prefix), 1, l, gl, false);
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let [_, _, _, c] = g.value(x).dims4()?;
        if c != self.local + self.global {
            return Err(Error::shape("ffc", format!("expected {} channels, got {c}", self.local + self.global)));
        }
        let ll = format!("{}.ll", self.prefix);
        if self.global == 0 {
            return apply_conv(g, p, &ll, x, 1, true);
        }
        if self.local == 0 {
            return self.spectral.forward(g, p, x, ctx);
        }
        let xl = g.slice_last(x, 0, self.local)?;
        let xg = g.slice_last(x, self.local, self.global)?;
        let l2l = apply_conv(g, p, &ll, xl, 1, true)?;
        let g2l = apply_conv(g, p, &format!("{}.gl", self.prefix), xg, 1, false)?;
        let yl = g.add(l2l, g2l)?;
        let g2g = self.spectral.forward(g, p, xg, ctx)?;
        let l2g = apply_conv(g, p, &format!("{}.lg", self.prefix), xl, 1, false)?;
        let yg = g.add(g2g, l2g)?;
        g.concat_last(&[yl, yg])
    }
}

/// `softmax(Q·Kᵀ/√d)·V` for single rank-2 operands `[L, d]`, `[M, d]`, `[M, d_v]`.
pub fn scaled_dot_attention<T: Real>(queries: &Tensor<T>, keys: &Tensor<T>, values: &Tensor<T>) -> Result<Tensor<T>> {
    let op = "scaled_dot_attention";
    let rank2 = |name: &str, t: &Tensor<T>| match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::shape(op, format!("{name} must be rank 2, got {s:?}"))),
    };
    let (l, d) = rank2("queries", queries)?;
    let (m, dk) = rank2("keys", keys)?;
    let (mv, dv) = rank2("values", values)?;
    if dk != d {
        return Err(Error::shape(op, format!("keys width {dk} != queries width {d}")));
    }
    if mv != m {
        return Err(Error::shape(op, format!("values rows {mv} != keys rows {m}")));
    }
    if d == 0 {
        return Err(Error::Config("attention key width must be positive".into()));
    }
    let mut g = Graph::new();
    let q = g.constant(queries.clone().reshape(vec![1, l, d])?);
    let k = g.constant(keys.clone().reshape(vec![1, m, d])?);
    let v = g.constant(values.clone().reshape(vec![1, m, dv])?);
    let logits = attention_logits(&mut g, q, k)?;
    let w = g.softmax(logits)?;
    let out = g.bmm(w, v, false, false)?;
    g.value(out).clone().reshape(vec![l, dv])
}
