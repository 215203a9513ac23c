use crate::autograd::{kernels::sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSpec, ParameterStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::blocks::{EncoderStage, Ffc, ForwardCtx, TaskQueryFuse, TaskSequenceGenerator, Tipb};
use super::config::NetworkConfig;
use super::pad::{padded_side, reflect_pad_to};

pub const GATES: &str = "gates.theta";

/// Graph handles produced by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct NetworkOutputs {
    /// Restored image before clamping.
    pub output: Var,
    /// Output of every task intra-patch block, shallowest first.
    pub stage_tokens: Vec<Var>,
    pub task_query: Var,
}

/// U-shaped restoration network: conv stem, strided encoder stages with task
/// intra-patch blocks, fused task query, FFC skips and a decoder whose stages
/// cross-attend to the task query and mix with the skips through learned gates.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    encoders: Vec<EncoderStage>,
    tipbs: Vec<Tipb>,
    tqf: TaskQueryFuse,
    /// Indexed by level − 1.
    ffcs: Vec<Option<Ffc>>,
    tsgs: Vec<TaskSequenceGenerator>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let encoders = (0..c.stages)
            .map(|i| EncoderStage::new(format!("enc{i}"), c.channels(i), c.ffn_expansion))
            .collect();
        let tipbs = (0..c.stages)
            .map(|i| Tipb::new(format!("tipb{i}"), c.channels(i + 1), c.heads, c.query_len, c.ffn_expansion))
            .collect();
        let tqf = TaskQueryFuse::new("tqf", [c.channels(1), c.channels(2), c.channels(3)], c.task_channels);
        let ffcs = (1..=c.stages)
            .map(|level| {
                if c.ffc_bottleneck_only && level != c.stages {
                    Ok(None)
                } else {
                    Ffc::new(format!("ffc{level}"), c.channels(level), c.ffc_global_ratio).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        let tsgs = (0..c.stages)
            .map(|j| {
                let level = c.stages - 1 - j;
                TaskSequenceGenerator::new(
                    format!("dec{j}.tsg"),
                    c.channels(level),
                    c.task_channels,
                    c.heads,
                    c.tsg_window,
                    c.ffn_expansion,
                )
            })
            .collect();
        Ok(Self {
            config,
            encoders,
            tipbs,
            tqf,
            ffcs,
            tsgs,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn ffc(&self, level: usize) -> Option<&Ffc> {
        self.ffcs.get(level.checked_sub(1)?)?.as_ref()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let mut out = Vec::new();
        out.push(ParamSpec::conv("stem.w", [3, 3, c.input_channels, c.channels(0)]));
        out.push(ParamSpec::bias("stem.b", c.channels(0)));
        for (i, (enc, tipb)) in self.encoders.iter().zip(&self.tipbs).enumerate() {
            enc.specs(&mut out);
            tipb.specs(&mut out);
            let w = c.channels(i + 1);
            out.push(ParamSpec::weight(format!("enc{i}.fuse.w"), vec![2 * w, w]));
            out.push(ParamSpec::bias(format!("enc{i}.fuse.b"), w));
        }
        self.tqf.specs(&mut out);
        for ffc in self.ffcs.iter().flatten() {
            ffc.specs(&mut out);
        }
        for (j, tsg) in self.tsgs.iter().enumerate() {
            let level = c.stages - 1 - j;
            out.push(ParamSpec::conv(
                format!("dec{j}.up.w"),
                [3, 3, c.channels(level + 1), c.channels(level)],
            ));
            out.push(ParamSpec::bias(format!("dec{j}.up.b"), c.channels(level)));
            tsg.specs(&mut out);
        }
        out.push(ParamSpec::bias(GATES, c.mixup_count()));
        out.push(ParamSpec::conv("head.pre.w", [3, 3, c.channels(0), c.channels(0)]));
        out.push(ParamSpec::bias("head.pre.b", c.channels(0)));
        // Small final kernel: training starts near the identity residual.
        out.push(ParamSpec::weight("head.w", vec![3, 3, c.channels(0), c.input_channels]));
        out.push(ParamSpec::bias("head.b", c.input_channels));
        out
    }

    pub fn init_parameters<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        ParameterStore::initialize(&self.param_specs(), seed)
    }

    /// Checks that an NHWC input fits the encoder pyramid.
    pub fn check_input(&self, dims: [usize; 4]) -> Result<()> {
        let [_, h, w, c] = dims;
        let cfg = &self.config;
        if c != cfg.input_channels {
            return Err(Error::Precondition(format!(
                "expected {} input channels, got {c}",
                cfg.input_channels
            )));
        }
        let m = cfg.size_multiple();
        if h % m != 0 || w % m != 0 || h < cfg.min_size() || w < cfg.min_size() {
            return Err(Error::Precondition(format!(
                "input {h}x{w} must be a multiple of {m} and at least {} per side; pad it first",
                cfg.min_size()
            )));
        }
        Ok(())
    }

    /// One encoder stage (strided conv + token FFN) on its own.
    pub fn encoder_stage_forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, stage: usize) -> Result<Var> {
        let enc = self.encoders.get(stage).ok_or_else(|| {
            Error::Config(format!("stage index {stage} outside 0..{}", self.encoders.len()))
        })?;
        enc.forward(g, p, x)
    }

    /// Records the full forward pass of `x` on `g`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<NetworkOutputs> {
        let dims = g.value(x).dims4()?;
        self.check_input(dims)?;
        let stages = self.config.stages;

        let f0 = g.conv2d(x, p.get("stem.w")?, Some(p.get("stem.b")?), 1, 1)?;
        let mut feats = vec![f0];
        let mut stage_tokens = Vec::with_capacity(stages);
        for (i, (enc, tipb)) in self.encoders.iter().zip(&self.tipbs).enumerate() {
            let e = enc.forward(g, p, *feats.last().unwrap())?;
            let t = tipb.forward(g, p, e)?;
            let cat = g.concat_last(&[e, t])?;
            let f = g.linear(cat, p.get(&format!("enc{i}.fuse.w"))?, Some(p.get(&format!("enc{i}.fuse.b"))?))?;
            stage_tokens.push(t);
            feats.push(f);
        }
        let task_query = self.tqf.forward(g, p, &stage_tokens)?;

        let mut skips = Vec::with_capacity(stages + 1);
        for (level, &f) in feats.iter().enumerate() {
            skips.push(match self.ffc(level) {
                Some(ffc) => ffc.forward(g, p, f, ctx)?,
                None => f,
            });
        }

        let theta = p.get(GATES)?;
        let mut d = skips[stages];
        for (j, tsg) in self.tsgs.iter().enumerate() {
            let level = stages - 1 - j;
            let [_, h, w, _] = g.value(skips[level]).dims4()?;
            let up = g.resize(d, h, w)?;
            let up = g.conv2d(up, p.get(&format!("dec{j}.up.w"))?, Some(p.get(&format!("dec{j}.up.b"))?), 1, 1)?;
            let up = g.gelu(up);
            let up = tsg.forward(g, p, up, task_query)?;
            d = g.mix(skips[level], up, theta, j)?;
        }
        let d = g.conv2d(d, p.get("head.pre.w")?, Some(p.get("head.pre.b")?), 1, 1)?;
        let d = g.gelu(d);
        let head = g.conv2d(d, p.get("head.w")?, Some(p.get("head.b")?), 1, 1)?;
        let output = g.add(x, head)?;
        Ok(NetworkOutputs {
            output,
            stage_tokens,
            task_query,
        })
    }

    /// Inference on a valid-size batch: running norm statistics, output clamped to [0, 1].
    pub fn infer<T: Real>(&self, image: &Tensor<T>, params: &ParameterStore<T>) -> Result<Tensor<T>> {
        self.check_input(image.dims4()?)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &p, x, &mut ForwardCtx::eval())?;
        Ok(g.value(out.output).map(|v| v.max(T::zero()).min(T::one())))
    }

    /// Restores an arbitrary-size image by reflect-padding to a valid size and cropping back.
    pub fn restore<T: Real>(&self, image: &Tensor<T>, params: &ParameterStore<T>) -> Result<Tensor<T>> {
        let [_, h, w, _] = image.dims4()?;
        let (m, floor) = (self.config.size_multiple(), self.config.min_size());
        let (padded, crop) = reflect_pad_to(image, padded_side(h, m, floor), padded_side(w, m, floor))?;
        crop.crop(&self.infer(&padded, params)?)
    }
}

/// Seeded parameters for `config`.
pub fn init_parameters(config: &NetworkConfig, seed: u64) -> Result<ParameterStore> {
    Network::new(config.clone())?.init_parameters(seed)
}

/// Inference on a valid-size NHWC batch in `[0, 1]`.
pub fn network_forward(image: &Tensor, params: &ParameterStore, config: &NetworkConfig) -> Result<Tensor> {
    Network::new(config.clone())?.infer(image, params)
}

/// Inference on any image size.
pub fn restore(image: &Tensor, params: &ParameterStore, config: &NetworkConfig) -> Result<Tensor> {
    Network::new(config.clone())?.restore(image, params)
}

/// Zeroes the output head so the network reduces to its global residual,
/// an exact identity map.
pub fn zero_head<T: Real>(params: &mut ParameterStore<T>) -> Result<()> {
    for name in ["head.w", "head.b"] {
        params.tensor_mut(name)?.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
    Ok(())
}

/// `σ(θ)·f_down + (1 − σ(θ))·f_up`.
pub fn adaptive_mixup<T: Real>(f_down: &Tensor<T>, f_up: &Tensor<T>, theta: T) -> Result<Tensor<T>> {
    if f_down.shape() != f_up.shape() {
        return Err(Error::shape(
            "adaptive_mixup",
            format!("{:?} vs {:?}", f_down.shape(), f_up.shape()),
        ));
    }
    let s = sigmoid(theta);
    let data = f_down
        .data()
        .iter()
        .zip(f_up.data())
        .map(|(&d, &u)| s * d + (T::one() - s) * u)
        .collect();
    Tensor::new(f_down.shape().to_vec(), data)
}
