//! `key = value` run configuration with `[model]`, `[train]` and `[data]` sections.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::synth::{DegradationKind, DegradationSpec, SynthConfig};
use crate::train::{LossKind, TrainConfig};

/// Synthetic data settings; each listed kind uses its preset parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub kinds: Vec<DegradationKind>,
    pub jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            height: s.height,
            width: s.width,
            kinds: DegradationKind::ALL.to_vec(),
            jitter: s.jitter,
        }
    }
}

impl DataConfig {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.height,
            width: self.width,
            kinds: self.kinds.iter().map(|&k| DegradationSpec::preset(k)).collect(),
            jitter: self.jitter,
        }
    }
}

/// Everything a CLI run needs. Missing keys keep their defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse_field<V: FromStr>(value: &str) -> Option<V> {
    value.parse().ok()
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn parse_kinds(value: &str) -> Option<Vec<DegradationKind>> {
    value
        .split(',')
        .map(|k| k.trim().parse().ok())
        .collect::<Option<Vec<_>>>()
        .filter(|v| !v.is_empty())
}

enum Assign {
    Ok,
    UnknownKey,
    BadValue,
}

impl RunConfig {
    fn assign(&mut self, section: &str, key: &str, value: &str) -> Assign {
        macro_rules! set {
            ($slot:expr, $parsed:expr) => {
                match $parsed {
                    Some(v) => {
                        $slot = v;
                        Assign::Ok
                    }
                    None => Assign::BadValue,
                }
            };
        }
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match (section, key) {
            ("model", "stages") => set!(m.stages, parse_field(value)),
            ("model", "base_channels") => set!(m.base_channels, parse_field(value)),
            ("model", "query_len") => set!(m.query_len, parse_field(value)),
            ("model", "heads") => set!(m.heads, parse_field(value)),
            ("model", "ffn_expansion") => set!(m.ffn_expansion, parse_field(value)),
            ("model", "task_channels") => set!(m.task_channels, parse_field(value)),
            ("model", "ffc_global_ratio") => set!(m.ffc_global_ratio, parse_field(value)),
            ("model", "ffc_bottleneck_only") => set!(m.ffc_bottleneck_only, parse_bool(value)),
            ("model", "tsg_window") => set!(m.tsg_window, parse_field(value)),
            ("model", "input_channels") => set!(m.input_channels, parse_field(value)),
            ("train", "steps") => set!(t.steps, parse_field(value)),
            ("train", "batch_size") => set!(t.batch_size, parse_field(value)),
            ("train", "lr") => set!(t.lr, parse_field(value)),
            ("train", "min_lr_ratio") => set!(t.min_lr_ratio, parse_field(value)),
            ("train", "warmup_steps") => set!(t.warmup_steps, parse_field(value)),
            ("train", "seed") => set!(t.seed, parse_field(value)),
            ("train", "loss") => set!(t.loss, parse_field::<LossKind>(value)),
            ("train", "checkpoint_every") => set!(t.checkpoint_every, parse_field(value)),
            ("train", "eval_every") => set!(t.eval_every, parse_field(value)),
            ("train", "augment") => set!(t.augment, parse_bool(value)),
            ("train", "clip_norm") => set!(t.clip_norm, parse_field(value)),
            ("data", "height") => set!(d.height, parse_field(value)),
            ("data", "width") => set!(d.width, parse_field(value)),
            ("data", "kinds") => set!(d.kinds, parse_kinds(value)),
            ("data", "jitter") => set!(d.jitter, parse_field(value)),
            _ => Assign::UnknownKey,
        }
    }

    /// Parses config text. Every unknown key and bad value is reported in one error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut problems = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let n = n + 1;
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if matches!(name, "model" | "train" | "data") {
                    section = Some(name.to_string());
                } else {
                    problems.push(format!("line {n}: unknown section [{name}]"));
                    section = None;
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {n}: expected `key = value`"));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = section.as_deref() else {
                problems.push(format!("line {n}: unknown key `{key}` outside a known section"));
                continue;
            };
            match cfg.assign(sec, key, value) {
                Assign::Ok => {}
                Assign::UnknownKey => problems.push(format!("line {n}: unknown key `{sec}.{key}`")),
                Assign::BadValue => problems.push(format!("line {n}: bad value `{value}` for `{sec}.{key}`")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Writes every field; floats use the shortest text that parses back exactly.
    pub fn serialize(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "stages = {}", m.stages);
        let _ = writeln!(s, "base_channels = {}", m.base_channels);
        let _ = writeln!(s, "query_len = {}", m.query_len);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "ffn_expansion = {}", m.ffn_expansion);
        let _ = writeln!(s, "task_channels = {}", m.task_channels);
        let _ = writeln!(s, "ffc_global_ratio = {}", m.ffc_global_ratio);
        let _ = writeln!(s, "ffc_bottleneck_only = {}", m.ffc_bottleneck_only);
        let _ = writeln!(s, "tsg_window = {}", m.tsg_window);
        let _ = writeln!(s, "input_channels = {}", m.input_channels);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "min_lr_ratio = {}", t.min_lr_ratio);
        let _ = writeln!(s, "warmup_steps = {}", t.warmup_steps);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "loss = {}", t.loss);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "eval_every = {}", t.eval_every);
        let _ = writeln!(s, "augment = {}", t.augment);
        let _ = writeln!(s, "clip_norm = {}", t.clip_norm);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "height = {}", d.height);
        let _ = writeln!(s, "width = {}", d.width);
        let kinds: Vec<&str> = d.kinds.iter().map(|k| k.name()).collect();
        let _ = writeln!(s, "kinds = {}", kinds.join(", "));
        let _ = writeln!(s, "jitter = {}", d.jitter);
        s
    }

    /// The `[model]` section alone; its hash identifies a checkpoint's architecture.
    pub fn model_lines(model: &NetworkConfig) -> Vec<String> {
        let cfg = RunConfig {
            model: model.clone(),
            ..Default::default()
        };
        cfg.serialize()
            .lines()
            .skip(1)
            .take_while(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    }
}
