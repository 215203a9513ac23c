//! Flat checkpoint format.
//!
//! A UTF-8 header of `key=value` lines ends at the first empty line:
//!
//! ```text
//! ALLWEATHER-CKPT
//! version=1
//! model_hash=<sha256 of the model.* lines>
//! step=<k>
//! seed=<s>
//! model.stages=4
//! ...
//! entries=<n>
//! manifest_sha256=<sha256 of the body>
//! ```
//!
//! The body is `n` records, each `u32 name_len, name, u32 rank, rank × u32
//! dims, f32 data`, all little-endian and row-major. Names carry a kind prefix:
//! `param/`, `buffer/`, `adam_m/` or `adam_v/`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Network, NetworkConfig};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainState};

pub const MAGIC: &str = "ALLWEATHER-CKPT";
pub const VERSION: u32 = 1;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hash identifying an architecture: the digest of its serialized `[model]` lines.
pub fn model_hash(model: &NetworkConfig) -> String {
    let mut text = String::new();
    for line in RunConfig::model_lines(model) {
        text.push_str(&line);
        text.push('\n');
    }
    sha256_hex(text.as_bytes())
}

fn ckpt_err(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

/// A training state tagged with the architecture and training seed that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: NetworkConfig,
    pub seed: u64,
    pub state: TrainState,
}

fn push_entry(body: &mut Vec<u8>, name: &str, t: &Tensor) {
    body.extend((name.len() as u32).to_le_bytes());
    body.extend(name.as_bytes());
    body.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        body.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        body.extend(v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ckpt_err("truncated body"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_entry(cur: &mut Cursor<'_>) -> Result<(String, Tensor)> {
    let len = cur.u32()? as usize;
    let name = std::str::from_utf8(cur.take(len)?)
        .map_err(|_| ckpt_err("entry name is not UTF-8"))?
        .to_string();
    let rank = cur.u32()? as usize;
    let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| ckpt_err(format!("`{name}` is too large")))?;
    let raw = cur.take(count.checked_mul(4).ok_or_else(|| ckpt_err("entry too large"))?)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

fn need<'a>(v: Option<&'a str>, what: &str) -> Result<&'a str> {
    v.ok_or_else(|| ckpt_err(format!("header lacks `{what}`")))
}

fn parse_model(fields: &[(&str, &str)]) -> Result<NetworkConfig> {
    let mut text = String::from("[model]\n");
    for (k, v) in fields {
        let _ = writeln!(text, "{k} = {v}");
    }
    RunConfig::parse(&text)
        .map(|c| c.model)
        .map_err(|e| ckpt_err(format!("bad model section: {e}")))
}

impl Checkpoint {
    pub fn new(model: NetworkConfig, seed: u64, state: TrainState) -> Self {
        Self { model, seed, state }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let mut entries = 0usize;
        for (name, p) in self.state.params.iter() {
            let kind = if p.trainable { "param" } else { "buffer" };
            push_entry(&mut body, &format!("{kind}/{name}"), &p.tensor);
            entries += 1;
        }
        for (kind, map) in [("adam_m", &self.state.adam.m), ("adam_v", &self.state.adam.v)] {
            for (name, t) in map {
                push_entry(&mut body, &format!("{kind}/{name}"), t);
                entries += 1;
            }
        }
        let mut header = String::new();
        let _ = writeln!(header, "{MAGIC}");
        let _ = writeln!(header, "version={VERSION}");
        let _ = writeln!(header, "model_hash={}", model_hash(&self.model));
        let _ = writeln!(header, "step={}", self.state.step);
        let _ = writeln!(header, "seed={}", self.seed);
        for line in RunConfig::model_lines(&self.model) {
            let _ = writeln!(header, "model.{}", line.replacen(" = ", "=", 1));
        }
        let _ = writeln!(header, "entries={entries}");
        let _ = writeln!(header, "manifest_sha256={}", sha256_hex(&body));
        header.push('\n');
        let mut out = header.into_bytes();
        out.extend(body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| ckpt_err("no header terminator; not a checkpoint"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| ckpt_err("header is not UTF-8"))?;
        let body = &bytes[split + 2..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(ckpt_err("missing magic line; not a checkpoint"));
        }
        let mut model_fields = Vec::new();
        let (mut version, mut hash, mut step, mut seed, mut entries, mut body_hash) = (None, None, None, None, None, None);
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| ckpt_err(format!("bad header line `{line}`")))?;
            match k {
                "version" => version = Some(v),
                "model_hash" => hash = Some(v),
                "step" => step = Some(v),
                "seed" => seed = Some(v),
                "entries" => entries = Some(v),
                "manifest_sha256" => body_hash = Some(v),
                _ => match k.strip_prefix("model.") {
                    Some(key) => model_fields.push((key, v)),
                    None => return Err(ckpt_err(format!("unknown header key `{k}`"))),
                },
            }
        }
        let version: u32 = need(version, "version")?.parse().map_err(|_| ckpt_err("bad version"))?;
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported format version {version}")));
        }
        if sha256_hex(body) != need(body_hash, "manifest_sha256")? {
            return Err(ckpt_err("manifest hash mismatch: body is corrupt"));
        }
        let model = parse_model(&model_fields)?;
        if model_hash(&model) != need(hash, "model_hash")? {
            return Err(ckpt_err("manifest hash mismatch: model section disagrees with model_hash"));
        }
        let step: usize = need(step, "step")?.parse().map_err(|_| ckpt_err("bad step"))?;
        let seed: u64 = need(seed, "seed")?.parse().map_err(|_| ckpt_err("bad seed"))?;
        let entries: usize = need(entries, "entries")?.parse().map_err(|_| ckpt_err("bad entries"))?;

        let mut cur = Cursor { bytes: body, pos: 0 };
        let mut params = ParameterStore::new();
        let mut adam = AdamState::default();
        for _ in 0..entries {
            let (name, t) = read_entry(&mut cur)?;
            let (kind, key) = name
                .split_once('/')
                .ok_or_else(|| ckpt_err(format!("entry `{name}` lacks a kind prefix")))?;
            match kind {
                "param" => params.insert(key, t, true)?,
                "buffer" => params.insert(key, t, false)?,
                "adam_m" => drop(adam.m.insert(key.to_string(), t)),
                "adam_v" => drop(adam.v.insert(key.to_string(), t)),
                _ => return Err(ckpt_err(format!("unknown entry kind `{kind}`"))),
            }
        }
        if cur.pos != body.len() {
            return Err(ckpt_err("trailing bytes after the last entry"));
        }
        Ok(Self {
            model,
            seed,
            state: TrainState { params, adam, step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless this checkpoint was written for `expected`.
    pub fn check_model(&self, expected: &NetworkConfig) -> Result<()> {
        let (have, want) = (model_hash(&self.model), model_hash(expected));
        if have != want {
            return Err(ckpt_err(format!(
                "model config hash mismatch: checkpoint {} vs config {}",
                &have[..12],
                &want[..12]
            )));
        }
        Ok(())
    }

    /// Checks every entry against the network's parameter list.
    pub fn validate(&self, net: &Network) -> Result<()> {
        self.check_model(net.config())?;
        let specs = net.param_specs();
        if specs.len() != self.state.params.len() {
            return Err(ckpt_err(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.state.params.len()
            )));
        }
        for spec in &specs {
            let p = self
                .state
                .params
                .get(&spec.name)
                .ok_or_else(|| ckpt_err(format!("missing parameter `{}`", spec.name)))?;
            if p.tensor.shape() != spec.shape.as_slice() || p.trainable != spec.trainable {
                return Err(ckpt_err(format!("parameter `{}` has the wrong shape or kind", spec.name)));
            }
        }
        let adam = &self.state.adam;
        if !(adam.m.is_empty() && adam.v.is_empty()) {
            for (name, p) in self.state.params.iter().filter(|(_, p)| p.trainable) {
                for map in [&adam.m, &adam.v] {
                    if map.get(name).map(|t| t.shape()) != Some(p.tensor.shape()) {
                        return Err(ckpt_err(format!("optimizer state for `{name}` is missing or misshapen")));
                    }
                }
            }
        }
        Ok(())
    }
}
