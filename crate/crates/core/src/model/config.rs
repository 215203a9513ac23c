use crate::error::{Error, Result};

/// Architecture hyperparameters of the restoration network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Encoder depth; each stage halves the resolution and doubles the width.
    pub stages: usize,
    pub base_channels: usize,
    /// Number of learnable query tokens per task intra-patch block.
    pub query_len: usize,
    pub heads: usize,
    /// Hidden width multiplier of every feed-forward sub-block.
    pub ffn_expansion: usize,
    /// Channel width of the fused task query map.
    pub task_channels: usize,
    /// Fraction of channels routed through the spectral branch of each FFC.
    pub ffc_global_ratio: f64,
    /// Apply FFC only to the bottleneck instead of to every skip.
    pub ffc_bottleneck_only: bool,
    /// Side of the attention windows used by the task sequence generator.
    pub tsg_window: usize,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            base_channels: 16,
            query_len: 48,
            heads: 2,
            ffn_expansion: 2,
            task_channels: 16,
            ffc_global_ratio: 0.5,
            ffc_bottleneck_only: false,
            tsg_window: 8,
            input_channels: 3,
        }
    }
}

impl NetworkConfig {
    /// Channel width at pyramid level `level` (0 = full resolution).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Number of adaptive-mixup gates, one per decoder stage.
    pub fn mixup_count(&self) -> usize {
        self.stages
    }

    /// Per-head key width at `level`.
    pub fn key_dim(&self, level: usize) -> usize {
        self.channels(level) / self.heads
    }

    /// Spatial sizes must be multiples of this: every encoder stage halves the
    /// size and the deepest task intra-patch block still splits its map in two.
    pub fn size_multiple(&self) -> usize {
        1 << (self.stages + 1)
    }

    /// Smallest accepted input side.
    pub fn min_size(&self) -> usize {
        self.size_multiple().max(32)
    }

    /// Splits `channels` into (local, global) widths.
    pub fn ffc_split(ratio: f64, channels: usize) -> Result<(usize, usize)> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!(
                "ffc_global_ratio must lie in [0, 1], got {ratio}"
            )));
        }
        let global = (ratio * channels as f64).round() as usize;
        if ratio > 0.0 && ratio < 1.0 && (global == 0 || global == channels) {
            return Err(Error::Config(format!(
                "ffc_global_ratio {ratio} leaves an empty branch at {channels} channels"
            )));
        }
        Ok((channels - global, global))
    }

    /// Checks every field; the error lists all violations.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("query_len", self.query_len),
            ("heads", self.heads),
            ("ffn_expansion", self.ffn_expansion),
            ("task_channels", self.task_channels),
            ("tsg_window", self.tsg_window),
            ("input_channels", self.input_channels),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.stages < 3 {
            bad.push(format!(
                "stages must be at least 3 for task query fusion, got {}",
                self.stages
            ));
        }
        if self.stages > 8 {
            bad.push(format!("stages must be at most 8, got {}", self.stages));
        }
        if bad.is_empty() {
            for level in 0..=self.stages {
                if !self.channels(level).is_multiple_of(self.heads) {
                    bad.push(format!(
                        "heads ({}) must divide channel width {} at level {level}",
                        self.heads,
                        self.channels(level)
                    ));
                    break;
                }
            }
            for level in 1..=self.stages {
                if let Err(Error::Config(msg)) =
                    Self::ffc_split(self.ffc_global_ratio, self.channels(level))
                {
                    bad.push(format!("ffc_global_ratio: {msg}"));
                    break;
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}
