//! Model dimensions and inference settings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture sizes. Stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: usize,
    pub vit_dim: usize,
    pub vit_layers: usize,
    pub vit_heads: usize,
    pub mlp_ratio: usize,
    /// Side of the learned positional-embedding grid; resized for other grids.
    pub pos_grid: usize,
    pub stem_channels: usize,
    pub c4: usize,
    pub c8: usize,
    pub c16: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Channels of the correlated map and of target queries.
    pub corr_dim: usize,
    pub dec8: usize,
    pub dec4: usize,
    pub refine_channels: usize,
    pub salient_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: 8,
            vit_dim: 64,
            vit_layers: 4,
            vit_heads: 4,
            mlp_ratio: 2,
            pos_grid: 8,
            stem_channels: 16,
            c4: 32,
            c8: 64,
            c16: 128,
            key_dim: 32,
            value_dim: 64,
            corr_dim: 64,
            dec8: 32,
            dec4: 16,
            refine_channels: 16,
            salient_k: 16,
        }
    }
}

impl ModelConfig {
    /// Channel counts at strides 4, 8, 16.
    pub fn scale_channels(&self) -> [usize; 3] {
        [self.c4, self.c8, self.c16]
    }

    /// Named size preset: `default` or `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown model preset {name:?}; expected default or tiny"))),
        }
    }

    /// A much smaller network with the same topology, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            patch: 8,
            vit_dim: 8,
            vit_layers: 1,
            vit_heads: 2,
            mlp_ratio: 2,
            pos_grid: 4,
            stem_channels: 3,
            c4: 4,
            c8: 4,
            c16: 6,
            key_dim: 4,
            value_dim: 4,
            corr_dim: 5,
            dec8: 4,
            dec4: 3,
            refine_channels: 2,
            salient_k: 3,
        }
    }
}

/// Inference-time settings, readable from a `key=value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Memory and query update cadence in frames.
    pub mem_interval: usize,
    /// Memory capacity in frames' worth of stride-16 elements.
    pub mem_cap: usize,
    pub scales: Vec<f64>,
    pub flip_fusion: bool,
    pub point_count: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mem_interval: 3,
            mem_cap: 16,
            scales: vec![1.0, 1.5],
            flip_fusion: false,
            point_count: 112,
            seed: 0,
        }
    }
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl EngineConfig {
    /// Applies one setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mem_interval" => self.mem_interval = parse_value(key, value)?,
            "mem_cap" => self.mem_cap = parse_value(key, value)?,
            "scales" => {
                self.scales = value
                    .split(',')
                    .map(|s| parse_value::<f64>(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "flip_fusion" => self.flip_fusion = parse_bool(key, value)?,
            "point_count" => self.point_count = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown engine setting {key:?}"))),
        }
        Ok(())
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = EngineConfig::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_key_values(&text)
    }

    /// `SSVOS_SEED`, when set, overrides the seed.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("SSVOS_SEED") {
            self.seed = parse_value("SSVOS_SEED", &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.mem_interval == 0 {
            return Err(Error::Config("mem_interval must be at least 1".into()));
        }
        if self.mem_cap == 0 {
            return Err(Error::Config("mem_cap must be at least 1".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("scales must be nonempty and positive, got {:?}", self.scales)));
        }
        if self.point_count == 0 {
            return Err(Error::Config("point_count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        let scales: Vec<String> = self.scales.iter().map(|s| s.to_string()).collect();
        format!(
            "mem_interval={}\nmem_cap={}\nscales={}\nflip_fusion={}\npoint_count={}\nseed={}\n",
            self.mem_interval,
            self.mem_cap,
            scales.join(","),
            self.flip_fusion,
            self.point_count,
            self.seed
        )
    }
}
