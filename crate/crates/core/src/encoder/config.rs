use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::posemb::Grid;

/// How positional information is produced for a given patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PosembStrategy {
    /// Fixed sinusoidal master grid, centered sub-block per size.
    CenterSelect,
    /// Fixed sinusoidal grid built separately for each size.
    IndepFixed,
    /// Fixed sinusoidal master grid, trilinearly resized per size.
    InterpFixed,
    /// Learned master grid, trilinearly resized per size.
    InterpLearned,
    /// Learned relative-offset bias on the attention scores.
    Relative,
}

impl PosembStrategy {
    pub const ALL: [PosembStrategy; 5] = [
        PosembStrategy::IndepFixed,
        PosembStrategy::InterpFixed,
        PosembStrategy::InterpLearned,
        PosembStrategy::CenterSelect,
        PosembStrategy::Relative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PosembStrategy::CenterSelect => "center_select",
            PosembStrategy::IndepFixed => "indep_fixed",
            PosembStrategy::InterpFixed => "interp_fixed",
            PosembStrategy::InterpLearned => "interp_learned",
            PosembStrategy::Relative => "relative",
        }
    }
}

impl fmt::Display for PosembStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PosembStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown positional strategy {s:?} (expected one of center_select, \
                     indep_fixed, interp_fixed, interp_learned, relative)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub max_image_edge: usize,
    pub posemb: PosembStrategy,
}

impl ModelConfig {
    /// ViT-S/16: 12 blocks, width 384, 6 heads, 96³ inputs.
    pub fn paper() -> Self {
        Self {
            depth: 12,
            embed_dim: 384,
            heads: 6,
            mlp_ratio: 4,
            num_classes: 2,
            patch_size: 16,
            in_channels: CHANNELS,
            max_image_edge: 96,
            posemb: PosembStrategy::CenterSelect,
        }
    }

    /// Desk-scale encoder for 16/24/32 crops with 8³ patches.
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            embed_dim: 24,
            heads: 2,
            mlp_ratio: 4,
            num_classes: 2,
            patch_size: 8,
            in_channels: CHANNELS,
            max_image_edge: 32,
            posemb: PosembStrategy::CenterSelect,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!(
                "unknown preset {other:?} (expected paper or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if d == 0 || d % 6 != 0 {
            return Err(Error::config(format!("embed_dim {d} must be a multiple of 6")));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {d} not divisible by {} heads",
                self.heads
            )));
        }
        if self.mlp_ratio == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::config("mlp_ratio, num_classes and in_channels must be >= 1"));
        }
        if self.patch_size == 0 || self.max_image_edge % self.patch_size != 0 || self.max_image_edge == 0 {
            return Err(Error::config(format!(
                "max_image_edge {} must be a positive multiple of patch_size {}",
                self.max_image_edge, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.patch_size.pow(3)
    }

    pub fn max_grid(&self) -> Grid {
        [self.max_image_edge / self.patch_size; 3]
    }

    pub fn to_text(&self) -> String {
        format!(
            "depth={}\nembed_dim={}\nheads={}\nmlp_ratio={}\nnum_classes={}\npatch_size={}\n\
             in_channels={}\nmax_image_edge={}\nposemb={}\n",
            self.depth,
            self.embed_dim,
            self.heads,
            self.mlp_ratio,
            self.num_classes,
            self.patch_size,
            self.in_channels,
            self.max_image_edge,
            self.posemb
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let mut cfg = Self::tiny();
        cfg.apply(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides fields from `key=value` pairs; unknown keys are ignored so
    /// one file can also carry training and benchmark settings.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| Error::config(format!("{k}={v}: expected an integer")))
            };
            match k.as_str() {
                "depth" => self.depth = num()?,
                "embed_dim" => self.embed_dim = num()?,
                "heads" => self.heads = num()?,
                "mlp_ratio" => self.mlp_ratio = num()?,
                "num_classes" => self.num_classes = num()?,
                "patch_size" => self.patch_size = num()?,
                "in_channels" => self.in_channels = num()?,
                "max_image_edge" => self.max_image_edge = num()?,
                "posemb" => self.posemb = v.parse()?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
