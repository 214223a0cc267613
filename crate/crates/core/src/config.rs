//! Declarative architecture description and its `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRESETS: [&str; 3] = ["bert-base", "squeezebert", "tiny"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub channels: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_inner: usize,
    pub groups_qkv: usize,
    pub groups_ffn1: usize,
    pub groups_ffn2: usize,
    pub groups_ffn3: usize,
    pub ln_eps: f64,
    pub num_classes: usize,
    pub dropout_encoder: f64,
    pub dropout_final: f64,
}

/// Role of a convolution layer inside an encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerRole {
    Query,
    Key,
    Value,
    Ffn1,
    Ffn2,
    Ffn3,
}

impl LayerRole {
    pub const ALL: [LayerRole; 6] =
        [LayerRole::Query, LayerRole::Key, LayerRole::Value, LayerRole::Ffn1, LayerRole::Ffn2, LayerRole::Ffn3];

    pub fn name(self) -> &'static str {
        match self {
            LayerRole::Query => "attn.q",
            LayerRole::Key => "attn.k",
            LayerRole::Value => "attn.v",
            LayerRole::Ffn1 => "ffn1",
            LayerRole::Ffn2 => "ffn2",
            LayerRole::Ffn3 => "ffn3",
        }
    }
}

/// Channel plan of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub kernel_size: usize,
}

impl LayerShape {
    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in / self.groups * self.kernel_size
    }

    /// Multiply-accumulates for `seq_len` positions.
    pub fn macs(&self, seq_len: usize) -> u64 {
        (seq_len * self.kernel_len()) as u64
    }
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let bert = ModelConfig {
            vocab_size: 30522,
            max_positions: 512,
            channels: 768,
            num_blocks: 12,
            num_heads: 12,
            ffn_inner: 3072,
            groups_qkv: 1,
            groups_ffn1: 1,
            groups_ffn2: 1,
            groups_ffn3: 1,
            ln_eps: 1e-12,
            num_classes: 2,
            dropout_encoder: 0.1,
            dropout_final: 0.1,
        };
        match name {
            "bert-base" => Ok(bert),
            "squeezebert" => Ok(ModelConfig { groups_qkv: 4, groups_ffn1: 1, groups_ffn2: 4, groups_ffn3: 4, ..bert }),
            "tiny" => Ok(ModelConfig {
                vocab_size: 64,
                max_positions: 16,
                channels: 8,
                num_blocks: 2,
                num_heads: 2,
                ffn_inner: 32,
                dropout_encoder: 0.0,
                dropout_final: 0.0,
                ..bert
            }),
            other => Err(Error::config(format!("unknown preset `{other}`; available presets: {}", PRESETS.join(", ")))),
        }
    }

    /// The tiny preset with the grouped layout applied at `groups`:
    /// Q/K/V, FFN₂ and FFN₃ grouped, FFN₁ dense.
    pub fn tiny_grouped(groups: usize) -> Result<Self> {
        let cfg = ModelConfig { groups_qkv: groups, groups_ffn2: groups, groups_ffn3: groups, ..Self::preset("tiny")? };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.num_heads
    }

    pub fn layer_shape(&self, role: LayerRole) -> LayerShape {
        let (c, f) = (self.channels, self.ffn_inner);
        let (c_in, c_out, groups) = match role {
            LayerRole::Query | LayerRole::Key | LayerRole::Value => (c, c, self.groups_qkv),
            LayerRole::Ffn1 => (c, c, self.groups_ffn1),
            LayerRole::Ffn2 => (c, f, self.groups_ffn2),
            LayerRole::Ffn3 => (f, c, self.groups_ffn3),
        };
        LayerShape { c_in, c_out, groups, kernel_size: 1 }
    }

    pub fn pooler_shape(&self) -> LayerShape {
        LayerShape { c_in: self.channels, c_out: self.channels, groups: 1, kernel_size: 1 }
    }

    pub fn classifier_shape(&self) -> LayerShape {
        LayerShape { c_in: self.channels, c_out: self.num_classes, groups: 1, kernel_size: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("channels", self.channels),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("ffn_inner", self.ffn_inner),
            ("num_classes", self.num_classes),
            ("groups_qkv", self.groups_qkv),
            ("groups_ffn1", self.groups_ffn1),
            ("groups_ffn2", self.groups_ffn2),
            ("groups_ffn3", self.groups_ffn3),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.channels.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "num_heads={} does not divide channels={}",
                self.num_heads, self.channels
            )));
        }
        for (field, role) in [
            ("groups_qkv", LayerRole::Query),
            ("groups_ffn1", LayerRole::Ffn1),
            ("groups_ffn2", LayerRole::Ffn2),
            ("groups_ffn3", LayerRole::Ffn3),
        ] {
            let s = self.layer_shape(role);
            if !s.c_in.is_multiple_of(s.groups) || !s.c_out.is_multiple_of(s.groups) {
                return Err(Error::config(format!(
                    "{field}={} must divide C_in={} and C_out={}",
                    s.groups, s.c_in, s.c_out
                )));
            }
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        for (name, r) in [("dropout_encoder", self.dropout_encoder), ("dropout_final", self.dropout_final)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        Ok(())
    }

    /// One `key = value` line per field. `f64` values use Rust's shortest
    /// round-trip formatting, so parsing the text back is exact.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    fn fields(&self) -> [(&'static str, String); 14] {
        [
            ("vocab_size", self.vocab_size.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("channels", self.channels.to_string()),
            ("num_blocks", self.num_blocks.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("ffn_inner", self.ffn_inner.to_string()),
            ("groups_qkv", self.groups_qkv.to_string()),
            ("groups_ffn1", self.groups_ffn1.to_string()),
            ("groups_ffn2", self.groups_ffn2.to_string()),
            ("groups_ffn3", self.groups_ffn3.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("dropout_encoder", self.dropout_encoder.to_string()),
            ("dropout_final", self.dropout_final.to_string()),
        ]
    }

    /// Parses the text form. Every field must appear exactly once; unknown
    /// keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut seen = std::collections::BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        fn take<T: FromStr>(m: &mut std::collections::BTreeMap<String, String>, key: &str) -> Result<T> {
            let v = m.remove(key).ok_or_else(|| Error::config(format!("missing key `{key}`")))?;
            v.parse().map_err(|_| Error::config(format!("key `{key}`: cannot parse `{v}`")))
        }
        let m = &mut seen;
        let cfg = ModelConfig {
            vocab_size: take(m, "vocab_size")?,
            max_positions: take(m, "max_positions")?,
            channels: take(m, "channels")?,
            num_blocks: take(m, "num_blocks")?,
            num_heads: take(m, "num_heads")?,
            ffn_inner: take(m, "ffn_inner")?,
            groups_qkv: take(m, "groups_qkv")?,
            groups_ffn1: take(m, "groups_ffn1")?,
            groups_ffn2: take(m, "groups_ffn2")?,
            groups_ffn3: take(m, "groups_ffn3")?,
            ln_eps: take(m, "ln_eps")?,
            num_classes: take(m, "num_classes")?,
            dropout_encoder: take(m, "dropout_encoder")?,
            dropout_final: take(m, "dropout_final")?,
        };
        if let Some(k) = seen.keys().next() {
            return Err(Error::config(format!("unknown key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every parameter tensor name with its shape, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, v, pm) = (self.channels, self.vocab_size, self.max_positions);
        let mut out = vec![
            ("embeddings.token_table".to_string(), vec![v, c]),
            ("embeddings.position_table".to_string(), vec![pm, c]),
            ("embeddings.segment_table".to_string(), vec![2, c]),
            ("embeddings.ln.gamma".to_string(), vec![c]),
            ("embeddings.ln.beta".to_string(), vec![c]),
        ];
        let layer = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, s: LayerShape| {
            out.push((format!("{prefix}.kernel"), vec![s.c_out, s.c_in / s.groups, s.kernel_size]));
            out.push((format!("{prefix}.bias"), vec![s.c_out]));
        };
        for b in 0..self.num_blocks {
            for role in LayerRole::ALL {
                layer(&mut out, format!("blocks.{b}.{}", role.name()), self.layer_shape(role));
            }
            for ln in ["ln_attn", "ln_out"] {
                out.push((format!("blocks.{b}.{ln}.gamma"), vec![c]));
                out.push((format!("blocks.{b}.{ln}.beta"), vec![c]));
            }
        }
        layer(&mut out, "pooler".into(), self.pooler_shape());
        layer(&mut out, "classifier".into(), self.classifier_shape());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squeezebert_groups() {
        let c = ModelConfig::preset("squeezebert").unwrap();
        assert_eq!(c.groups_ffn1, 1);
        assert_eq!((c.groups_qkv, c.groups_ffn2, c.groups_ffn3), (4, 4, 4));
        let b = ModelConfig::preset("bert-base").unwrap();
        assert_eq!((b.groups_qkv, b.groups_ffn1, b.groups_ffn2, b.groups_ffn3), (1, 1, 1, 1));
        assert_eq!(c, ModelConfig { groups_qkv: 4, groups_ffn2: 4, groups_ffn3: 4, ..b });
    }

    #[test]
    fn tiny_preset_values() {
        let t = ModelConfig::preset("tiny").unwrap();
        assert_eq!(
            (t.vocab_size, t.max_positions, t.channels, t.num_blocks, t.num_heads, t.ffn_inner),
            (64, 16, 8, 2, 2, 32)
        );
        t.validate().unwrap();
    }

    #[test]
    fn unknown_preset_lists_names() {
        let err = ModelConfig::preset("gpt").unwrap_err().to_string();
        for p in PRESETS {
            assert!(err.contains(p), "{err}");
        }
    }

    #[test]
    fn validation_names_field() {
        let mut c = ModelConfig::preset("tiny").unwrap();
        c.groups_ffn2 = 3;
        assert!(c.validate().unwrap_err().to_string().contains("groups_ffn2"));
        let mut c = ModelConfig::preset("tiny").unwrap();
        c.num_heads = 3;
        assert!(c.validate().unwrap_err().to_string().contains("num_heads"));
        let mut c = ModelConfig::preset("tiny").unwrap();
        c.dropout_final = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("dropout_final"));
    }

    #[test]
    fn text_round_trip() {
        for p in PRESETS {
            let c = ModelConfig::preset(p).unwrap();
            assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn text_accepts_comments_and_rejects_unknown_keys() {
        let base = ModelConfig::preset("tiny").unwrap().to_text();
        let commented = format!("# tiny model\n\n{}", base.replace("channels = 8", "channels = 8   # width"));
        assert_eq!(ModelConfig::from_text(&commented).unwrap(), ModelConfig::preset("tiny").unwrap());
        let err = ModelConfig::from_text(&format!("{base}colour = blue\n")).unwrap_err();
        assert!(err.to_string().contains("colour"));
        let err = ModelConfig::from_text(&base.replace("num_classes = 2\n", "")).unwrap_err();
        assert!(err.to_string().contains("num_classes"));
        assert!(ModelConfig::from_text(&format!("{base}channels = 8\n")).is_err());
        assert!(ModelConfig::from_text(&base.replace("channels = 8", "channels = eight")).is_err());
    }

    #[test]
    fn squeezebert_ffn_layers_balance() {
        let c = ModelConfig::preset("squeezebert").unwrap();
        let m: Vec<u64> =
            [LayerRole::Ffn1, LayerRole::Ffn2, LayerRole::Ffn3].iter().map(|&r| c.layer_shape(r).macs(128)).collect();
        assert_eq!(m[0], m[1]);
        assert_eq!(m[1], m[2]);
    }
}
