//! Architecture metadata needed to interpret a raw checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    RmsNorm,
    LayerNorm,
    /// Diagonal gain only, no normalization. Makes every layer exactly
    /// linear when paired with an identity activation.
    Gain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    GatedSilu,
    GeluMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnLayout {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Silu,
    GeluErf,
    GeluTanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionKind {
    #[default]
    Rope,
    Learned,
    None,
}

/// Row layout of a fused `qkv_proj` tensor (after any transpose, rows are
/// output features).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QkvLayout {
    /// `[q; k; v]` stacked, each block `heads * head_dim` rows (GPT2 `c_attn`).
    #[default]
    Concat,
    /// Per head `[q_h; k_h; v_h]`, each `head_dim` rows (GPT-NeoX).
    PerHead,
}

fn default_eps() -> f64 {
    1e-5
}
fn default_rotary_pct() -> f64 {
    1.0
}
fn default_max_seq() -> usize {
    2048
}
fn default_true() -> bool {
    true
}

/// Architecture description. `names` maps weight roles to tensor-name
/// patterns where `{L}` is replaced by the layer index. A pattern may list
/// alternatives separated by `|`; the first one present in the checkpoint
/// wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub norm_kind: NormKind,
    pub ffn_kind: FfnKind,
    pub attn_layout: AttnLayout,
    pub rope_theta: f64,
    pub vocab_size: usize,
    pub names: BTreeMap<String, String>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub position: PositionKind,
    /// Fraction of each head's dimensions that are rotated.
    #[serde(default = "default_rotary_pct")]
    pub rotary_pct: f64,
    #[serde(default = "default_max_seq")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
    /// Overrides the activation implied by `ffn_kind`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationKind>,
    /// Roles stored input-major (Conv1D style) that must be transposed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transposed_roles: Vec<String>,
    #[serde(default)]
    pub qkv_layout: QkvLayout,
    /// Include the mean-centering map when linearizing a LayerNorm.
    #[serde(default = "default_true")]
    pub layernorm_centering: bool,
}

/// Built-in presets, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("llama2-7b", include_str!("../../presets/llama2-7b.json")),
    ("llama3-8b", include_str!("../../presets/llama3-8b.json")),
    ("pythia-160m", include_str!("../../presets/pythia-160m.json")),
    ("gpt2-medium", include_str!("../../presets/gpt2-medium.json")),
];

pub mod role {
    pub const EMBED: &str = "embed";
    pub const POS_EMBED: &str = "pos_embed";
    pub const FINAL_NORM: &str = "final_norm";
    pub const FINAL_NORM_BIAS: &str = "final_norm_bias";
    pub const LM_HEAD: &str = "lm_head";
    pub const ATTN_NORM: &str = "attn_norm";
    pub const ATTN_NORM_BIAS: &str = "attn_norm_bias";
    pub const FFN_NORM: &str = "ffn_norm";
    pub const FFN_NORM_BIAS: &str = "ffn_norm_bias";
    pub const Q: &str = "q_proj";
    pub const K: &str = "k_proj";
    pub const V: &str = "v_proj";
    pub const O: &str = "o_proj";
    pub const Q_BIAS: &str = "q_bias";
    pub const K_BIAS: &str = "k_bias";
    pub const V_BIAS: &str = "v_bias";
    pub const O_BIAS: &str = "o_bias";
    pub const QKV: &str = "qkv_proj";
    pub const QKV_BIAS: &str = "qkv_bias";
    pub const W1: &str = "w1";
    pub const W3: &str = "w3";
    pub const W2: &str = "w2";
    pub const B1: &str = "w1_bias";
    pub const B3: &str = "w3_bias";
    pub const B2: &str = "w2_bias";
}

impl ModelSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json_str(text))
            .unwrap_or_else(|| {
                let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Err(Error::Config(format!("unknown preset `{name}` (known: {})", known.join(", "))))
            })
    }

    /// A preset name or a path to a JSON file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if PRESETS.iter().any(|(n, _)| *n == name_or_path) {
            Self::preset(name_or_path)
        } else {
            Self::from_file(name_or_path)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.n_heads == 0 || self.n_kv_heads == 0 || self.vocab_size == 0 {
            return bad("hidden_dim, n_heads, n_kv_heads and vocab_size must be positive".into());
        }
        if self.n_kv_heads > self.n_heads || self.n_heads % self.n_kv_heads != 0 {
            return bad(format!("n_heads {} must be a multiple of n_kv_heads {}", self.n_heads, self.n_kv_heads));
        }
        if self.head_dim.is_none() && self.hidden_dim % self.n_heads != 0 {
            return bad(format!("hidden_dim {} not divisible by n_heads {}", self.hidden_dim, self.n_heads));
        }
        if !(self.rope_theta > 0.0) {
            return bad("rope_theta must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.rotary_pct) {
            return bad("rotary_pct must lie in [0, 1]".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.hidden_dim / self.n_heads)
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim()
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Number of rotated dimensions per head (always even).
    pub fn rotary_dims(&self) -> usize {
        if self.position != PositionKind::Rope {
            return 0;
        }
        let r = (self.head_dim() as f64 * self.rotary_pct) as usize;
        r - r % 2
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation.unwrap_or(match self.ffn_kind {
            FfnKind::GatedSilu => ActivationKind::Silu,
            FfnKind::GeluMlp => ActivationKind::GeluErf,
        })
    }

    pub fn is_transposed(&self, role: &str) -> bool {
        self.transposed_roles.iter().any(|r| r == role)
    }

    pub fn has_role(&self, role: &str) -> bool {
        self.names.contains_key(role)
    }

    /// Candidate tensor names for a role at a layer, in preference order.
    pub fn candidates(&self, role: &str, layer: Option<usize>) -> Option<Vec<String>> {
        let pattern = self.names.get(role)?;
        Some(
            pattern
                .split('|')
                .map(|p| match layer {
                    Some(l) => p.replace("{L}", &l.to_string()),
                    None => p.to_string(),
                })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for (name, _) in PRESETS {
            let spec = ModelSpec::preset(name).unwrap();
            assert!(spec.n_layers > 0, "{name}");
        }
        let neox = ModelSpec::preset("pythia-160m").unwrap();
        assert_eq!(neox.rotary_dims(), 16);
        assert_eq!(neox.activation(), ActivationKind::GeluErf);
        let l3 = ModelSpec::preset("llama3-8b").unwrap();
        assert_eq!(l3.kv_dim(), 1024);
    }

    #[test]
    fn heads_must_divide() {
        let mut spec = ModelSpec::preset("llama2-7b").unwrap();
        spec.n_kv_heads = 3;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        spec.n_kv_heads = 64;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn alternatives_expand() {
        let spec = ModelSpec::preset("gpt2-medium").unwrap();
        let c = spec.candidates(role::W1, Some(3)).unwrap();
        assert_eq!(c[0], "h.3.mlp.c_fc.weight");
        assert_eq!(c[1], "transformer.h.3.mlp.c_fc.weight");
    }
}
