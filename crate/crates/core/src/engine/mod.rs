//! Minimal deterministic inference for LLaMA-, GPT-NeoX- and GPT2-style
//! decoders, with hooks for tracing, ablation and fake quantization.

mod analysis;
mod corpus;
mod forward;
mod ppl;
mod tokenizer;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use analysis::{
    attention_ablation_scan, corpus_trace, empirical_high_norm_direction, forward_trace, mean_pairwise_angle, subspace_coefficient,
    trim_and_trace, vocab_initial_scan, Captured, DirectionOptions, EmpiricalDirection, NormTrace, ScanResult,
    Threshold, TrimResult,
};
pub use corpus::{read_corpus, read_id_file, write_id_file, Corpus, ID_MAGIC, ROW_SEPARATOR};
pub use forward::{embed, ffn_module, forward, forward_single_tokens, logits, ForwardOptions, ForwardOutput, Observer};
pub use ppl::perplexity;
pub use tokenizer::Tokenizer;

/// A linear sub-layer of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    QProj,
    KProj,
    VProj,
    OProj,
    W1,
    W3,
    W2,
}

impl Sublayer {
    pub const ALL: [Sublayer; 7] =
        [Sublayer::QProj, Sublayer::KProj, Sublayer::VProj, Sublayer::OProj, Sublayer::W1, Sublayer::W3, Sublayer::W2];

    pub fn as_str(self) -> &'static str {
        match self {
            Sublayer::QProj => "q_proj",
            Sublayer::KProj => "k_proj",
            Sublayer::VProj => "v_proj",
            Sublayer::OProj => "o_proj",
            Sublayer::W1 => "w1",
            Sublayer::W3 => "w3",
            Sublayer::W2 => "w2",
        }
    }
}

/// Intercepts linear sub-layers: substitutes weights and rewrites inputs.
pub trait LinearHook: Sync {
    fn weight(&self, _layer: usize, _role: Sublayer) -> Option<&Array2<f32>> {
        None
    }
    /// Whether [`LinearHook::input`] wants to see this sub-layer's input.
    fn wants_input(&self, _layer: usize, _role: Sublayer) -> bool {
        false
    }
    /// `x` holds one input row per token.
    fn input(&self, _layer: usize, _role: Sublayer, _x: &mut Array2<f32>) {}
}

/// Removal of the component along `direction` from the FFN-branch input of
/// `layer`. The residual stream itself is left alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Trim {
    pub layer: usize,
    /// Unit vector.
    pub direction: Array1<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ablation {
    /// Replace every attention block's output with zeros.
    pub zero_attention: bool,
    pub trim: Option<Trim>,
}

impl Ablation {
    pub fn none() -> Self {
        Self::default()
    }
}
