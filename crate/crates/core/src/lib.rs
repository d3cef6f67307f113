//! Locate, explain and exploit high-norm tokens in decoder-only transformers.
//!
//! The crate reads safetensors checkpoints, linearizes each layer around the
//! single-token regime, extracts singular defect directions and decay
//! eigenpairs, checks them against hidden-state traces from a small fp32
//! inference engine, and applies the results to fake quantization and model
//! signatures. `synth` builds small checkpoints with planted structure that
//! the analyses must recover.

pub mod checkpoint;
pub mod cli;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod linearize;
pub mod nn;
pub mod pipeline;
pub mod quant;
pub mod signature;
pub mod spectral;
pub mod synth;

pub use checkpoint::{
    load_model_bundle, ActivationKind, AttnLayout, Dtype, FfnKind, LayerWeights, ModelBundle, ModelSpec, NormKind,
    PositionKind, TensorStore,
};
pub use error::{Error, Result};
pub use linalg::{acute_angle, eigenpair_near, leading_singular_triplets, least_squares_fit, EigenPair, SvdTriplet};
pub use linearize::{approx_attention, approx_ffn_linear, approx_layer, linearize_layer, FitConfig, LayerLinearization};
