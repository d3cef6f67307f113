//! Checkpoint parsing and per-layer weight bundles.

mod bundle;
mod safetensors;
mod spec;

pub use bundle::{load_model_bundle, LayerWeights, ModelBundle};
pub use safetensors::{Dtype, SafetensorsWriter, TensorInfo, TensorStore, TensorView};
pub use spec::{ActivationKind, AttnLayout, FfnKind, NormKind, PositionKind, QkvLayout, ModelSpec, PRESETS};
