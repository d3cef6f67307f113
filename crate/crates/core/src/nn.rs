//! Activations and normalizations shared by the engine and the linearizer.

use ndarray::{ArrayView1, ArrayViewMut1};

use crate::checkpoint::{ActivationKind, NormKind};

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn gelu_erf(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn activate(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::Silu => silu(x),
        ActivationKind::GeluErf => gelu_erf(x),
        ActivationKind::GeluTanh => gelu_tanh(x),
        ActivationKind::Identity => x,
    }
}

/// Normalize one hidden state into `out`. Statistics accumulate in `f64`.
pub fn normalize_into(
    kind: NormKind,
    x: ArrayView1<f32>,
    gain: ArrayView1<f32>,
    bias: Option<ArrayView1<f32>>,
    eps: f64,
    mut out: ArrayViewMut1<f32>,
) {
    let d = x.len() as f64;
    match kind {
        NormKind::RmsNorm => {
            let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
                *o = ((v as f64 * inv) as f32) * g;
            }
        }
        NormKind::LayerNorm => {
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / d;
            let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
                *o = (((v as f64 - mean) * inv) as f32) * g;
            }
        }
        NormKind::Gain => {
            for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
                *o = v * g;
            }
        }
    }
    if let Some(b) = bias {
        out += &b;
    }
}
