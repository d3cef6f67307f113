//! Single-token linearization of a decoder block: `L = I + R`.
//!
//! For one token, causal attention sees only itself, so the attention
//! branch is the linear map `W_out · repeat_kv(W_value) · N` where `N` is
//! the linear part of the pre-attention norm. The FFN is replaced by a
//! least-squares linear fit of its inner nonlinearity over Gaussian
//! samples. Norm and FFN biases are not part of either map.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AttnLayout, FfnKind, LayerWeights, ModelBundle, ModelSpec, NormKind};
use crate::error::{Error, Result};
use crate::linalg::least_squares_fit;
use crate::nn::activate;

/// Input scale of the Gaussian samples used for the FFN fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitScale {
    /// `√d`, or the calibrated per-layer norm when one is supplied.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Defaults to `max(4d, 4096)`.
    pub samples: Option<usize>,
    pub scale: FitScale,
    /// Ridge is this factor times `trace(XXᵀ)/d`.
    pub ridge_factor: f64,
    pub seed: u64,
    /// Median FFN-input norm per layer, from a calibration trace.
    pub calibrated_scales: Option<Vec<f64>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { samples: None, scale: FitScale::Auto, ridge_factor: 1e-6, seed: 0, calibrated_scales: None }
    }
}

impl FitConfig {
    pub fn samples_for(&self, d: usize) -> usize {
        self.samples.unwrap_or((4 * d).max(4096))
    }

    pub fn scale_for(&self, d: usize, layer: usize) -> f64 {
        match self.scale {
            FitScale::Fixed(s) => s,
            FitScale::Auto => self
                .calibrated_scales
                .as_ref()
                .and_then(|v| v.get(layer).copied())
                .filter(|s| s.is_finite() && *s > 0.0)
                .unwrap_or((d as f64).sqrt()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLinearization {
    pub layer: usize,
    pub a: Array2<f64>,
    pub f: Array2<f64>,
    pub r: Array2<f64>,
    pub l: Array2<f64>,
    /// `‖F₁X − G‖_F / ‖G‖_F` of the FFN fit.
    pub f1_fit_error: f64,
    /// Some norm or FFN bias was present and left out of the linear maps.
    pub bias_ignored: bool,
}

fn to64(m: &Array2<f32>) -> Array2<f64> {
    m.mapv(|x| x as f64)
}

/// Linear stand-in for a norm: `diag(gain)`, composed with mean-centering
/// for LayerNorm when the spec asks for it.
fn norm_map(spec: &ModelSpec, gain: &Array1<f32>) -> Array2<f64> {
    let d = gain.len();
    let g: Array1<f64> = gain.mapv(|x| x as f64);
    let mut m = Array2::from_diag(&g);
    if spec.norm_kind == NormKind::LayerNorm && spec.layernorm_centering {
        let inv = 1.0 / d as f64;
        for i in 0..d {
            for j in 0..d {
                m[[i, j]] -= g[i] * inv;
            }
        }
    }
    m
}

/// Each kv-head block of `w_value` repeated for the query heads sharing it.
pub fn repeat_kv(spec: &ModelSpec, w_value: &Array2<f32>) -> Array2<f64> {
    let hd = spec.head_dim();
    let group = spec.n_heads / spec.n_kv_heads;
    let mut out = Array2::zeros((spec.q_dim(), w_value.ncols()));
    for h in 0..spec.n_heads {
        let kv = h / group;
        out.slice_mut(s![h * hd..(h + 1) * hd, ..])
            .assign(&w_value.slice(s![kv * hd..(kv + 1) * hd, ..]).mapv(|x| x as f64));
    }
    out
}

fn check_dims(w: &LayerWeights, spec: &ModelSpec) -> Result<()> {
    let d = spec.hidden_dim;
    let ok = w.w_value.dim() == (spec.kv_dim(), d)
        && w.w_out.dim() == (d, spec.q_dim())
        && w.attn_norm_gain.len() == d
        && w.ffn_norm_gain.len() == d
        && w.w1.ncols() == d
        && w.w2.dim() == (d, w.w1.nrows())
        && w.w3.as_ref().is_none_or(|w3| w3.dim() == w.w1.dim());
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!("layer {} weights do not match the spec (d = {d})", w.layer)))
    }
}

/// `A = W_out · repeat_kv(W_value) · N_attn`.
pub fn approx_attention(w: &LayerWeights, spec: &ModelSpec) -> Result<Array2<f64>> {
    check_dims(w, spec)?;
    let v = repeat_kv(spec, &w.w_value);
    Ok(to64(&w.w_out).dot(&v).dot(&norm_map(spec, &w.attn_norm_gain)))
}

/// Exact FFN inner map `g(Z)` for samples stored as rows of `z`.
fn ffn_inner(spec: &ModelSpec, w: &LayerWeights, z: &Array2<f64>) -> Array2<f64> {
    let act = spec.activation();
    let mut h = z.dot(&to64(&w.w1).t());
    if let Some(b) = &w.b1 {
        h += &b.mapv(|x| x as f64);
    }
    h.mapv_inplace(|x| activate(act, x));
    if spec.ffn_kind == FfnKind::GatedSilu {
        if let Some(w3) = &w.w3 {
            let mut up = z.dot(&to64(w3).t());
            if let Some(b) = &w.b3 {
                up += &b.mapv(|x| x as f64);
            }
            h *= &up;
        }
    }
    h
}

/// `F = W₂ · F₁ · N_ffn` with `F₁` the ridge fit of the inner nonlinearity.
/// Returns `F` and the relative fit residual.
pub fn approx_ffn_linear(w: &LayerWeights, spec: &ModelSpec, cfg: &FitConfig) -> Result<(Array2<f64>, f64)> {
    check_dims(w, spec)?;
    let d = spec.hidden_dim;
    let samples = cfg.samples_for(d);
    if samples < 4 * d {
        return Err(Error::Config(format!("fit needs at least 4d = {} samples, got {samples}", 4 * d)));
    }
    let scale = cfg.scale_for(d, w.layer);
    let sd = scale / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (w.layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let z: Array2<f64> = Array2::from_shape_simple_fn((samples, d), || {
        let e: f64 = StandardNormal.sample(&mut rng);
        e * sd
    });
    let g = ffn_inner(spec, w, &z);
    let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (f1, fit_error) = if gnorm == 0.0 {
        (Array2::zeros((w.d_ff(), d)), 0.0)
    } else {
        let trace: f64 = z.iter().map(|x| x * x).sum();
        let ridge = cfg.ridge_factor * trace / d as f64;
        let f1 = least_squares_fit(z.t(), g.t(), ridge)?;
        let resid = z.dot(&f1.t()) - &g;
        let err = resid.iter().map(|x| x * x).sum::<f64>().sqrt() / gnorm;
        (f1, err)
    };
    let f = to64(&w.w2).dot(&f1).dot(&norm_map(spec, &w.ffn_norm_gain));
    Ok((f, fit_error))
}

/// Assemble `R` per the block layout and `L = I + R`.
pub fn approx_layer(a: Array2<f64>, f: Array2<f64>, spec: &ModelSpec, layer: usize, fit_error: f64) -> Result<LayerLinearization> {
    let d = spec.hidden_dim;
    if a.dim() != (d, d) || f.dim() != (d, d) {
        return Err(Error::Shape(format!("A is {:?} and F is {:?}, expected ({d}, {d})", a.dim(), f.dim())));
    }
    let r = match spec.attn_layout {
        AttnLayout::Sequential => &a + &f + f.dot(&a),
        AttnLayout::Parallel => &a + &f,
    };
    let mut l = r.clone();
    for i in 0..d {
        l[[i, i]] += 1.0;
    }
    Ok(LayerLinearization { layer, a, f, r, l, f1_fit_error: fit_error, bias_ignored: false })
}

fn has_bias(w: &LayerWeights) -> bool {
    w.attn_norm_bias.is_some()
        || w.ffn_norm_bias.is_some()
        || w.b_v.is_some()
        || w.b_out.is_some()
        || w.b1.is_some()
        || w.b3.is_some()
        || w.b2.is_some()
}

pub fn linearize_layer(w: &LayerWeights, spec: &ModelSpec, cfg: &FitConfig) -> Result<LayerLinearization> {
    let a = approx_attention(w, spec)?;
    let (f, err) = approx_ffn_linear(w, spec, cfg)?;
    let mut lin = approx_layer(a, f, spec, w.layer, err)?;
    lin.bias_ignored = has_bias(w);
    Ok(lin)
}

/// Linearize the selected layers (all when `layers` is `None`), in order.
pub fn linearize_model(bundle: &ModelBundle, layers: Option<&[usize]>, cfg: &FitConfig) -> Result<Vec<LayerLinearization>> {
    let idx: Vec<usize> = match layers {
        Some(l) => l.to_vec(),
        None => (0..bundle.n_layers()).collect(),
    };
    idx.par_iter().map(|&l| linearize_layer(bundle.layer(l)?, &bundle.spec, cfg)).collect()
}

/// Apply a linearization to a vector (`L x`).
pub fn apply(lin: &LayerLinearization, x: &Array1<f64>) -> Array1<f64> {
    lin.l.dot(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_layouts() {
        let mut spec = crate::synth::tiny_spec(3);
        let a = Array2::eye(3) * 0.5;
        let f = Array2::eye(3) * 2.0;
        let seq = approx_layer(a.clone(), f.clone(), &spec, 0, 0.0).unwrap();
        assert!((seq.r[[1, 1]] - 3.5).abs() < 1e-15 && seq.r[[0, 1]] == 0.0);
        spec.attn_layout = AttnLayout::Parallel;
        let par = approx_layer(a, f, &spec, 0, 0.0).unwrap();
        assert!((par.l[[2, 2]] - 3.5).abs() < 1e-15);
        let zero = approx_layer(Array2::zeros((3, 3)), Array2::zeros((3, 3)), &spec, 0, 0.0).unwrap();
        assert_eq!(zero.l, Array2::<f64>::eye(3));
    }

    #[test]
    fn gqa_repetition() {
        let mut spec = crate::synth::tiny_spec(4);
        spec.n_heads = 2;
        spec.n_kv_heads = 1;
        let wv = Array2::from_shape_fn((2, 4), |(i, j)| (i * 4 + j) as f32);
        let rep = repeat_kv(&spec, &wv);
        assert_eq!(rep.dim(), (4, 4));
        for j in 0..4 {
            assert_eq!(rep[[0, j]], j as f64);
            assert_eq!(rep[[2, j]], j as f64);
            assert_eq!(rep[[1, j]], (4 + j) as f64);
            assert_eq!(rep[[3, j]], (4 + j) as f64);
        }
    }
}
