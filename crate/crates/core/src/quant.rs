//! Fake quantization: per-tensor round-to-nearest, SmoothQuant rescaling and
//! full-precision exemptions for selected sub-layers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{FfnKind, ModelBundle};
use crate::engine::{forward, perplexity, Ablation, Corpus, ForwardOptions, LinearHook, Sublayer};
use crate::error::{Error, Result};
use crate::spectral::LayerClassification;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantScheme {
    /// Full precision; the baseline row of a report.
    None,
    Rtn,
    SmoothQuant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SublayerRef {
    pub layer: usize,
    pub role: Sublayer,
}

fn default_bits() -> u32 {
    8
}
fn default_alpha() -> f64 {
    0.5
}
fn default_calibration_rows() -> usize {
    32
}
fn default_granularity() -> String {
    "per_tensor".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub scheme: QuantScheme,
    #[serde(default = "default_bits")]
    pub bits: u32,
    /// Only `per_tensor` is implemented.
    #[serde(default = "default_granularity")]
    pub granularity: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub exempt: BTreeSet<SublayerRef>,
    #[serde(default = "default_calibration_rows")]
    pub calibration_rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl QuantConfig {
    pub fn new(scheme: QuantScheme) -> Self {
        Self {
            scheme,
            bits: 8,
            granularity: default_granularity(),
            alpha: 0.5,
            exempt: BTreeSet::new(),
            calibration_rows: default_calibration_rows(),
            label: None,
        }
    }

    pub fn full_precision() -> Self {
        Self::new(QuantScheme::None)
    }

    /// Exempt `W₂` at every classified explosion and decay layer.
    pub fn with_defect_exemption(mut self, classification: &LayerClassification) -> Self {
        for &layer in classification.explosion_layers.iter().chain(&classification.decay_layers) {
            self.exempt.insert(SublayerRef { layer, role: Sublayer::W2 });
        }
        self
    }

    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let base = match self.scheme {
            QuantScheme::None => return "FP".into(),
            QuantScheme::Rtn => "RTN",
            QuantScheme::SmoothQuant => "SQ",
        };
        if self.exempt.is_empty() {
            base.into()
        } else {
            format!("{base}*")
        }
    }

    pub fn validate(&self, bundle: &ModelBundle) -> Result<()> {
        if !(2..=24).contains(&self.bits) {
            return Err(Error::Config(format!("bits must lie in 2..=24, got {}", self.bits)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.granularity != "per_tensor" {
            return Err(Error::Config(format!("granularity `{}` is not supported", self.granularity)));
        }
        for e in &self.exempt {
            let gated = bundle.spec.ffn_kind == FfnKind::GatedSilu;
            if e.layer >= bundle.n_layers() || (e.role == Sublayer::W3 && !gated) {
                return Err(Error::Config(format!("exempt role {} at layer {} does not exist", e.role.as_str(), e.layer)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub delta: f64,
    pub bits: u32,
    /// The tensor was all zeros; `delta` is 1 and every code is 0.
    pub degenerate: bool,
    /// Codes that hit the clamp before rounding.
    pub saturated: usize,
}

fn qmax(bits: u32) -> f64 {
    ((1u64 << (bits - 1)) - 1) as f64
}

/// `q = round_half_even(x / Δ)` clamped to `±(2^(N−1) − 1)`, with
/// `Δ = max|x| / (2^(N−1) − 1)`.
pub fn quantize_rtn(x: &[f32], bits: u32) -> Result<(Vec<i32>, QuantParams)> {
    if !(2..=24).contains(&bits) {
        return Err(Error::Config(format!("bits must lie in 2..=24, got {bits}")));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric { location: format!("quantizer input element {i}") });
    }
    let absmax = x.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let qm = qmax(bits);
    if absmax == 0.0 {
        return Ok((vec![0; x.len()], QuantParams { delta: 1.0, bits, degenerate: true, saturated: 0 }));
    }
    let delta = absmax / qm;
    let mut saturated = 0;
    let q = x
        .iter()
        .map(|&v| {
            let r = (v as f64 / delta).round_ties_even();
            if r.abs() > qm {
                saturated += 1;
            }
            r.clamp(-qm, qm) as i32
        })
        .collect();
    Ok((q, QuantParams { delta, bits, degenerate: false, saturated }))
}

pub fn dequantize(q: &[i32], params: &QuantParams) -> Vec<f32> {
    q.iter().map(|&c| (c as f64 * params.delta) as f32).collect()
}

/// Replace `x` by its quantize-dequantize image.
pub fn fake_quant_inplace(x: &mut [f32], bits: u32) -> Result<QuantParams> {
    let (q, p) = quantize_rtn(x, bits)?;
    for (v, c) in x.iter_mut().zip(q) {
        *v = (c as f64 * p.delta) as f32;
    }
    Ok(p)
}

/// Per input channel `s_j = a_j^α / max_i|W_ij|^(1−α)`. Returns `W·diag(s)`
/// and `1/s`; activations are multiplied by `1/s`. Channels with zero
/// activation or zero weight column keep `s_j = 1`.
pub fn smoothquant_transform(act_absmax: &[f64], w: &Array2<f32>, alpha: f64) -> Result<(Array2<f32>, Array1<f64>)> {
    if act_absmax.len() != w.ncols() {
        return Err(Error::Shape(format!("{} activation channels for a weight with {} inputs", act_absmax.len(), w.ncols())));
    }
    let wmax: Vec<f64> = w.axis_iter(Axis(1)).map(|c| c.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))).collect();
    let s: Array1<f64> = act_absmax
        .iter()
        .zip(&wmax)
        .map(|(&a, &m)| if a > 0.0 && m > 0.0 { a.powf(alpha) / m.powf(1.0 - alpha) } else { 1.0 })
        .map(|s: f64| if s.is_finite() && s > 0.0 { s } else { 1.0 })
        .collect();
    let mut scaled = w.clone();
    for (mut col, &sj) in scaled.axis_iter_mut(Axis(1)).zip(s.iter()) {
        col.mapv_inplace(|v| (v as f64 * sj) as f32);
    }
    Ok((scaled, s.mapv(|x| 1.0 / x)))
}

/// Collects per-channel input absmax for every linear sub-layer.
#[derive(Default)]
pub struct Calibrator {
    absmax: Mutex<BTreeMap<(usize, Sublayer), Vec<f64>>>,
}

impl LinearHook for Calibrator {
    fn wants_input(&self, _layer: usize, _role: Sublayer) -> bool {
        true
    }

    fn input(&self, layer: usize, role: Sublayer, x: &mut Array2<f32>) {
        let local: Vec<f64> =
            x.axis_iter(Axis(1)).map(|c| c.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))).collect();
        let mut map = self.absmax.lock().expect("calibration lock");
        let entry = map.entry((layer, role)).or_insert_with(|| vec![0.0; local.len()]);
        for (e, l) in entry.iter_mut().zip(local) {
            *e = e.max(l);
        }
    }
}

impl Calibrator {
    pub fn run(bundle: &ModelBundle, corpus: &Corpus, rows: usize) -> Result<BTreeMap<(usize, Sublayer), Vec<f64>>> {
        let cal = Calibrator::default();
        let ablation = Ablation::none();
        let opts = ForwardOptions { ablation: &ablation, hook: Some(&cal), stop_after: None, logits: false };
        corpus
            .rows
            .iter()
            .filter(|r| !r.is_empty())
            .take(rows)
            .collect::<Vec<_>>()
            .par_iter()
            .try_for_each(|r| {
                let clipped = &r[..r.len().min(bundle.spec.max_seq_len)];
                forward(bundle, clipped, &opts, &mut ()).map(|_| ())
            })?;
        Ok(cal.absmax.into_inner().expect("calibration lock"))
    }
}

/// Fake-quantized view of a model, applied through the engine's hook.
pub struct QuantizedModel {
    pub config: QuantConfig,
    weights: BTreeMap<(usize, Sublayer), Array2<f32>>,
    inv_scales: BTreeMap<(usize, Sublayer), Array1<f32>>,
}

impl LinearHook for QuantizedModel {
    fn weight(&self, layer: usize, role: Sublayer) -> Option<&Array2<f32>> {
        self.weights.get(&(layer, role))
    }

    fn wants_input(&self, layer: usize, role: Sublayer) -> bool {
        self.config.scheme != QuantScheme::None && !self.config.exempt.contains(&SublayerRef { layer, role })
    }

    fn input(&self, layer: usize, role: Sublayer, x: &mut Array2<f32>) {
        if let Some(inv) = self.inv_scales.get(&(layer, role)) {
            *x *= inv;
        }
        let slice = x.as_slice_mut().expect("standard layout");
        // Inputs were checked finite by the previous layer.
        let _ = fake_quant_inplace(slice, self.config.bits);
    }
}

fn sublayer_weight(bundle: &ModelBundle, layer: usize, role: Sublayer) -> Option<&Array2<f32>> {
    let w = &bundle.layers[layer];
    match role {
        Sublayer::QProj => Some(&w.w_q),
        Sublayer::KProj => Some(&w.w_k),
        Sublayer::VProj => Some(&w.w_value),
        Sublayer::OProj => Some(&w.w_out),
        Sublayer::W1 => Some(&w.w1),
        Sublayer::W3 => w.w3.as_ref(),
        Sublayer::W2 => Some(&w.w2),
    }
}

/// Build the quantized view. SmoothQuant needs `calib`.
pub fn apply_quant_config(bundle: &ModelBundle, cfg: &QuantConfig, calib: Option<&Corpus>) -> Result<QuantizedModel> {
    cfg.validate(bundle)?;
    let mut weights = BTreeMap::new();
    let mut inv_scales = BTreeMap::new();
    if cfg.scheme == QuantScheme::None {
        return Ok(QuantizedModel { config: cfg.clone(), weights, inv_scales });
    }
    let absmax = if cfg.scheme == QuantScheme::SmoothQuant {
        let corpus = calib.ok_or_else(|| Error::Config("smoothquant needs a calibration corpus".into()))?;
        Some(Calibrator::run(bundle, corpus, cfg.calibration_rows)?)
    } else {
        None
    };
    for layer in 0..bundle.n_layers() {
        for role in Sublayer::ALL {
            if cfg.exempt.contains(&SublayerRef { layer, role }) {
                continue;
            }
            let Some(w) = sublayer_weight(bundle, layer, role) else { continue };
            let mut w = w.clone();
            if let Some(am) = absmax.as_ref().and_then(|m| m.get(&(layer, role))) {
                let (scaled, inv) = smoothquant_transform(am, &w, cfg.alpha)?;
                w = scaled;
                inv_scales.insert((layer, role), inv.mapv(|x| x as f32));
            }
            fake_quant_inplace(w.as_slice_mut().expect("standard layout"), cfg.bits)?;
            weights.insert((layer, role), w);
        }
    }
    Ok(QuantizedModel { config: cfg.clone(), weights, inv_scales })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub method: String,
    pub weight: String,
    pub activation: String,
    pub ppl: f64,
}

/// Perplexity for each configuration.
pub fn quant_report(bundle: &ModelBundle, corpus: &Corpus, configs: &[QuantConfig], calib: Option<&Corpus>) -> Result<Vec<ReportRow>> {
    if configs.is_empty() {
        return Err(Error::Config("no quantization configs given".into()));
    }
    configs
        .iter()
        .map(|cfg| {
            let q = apply_quant_config(bundle, cfg, calib.or(Some(corpus)))?;
            let hook: Option<&dyn LinearHook> = if cfg.scheme == QuantScheme::None { None } else { Some(&q) };
            let ppl = perplexity(bundle, corpus, hook, &Ablation::none())?;
            let (method, width) = match cfg.scheme {
                QuantScheme::None => ("FP32".to_string(), "32".to_string()),
                QuantScheme::Rtn => ("RTN".to_string(), cfg.bits.to_string()),
                QuantScheme::SmoothQuant => (format!("SQ(α={})", cfg.alpha), cfg.bits.to_string()),
            };
            let suffix = if cfg.exempt.is_empty() { "" } else { "*" };
            Ok(ReportRow {
                label: cfg.label(),
                method: format!("{method}{suffix}"),
                weight: width.clone(),
                activation: width,
                ppl,
            })
        })
        .collect()
}

pub fn report_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::from("| Method | Weight | Activation | PPL |\n|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!("| {} | {} | {} | {:.4} |\n", r.method, r.weight, r.activation, r.ppl));
    }
    out
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("label,method,weight,activation,ppl\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.label, r.method, r.weight, r.activation, r.ppl));
    }
    out
}
