//! The end-to-end analysis: linearize every layer, pick a reference
//! direction, build the defect report and, given data, classify layers.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelBundle;
use crate::engine::{corpus_trace, empirical_high_norm_direction, Corpus, DirectionOptions, EmpiricalDirection};
use crate::error::Result;
use crate::linalg::IterConfig;
use crate::linearize::{linearize_model, FitConfig, LayerLinearization};
use crate::spectral::{analyze_layers, classify_layers, DefectReport, LayerClassification};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub fit: FitConfig,
    pub iter: IterConfig,
    pub tau: f64,
    pub direction: DirectionOptions,
    /// Corpus rows traced for classification.
    pub trace_rows: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            iter: IterConfig::default(),
            tau: 5.0,
            direction: DirectionOptions::default(),
            trace_rows: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    Empirical(EmpiricalDirection),
    /// Defect direction of the strongest layer.
    WeightOnly { layer: usize, direction: Array1<f64> },
}

impl Reference {
    pub fn direction(&self) -> &Array1<f64> {
        match self {
            Reference::Empirical(e) => &e.direction,
            Reference::WeightOnly { direction, .. } => direction,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelAnalysis {
    pub linearizations: Vec<LayerLinearization>,
    pub report: DefectReport,
    pub reference: Reference,
    /// Present when a corpus was given.
    pub classification: Option<LayerClassification>,
}

/// Without a corpus the reference comes from the weights alone and no
/// classification is made.
pub fn analyze_model(bundle: &ModelBundle, corpus: Option<&Corpus>, cfg: &PipelineConfig) -> Result<ModelAnalysis> {
    let lins = linearize_model(bundle, None, &cfg.fit)?;
    let reference = match corpus {
        Some(c) => Reference::Empirical(empirical_high_norm_direction(bundle, c, &cfg.direction)?),
        None => {
            let plain = analyze_layers(&lins, None, cfg.iter)?;
            let layer = crate::spectral::strongest_layer(&plain)
                .ok_or_else(|| crate::Error::Input("model has no layers".into()))?;
            let direction = plain.records[layer].defect_direction.clone();
            Reference::WeightOnly { layer: plain.records[layer].layer, direction }
        }
    };
    let report = analyze_layers(&lins, Some(reference.direction().as_slice().expect("contiguous")), cfg.iter)?;
    let classification = match corpus {
        Some(c) => Some(classify_layers(&report, &corpus_trace(bundle, c, cfg.trace_rows)?, cfg.tau)?),
        None => None,
    };
    Ok(ModelAnalysis { linearizations: lins, report, reference, classification })
}
