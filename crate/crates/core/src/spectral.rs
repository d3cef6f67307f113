//! Spectral analysis of layer linearizations: defect directions, decay
//! eigenpairs, explosion subspaces and layer classification.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{LayerWeights, ModelSpec};
use crate::engine::NormTrace;
use crate::error::{Error, Result};
use crate::linalg::{acute_angle, eigenpair_near, leading_singular_triplets, EigenPair, IterConfig, SvdTriplet};
use crate::linearize::LayerLinearization;

/// Leading left singular vector of `L` and its singular value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectDirection {
    pub direction: Array1<f64>,
    pub sigma1: f64,
    pub degenerate: bool,
}

pub fn layer_defect_direction(lin: &LayerLinearization, cfg: IterConfig) -> Result<DefectDirection> {
    let t = leading_singular_triplets(lin.l.view(), 1, cfg.tol, cfg.max_iter)?.remove(0);
    Ok(DefectDirection { direction: t.u, sigma1: t.sigma, degenerate: t.degenerate })
}

/// Leading right singular triplet of `F`; `v` spans the explosion subspace.
pub fn explosion_subspace(lin: &LayerLinearization, cfg: IterConfig) -> Result<SvdTriplet> {
    Ok(leading_singular_triplets(lin.f.view(), 1, cfg.tol, cfg.max_iter)?.remove(0))
}

/// Eigenpair of `R` nearest `reference`, with its angle to it.
pub fn decay_eigen_analysis(lin: &LayerLinearization, reference: &[f64], cfg: IterConfig) -> Result<(EigenPair, f64)> {
    let nr = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nr == 0.0 {
        return Err(Error::Domain("reference direction is zero".into()));
    }
    let v0: Array1<f64> = reference.iter().map(|x| x / nr).collect();
    let pair = eigenpair_near(lin.r.view(), v0.view(), cfg.tol, cfg.max_iter)?;
    let angle = acute_angle(pair.w.as_slice().expect("contiguous"), reference)?;
    Ok((pair, angle))
}

/// Norms of the exact FFN (norm included) applied to each vector.
pub fn ffn_response_spectrum(w: &LayerWeights, spec: &ModelSpec, vectors: &[Array1<f64>]) -> Result<Vec<f64>> {
    let d = spec.hidden_dim;
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape(format!("response vectors must have length {d}")));
    }
    let x = Array2::from_shape_fn((vectors.len(), d), |(i, j)| vectors[i][j] as f32);
    let out = crate::engine::ffn_module(spec, w, &x);
    Ok(out.rows().into_iter().map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRecord {
    pub pair: EigenPair,
    pub angle_to_reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub layer: usize,
    pub defect_direction: Array1<f64>,
    pub sigma1: f64,
    pub degenerate: bool,
    pub angle_to_reference: Option<f64>,
    pub decay_pair: Option<DecayRecord>,
    pub explosion_v1: Array1<f64>,
    pub explosion_sigma: f64,
    /// `uᵀRu` along the layer's own defect direction.
    pub self_rayleigh: f64,
    pub f1_fit_error: f64,
    pub bias_ignored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub d: usize,
    pub reference: Option<Array1<f64>>,
    pub records: Vec<DefectRecord>,
}

impl DefectReport {
    pub fn directions(&self) -> Vec<Array1<f64>> {
        self.records.iter().map(|r| r.defect_direction.clone()).collect()
    }
}

/// Per-layer spectral record. With a reference, angles and the decay
/// eigenpair nearest it are filled in.
pub fn analyze_layers(lins: &[LayerLinearization], reference: Option<&[f64]>, cfg: IterConfig) -> Result<DefectReport> {
    let d = lins.first().map_or(0, |l| l.l.nrows());
    if let Some(r) = reference {
        if r.len() != d {
            return Err(Error::Shape(format!("reference has length {}, layers have width {d}", r.len())));
        }
    }
    let records = lins
        .par_iter()
        .map(|lin| {
            let dd = layer_defect_direction(lin, cfg)?;
            let ex = explosion_subspace(lin, cfg)?;
            let ru = lin.r.dot(&dd.direction);
            let self_rayleigh = dd.direction.dot(&ru);
            let (angle, decay) = match reference {
                Some(r) => {
                    let angle = acute_angle(dd.direction.as_slice().expect("contiguous"), r)?;
                    let decay = match decay_eigen_analysis(lin, r, cfg) {
                        Ok((pair, a)) => Some(DecayRecord { pair, angle_to_reference: a }),
                        Err(Error::Convergence { best: Some(best), .. }) => {
                            let a = acute_angle(best.w.as_slice().expect("contiguous"), r)?;
                            Some(DecayRecord { pair: *best, angle_to_reference: a })
                        }
                        Err(e) => return Err(e),
                    };
                    (Some(angle), decay)
                }
                None => (None, None),
            };
            Ok(DefectRecord {
                layer: lin.layer,
                defect_direction: dd.direction,
                sigma1: dd.sigma1,
                degenerate: dd.degenerate,
                angle_to_reference: angle,
                decay_pair: decay,
                explosion_v1: ex.v,
                explosion_sigma: ex.sigma,
                self_rayleigh,
                f1_fit_error: lin.f1_fit_error,
                bias_ignored: lin.bias_ignored,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DefectReport { d, reference: reference.map(|r| Array1::from(r.to_vec())), records })
}

/// Angle of every layer's defect direction to `reference`, in layer order.
pub fn defect_angle_profile(report: &DefectReport, reference: &[f64]) -> Result<Vec<f64>> {
    report
        .records
        .iter()
        .map(|r| {
            if r.defect_direction.len() != reference.len() {
                return Err(Error::Shape(format!(
                    "reference has length {}, directions have {}",
                    reference.len(),
                    r.defect_direction.len()
                )));
            }
            acute_angle(r.defect_direction.as_slice().expect("contiguous"), reference)
        })
        .collect()
}

/// Data-free reference: the defect direction of the layer with the largest
/// top singular value, i.e. the strongest explosion candidate. Earlier
/// layers win ties.
pub fn weight_only_reference(report: &DefectReport) -> Option<Array1<f64>> {
    strongest_layer(report).map(|i| report.records[i].defect_direction.clone())
}

/// Index into `report.records` of the largest `sigma1`.
pub fn strongest_layer(report: &DefectReport) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in report.records.iter().enumerate() {
        if best.is_none_or(|b| r.sigma1 > report.records[b].sigma1) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEvidence {
    pub layer: usize,
    /// Max over tokens of output/input norm.
    pub norm_ratio: f64,
    /// Min output/input ratio over tokens that were high-norm at input.
    pub decay_ratio: Option<f64>,
    pub angle: Option<f64>,
    pub eigenvalue: Option<f64>,
    pub eigen_angle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerClassification {
    pub explosion_layers: Vec<usize>,
    pub decay_layers: Vec<usize>,
    pub evidence: Vec<LayerEvidence>,
    /// No layer qualified.
    pub empty: bool,
}

const ANGLE_EVIDENCE: f64 = 15.0;

/// Explosion: some token's norm grows by at least `tau`. Decay: some token
/// that was high-norm entering the layer (at least half the row maximum,
/// in a row whose maximum is `tau` times its median) shrinks by `tau`.
/// Ratios within a factor two of the cut are accepted when the angle
/// evidence (< 15°) agrees. A layer meeting both rules goes to the
/// stronger one.
pub fn classify_layers(report: &DefectReport, trace: &NormTrace, tau: f64) -> Result<LayerClassification> {
    if !(tau > 1.0) {
        return Err(Error::Config(format!("tau must exceed 1, got {tau}")));
    }
    let rows = trace.norms.nrows();
    if rows != report.records.len() + 1 {
        return Err(Error::Shape(format!(
            "trace has {rows} rows but the report covers {} layers",
            report.records.len()
        )));
    }
    let mut explosion = Vec::new();
    let mut decay = Vec::new();
    let mut evidence = Vec::new();
    for (l, rec) in report.records.iter().enumerate() {
        let before = trace.norms.row(l);
        let after = trace.norms.row(l + 1);
        let mut norm_ratio = 0.0f64;
        for (&b, &a) in before.iter().zip(after.iter()) {
            if b > 0.0 {
                norm_ratio = norm_ratio.max(a as f64 / b as f64);
            }
        }
        let max_in = before.iter().cloned().fold(0.0f32, f32::max) as f64;
        let mut sorted: Vec<f32> = before.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0) as f64;
        let has_outliers = max_in > 0.0 && max_in >= tau * median;
        let decay_ratio = if has_outliers {
            before
                .iter()
                .zip(after.iter())
                .filter(|(&b, _)| b as f64 >= 0.5 * max_in)
                .map(|(&b, &a)| a as f64 / b as f64)
                .min_by(|a, b| a.total_cmp(b))
        } else {
            None
        };
        let angle = rec.angle_to_reference;
        let eigenvalue = rec.decay_pair.as_ref().map(|p| p.pair.lambda);
        let eigen_angle = rec.decay_pair.as_ref().map(|p| p.angle_to_reference);
        let angle_ok = angle.is_some_and(|a| a < ANGLE_EVIDENCE);
        let eigen_ok = eigenvalue.is_some_and(|l| l < 0.0) && eigen_angle.is_some_and(|a| a < ANGLE_EVIDENCE);

        let is_explosion = norm_ratio >= tau || (norm_ratio >= tau / 2.0 && angle_ok);
        let is_decay = decay_ratio.is_some_and(|r| r <= 1.0 / tau || (r <= 2.0 / tau && eigen_ok));
        match (is_explosion, is_decay) {
            (true, true) => {
                if norm_ratio.ln() >= -decay_ratio.expect("decay").ln() {
                    explosion.push(l);
                } else {
                    decay.push(l);
                }
            }
            (true, false) => explosion.push(l),
            (false, true) => decay.push(l),
            (false, false) => {}
        }
        evidence.push(LayerEvidence { layer: l, norm_ratio, decay_ratio, angle, eigenvalue, eigen_angle });
    }
    let empty = explosion.is_empty() && decay.is_empty();
    if empty {
        log::warn!("no explosion or decay layer found (tau = {tau})");
    }
    Ok(LayerClassification { explosion_layers: explosion, decay_layers: decay, evidence, empty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearize::approx_layer;

    fn lin_from_r(r: Array2<f64>) -> LayerLinearization {
        let d = r.nrows();
        let spec = crate::synth::tiny_spec(d);
        approx_layer(r, Array2::zeros((d, d)), &spec, 0, 0.0).unwrap()
    }

    #[test]
    fn identity_layer_direction() {
        let lin = lin_from_r(Array2::zeros((5, 5)));
        let dd = layer_defect_direction(&lin, IterConfig::default()).unwrap();
        assert_eq!(dd.direction.to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((dd.sigma1 - 1.0).abs() < 1e-12 && dd.degenerate);
    }

    #[test]
    fn rank_one_decay() {
        let u = Array1::from(vec![0.6, 0.0, 0.8]);
        let r = -outer(&u, &u);
        let lin = lin_from_r(r);
        let (pair, angle) = decay_eigen_analysis(&lin, u.as_slice().unwrap(), IterConfig::default()).unwrap();
        assert!((pair.lambda + 1.0).abs() < 1e-12);
        assert!(angle < 1e-6);
        let zero = lin_from_r(Array2::zeros((3, 3)));
        let (pair, angle) = decay_eigen_analysis(&zero, u.as_slice().unwrap(), IterConfig::default()).unwrap();
        assert_eq!(pair.lambda, 0.0);
        assert!(angle < 1e-9);
    }

    #[test]
    fn zero_ffn_subspace_is_flagged() {
        let lin = lin_from_r(Array2::zeros((4, 4)));
        let t = explosion_subspace(&lin, IterConfig::default()).unwrap();
        assert_eq!(t.sigma, 0.0);
        assert!(t.degenerate);
        assert_eq!(t.v.to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn flat_trace_is_unclassified() {
        let lins: Vec<_> = (0..3).map(|_| lin_from_r(Array2::zeros((4, 4)))).collect();
        let report = analyze_layers(&lins, None, IterConfig::default()).unwrap();
        let trace = NormTrace {
            tokens: vec![0, 1],
            token_strings: vec!["a".into(), "b".into()],
            norms: Array2::from_elem((4, 2), 3.0),
            captured: vec![],
        };
        let c = classify_layers(&report, &trace, 5.0).unwrap();
        assert!(c.empty && c.explosion_layers.is_empty() && c.decay_layers.is_empty());
        assert_eq!(c.evidence.len(), 3);
    }

    pub(crate) fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
        Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
    }
}
