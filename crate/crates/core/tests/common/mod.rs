//! Helpers shared by the integration tests: brute-force Jacobi oracles and
//! small fixture builders. Nothing here calls into the crate's linear
//! algebra so the oracles stay independent.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut impl Rng, m: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, n), |_| StandardNormal.sample(rng))
}

pub fn gaussian_vector(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

pub fn unit(v: &Array1<f64>) -> Array1<f64> {
    v / v.dot(v).sqrt()
}

/// Angle between lines in degrees, computed directly.
pub fn line_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot.abs() / (na * nb)).min(1.0).acos().to_degrees()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues in descending order and the eigenvectors as columns.
pub fn jacobi_eigh(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[[i, j]].powi(2)).sum();
        let scale: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let vals = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vecs = Array2::zeros((n, n));
    for (c, &i) in order.iter().enumerate() {
        vecs.column_mut(c).assign(&v.column(i));
    }
    (vals, vecs)
}

/// One-sided (Hestenes) Jacobi SVD. Singular values in descending order.
pub fn jacobi_singular_values(m: &Array2<f64>) -> Vec<f64> {
    // Work on the orientation with fewer columns.
    let mut a = if m.ncols() > m.nrows() { m.t().to_owned() } else { m.clone() };
    let n = a.ncols();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = a.column(p).dot(&a.column(p));
                let beta: f64 = a.column(q).dot(&a.column(q));
                let gamma: f64 = a.column(p).dot(&a.column(q));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..a.nrows() {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = (0..n).map(|j| a.column(j).dot(&a.column(j)).sqrt()).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Random matrix from one of several families that stress the iterative
/// solvers: plain Gaussian, low rank, repeated singular values, clustered
/// spectrum near the identity.
pub fn stress_matrix(rng: &mut impl Rng, m: usize, n: usize) -> Array2<f64> {
    let k = m.min(n);
    match rng.random_range(0..4) {
        0 => gaussian_matrix(rng, m, n),
        1 => {
            let r = rng.random_range(1..=k);
            gaussian_matrix(rng, m, r).dot(&gaussian_matrix(rng, r, n))
        }
        2 => {
            // Orthogonal factors from Jacobi on Gaussian Gram matrices.
            let (_, qu) = jacobi_eigh(&{
                let g = gaussian_matrix(rng, m, m);
                g.t().dot(&g)
            });
            let (_, qv) = jacobi_eigh(&{
                let g = gaussian_matrix(rng, n, n);
                g.t().dot(&g)
            });
            let mut s = Array2::zeros((m, n));
            for i in 0..k {
                s[[i, i]] = if i < 2 { 3.0 } else { 1.0 / (i as f64) };
            }
            qu.dot(&s).dot(&qv.t())
        }
        _ => {
            let mut a = gaussian_matrix(rng, m, n) * 1e-2;
            for i in 0..k {
                a[[i, i]] += 1.0;
            }
            a
        }
    }
}

/// Engine output of block `layer` alone on each row of `xs`, as a
/// length-1 sequence.
pub fn block_outputs(bundle: &slens::ModelBundle, layer: usize, xs: &Array2<f64>) -> Array2<f64> {
    let mut sub = bundle.clone();
    sub.layers = vec![bundle.layers[layer].clone()];
    sub.pos_embed = None;
    let ablation = slens::engine::Ablation::none();
    let opts = slens::engine::ForwardOptions::new(&ablation);
    let x32 = xs.mapv(|v| v as f32);
    let out = slens::engine::forward_single_tokens(&sub, x32.view(), &opts, &mut ()).unwrap();
    out.hidden.mapv(|v| v as f64)
}

/// What the analysis pipeline recovered from one planted model.
#[derive(Debug)]
pub struct Recovery {
    pub spec: slens::synth::PlantedSpec,
    /// Defect direction at the explosion layer versus `u_plant`, degrees.
    pub direction_angle: f64,
    pub sigma_rel_error: f64,
    pub lambda_abs_error: f64,
    pub explosion_layers: Vec<usize>,
    pub decay_layers: Vec<usize>,
    /// Max trace norm without and with the explosion subspace trimmed.
    pub trim_before: f32,
    pub trim_after: f32,
}

impl Recovery {
    pub fn exact_layers(&self) -> bool {
        self.explosion_layers == [self.spec.explosion_layer] && self.decay_layers == [self.spec.decay_layer]
    }
}

pub fn recover_planted(p: &slens::synth::PlantedSpec, seed: u64) -> Recovery {
    use slens::pipeline::{analyze_model, PipelineConfig};
    let m = slens::synth::gen_planted_model(p, seed).unwrap();
    let gt = m.ground_truth.clone().unwrap();
    let b = m.bundle().unwrap();
    let corpus = slens::synth::sample_corpus(&gt, 20, 64, seed);
    let a = analyze_model(&b, Some(&corpus), &PipelineConfig::default()).unwrap();
    let cls = a.classification.unwrap();
    let e = &a.report.records[p.explosion_layer];
    let direction_angle = line_angle(e.defect_direction.as_slice().unwrap(), &p.u_plant);
    let lambda = a.report.records[p.decay_layer].decay_pair.as_ref().unwrap().pair.lambda;
    let ex = slens::spectral::explosion_subspace(&a.linearizations[p.explosion_layer], Default::default()).unwrap();
    let trim = slens::engine::trim_and_trace(&b, &corpus.rows[0], p.explosion_layer, ex.v.as_slice().unwrap(), 0, None)
        .unwrap();
    Recovery {
        spec: p.clone(),
        direction_angle,
        sigma_rel_error: (e.sigma1 - p.gain_sigma).abs() / p.gain_sigma,
        lambda_abs_error: (lambda - p.decay_lambda).abs(),
        explosion_layers: cls.explosion_layers,
        decay_layers: cls.decay_layers,
        trim_before: trim.baseline.max_norm(),
        trim_after: trim.trimmed.max_norm(),
    }
}

/// Largest `|x − deq(q(x))| / (Δ/2)` over the tensor, allowing for the f32
/// rounding of the dequantized value.
pub fn rtn_error_ratio(x: &[f32], bits: u32) -> f64 {
    let (q, p) = slens::quant::quantize_rtn(x, bits).unwrap();
    let back = slens::quant::dequantize(&q, &p);
    x.iter()
        .zip(&back)
        .map(|(&a, &b)| {
            let slack = (a as f64).abs() * f32::EPSILON as f64;
            (((a as f64) - (b as f64)).abs() - slack).max(0.0) / (p.delta / 2.0)
        })
        .fold(0.0, f64::max)
}

/// `‖(x·diag(1/s))(W·diag(s))ᵀ − xWᵀ‖_F / ‖xWᵀ‖_F` for a SmoothQuant
/// transform built from the activations' own absmax.
pub fn smoothquant_invariance(x: &Array2<f32>, w: &Array2<f32>, alpha: f64) -> f64 {
    let absmax: Vec<f64> =
        x.columns().into_iter().map(|c| c.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))).collect();
    let (ws, inv) = slens::quant::smoothquant_transform(&absmax, w, alpha).unwrap();
    let x64 = x.mapv(|v| v as f64);
    let xs = &x64 * &inv.view().insert_axis(ndarray::Axis(0));
    let y = x64.dot(&w.mapv(|v| v as f64).t());
    let ys = xs.dot(&ws.mapv(|v| v as f64).t());
    let d = &ys - &y;
    (d.iter().map(|v| v * v).sum::<f64>() / y.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

/// Perplexities `(full precision, RTN, RTN with W₂ exempt at the classified
/// layers)` on a planted model.
pub fn planted_quant_ppl(seed: u64, bits: u32) -> (f64, f64, f64) {
    use slens::pipeline::{analyze_model, PipelineConfig};
    use slens::quant::{quant_report, QuantConfig, QuantScheme};
    let p = slens::synth::PlantedSpec::random(seed);
    let m = slens::synth::gen_planted_model(&p, seed).unwrap();
    let gt = m.ground_truth.clone().unwrap();
    let b = m.bundle().unwrap();
    let corpus = slens::synth::sample_corpus(&gt, 16, 128, seed + 100);
    let a = analyze_model(&b, Some(&corpus), &PipelineConfig::default()).unwrap();
    let cls = a.classification.unwrap();
    let mut rtn = QuantConfig::new(QuantScheme::Rtn);
    rtn.bits = bits;
    let cfgs = [QuantConfig::full_precision(), rtn.clone(), rtn.with_defect_exemption(&cls)];
    let rows = quant_report(&b, &corpus, &cfgs, None).unwrap();
    (rows[0].ppl, rows[1].ppl, rows[2].ppl)
}

/// Signature of a synthetic model from its weights alone.
pub fn synth_signature(m: &slens::synth::SynthModel, id: &str) -> slens::signature::ModelSignature {
    use slens::pipeline::{analyze_model, PipelineConfig};
    let b = m.bundle().unwrap();
    let a = analyze_model(&b, None, &PipelineConfig::default()).unwrap();
    let none = slens::spectral::LayerClassification {
        explosion_layers: vec![],
        decay_layers: vec![],
        evidence: vec![],
        empty: true,
    };
    slens::signature::model_signature(&a.report, &none, id)
}

/// Base planted model of a "family" at width `d`; families differ by seed.
pub fn family_base(d: usize, seed: u64) -> slens::synth::SynthModel {
    let p = slens::synth::PlantedSpec::new(d, 2 * d, 6, 64, 2, 5, 100.0, -1.0, seed);
    slens::synth::gen_planted_model(&p, seed).unwrap()
}
