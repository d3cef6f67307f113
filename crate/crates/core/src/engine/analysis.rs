//! Empirical analyses built on the forward pass: norm traces, the
//! empirical high-norm direction, vocabulary scans, subspace coefficients
//! and trimming.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::row_norms;
use super::{forward, forward_single_tokens, Ablation, Corpus, ForwardOptions, Observer, Tokenizer, Trim};
use crate::checkpoint::ModelBundle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Captured {
    /// Trace row (0 = embeddings).
    pub layer: usize,
    pub token: usize,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormTrace {
    pub tokens: Vec<u32>,
    pub token_strings: Vec<String>,
    /// `(n_layers + 1) x n_tokens`.
    pub norms: Array2<f32>,
    pub captured: Vec<Captured>,
}

impl NormTrace {
    pub fn max_norm(&self) -> f32 {
        self.norms.iter().cloned().fold(0.0, f32::max)
    }

    /// `layer,token_index,norm` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,token_index,norm\n");
        for ((l, t), n) in self.norms.indexed_iter() {
            out.push_str(&format!("{l},{t},{n}\n"));
        }
        out
    }
}

struct Capture<'a> {
    wanted: &'a BTreeSet<(usize, usize)>,
    got: Vec<Captured>,
}

impl Observer for Capture<'_> {
    fn hidden(&mut self, row: usize, x: &Array2<f32>) {
        for &(_, t) in self.wanted.range((row, 0)..(row + 1, 0)) {
            if t < x.nrows() {
                self.got.push(Captured { layer: row, token: t, vector: x.row(t).to_vec() });
            }
        }
    }
}

/// Forward pass recording every row's norms and the requested
/// `(row, token)` hidden states.
pub fn forward_trace(
    bundle: &ModelBundle,
    ids: &[u32],
    capture: &[(usize, usize)],
    ablation: &Ablation,
    tokenizer: Option<&Tokenizer>,
) -> Result<NormTrace> {
    let wanted: BTreeSet<(usize, usize)> = capture.iter().copied().collect();
    let mut obs = Capture { wanted: &wanted, got: Vec::new() };
    let out = forward(bundle, ids, &ForwardOptions::new(ablation), &mut obs)?;
    let token_strings = ids
        .iter()
        .map(|&id| tokenizer.map_or_else(|| id.to_string(), |t| t.token_string(id)))
        .collect();
    Ok(NormTrace { tokens: ids.to_vec(), token_strings, norms: out.norms, captured: obs.got })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    /// Half the largest norm seen anywhere in the corpus traces.
    Auto,
    Value(f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionOptions {
    pub threshold: Threshold,
    pub max_rows: Option<usize>,
    /// Pairwise angles use at most this many vectors.
    pub max_pairwise: usize,
    pub seed: u64,
}

impl Default for DirectionOptions {
    fn default() -> Self {
        Self { threshold: Threshold::Auto, max_rows: None, max_pairwise: 2000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDirection {
    pub direction: Array1<f64>,
    pub count: usize,
    pub threshold: f64,
    /// Degrees.
    pub mean_pairwise_angle: f64,
    pub max_norm: f64,
    pub rows_used: usize,
}

struct Collect {
    threshold: f32,
    hits: Vec<(usize, usize, Vec<f32>)>,
}

impl Observer for Collect {
    fn hidden(&mut self, row: usize, x: &Array2<f32>) {
        for (t, n) in row_norms(x).iter().enumerate() {
            if *n > self.threshold {
                self.hits.push((row, t, x.row(t).to_vec()));
            }
        }
    }
}

fn clip(bundle: &ModelBundle, row: &[u32]) -> Vec<u32> {
    row[..row.len().min(bundle.spec.max_seq_len)].to_vec()
}

/// Norm trace over the first `rows` corpus rows, one column per token,
/// rows laid side by side.
pub fn corpus_trace(bundle: &ModelBundle, corpus: &Corpus, rows: usize) -> Result<NormTrace> {
    let picked: Vec<Vec<u32>> =
        corpus.rows.iter().filter(|r| !r.is_empty()).take(rows).map(|r| clip(bundle, r)).collect();
    if picked.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let ablation = Ablation::none();
    let traces = picked
        .par_iter()
        .map(|r| forward_trace(bundle, r, &[], &ablation, None))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = traces.iter().map(|t| t.norms.view()).collect();
    let norms = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let tokens: Vec<u32> = picked.concat();
    let token_strings = traces.into_iter().flat_map(|t| t.token_strings).collect();
    Ok(NormTrace { tokens, token_strings, norms, captured: Vec::new() })
}

/// Mean acute angle in degrees over all pairs of rows of `vectors`.
pub fn mean_pairwise_angle(vectors: &Array2<f64>) -> f64 {
    let n = vectors.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut unit = vectors.clone();
    for mut r in unit.rows_mut() {
        let nr = r.dot(&r).sqrt();
        if nr > 0.0 {
            r /= nr;
        }
    }
    let gram = unit.dot(&unit.t());
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += gram[[i, j]].abs().min(1.0).acos().to_degrees();
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Sign-aligned mean of all hidden states above the threshold.
pub fn empirical_high_norm_direction(bundle: &ModelBundle, corpus: &Corpus, opts: &DirectionOptions) -> Result<EmpiricalDirection> {
    let rows: Vec<Vec<u32>> = corpus
        .rows
        .iter()
        .filter(|r| !r.is_empty())
        .take(opts.max_rows.unwrap_or(usize::MAX))
        .map(|r| clip(bundle, r))
        .collect();
    if rows.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let ablation = Ablation::none();
    let fopts = ForwardOptions::new(&ablation);
    let max_norm = rows
        .par_iter()
        .map(|r| forward(bundle, r, &fopts, &mut ()).map(|o| o.norms.iter().cloned().fold(0.0f32, f32::max)))
        .collect::<Result<Vec<f32>>>()?
        .into_iter()
        .fold(0.0f32, f32::max);
    let threshold = match opts.threshold {
        Threshold::Auto => 0.5 * max_norm,
        Threshold::Value(t) => t,
    };
    let per_row: Vec<Vec<(usize, usize, Vec<f32>)>> = rows
        .par_iter()
        .map(|r| {
            let mut c = Collect { threshold, hits: Vec::new() };
            forward(bundle, r, &fopts, &mut c)?;
            Ok(c.hits)
        })
        .collect::<Result<_>>()?;
    let hits: Vec<Vec<f32>> = per_row.into_iter().flatten().map(|(_, _, v)| v).collect();
    if hits.is_empty() {
        return Err(Error::EmptyCollection { threshold: threshold as f64 });
    }
    let d = bundle.d();
    let mut all = Array2::<f64>::zeros((hits.len(), d));
    for (i, h) in hits.iter().enumerate() {
        all.row_mut(i).assign(&Array1::from_iter(h.iter().map(|&x| x as f64)));
    }
    let first = all.row(0).to_owned();
    for mut r in all.rows_mut() {
        if r.dot(&first) < 0.0 {
            r.mapv_inplace(|x| -x);
        }
    }
    let mut mean = all.mean_axis(Axis(0)).expect("non-empty");
    let nm = mean.dot(&mean).sqrt();
    if nm == 0.0 {
        return Err(Error::Numeric { location: "mean of high-norm states is zero".into() });
    }
    mean /= nm;
    let sub = if all.nrows() > opts.max_pairwise {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, all.nrows(), opts.max_pairwise).into_vec();
        idx.sort_unstable();
        all.select(Axis(0), &idx)
    } else {
        all.clone()
    };
    Ok(EmpiricalDirection {
        direction: mean,
        count: all.nrows(),
        threshold: threshold as f64,
        mean_pairwise_angle: mean_pairwise_angle(&sub),
        max_norm: max_norm as f64,
        rows_used: rows.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub layer: usize,
    /// Per vocabulary id: norm entering `layer`.
    pub norms_before: Vec<f32>,
    /// Per vocabulary id: norm after `layer`.
    pub norms: Vec<f32>,
    pub random_before: Vec<f32>,
    pub random_norms: Vec<f32>,
}

impl ScanResult {
    /// `(token id, norm)` by descending norm.
    pub fn ranked(&self) -> Vec<(u32, f32)> {
        let mut r: Vec<(u32, f32)> = self.norms.iter().enumerate().map(|(i, &n)| (i as u32, n)).collect();
        r.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        r
    }
}

const SCAN_CHUNK: usize = 2048;

fn scan_rows(bundle: &ModelBundle, x0: &Array2<f32>, layer: usize, ablation: &Ablation) -> Result<(Vec<f32>, Vec<f32>)> {
    let opts = ForwardOptions { ablation, hook: None, stop_after: Some(layer), logits: false };
    let chunks: Vec<(Vec<f32>, Vec<f32>)> = (0..x0.nrows())
        .step_by(SCAN_CHUNK)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&start| {
            let end = (start + SCAN_CHUNK).min(x0.nrows());
            let out = forward_single_tokens(bundle, x0.slice(s![start..end, ..]), &opts, &mut ())?;
            Ok((out.norms.row(layer).to_vec(), out.norms.row(layer + 1).to_vec()))
        })
        .collect::<Result<_>>()?;
    let mut before = Vec::with_capacity(x0.nrows());
    let mut after = Vec::with_capacity(x0.nrows());
    for (b, a) in chunks {
        before.extend(b);
        after.extend(a);
    }
    Ok((before, after))
}

/// Every vocabulary embedding as a length-1 sequence, plus `n_random`
/// Gaussian embeddings matched to the table's per-dimension mean and std.
pub fn vocab_initial_scan(bundle: &ModelBundle, layer: usize, n_random: usize, seed: u64) -> Result<ScanResult> {
    bundle.layer(layer)?;
    let ablation = Ablation::none();
    let (norms_before, norms) = scan_rows(bundle, &bundle.embed, layer, &ablation)?;
    let (random_before, random_norms) = if n_random > 0 {
        let mean = bundle.embed.mapv(|x| x as f64).mean_axis(Axis(0)).expect("non-empty vocab");
        let std = bundle.embed.mapv(|x| x as f64).std_axis(Axis(0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dists: Vec<Normal<f64>> = mean
            .iter()
            .zip(std.iter())
            .map(|(&m, &s)| Normal::new(m, s.max(0.0)).expect("finite std"))
            .collect();
        let x = Array2::from_shape_fn((n_random, bundle.d()), |(_, j)| dists[j].sample(&mut rng) as f32);
        scan_rows(bundle, &x, layer, &ablation)?
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ScanResult { layer, norms_before, norms, random_before, random_norms })
}

/// The vocabulary scan with every attention block removed.
pub fn attention_ablation_scan(bundle: &ModelBundle, layer: usize) -> Result<ScanResult> {
    bundle.layer(layer)?;
    let ablation = Ablation { zero_attention: true, trim: None };
    let (norms_before, norms) = scan_rows(bundle, &bundle.embed, layer, &ablation)?;
    Ok(ScanResult { layer, norms_before, norms, random_before: Vec::new(), random_norms: Vec::new() })
}

struct FfnInput {
    layer: usize,
    x: Option<Array2<f32>>,
}

impl Observer for FfnInput {
    fn ffn_input(&mut self, layer: usize, x: &Array2<f32>) {
        if layer == self.layer {
            self.x = Some(x.clone());
        }
    }
}

/// `v1ᵀx` for each token's normalized FFN input at `layer`.
pub fn subspace_coefficient(bundle: &ModelBundle, ids: &[u32], layer: usize, v1: &[f64]) -> Result<Vec<f64>> {
    bundle.layer(layer)?;
    if v1.len() != bundle.d() {
        return Err(Error::Shape(format!("direction has length {}, model width is {}", v1.len(), bundle.d())));
    }
    let ablation = Ablation::none();
    let opts = ForwardOptions { ablation: &ablation, hook: None, stop_after: Some(layer), logits: false };
    let mut obs = FfnInput { layer, x: None };
    forward(bundle, ids, &opts, &mut obs)?;
    let x = obs.x.expect("layer ran");
    Ok(x.rows().into_iter().map(|r| r.iter().zip(v1).map(|(&a, &b)| a as f64 * b).sum()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimResult {
    pub baseline: NormTrace,
    pub trimmed: NormTrace,
    /// Greedy continuation under the trimmed model.
    pub continuation: Vec<u32>,
    pub continuation_text: Option<String>,
}

/// Trace with the `v1` component removed from the FFN input at `layer`,
/// alongside the untouched baseline and a greedy continuation.
pub fn trim_and_trace(
    bundle: &ModelBundle,
    ids: &[u32],
    layer: usize,
    v1: &[f64],
    generate: usize,
    tokenizer: Option<&Tokenizer>,
) -> Result<TrimResult> {
    bundle.layer(layer)?;
    if v1.len() != bundle.d() {
        return Err(Error::Shape(format!("direction has length {}, model width is {}", v1.len(), bundle.d())));
    }
    let nv = v1.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nv == 0.0 {
        return Err(Error::Domain("trim direction is zero".into()));
    }
    let direction: Array1<f32> = v1.iter().map(|&x| (x / nv) as f32).collect();
    let ablation = Ablation { zero_attention: false, trim: Some(Trim { layer, direction }) };
    let baseline = forward_trace(bundle, ids, &[], &Ablation::none(), tokenizer)?;
    let trimmed = forward_trace(bundle, ids, &[], &ablation, tokenizer)?;

    let mut seq = ids.to_vec();
    let mut continuation = Vec::new();
    let opts = ForwardOptions { ablation: &ablation, hook: None, stop_after: None, logits: true };
    while continuation.len() < generate && seq.len() < bundle.spec.max_seq_len {
        let out = forward(bundle, &seq, &opts, &mut ())?;
        let logits = out.logits.expect("requested");
        let last = logits.row(logits.nrows() - 1);
        let next = last
            .iter()
            .enumerate()
            .fold((0usize, f32::NEG_INFINITY), |best, (i, &z)| if z > best.1 { (i, z) } else { best })
            .0 as u32;
        continuation.push(next);
        seq.push(next);
    }
    let continuation_text = tokenizer.map(|t| t.decode(&continuation));
    Ok(TrimResult { baseline, trimmed, continuation, continuation_text })
}
