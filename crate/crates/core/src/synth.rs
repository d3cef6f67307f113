//! Small synthetic checkpoints with planted structure.
//!
//! Planted model (gated SiLU, RMSNorm with unit gains, `u ⊥ v`):
//!
//! * Tokens 0 (BOS) and 1 (delimiter) embed with a large `v` component,
//!   every other token is orthogonal to `u` and `v` up to a tiny `v` part.
//! * Explosion layer: a channel pair `silu(k vᵀx̂) - silu(-k vᵀx̂) = k vᵀx̂`
//!   (gate pinned to 1 via `W3 = 0`, `b3 = 1`) writes `(a u - v) vᵀx̂`. With
//!   `a = √(σ² - 1)` the layer map `I + (a u - v) vᵀ` has top singular value
//!   `σ` and left singular vector `u`, and a trigger token's `v` part is
//!   swapped for a large `u` part.
//! * Decay layer: a second pair writes `λ u uᵀx̂`, and a clipped ramp
//!   `silu(s (uᵀx̂ - T₁)) - silu(s (uᵀx̂ - T₂))`, `T₁ = 0.8√d`, `T₂ = 0.9√d`,
//!   is flat at `s (T₂ - T₁)` on tokens dominated by `u` and zero below
//!   `T₁`. Its output weight is calibrated by running the model so that the
//!   `u` part of trigger tokens cancels. Gaussian inputs of scale `√d` stay
//!   well below `T₁`, so the linearization sees only `λ u uᵀ`.
//! * All other weights are small random fill, so intermediate layers are
//!   close to the identity.
//! * The unembedding maps each token to its bigram successor.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    load_model_bundle, ActivationKind, AttnLayout, FfnKind, ModelBundle, ModelSpec, NormKind, PositionKind, QkvLayout,
    SafetensorsWriter, TensorStore,
};
use crate::engine::{forward, Ablation, Corpus, ForwardOptions, Observer};
use crate::error::{Error, Result};
use crate::nn::silu;

pub const BOS_TOKEN: u32 = 0;
pub const DELIMITER_TOKEN: u32 = 1;

/// Cosine between a trigger embedding and `v`.
const TRIGGER_COS: f64 = 0.9;
/// `v` component of ordinary embeddings, relative to their norm.
const ORDINARY_V: f64 = 1e-3;
/// Input scale of the plant channels.
const PAIR_SCALE: f64 = 8.0;
const STEP_SLOPE: f64 = 20.0;
/// The step ramps between these fractions of `√d`.
const STEP_LOW: f64 = 0.8;
const STEP_HIGH: f64 = 0.9;
/// Logit margin of the bigram unembedding.
const BIGRAM_LOGIT: f64 = 6.0;

/// Single-head RMSNorm gated spec of width `d` with no tensor names.
pub fn tiny_spec(d: usize) -> ModelSpec {
    ModelSpec {
        hidden_dim: d,
        n_layers: 0,
        n_heads: 1,
        n_kv_heads: 1,
        norm_kind: NormKind::RmsNorm,
        ffn_kind: FfnKind::GatedSilu,
        attn_layout: AttnLayout::Sequential,
        rope_theta: 10000.0,
        vocab_size: 1,
        names: BTreeMap::new(),
        head_dim: None,
        norm_eps: 1e-5,
        position: PositionKind::Rope,
        rotary_pct: 1.0,
        max_seq_len: 2048,
        tie_embeddings: false,
        activation: None,
        transposed_roles: vec![],
        qkv_layout: QkvLayout::Concat,
        layernorm_centering: true,
    }
}

fn synth_spec(d: usize, n_layers: usize, vocab: usize) -> ModelSpec {
    let n_heads = [4, 2, 1].into_iter().find(|h| d % h == 0 && d / h >= 2).unwrap_or(1);
    let mut names = BTreeMap::new();
    for (role, name) in [
        ("embed", "embed.weight"),
        ("final_norm", "norm.weight"),
        ("lm_head", "lm_head.weight"),
        ("attn_norm", "layers.{L}.attn_norm.weight"),
        ("ffn_norm", "layers.{L}.ffn_norm.weight"),
        ("q_proj", "layers.{L}.attn.q.weight"),
        ("k_proj", "layers.{L}.attn.k.weight"),
        ("v_proj", "layers.{L}.attn.v.weight"),
        ("o_proj", "layers.{L}.attn.o.weight"),
        ("w1", "layers.{L}.mlp.w1.weight"),
        ("w1_bias", "layers.{L}.mlp.w1.bias"),
        ("w3", "layers.{L}.mlp.w3.weight"),
        ("w3_bias", "layers.{L}.mlp.w3.bias"),
        ("w2", "layers.{L}.mlp.w2.weight"),
    ] {
        names.insert(role.to_string(), name.to_string());
    }
    ModelSpec { n_layers, n_heads, n_kv_heads: n_heads, vocab_size: vocab, names, ..tiny_spec(d) }
}

fn layer_name(spec: &ModelSpec, role: &str, layer: usize) -> String {
    spec.names[role].replace("{L}", &layer.to_string())
}

/// A generated checkpoint with its spec.
#[derive(Debug, Clone)]
pub struct SynthModel {
    pub spec: ModelSpec,
    /// Safetensors bytes.
    pub checkpoint: Vec<u8>,
    pub ground_truth: Option<GroundTruth>,
}

impl SynthModel {
    pub fn store(&self) -> Result<TensorStore> {
        TensorStore::parse(self.checkpoint.clone())
    }

    pub fn bundle(&self) -> Result<ModelBundle> {
        load_model_bundle(&self.spec, &[self.store()?])
    }

    /// Writes `model.safetensors`, `spec.json` and, for planted models,
    /// `ground_truth.json` into `dir`. Returns the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![
            (dir.join("model.safetensors"), self.checkpoint.clone()),
            (dir.join("spec.json"), self.spec.to_json().into_bytes()),
        ];
        if let Some(gt) = &self.ground_truth {
            files.push((dir.join("ground_truth.json"), serde_json::to_string_pretty(gt)?.into_bytes()));
        }
        let mut written = Vec::new();
        for (path, bytes) in files {
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub d: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub explosion_layer: usize,
    pub decay_layer: usize,
    /// Trigger direction, unit.
    pub v_plant: Vec<f64>,
    /// Defect direction, unit and orthogonal to `v_plant`.
    pub u_plant: Vec<f64>,
    /// Top singular value of the explosion layer. Zero plants nothing.
    pub gain_sigma: f64,
    pub decay_lambda: f64,
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(mut x: Vec<f64>) -> Vec<f64> {
    let n = dot(&x, &x).sqrt();
    x.iter_mut().for_each(|v| *v /= n);
    x
}

/// Random unit vector orthogonal to every vector in `basis` (orthonormal).
fn orthogonal_unit(rng: &mut impl Rng, d: usize, basis: &[&[f64]]) -> Vec<f64> {
    loop {
        let mut x = gaussian(rng, d);
        for _ in 0..2 {
            for b in basis {
                let c = dot(&x, b);
                x.iter_mut().zip(b.iter()).for_each(|(xi, bi)| *xi -= c * bi);
            }
        }
        if dot(&x, &x) > 1e-6 {
            return unit(x);
        }
    }
}

impl PlantedSpec {
    /// Planted directions drawn from `direction_seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        d_ff: usize,
        n_layers: usize,
        vocab: usize,
        explosion_layer: usize,
        decay_layer: usize,
        gain_sigma: f64,
        decay_lambda: f64,
        direction_seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(direction_seed);
        let v_plant = orthogonal_unit(&mut rng, d, &[]);
        let u_plant = orthogonal_unit(&mut rng, d, &[&v_plant]);
        Self { d, d_ff, n_layers, vocab, explosion_layer, decay_layer, v_plant, u_plant, gain_sigma, decay_lambda }
    }

    /// A random feasible spec.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = [32, 48, 64][rng.random_range(0..3)];
        let n_layers = rng.random_range(4..=8);
        let explosion = rng.random_range(0..n_layers - 1);
        let decay = rng.random_range(explosion + 1..n_layers);
        let gain = rng.random_range(20.0..200.0);
        let lambda = rng.random_range(-1.4..-0.6);
        Self::new(d, 2 * d, n_layers, 64, explosion, decay, gain, lambda, rng.random())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Construction(m));
        if self.d < 32 {
            return bad(format!("d = {} is too small to separate triggers from Gaussian inputs (need 32)", self.d));
        }
        if self.d_ff < 6 {
            return bad(format!("d_ff = {} leaves no room for the plant channels (need 6)", self.d_ff));
        }
        if self.vocab < 4 {
            return bad(format!("vocab = {} (need at least 4)", self.vocab));
        }
        if !(self.explosion_layer < self.decay_layer && self.decay_layer < self.n_layers) {
            return bad(format!(
                "need explosion {} < decay {} < n_layers {}",
                self.explosion_layer, self.decay_layer, self.n_layers
            ));
        }
        if self.u_plant.len() != self.d || self.v_plant.len() != self.d {
            return bad("planted directions must have length d".into());
        }
        for (name, x) in [("u_plant", &self.u_plant), ("v_plant", &self.v_plant)] {
            if (dot(x, x) - 1.0).abs() > 1e-6 {
                return bad(format!("{name} is not unit length"));
            }
        }
        if dot(&self.u_plant, &self.v_plant).abs() > 1e-6 {
            return bad("u_plant and v_plant must be orthogonal".into());
        }
        if !(self.gain_sigma == 0.0 || self.gain_sigma >= 10.0) {
            return bad(format!("gain_sigma = {} (must be 0 or at least 10)", self.gain_sigma));
        }
        if !(self.decay_lambda > -1.5 && self.decay_lambda < -0.5) {
            return bad(format!("decay_lambda = {} outside (-1.5, -0.5)", self.decay_lambda));
        }
        Ok(())
    }
}

/// What was planted, written next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted: PlantedSpec,
    pub seed: u64,
    pub trigger_tokens: Vec<u32>,
    /// Successor of each token in the sampling chain.
    pub bigram: Vec<u32>,
    /// `uᵀx̂` range over which the decay step ramps up.
    pub step_range: (f64, f64),
    /// Output weight of the decay step channel along `u`.
    pub step_weight: f64,
}

struct Tensors {
    spec: ModelSpec,
    map: BTreeMap<String, Array2<f64>>,
}

impl Tensors {
    fn set(&mut self, role: &str, layer: Option<usize>, m: Array2<f64>) {
        let name = match layer {
            Some(l) => layer_name(&self.spec, role, l),
            None => self.spec.names[role].clone(),
        };
        self.map.insert(name, m);
    }

    fn get_mut(&mut self, role: &str, layer: usize) -> &mut Array2<f64> {
        let name = layer_name(&self.spec, role, layer);
        self.map.get_mut(&name).expect("tensor set")
    }

    fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let mut w = SafetensorsWriter::new();
        for (name, m) in &self.map {
            let vals: Vec<f32> = m.iter().map(|&x| x as f32).collect();
            // Single-row tensors registered as vectors are biases and gains.
            let shape = if name.ends_with(".bias") || name.contains("norm") {
                vec![m.len()]
            } else {
                vec![m.nrows(), m.ncols()]
            };
            w.add_f32(name, shape, &vals)?;
        }
        Ok(w.finish())
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let e: f64 = StandardNormal.sample(rng);
        std * e
    })
}

fn row(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((1, n), v).expect("row")
}

/// Random attention and FFN fill common to every layer.
fn fill_layer(t: &mut Tensors, rng: &mut impl Rng, l: usize, d: usize, d_ff: usize) {
    let ds = (d as f64).sqrt();
    t.set("attn_norm", Some(l), row(vec![1.0; d]));
    t.set("ffn_norm", Some(l), row(vec![1.0; d]));
    t.set("q_proj", Some(l), random_matrix(rng, d, d, 1.0 / ds));
    t.set("k_proj", Some(l), random_matrix(rng, d, d, 1.0 / ds));
    t.set("v_proj", Some(l), random_matrix(rng, d, d, 0.05 / ds));
    t.set("o_proj", Some(l), random_matrix(rng, d, d, 0.05 / ds));
    t.set("w1", Some(l), random_matrix(rng, d_ff, d, 0.5 / ds));
    t.set("w1_bias", Some(l), row(vec![0.0; d_ff]));
    t.set("w3", Some(l), random_matrix(rng, d_ff, d, 0.2 / ds));
    t.set("w3_bias", Some(l), row(vec![1.0; d_ff]));
    t.set("w2", Some(l), random_matrix(rng, d, d_ff, 0.02 / (d_ff as f64).sqrt()));
}

/// Channel `c` computes `k xᵀ(input)` exactly as `silu(k·) - silu(-k·)`
/// over channels `c, c+1`, writing along `output`.
fn plant_pair(t: &mut Tensors, l: usize, c: usize, input: &[f64], output: &[f64]) {
    let d = input.len();
    let w1 = t.get_mut("w1", l);
    for j in 0..d {
        w1[[c, j]] = PAIR_SCALE * input[j];
        w1[[c + 1, j]] = -PAIR_SCALE * input[j];
    }
    let w3 = t.get_mut("w3", l);
    for j in 0..d {
        w3[[c, j]] = 0.0;
        w3[[c + 1, j]] = 0.0;
    }
    let w2 = t.get_mut("w2", l);
    for i in 0..d {
        w2[[i, c]] = output[i] / PAIR_SCALE;
        w2[[i, c + 1]] = -output[i] / PAIR_SCALE;
    }
}

#[derive(Default)]
struct DecayProbe {
    layer: usize,
    ffn_in: Option<Array2<f32>>,
    out: Option<Array2<f32>>,
}

impl Observer for DecayProbe {
    fn hidden(&mut self, row: usize, x: &Array2<f32>) {
        if row == self.layer + 1 {
            self.out = Some(x.clone());
        }
    }
    fn ffn_input(&mut self, layer: usize, x: &Array2<f32>) {
        if layer == self.layer {
            self.ffn_in = Some(x.clone());
        }
    }
}

/// Build the planted checkpoint. `seed` drives the random fill, the
/// embeddings of ordinary tokens and the bigram chain.
pub fn gen_planted_model(p: &PlantedSpec, seed: u64) -> Result<SynthModel> {
    p.validate()?;
    let (d, d_ff, vocab) = (p.d, p.d_ff, p.vocab);
    let ds = (d as f64).sqrt();
    let spec = synth_spec(d, p.n_layers, vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensors { spec: spec.clone(), map: BTreeMap::new() };
    let (u, v) = (p.u_plant.as_slice(), p.v_plant.as_slice());

    // Embeddings: norm √d, directions orthogonal to u and v.
    let dirs: Vec<Vec<f64>> = (0..vocab).map(|_| orthogonal_unit(&mut rng, d, &[u, v])).collect();
    let mut embed = Array2::zeros((vocab, d));
    for (tok, w) in dirs.iter().enumerate() {
        let c = if tok as u32 == BOS_TOKEN || tok as u32 == DELIMITER_TOKEN { TRIGGER_COS } else { ORDINARY_V };
        let s = (1.0 - c * c).sqrt();
        for j in 0..d {
            embed[[tok, j]] = ds * (c * v[j] + s * w[j]);
        }
    }
    t.set("embed", None, embed);
    t.set("final_norm", None, row(vec![1.0; d]));

    let mut ordinary: Vec<u32> = (2..vocab as u32).collect();
    ordinary.shuffle(&mut rng);
    let bigram: Vec<u32> = (0..vocab).map(|tok| ordinary[tok % ordinary.len()]).collect();
    let beta = BIGRAM_LOGIT / ds;
    let mut lm_head = Array2::zeros((vocab, d));
    for (tok, &next) in bigram.iter().enumerate() {
        for j in 0..d {
            lm_head[[next as usize, j]] += beta * dirs[tok][j];
        }
    }
    t.set("lm_head", None, lm_head);

    for l in 0..p.n_layers {
        fill_layer(&mut t, &mut rng, l, d, d_ff);
    }

    let planted = p.gain_sigma > 0.0;
    if planted {
        let a = (p.gain_sigma * p.gain_sigma - 1.0).sqrt();
        let out: Vec<f64> = u.iter().zip(v).map(|(ui, vi)| a * ui - vi).collect();
        plant_pair(&mut t, p.explosion_layer, 0, v, &out);
    }
    let k = p.decay_layer;
    let lam_u: Vec<f64> = u.iter().map(|x| p.decay_lambda * x).collect();
    plant_pair(&mut t, k, 0, u, &lam_u);
    let (lo, hi) = (STEP_LOW * ds, STEP_HIGH * ds);
    for (c, at) in [(2, lo), (3, hi)] {
        let w1 = t.get_mut("w1", k);
        for j in 0..d {
            w1[[c, j]] = STEP_SLOPE * u[j];
        }
        t.get_mut("w1_bias", k)[[0, c]] = -STEP_SLOPE * at;
        t.get_mut("w3", k).row_mut(c).fill(0.0);
        t.get_mut("w2", k).column_mut(c).fill(0.0);
    }

    let mut step_weight = 0.0;
    if planted {
        // Calibrate the step output so the trigger tokens' u part cancels.
        let bundle = load_model_bundle(&spec, &[TensorStore::parse(t.to_checkpoint()?)?])?;
        let ablation = Ablation::none();
        let mut opts = ForwardOptions::new(&ablation);
        opts.stop_after = Some(k);
        let mut probe = DecayProbe { layer: k, ..Default::default() };
        forward(&bundle, &[BOS_TOKEN, DELIMITER_TOKEN], &opts, &mut probe)?;
        let (fin, out) = (probe.ffn_in.expect("ffn input seen"), probe.out.expect("output seen"));
        let mut acc = 0.0;
        for r in 0..2 {
            let xu: f64 = fin.row(r).iter().zip(u).map(|(&x, &ui)| x as f64 * ui).sum();
            if xu < hi + 0.5 * (hi - lo) {
                return Err(Error::Construction(format!(
                    "trigger token {r} reaches the decay layer with u-coordinate {xu:.3}, short of the step top {hi:.3}"
                )));
            }
            let h = silu(STEP_SLOPE * (xu - lo)) - silu(STEP_SLOPE * (xu - hi));
            let ou: f64 = out.row(r).iter().zip(u).map(|(&x, &ui)| x as f64 * ui).sum();
            acc += ou / h;
        }
        step_weight = -acc / 2.0;
        let w2 = t.get_mut("w2", k);
        for i in 0..d {
            w2[[i, 2]] = step_weight * u[i];
            w2[[i, 3]] = -step_weight * u[i];
        }
    }

    let gt = GroundTruth {
        planted: p.clone(),
        seed,
        trigger_tokens: vec![BOS_TOKEN, DELIMITER_TOKEN],
        bigram,
        step_range: (lo, hi),
        step_weight,
    };
    Ok(SynthModel { spec, checkpoint: t.to_checkpoint()?, ground_truth: Some(gt) })
}

/// Token rows following the planted bigram chain: each row starts with
/// BOS, successors follow the chain with probability 0.8, and delimiters
/// appear with probability 0.1.
pub fn sample_corpus(gt: &GroundTruth, rows: usize, len: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = gt.bigram.len() as u32;
    let rows = (0..rows)
        .map(|_| {
            let mut r = vec![BOS_TOKEN];
            while r.len() < len {
                let prev = *r.last().expect("non-empty");
                let next = if rng.random::<f64>() < 0.1 {
                    DELIMITER_TOKEN
                } else if rng.random::<f64>() < 0.8 {
                    gt.bigram[prev as usize]
                } else {
                    rng.random_range(2..vocab)
                };
                r.push(next);
            }
            r
        })
        .collect();
    Corpus::from_rows(rows)
}

/// Adds Gaussian noise to every tensor, with Frobenius norm `rel` times the
/// tensor's own.
pub fn perturb(model: &SynthModel, rel: f64, seed: u64) -> Result<SynthModel> {
    let store = model.store()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = SafetensorsWriter::new();
    for view in store.tensors() {
        let mut vals = view.to_f32()?;
        let rms = (vals.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / vals.len().max(1) as f64).sqrt();
        for x in vals.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *x += (rel * rms * e) as f32;
        }
        w.add_f32(view.name, view.shape().to_vec(), &vals)?;
    }
    Ok(SynthModel { spec: model.spec.clone(), checkpoint: w.finish(), ground_truth: model.ground_truth.clone() })
}

/// A model whose blocks are exactly linear on single tokens: gain-only
/// norms, identity activation and the gate pinned to 1.
pub fn gen_linear_model(d: usize, n_layers: usize, seed: u64) -> Result<SynthModel> {
    gen_linear_model_scaled(d, n_layers, seed, 1.0)
}

/// [`gen_linear_model`] with every block weight multiplied by `scale`;
/// zero gives `L = I`.
pub fn gen_linear_model_scaled(d: usize, n_layers: usize, seed: u64, scale: f64) -> Result<SynthModel> {
    if d < 2 {
        return Err(Error::Construction(format!("d = {d} (need at least 2)")));
    }
    let vocab = 8;
    let d_ff = 2 * d;
    let mut spec = synth_spec(d, n_layers, vocab);
    spec.norm_kind = NormKind::Gain;
    spec.activation = Some(ActivationKind::Identity);
    spec.names.remove("w1_bias");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensors { spec: spec.clone(), map: BTreeMap::new() };
    let ds = (d as f64).sqrt();
    t.set("embed", None, random_matrix(&mut rng, vocab, d, 1.0));
    t.set("final_norm", None, row(vec![1.0; d]));
    t.set("lm_head", None, random_matrix(&mut rng, vocab, d, 1.0 / ds));
    for l in 0..n_layers {
        let gains = |rng: &mut ChaCha8Rng| row((0..d).map(|_| 0.5 + rng.random::<f64>()).collect());
        let g_attn = gains(&mut rng);
        let g_ffn = gains(&mut rng);
        t.set("attn_norm", Some(l), g_attn);
        t.set("ffn_norm", Some(l), g_ffn);
        t.set("q_proj", Some(l), random_matrix(&mut rng, d, d, 1.0 / ds));
        t.set("k_proj", Some(l), random_matrix(&mut rng, d, d, 1.0 / ds));
        t.set("v_proj", Some(l), random_matrix(&mut rng, d, d, scale * 0.5 / ds));
        t.set("o_proj", Some(l), random_matrix(&mut rng, d, d, scale * 0.5 / ds));
        t.set("w1", Some(l), random_matrix(&mut rng, d_ff, d, scale * 0.5 / ds));
        t.set("w3", Some(l), Array2::zeros((d_ff, d)));
        t.set("w3_bias", Some(l), row(vec![1.0; d_ff]));
        t.set("w2", Some(l), random_matrix(&mut rng, d, d_ff, scale * 0.5 / (d_ff as f64).sqrt()));
    }
    Ok(SynthModel { spec, checkpoint: t.to_checkpoint()?, ground_truth: None })
}

/// `u_plant` as an array, for comparisons.
pub fn planted_u(gt: &GroundTruth) -> Array1<f64> {
    Array1::from(gt.planted.u_plant.clone())
}
