//! Causal fp32 forward pass.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{Ablation, LinearHook, Sublayer};
use crate::checkpoint::{AttnLayout, FfnKind, LayerWeights, ModelBundle, ModelSpec, PositionKind};
use crate::error::{Error, Result};
use crate::nn::{activate, normalize_into};

/// Callbacks fired during a forward pass.
pub trait Observer {
    /// Hidden states after row `row` (0 = embeddings, `l + 1` = block `l`).
    fn hidden(&mut self, _row: usize, _x: &Array2<f32>) {}
    /// Normalized FFN input of block `layer`, after the gain.
    fn ffn_input(&mut self, _layer: usize, _x: &Array2<f32>) {}
}

impl Observer for () {}

#[derive(Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub ablation: &'a Ablation,
    pub hook: Option<&'a dyn LinearHook>,
    /// Run blocks `0..=stop_after` only.
    pub stop_after: Option<usize>,
    pub logits: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn new(ablation: &'a Ablation) -> Self {
        Self { ablation, hook: None, stop_after: None, logits: false }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(rows run + 1) x tokens` Euclidean norms.
    pub norms: Array2<f32>,
    /// Last hidden states computed (before the final norm).
    pub hidden: Array2<f32>,
    pub logits: Option<Array2<f32>>,
}

pub(crate) fn row_norms(x: &Array2<f32>) -> Array1<f32> {
    x.rows().into_iter().map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32).collect()
}

pub(crate) fn norm_rows(spec: &ModelSpec, x: &Array2<f32>, gain: &Array1<f32>, bias: Option<&Array1<f32>>) -> Array2<f32> {
    let mut out = Array2::zeros(x.raw_dim());
    Zip::from(x.rows()).and(out.rows_mut()).for_each(|xr, or| {
        normalize_into(spec.norm_kind, xr, gain.view(), bias.map(|b| b.view()), spec.norm_eps, or);
    });
    out
}

fn linear(
    x: &Array2<f32>,
    w: &Array2<f32>,
    b: Option<&Array1<f32>>,
    hook: Option<&dyn LinearHook>,
    layer: usize,
    role: Sublayer,
) -> Array2<f32> {
    let (w, input) = match hook {
        Some(h) => {
            let w = h.weight(layer, role).unwrap_or(w);
            if h.wants_input(layer, role) {
                let mut xi = x.clone();
                h.input(layer, role, &mut xi);
                (w, Some(xi))
            } else {
                (w, None)
            }
        }
        None => (w, None),
    };
    let mut y = input.as_ref().unwrap_or(x).dot(&w.t());
    if let Some(b) = b {
        y += b;
    }
    y
}

/// Rotate the first `rot` dims of each head in place (rotate-half pairing).
fn apply_rope(spec: &ModelSpec, x: &mut Array2<f32>, heads: usize) {
    let rot = spec.rotary_dims();
    if rot == 0 {
        return;
    }
    let hd = spec.head_dim();
    let half = rot / 2;
    let inv: Vec<f64> = (0..half).map(|i| spec.rope_theta.powf(-((2 * i) as f64) / rot as f64)).collect();
    for (pos, mut row) in x.rows_mut().into_iter().enumerate() {
        for i in 0..half {
            let angle = pos as f64 * inv[i];
            let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
            for h in 0..heads {
                let a = h * hd + i;
                let b = a + half;
                let (x1, x2) = (row[a], row[b]);
                row[a] = x1 * cos - x2 * sin;
                row[b] = x2 * cos + x1 * sin;
            }
        }
    }
}

fn softmax_causal_row(scores: &mut [f32], upto: usize) {
    let max = scores[..=upto].iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for s in scores[..=upto].iter_mut() {
        *s = (*s - max).exp();
        sum += *s as f64;
    }
    let inv = (1.0 / sum) as f32;
    for s in scores[..=upto].iter_mut() {
        *s *= inv;
    }
    for s in scores[upto + 1..].iter_mut() {
        *s = 0.0;
    }
}

fn attention(
    spec: &ModelSpec,
    w: &LayerWeights,
    h: &Array2<f32>,
    hook: Option<&dyn LinearHook>,
    independent: bool,
) -> Array2<f32> {
    let l = w.layer;
    let hd = spec.head_dim();
    let group = spec.n_heads / spec.n_kv_heads;
    let t = h.nrows();
    let v = linear(h, &w.w_value, w.b_v.as_ref(), hook, l, Sublayer::VProj);
    let mut ctx = Array2::<f32>::zeros((t, spec.q_dim()));
    if independent {
        // Each row is its own length-1 sequence: attention weight 1 on itself.
        for head in 0..spec.n_heads {
            let kv = head / group;
            ctx.slice_mut(s![.., head * hd..(head + 1) * hd]).assign(&v.slice(s![.., kv * hd..(kv + 1) * hd]));
        }
    } else {
        let mut q = linear(h, &w.w_q, w.b_q.as_ref(), hook, l, Sublayer::QProj);
        let mut k = linear(h, &w.w_k, w.b_k.as_ref(), hook, l, Sublayer::KProj);
        apply_rope(spec, &mut q, spec.n_heads);
        apply_rope(spec, &mut k, spec.n_kv_heads);
        let scale = 1.0 / (hd as f32).sqrt();
        for head in 0..spec.n_heads {
            let kv = head / group;
            let qh = q.slice(s![.., head * hd..(head + 1) * hd]);
            let kh = k.slice(s![.., kv * hd..(kv + 1) * hd]);
            let vh = v.slice(s![.., kv * hd..(kv + 1) * hd]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                softmax_causal_row(row.as_slice_mut().expect("contiguous"), i);
            }
            ctx.slice_mut(s![.., head * hd..(head + 1) * hd]).assign(&scores.dot(&vh));
        }
    }
    linear(&ctx, &w.w_out, w.b_out.as_ref(), hook, l, Sublayer::OProj)
}

pub(crate) fn ffn(spec: &ModelSpec, w: &LayerWeights, h: &Array2<f32>, hook: Option<&dyn LinearHook>) -> Array2<f32> {
    let l = w.layer;
    let act = spec.activation();
    let mut a = linear(h, &w.w1, w.b1.as_ref(), hook, l, Sublayer::W1);
    a.mapv_inplace(|x| activate(act, x as f64) as f32);
    if spec.ffn_kind == FfnKind::GatedSilu {
        if let Some(w3) = &w.w3 {
            let up = linear(h, w3, w.b3.as_ref(), hook, l, Sublayer::W3);
            a *= &up;
        }
    }
    linear(&a, &w.w2, w.b2.as_ref(), hook, l, Sublayer::W2)
}

fn trimmed(opts: &ForwardOptions, layer: usize, x: &Array2<f32>) -> Option<Array2<f32>> {
    let trim = opts.ablation.trim.as_ref().filter(|t| t.layer == layer)?;
    let dir = &trim.direction;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let c = row.dot(dir);
        row.scaled_add(-c, dir);
    }
    Some(out)
}

fn block(
    bundle: &ModelBundle,
    layer: usize,
    x: &Array2<f32>,
    opts: &ForwardOptions,
    independent: bool,
    obs: &mut dyn Observer,
) -> Array2<f32> {
    let spec = &bundle.spec;
    let w = &bundle.layers[layer];
    let attn = if opts.ablation.zero_attention {
        Array2::zeros(x.raw_dim())
    } else {
        let h = norm_rows(spec, x, &w.attn_norm_gain, w.attn_norm_bias.as_ref());
        attention(spec, w, &h, opts.hook, independent)
    };
    match spec.attn_layout {
        AttnLayout::Sequential => {
            let x1 = x + &attn;
            let branch = trimmed(opts, layer, &x1);
            let h2 = norm_rows(spec, branch.as_ref().unwrap_or(&x1), &w.ffn_norm_gain, w.ffn_norm_bias.as_ref());
            obs.ffn_input(layer, &h2);
            x1 + ffn(spec, w, &h2, opts.hook)
        }
        AttnLayout::Parallel => {
            let branch = trimmed(opts, layer, x);
            let h2 = norm_rows(spec, branch.as_ref().unwrap_or(x), &w.ffn_norm_gain, w.ffn_norm_bias.as_ref());
            obs.ffn_input(layer, &h2);
            x + &attn + ffn(spec, w, &h2, opts.hook)
        }
    }
}

/// Embedding rows for `ids`, with learned positions added.
pub fn embed(bundle: &ModelBundle, ids: &[u32]) -> Result<Array2<f32>> {
    let spec = &bundle.spec;
    if ids.len() > spec.max_seq_len {
        return Err(Error::Input(format!("sequence of {} tokens exceeds max_seq_len {}", ids.len(), spec.max_seq_len)));
    }
    let mut x = Array2::zeros((ids.len(), spec.hidden_dim));
    for (t, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= spec.vocab_size {
            return Err(Error::Input(format!("token id {id} at position {t} out of range (vocab {})", spec.vocab_size)));
        }
        x.row_mut(t).assign(&bundle.embed.row(id));
    }
    if spec.position == PositionKind::Learned {
        if let Some(p) = &bundle.pos_embed {
            x += &p.slice(s![..ids.len(), ..]);
        }
    }
    Ok(x)
}

fn run(
    bundle: &ModelBundle,
    x0: Array2<f32>,
    opts: &ForwardOptions,
    independent: bool,
    obs: &mut dyn Observer,
) -> Result<ForwardOutput> {
    let n = bundle.n_layers();
    let last = match opts.stop_after {
        Some(s) if s >= n => return Err(Error::Range { index: s, len: n }),
        Some(s) => s + 1,
        None => n,
    };
    let mut norms = Array2::zeros((last + 1, x0.nrows()));
    norms.row_mut(0).assign(&row_norms(&x0));
    obs.hidden(0, &x0);
    let mut x = x0;
    for l in 0..last {
        x = block(bundle, l, &x, opts, independent, obs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { location: format!("output of layer {l}") });
        }
        norms.row_mut(l + 1).assign(&row_norms(&x));
        obs.hidden(l + 1, &x);
    }
    let logits = if opts.logits && last == n { Some(logits(bundle, &x)) } else { None };
    Ok(ForwardOutput { norms, hidden: x, logits })
}

/// Final norm and unembedding.
pub fn logits(bundle: &ModelBundle, x: &Array2<f32>) -> Array2<f32> {
    let spec = &bundle.spec;
    let h = match &bundle.final_norm_gain {
        Some(g) => norm_rows(spec, x, g, bundle.final_norm_bias.as_ref()),
        None => x.clone(),
    };
    h.dot(&bundle.unembed.t())
}

/// Causal forward pass over one sequence.
pub fn forward(bundle: &ModelBundle, ids: &[u32], opts: &ForwardOptions, obs: &mut dyn Observer) -> Result<ForwardOutput> {
    if ids.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    let x0 = embed(bundle, ids)?;
    run(bundle, x0, opts, false, obs)
}

/// Each row of `x0` run as its own length-1 sequence at position 0.
pub fn forward_single_tokens(
    bundle: &ModelBundle,
    x0: ArrayView2<f32>,
    opts: &ForwardOptions,
    obs: &mut dyn Observer,
) -> Result<ForwardOutput> {
    let mut x = x0.to_owned();
    if bundle.spec.position == PositionKind::Learned {
        if let Some(p) = &bundle.pos_embed {
            x += &p.row(0).insert_axis(Axis(0));
        }
    }
    run(bundle, x, opts, true, obs)
}

/// The FFN branch of a block (pre-FFN norm, then the MLP) on rows of `x`.
pub fn ffn_module(spec: &ModelSpec, w: &LayerWeights, x: &Array2<f32>) -> Array2<f32> {
    let h = norm_rows(spec, x, &w.ffn_norm_gain, w.ffn_norm_bias.as_ref());
    ffn(spec, w, &h, None)
}
