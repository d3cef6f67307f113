//! Resolve a spec's tensor-name map against one or more stores and convert
//! every role to `f32` matrices in `out x in` layout.

use ndarray::{s, Array1, Array2};

use super::safetensors::TensorStore;
use super::spec::{role, FfnKind, ModelSpec, PositionKind, QkvLayout};
use crate::error::{Error, Result};

/// Weights of one decoder block. Matrices are `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub layer: usize,
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_value: Array2<f32>,
    pub w_out: Array2<f32>,
    pub b_q: Option<Array1<f32>>,
    pub b_k: Option<Array1<f32>>,
    pub b_v: Option<Array1<f32>>,
    pub b_out: Option<Array1<f32>>,
    pub attn_norm_gain: Array1<f32>,
    pub attn_norm_bias: Option<Array1<f32>>,
    pub ffn_norm_gain: Array1<f32>,
    pub ffn_norm_bias: Option<Array1<f32>>,
    pub w1: Array2<f32>,
    pub w3: Option<Array2<f32>>,
    pub w2: Array2<f32>,
    pub b1: Option<Array1<f32>>,
    pub b3: Option<Array1<f32>>,
    pub b2: Option<Array1<f32>>,
}

impl LayerWeights {
    pub fn d_ff(&self) -> usize {
        self.w1.nrows()
    }
}

/// All weights of a model in working precision.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    /// `vocab x d`.
    pub embed: Array2<f32>,
    /// `max_seq_len x d` when positions are learned.
    pub pos_embed: Option<Array2<f32>>,
    pub final_norm_gain: Option<Array1<f32>>,
    pub final_norm_bias: Option<Array1<f32>>,
    /// `vocab x d`.
    pub unembed: Array2<f32>,
    pub layers: Vec<LayerWeights>,
}

impl ModelBundle {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d(&self) -> usize {
        self.spec.hidden_dim
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        self.layers.get(layer).ok_or(Error::Range { index: layer, len: self.layers.len() })
    }

    pub fn load(spec: &ModelSpec, stores: &[TensorStore]) -> Result<Self> {
        load_model_bundle(spec, stores)
    }
}

struct Resolver<'a> {
    spec: &'a ModelSpec,
    stores: &'a [TensorStore],
    missing: Vec<String>,
}

impl<'a> Resolver<'a> {
    fn find(&self, role: &str, layer: Option<usize>) -> Option<(String, &'a TensorStore)> {
        let candidates = self.spec.candidates(role, layer)?;
        for name in &candidates {
            if let Some(store) = self.stores.iter().find(|s| s.contains(name)) {
                return Some((name.clone(), store));
            }
        }
        None
    }

    fn missing_name(&self, role: &str, layer: Option<usize>) -> String {
        match self.spec.candidates(role, layer) {
            Some(c) => c.join(" | "),
            None => match layer {
                Some(l) => format!("<no pattern for role `{role}`> (layer {l})"),
                None => format!("<no pattern for role `{role}`>"),
            },
        }
    }

    /// Raw values and shape for a role, or record it as missing.
    fn raw(&mut self, role: &str, layer: Option<usize>, required: bool) -> Result<Option<(String, Vec<usize>, Vec<f32>)>> {
        if !required && !self.spec.has_role(role) {
            return Ok(None);
        }
        match self.find(role, layer) {
            Some((name, store)) => {
                let view = store.get(&name).expect("found");
                Ok(Some((name.clone(), view.shape().to_vec(), view.to_f32()?)))
            }
            None => {
                let name = self.missing_name(role, layer);
                self.missing.push(name);
                Ok(None)
            }
        }
    }

    fn matrix(&mut self, role: &str, layer: Option<usize>, required: bool) -> Result<Option<(String, Array2<f32>)>> {
        let Some((name, shape, data)) = self.raw(role, layer, required)? else { return Ok(None) };
        if shape.len() != 2 {
            return Err(Error::Shape(format!("`{name}` has shape {shape:?}, expected a matrix")));
        }
        let m = Array2::from_shape_vec((shape[0], shape[1]), data).expect("size validated by parser");
        let m = if self.spec.is_transposed(role) { m.reversed_axes().as_standard_layout().into_owned() } else { m };
        Ok(Some((name, m)))
    }

    fn vector(&mut self, role: &str, layer: Option<usize>, required: bool) -> Result<Option<(String, Array1<f32>)>> {
        let Some((name, shape, data)) = self.raw(role, layer, required)? else { return Ok(None) };
        if shape.len() != 1 {
            return Err(Error::Shape(format!("`{name}` has shape {shape:?}, expected a vector")));
        }
        Ok(Some((name, Array1::from_vec(data))))
    }
}

fn expect_shape(name: &str, m: &Array2<f32>, rows: usize, cols: usize) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(Error::Shape(format!("`{name}` is {:?}, expected ({rows}, {cols})", m.dim())));
    }
    Ok(())
}

fn expect_len(name: &str, v: &Array1<f32>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Shape(format!("`{name}` has length {}, expected {len}", v.len())));
    }
    Ok(())
}

fn checked_vec(r: Option<(String, Array1<f32>)>, len: usize) -> Result<Option<Array1<f32>>> {
    match r {
        Some((name, v)) => {
            expect_len(&name, &v, len)?;
            Ok(Some(v))
        }
        None => Ok(None),
    }
}

type Split<T> = (T, T, T);

/// Split a fused `[*, d]` projection into q, k, v row blocks.
fn split_qkv_rows(spec: &ModelSpec, m: &Array2<f32>) -> Split<Array2<f32>> {
    let hd = spec.head_dim();
    let (qd, kvd) = (spec.q_dim(), spec.kv_dim());
    match spec.qkv_layout {
        QkvLayout::Concat => (
            m.slice(s![..qd, ..]).to_owned(),
            m.slice(s![qd..qd + kvd, ..]).to_owned(),
            m.slice(s![qd + kvd.., ..]).to_owned(),
        ),
        QkvLayout::PerHead => {
            let cols = m.ncols();
            let mut q = Array2::zeros((qd, cols));
            let mut k = Array2::zeros((kvd, cols));
            let mut v = Array2::zeros((kvd, cols));
            for h in 0..spec.n_heads {
                let base = 3 * h * hd;
                q.slice_mut(s![h * hd..(h + 1) * hd, ..]).assign(&m.slice(s![base..base + hd, ..]));
                k.slice_mut(s![h * hd..(h + 1) * hd, ..]).assign(&m.slice(s![base + hd..base + 2 * hd, ..]));
                v.slice_mut(s![h * hd..(h + 1) * hd, ..]).assign(&m.slice(s![base + 2 * hd..base + 3 * hd, ..]));
            }
            (q, k, v)
        }
    }
}

fn split_qkv_bias(spec: &ModelSpec, b: &Array1<f32>) -> Split<Array1<f32>> {
    let col = b.view().insert_axis(ndarray::Axis(1)).to_owned();
    let (q, k, v) = split_qkv_rows(spec, &col);
    (q.column(0).to_owned(), k.column(0).to_owned(), v.column(0).to_owned())
}

/// Resolve every role of `spec` across the union of `stores`.
///
/// Stores are searched in order, so when the same name appears in several
/// shards the first one wins. All missing names are collected before the
/// resolution error is returned.
pub fn load_model_bundle(spec: &ModelSpec, stores: &[TensorStore]) -> Result<ModelBundle> {
    spec.validate()?;
    if spec.has_role(role::QKV) && spec.qkv_layout == QkvLayout::PerHead && spec.n_heads != spec.n_kv_heads {
        return Err(Error::Config("per-head fused qkv requires n_kv_heads == n_heads".into()));
    }
    let d = spec.hidden_dim;
    let mut r = Resolver { spec, stores, missing: Vec::new() };

    let embed = r.matrix(role::EMBED, None, true)?;
    let unembed = if spec.tie_embeddings && !spec.has_role(role::LM_HEAD) {
        None
    } else {
        r.matrix(role::LM_HEAD, None, true)?
    };
    let pos_embed = if spec.position == PositionKind::Learned { r.matrix(role::POS_EMBED, None, true)? } else { None };
    let final_norm_gain = r.vector(role::FINAL_NORM, None, false)?;
    let final_norm_bias = r.vector(role::FINAL_NORM_BIAS, None, false)?;

    let fused = spec.has_role(role::QKV);
    let mut raw_layers = Vec::with_capacity(spec.n_layers);
    for l in 0..spec.n_layers {
        let at = Some(l);
        let (q, k, v, bq, bk, bv) = if fused {
            let qkv = r.matrix(role::QKV, at, true)?;
            let bias = r.vector(role::QKV_BIAS, at, false)?;
            (qkv, None, None, bias, None, None)
        } else {
            (
                r.matrix(role::Q, at, true)?,
                r.matrix(role::K, at, true)?,
                r.matrix(role::V, at, true)?,
                r.vector(role::Q_BIAS, at, false)?,
                r.vector(role::K_BIAS, at, false)?,
                r.vector(role::V_BIAS, at, false)?,
            )
        };
        let o = r.matrix(role::O, at, true)?;
        let bo = r.vector(role::O_BIAS, at, false)?;
        let an = r.vector(role::ATTN_NORM, at, true)?;
        let anb = r.vector(role::ATTN_NORM_BIAS, at, false)?;
        let fnn = r.vector(role::FFN_NORM, at, true)?;
        let fnb = r.vector(role::FFN_NORM_BIAS, at, false)?;
        let w1 = r.matrix(role::W1, at, true)?;
        let w3 = if spec.ffn_kind == FfnKind::GatedSilu { r.matrix(role::W3, at, true)? } else { None };
        let w2 = r.matrix(role::W2, at, true)?;
        let b1 = r.vector(role::B1, at, false)?;
        let b3 = if spec.ffn_kind == FfnKind::GatedSilu { r.vector(role::B3, at, false)? } else { None };
        let b2 = r.vector(role::B2, at, false)?;
        raw_layers.push((q, k, v, bq, bk, bv, o, bo, an, anb, fnn, fnb, w1, w3, w2, b1, b3, b2));
    }

    if !r.missing.is_empty() {
        return Err(Error::Resolution(r.missing));
    }

    let (embed_name, embed) = embed.expect("resolved");
    expect_shape(&embed_name, &embed, spec.vocab_size, d)?;
    let unembed = match unembed {
        Some((name, m)) => {
            expect_shape(&name, &m, spec.vocab_size, d)?;
            m
        }
        None => embed.clone(),
    };
    let pos_embed = match pos_embed {
        Some((name, m)) => {
            if m.ncols() != d || m.nrows() < spec.max_seq_len {
                return Err(Error::Shape(format!(
                    "`{name}` is {:?}, expected at least ({}, {d})",
                    m.dim(),
                    spec.max_seq_len
                )));
            }
            Some(m)
        }
        None => None,
    };
    let final_norm_gain = checked_vec(final_norm_gain, d)?;
    let final_norm_bias = checked_vec(final_norm_bias, d)?;

    let (qd, kvd) = (spec.q_dim(), spec.kv_dim());
    let mut layers = Vec::with_capacity(spec.n_layers);
    for (l, raw) in raw_layers.into_iter().enumerate() {
        let (q, k, v, bq, bk, bv, o, bo, an, anb, fnn, fnb, w1, w3, w2, b1, b3, b2) = raw;
        let (w_q, w_k, w_value, b_q, b_k, b_v) = if fused {
            let (name, m) = q.expect("resolved");
            expect_shape(&name, &m, qd + 2 * kvd, d)?;
            let (wq, wk, wv) = split_qkv_rows(spec, &m);
            let (bq, bk, bv) = match bq {
                Some((bname, b)) => {
                    expect_len(&bname, &b, qd + 2 * kvd)?;
                    let (a, b2_, c) = split_qkv_bias(spec, &b);
                    (Some(a), Some(b2_), Some(c))
                }
                None => (None, None, None),
            };
            (wq, wk, wv, bq, bk, bv)
        } else {
            let (nq, wq) = q.expect("resolved");
            let (nk, wk) = k.expect("resolved");
            let (nv, wv) = v.expect("resolved");
            expect_shape(&nq, &wq, qd, d)?;
            expect_shape(&nk, &wk, kvd, d)?;
            expect_shape(&nv, &wv, kvd, d)?;
            (wq, wk, wv, checked_vec(bq, qd)?, checked_vec(bk, kvd)?, checked_vec(bv, kvd)?)
        };
        let (no, w_out) = o.expect("resolved");
        expect_shape(&no, &w_out, d, qd)?;
        let (n1, w1) = w1.expect("resolved");
        let d_ff = w1.nrows();
        expect_shape(&n1, &w1, d_ff, d)?;
        let w3 = match w3 {
            Some((n3, m)) => {
                expect_shape(&n3, &m, d_ff, d)?;
                Some(m)
            }
            None => None,
        };
        let (n2, w2) = w2.expect("resolved");
        expect_shape(&n2, &w2, d, d_ff)?;
        layers.push(LayerWeights {
            layer: l,
            w_q,
            w_k,
            w_value,
            w_out,
            b_q,
            b_k,
            b_v,
            b_out: checked_vec(bo, d)?,
            attn_norm_gain: checked_vec(an, d)?.expect("resolved"),
            attn_norm_bias: checked_vec(anb, d)?,
            ffn_norm_gain: checked_vec(fnn, d)?.expect("resolved"),
            ffn_norm_bias: checked_vec(fnb, d)?,
            w1,
            w3,
            w2,
            b1: checked_vec(b1, d_ff)?,
            b3: checked_vec(b3, d_ff)?,
            b2: checked_vec(b2, d)?,
        });
    }

    Ok(ModelBundle { spec: spec.clone(), embed, pos_embed, final_norm_gain, final_norm_bias, unembed, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::SafetensorsWriter;
    use std::collections::BTreeMap;

    fn tiny_spec(n_layers: usize, names: &[(&str, &str)]) -> ModelSpec {
        ModelSpec {
            hidden_dim: 4,
            n_layers,
            n_heads: 2,
            n_kv_heads: 1,
            norm_kind: crate::checkpoint::NormKind::RmsNorm,
            ffn_kind: FfnKind::GatedSilu,
            attn_layout: crate::checkpoint::AttnLayout::Sequential,
            rope_theta: 10000.0,
            vocab_size: 3,
            names: names.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect::<BTreeMap<_, _>>(),
            head_dim: None,
            norm_eps: 1e-5,
            position: PositionKind::Rope,
            rotary_pct: 1.0,
            max_seq_len: 16,
            tie_embeddings: false,
            activation: None,
            transposed_roles: vec![],
            qkv_layout: QkvLayout::Concat,
            layernorm_centering: true,
        }
    }

    fn ramp(n: usize) -> Vec<f32> {
        (0..n).map(|i| i as f32).collect()
    }

    #[test]
    fn zero_layers() {
        let spec = tiny_spec(0, &[("embed", "e"), ("lm_head", "u")]);
        let mut w = SafetensorsWriter::new();
        w.add_f32("e", vec![3, 4], &ramp(12)).unwrap();
        w.add_f32("u", vec![3, 4], &ramp(12)).unwrap();
        let store = TensorStore::parse(w.finish()).unwrap();
        let b = load_model_bundle(&spec, &[store]).unwrap();
        assert!(b.layers.is_empty());
        assert!(matches!(b.layer(0), Err(Error::Range { index: 0, len: 0 })));
    }

    #[test]
    fn missing_roles_are_listed() {
        let names = [
            ("embed", "e"),
            ("lm_head", "u"),
            ("attn_norm", "l{L}.an"),
            ("ffn_norm", "l{L}.fn"),
            ("q_proj", "l{L}.q"),
            ("k_proj", "l{L}.k"),
            ("v_proj", "l{L}.v"),
            ("o_proj", "l{L}.o"),
            ("w1", "l{L}.w1"),
            ("w3", "l{L}.w3"),
            ("w2", "l{L}.w2"),
        ];
        let spec = tiny_spec(1, &names);
        let mut w = SafetensorsWriter::new();
        w.add_f32("e", vec![3, 4], &ramp(12)).unwrap();
        w.add_f32("u", vec![3, 4], &ramp(12)).unwrap();
        w.add_f32("l0.an", vec![4], &[1.0; 4]).unwrap();
        w.add_f32("l0.fn", vec![4], &[1.0; 4]).unwrap();
        w.add_f32("l0.q", vec![4, 4], &ramp(16)).unwrap();
        w.add_f32("l0.k", vec![2, 4], &ramp(8)).unwrap();
        w.add_f32("l0.v", vec![2, 4], &ramp(8)).unwrap();
        w.add_f32("l0.o", vec![4, 4], &ramp(16)).unwrap();
        w.add_f32("l0.w1", vec![6, 4], &ramp(24)).unwrap();
        w.add_f32("l0.w2", vec![4, 6], &ramp(24)).unwrap();
        // Split across two shards to exercise the union.
        let mut shard2 = SafetensorsWriter::new();
        shard2.add_f32("unused", vec![1], &[0.0]).unwrap();
        let stores = [TensorStore::parse(w.finish()).unwrap(), TensorStore::parse(shard2.finish()).unwrap()];
        match load_model_bundle(&spec, &stores) {
            Err(Error::Resolution(names)) => assert_eq!(names, vec!["l0.w3".to_string()]),
            other => panic!("expected resolution error, got {other:?}"),
        }

        let mut gelu = spec.clone();
        gelu.ffn_kind = FfnKind::GeluMlp;
        let b = load_model_bundle(&gelu, &stores).unwrap();
        assert!(b.layers[0].w3.is_none());
        assert_eq!(b.layers[0].d_ff(), 6);
    }

    #[test]
    fn fused_per_head_split() {
        let mut spec = tiny_spec(0, &[]);
        spec.n_kv_heads = 2;
        spec.qkv_layout = QkvLayout::PerHead;
        let m = Array2::from_shape_vec((12, 1), ramp(12)).unwrap();
        let (q, k, v) = split_qkv_rows(&spec, &m);
        assert_eq!(q.column(0).to_vec(), vec![0.0, 1.0, 6.0, 7.0]);
        assert_eq!(k.column(0).to_vec(), vec![2.0, 3.0, 8.0, 9.0]);
        assert_eq!(v.column(0).to_vec(), vec![4.0, 5.0, 10.0, 11.0]);
        spec.qkv_layout = QkvLayout::Concat;
        let (q, _, v) = split_qkv_rows(&spec, &m);
        assert_eq!(q.column(0).to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(v.column(0).to_vec(), vec![8.0, 9.0, 10.0, 11.0]);
    }
}
