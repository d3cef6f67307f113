//! Model signatures built from per-layer defect directions, and the
//! min-angle distance between them.

use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{acute_angle, canonicalize_sign};
use crate::spectral::{DefectReport, LayerClassification};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSignature {
    pub model_id: String,
    pub d: usize,
    /// First explosion layer, else first decay layer.
    pub preferred_layer: Option<usize>,
    /// Unit, sign-canonical, one per layer in order.
    pub directions: Vec<Array1<f64>>,
}

impl ModelSignature {
    pub fn n_layers(&self) -> usize {
        self.directions.len()
    }

    pub fn preferred_direction(&self) -> Option<&Array1<f64>> {
        self.preferred_layer.and_then(|l| self.directions.get(l))
    }

    pub fn to_file(&self) -> SignatureFile {
        let directions = self
            .directions
            .iter()
            .map(|v| {
                let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
                B64.encode(bytes)
            })
            .collect();
        SignatureFile {
            model_id: self.model_id.clone(),
            d: self.d,
            n_layers: self.n_layers(),
            preferred_layer: self.preferred_layer,
            directions,
        }
    }

    pub fn from_file(f: &SignatureFile) -> Result<Self> {
        if f.directions.len() != f.n_layers {
            return Err(Error::Input(format!("n_layers = {} but {} directions", f.n_layers, f.directions.len())));
        }
        let mut directions = Vec::with_capacity(f.n_layers);
        for (l, s) in f.directions.iter().enumerate() {
            let bytes = B64.decode(s).map_err(|e| Error::Input(format!("layer {l}: {e}")))?;
            if bytes.len() != 4 * f.d {
                return Err(Error::Input(format!("layer {l}: {} bytes for d = {}", bytes.len(), f.d)));
            }
            let v: Array1<f64> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            directions.push(v);
        }
        if let Some(p) = f.preferred_layer {
            if p >= f.n_layers {
                return Err(Error::Range { index: p, len: f.n_layers });
            }
        }
        Ok(Self { model_id: f.model_id.clone(), d: f.d, preferred_layer: f.preferred_layer, directions })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(&serde_json::from_str(&text)?)
    }
}

/// On-disk form: directions are base64 of little-endian fp32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureFile {
    pub model_id: String,
    pub d: usize,
    pub n_layers: usize,
    pub preferred_layer: Option<usize>,
    pub directions: Vec<String>,
}

pub fn model_signature(report: &DefectReport, classification: &LayerClassification, id: &str) -> ModelSignature {
    let directions = report
        .records
        .iter()
        .map(|r| {
            let mut v = r.defect_direction.clone();
            let n = v.dot(&v).sqrt();
            if n > 0.0 {
                v /= n;
            }
            canonicalize_sign(&mut v);
            v
        })
        .collect();
    let preferred_layer = classification
        .explosion_layers
        .first()
        .or(classification.decay_layers.first())
        .and_then(|&l| report.records.iter().position(|r| r.layer == l));
    ModelSignature { model_id: id.to_string(), d: report.d, preferred_layer, directions }
}

/// Minimum acute angle over index-aligned layers, in degrees.
pub fn model_distance(a: &ModelSignature, b: &ModelSignature) -> Result<f64> {
    if a.d != b.d {
        return Err(Error::Incomparable(format!(
            "{} has d = {} and {} has d = {}",
            a.model_id, a.d, b.model_id, b.d
        )));
    }
    let n = a.n_layers().min(b.n_layers());
    if n == 0 {
        return Err(Error::Incomparable(format!("{} or {} has no layers", a.model_id, b.model_id)));
    }
    if a.n_layers() != b.n_layers() {
        log::warn!(
            "{} has {} layers and {} has {}; comparing the first {n}",
            a.model_id,
            a.n_layers(),
            b.model_id,
            b.n_layers()
        );
    }
    let mut best = f64::INFINITY;
    for l in 0..n {
        let ang = acute_angle(a.directions[l].as_slice().unwrap(), b.directions[l].as_slice().unwrap())?;
        best = best.min(ang);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub labels: Vec<String>,
    /// `None` where the pair is incomparable.
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn distance_matrix(sigs: &[ModelSignature]) -> DistanceMatrix {
    let n = sigs.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let dists: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| match model_distance(&sigs[i], &sigs[j]) {
            Ok(d) => Some(d),
            Err(e) => {
                log::warn!("{e}");
                None
            }
        })
        .collect();
    let mut values = vec![vec![Some(0.0); n]; n];
    for (&(i, j), d) in pairs.iter().zip(dists) {
        values[i][j] = d;
        values[j][i] = d;
    }
    DistanceMatrix { labels: sigs.iter().map(|s| s.model_id.clone()).collect(), values }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i][j]
    }

    /// Header row and column of model ids; empty cells for incomparable pairs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            out.push_str(&csv_field(l));
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v:.4}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Text heat table: darker shade for smaller angles.
    pub fn heat_table(&self) -> String {
        const SHADES: [char; 5] = ['█', '▓', '▒', '░', ' '];
        let w = self.labels.iter().map(|l| l.chars().count()).max().unwrap_or(0);
        let mut out = String::new();
        for (i, (l, row)) in self.labels.iter().zip(&self.values).enumerate() {
            let _ = write!(out, "{l:>w$} [{i:>2}] ");
            for v in row {
                let cell = match v {
                    Some(a) => {
                        let k = ((a / 90.0) * SHADES.len() as f64).floor() as usize;
                        let c = SHADES[k.min(SHADES.len() - 1)];
                        format!("{c}{c}{:>3.0}", a)
                    }
                    None => "  n/a".to_string(),
                };
                out.push_str(&cell);
                out.push(' ');
            }
            out.push('\n');
        }
        out
    }

    /// Single-linkage groups: pairs within `threshold` degrees are joined.
    /// Groups are ordered by their first member.
    pub fn clusters(&self, threshold: f64) -> Vec<Vec<usize>> {
        let n = self.labels.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for i in 0..n {
            for j in i + 1..n {
                if self.values[i][j].is_some_and(|d| d <= threshold) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut root_of: Vec<Option<usize>> = vec![None; n];
        for i in 0..n {
            let r = find(&mut parent, i);
            match root_of[r] {
                Some(g) => groups[g].push(i),
                None => {
                    root_of[r] = Some(groups.len());
                    groups.push(vec![i]);
                }
            }
        }
        groups
    }
}
