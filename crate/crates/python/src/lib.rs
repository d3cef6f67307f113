//! Python bindings for `slens`.
//!
//! Structured results (defect reports, classifications, quantization rows)
//! come back as JSON strings so they can be loaded with `json.loads`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use slens::checkpoint::TensorStore;
use slens::engine::{forward_trace, perplexity, Ablation, Corpus};
use slens::pipeline::{analyze_model, PipelineConfig};
use slens::quant::{quant_report, QuantConfig};
use slens::signature::{model_distance, model_signature, ModelSignature};
use slens::spectral::LayerClassification;
use slens::synth::{gen_linear_model, gen_planted_model, sample_corpus, PlantedSpec};
use slens::{load_model_bundle, Error, ModelBundle, ModelSpec};

create_exception!(slens_py, ConvergenceError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Convergence { .. } => ConvergenceError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A loaded checkpoint.
#[pyclass(frozen)]
struct Model {
    bundle: ModelBundle,
}

#[pymethods]
impl Model {
    /// Load safetensors files. `spec` is a preset name or a spec JSON path.
    #[staticmethod]
    fn load(paths: Vec<PathBuf>, spec: &str) -> PyResult<Self> {
        let spec = ModelSpec::load(spec).map_err(py_err)?;
        let stores = paths.iter().map(TensorStore::open).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
        let bundle = load_model_bundle(&spec, &stores).map_err(py_err)?;
        Ok(Self { bundle })
    }

    #[getter]
    fn d(&self) -> usize {
        self.bundle.d()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.bundle.n_layers()
    }

    /// Hidden-state norms, one list per trace row (row 0 is the embeddings).
    fn trace_norms(&self, py: Python<'_>, ids: Vec<u32>) -> PyResult<Vec<Vec<f32>>> {
        let trace = py.detach(|| forward_trace(&self.bundle, &ids, &[], &Ablation::none(), None)).map_err(py_err)?;
        Ok(trace.norms.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Defect report, reference and (with a corpus) classification as JSON.
    #[pyo3(signature = (corpus=None, tau=5.0))]
    fn analyze(&self, py: Python<'_>, corpus: Option<Vec<Vec<u32>>>, tau: f64) -> PyResult<String> {
        let corpus = corpus.map(Corpus::from_rows);
        let cfg = PipelineConfig { tau, ..PipelineConfig::default() };
        let a = py.detach(|| analyze_model(&self.bundle, corpus.as_ref(), &cfg)).map_err(py_err)?;
        to_json(&serde_json::json!({
            "report": a.report,
            "reference": a.reference,
            "classification": a.classification,
        }))
    }

    fn perplexity(&self, py: Python<'_>, corpus: Vec<Vec<u32>>) -> PyResult<f64> {
        let corpus = Corpus::from_rows(corpus);
        py.detach(|| perplexity(&self.bundle, &corpus, None, &Ablation::none())).map_err(py_err)
    }

    /// Perplexity rows for quantization configs given as JSON objects.
    fn quant_report(&self, py: Python<'_>, corpus: Vec<Vec<u32>>, configs: Vec<String>) -> PyResult<String> {
        let corpus = Corpus::from_rows(corpus);
        let configs = configs
            .iter()
            .map(|c| serde_json::from_str::<QuantConfig>(c).map_err(|e| PyValueError::new_err(e.to_string())))
            .collect::<PyResult<Vec<_>>>()?;
        let rows = py.detach(|| quant_report(&self.bundle, &corpus, &configs, None)).map_err(py_err)?;
        to_json(&rows)
    }

    #[pyo3(signature = (model_id, corpus=None))]
    fn signature(&self, py: Python<'_>, model_id: &str, corpus: Option<Vec<Vec<u32>>>) -> PyResult<Signature> {
        let corpus = corpus.map(Corpus::from_rows);
        let a = py.detach(|| analyze_model(&self.bundle, corpus.as_ref(), &PipelineConfig::default())).map_err(py_err)?;
        let empty = LayerClassification { explosion_layers: vec![], decay_layers: vec![], evidence: vec![], empty: true };
        Ok(Signature { inner: model_signature(&a.report, a.classification.as_ref().unwrap_or(&empty), model_id) })
    }
}

#[pyclass(frozen)]
struct Signature {
    inner: ModelSignature,
}

#[pymethods]
impl Signature {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ModelSignature::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn model_id(&self) -> String {
        self.inner.model_id.clone()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn preferred_layer(&self) -> Option<usize> {
        self.inner.preferred_layer
    }

    /// Minimum per-layer acute angle in degrees.
    fn distance(&self, other: &Signature) -> PyResult<f64> {
        model_distance(&self.inner, &other.inner).map_err(py_err)
    }
}

/// Acute angle between two lines, in degrees.
#[pyfunction]
fn acute_angle(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    slens::acute_angle(&u, &v).map_err(py_err)
}

/// The `k` largest singular values of a row-major matrix.
#[pyfunction]
fn singular_values(rows: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<f64>> {
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let flat: Vec<f64> = rows.concat();
    let m = ndarray::Array2::from_shape_vec((rows.len(), n), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let t = slens::leading_singular_triplets(m.view(), k, slens::linalg::DEFAULT_TOL, slens::linalg::DEFAULT_MAX_ITER)
        .map_err(py_err)?;
    Ok(t.into_iter().map(|t| t.sigma).collect())
}

/// Write a planted model to `out_dir`; returns the written paths and a
/// sampled corpus.
#[pyfunction]
#[pyo3(signature = (out_dir, d=32, n_layers=6, explosion_layer=2, decay_layer=5, gain_sigma=100.0, decay_lambda=-1.0, seed=0, corpus_rows=16, corpus_len=64))]
#[allow(clippy::too_many_arguments)]
fn planted_model(
    out_dir: PathBuf,
    d: usize,
    n_layers: usize,
    explosion_layer: usize,
    decay_layer: usize,
    gain_sigma: f64,
    decay_lambda: f64,
    seed: u64,
    corpus_rows: usize,
    corpus_len: usize,
) -> PyResult<(Vec<PathBuf>, Vec<Vec<u32>>)> {
    let p = PlantedSpec::new(d, 2 * d, n_layers, 64, explosion_layer, decay_layer, gain_sigma, decay_lambda, seed);
    let m = gen_planted_model(&p, seed).map_err(py_err)?;
    let paths = m.write(&out_dir).map_err(py_err)?;
    let corpus = sample_corpus(m.ground_truth.as_ref().expect("planted"), corpus_rows, corpus_len, seed);
    Ok((paths, corpus.rows))
}

#[pyfunction]
#[pyo3(signature = (out_dir, d=16, n_layers=4, seed=0))]
fn linear_model(out_dir: PathBuf, d: usize, n_layers: usize, seed: u64) -> PyResult<Vec<PathBuf>> {
    gen_linear_model(d, n_layers, seed).map_err(py_err)?.write(&out_dir).map_err(py_err)
}

#[pymodule]
fn slens_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Signature>()?;
    m.add_function(wrap_pyfunction!(acute_angle, m)?)?;
    m.add_function(wrap_pyfunction!(singular_values, m)?)?;
    m.add_function(wrap_pyfunction!(planted_model, m)?)?;
    m.add_function(wrap_pyfunction!(linear_model, m)?)?;
    m.add("ConvergenceError", m.py().get_type::<ConvergenceError>())?;
    Ok(())
}
