//! `slens` command line. Every subcommand writes its artifacts and a
//! `manifest.json` into `--out`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::checkpoint::{load_model_bundle, ModelBundle, ModelSpec, TensorStore};
use crate::engine::{
    attention_ablation_scan, empirical_high_norm_direction, forward_trace, read_corpus, subspace_coefficient,
    trim_and_trace, vocab_initial_scan, write_id_file, Ablation, Corpus, DirectionOptions, Threshold, Tokenizer,
};
use crate::error::{Error, Result};
use crate::linalg::IterConfig;
use crate::linearize::{linearize_layer, FitConfig, FitScale};
use crate::pipeline::{analyze_model, ModelAnalysis, PipelineConfig};
use crate::quant::{quant_report, report_csv, report_markdown, QuantConfig, QuantScheme};
use crate::signature::{distance_matrix, model_signature, ModelSignature};
use crate::spectral::{decay_eigen_analysis, explosion_subspace, ffn_response_spectrum, strongest_layer};
use crate::synth::{gen_linear_model_scaled, gen_planted_model, sample_corpus, PlantedSpec};

#[derive(Parser, Debug, Serialize)]
#[command(name = "slens", version, about = "Singular-defect analysis of decoder-only checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 1 gives the canonical bit-exact output.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ModelArgs {
    /// Safetensors files, or directories holding them (and spec.json).
    #[arg(long, num_args = 1.., required = true)]
    model: Vec<PathBuf>,
    /// Preset name or spec JSON path; defaults to spec.json next to the model.
    #[arg(long)]
    spec: Option<String>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct CorpusArgs {
    /// Text file (one row per line) or token id file.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// tokenizer.json, or a directory with vocab.json and merges.txt.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Maximum corpus rows.
    #[arg(long)]
    rows: Option<usize>,
    /// Token id prepended to every row.
    #[arg(long)]
    bos: Option<u32>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct InputArgs {
    /// Text to trace (needs a tokenizer).
    #[arg(long, conflicts_with = "ids")]
    text: Option<String>,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',')]
    ids: Option<Vec<u32>>,
    /// Corpus row used when neither --text nor --ids is given.
    #[arg(long, default_value_t = 0)]
    row: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
struct FitArgs {
    /// Gaussian samples for the FFN fit (default max(4d, 4096)).
    #[arg(long)]
    fit_samples: Option<usize>,
    /// `auto` or a fixed input norm.
    #[arg(long, default_value = "auto")]
    fit_scale: String,
    #[arg(long, default_value_t = 1e-6)]
    fit_ridge: f64,
    /// Use the median FFN-input norm per layer over the corpus as the scale.
    #[arg(long)]
    fit_calibrate: bool,
    #[arg(long, default_value_t = crate::linalg::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = crate::linalg::DEFAULT_MAX_ITER)]
    max_iter: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
struct DirArgs {
    /// `auto` (half the maximum norm) or a norm value.
    #[arg(long, default_value = "auto")]
    threshold: String,
    #[arg(long, default_value_t = 2000)]
    max_pairwise: usize,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Hidden-state norms of every token at every layer.
    TraceNorms {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Hidden states to save, as `row:token` pairs.
        #[arg(long, value_delimiter = ',')]
        capture: Vec<String>,
    },
    /// Mean high-norm direction and mean pairwise angle over a corpus.
    EmpiricalDir {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        dir: DirArgs,
    },
    /// Angle between each layer's defect direction and the reference.
    DefectProfile {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        dir: DirArgs,
    },
    /// Eigenpair of each layer's residual map nearest the reference.
    DecayEigen {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        dir: DirArgs,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// FFN response along the explosion subspace versus random directions.
    ExplosionScan {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Defaults to the layer with the largest top singular value.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 100)]
        random: usize,
    },
    /// Per-token norms after a layer with attention removed.
    AblateAttn {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        layer: usize,
    },
    /// Norm of every vocabulary entry as a one-token input.
    VocabScan {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 1000)]
        random: usize,
    },
    /// Remove the explosion subspace from a layer's FFN input.
    Trim {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Defaults to the layer with the largest top singular value.
        #[arg(long)]
        layer: Option<usize>,
        /// Greedy tokens to generate with the trim in place.
        #[arg(long, default_value_t = 0)]
        generate: usize,
    },
    /// Explosion and decay layers.
    Classify {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        dir: DirArgs,
        #[arg(long, default_value_t = 5.0)]
        tau: f64,
        #[arg(long, default_value_t = 8)]
        trace_rows: usize,
    },
    /// Model signature from weights (preferred layer needs a corpus).
    Signature {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        dir: DirArgs,
        #[arg(long, default_value_t = 5.0)]
        tau: f64,
        /// Model label; defaults to the first model path's stem.
        #[arg(long)]
        id: Option<String>,
    },
    /// Distance matrix between signature files.
    Compare {
        #[arg(required = true)]
        signatures: Vec<PathBuf>,
        /// Group models whose distance is at most this many degrees.
        #[arg(long)]
        cluster_threshold: Option<f64>,
    },
    /// Perplexity under fake-quantization configurations.
    QuantReport {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        dir: DirArgs,
        /// JSON file with one config or a list; defaults to FP, RTN and SmoothQuant at 8 bits.
        #[arg(long)]
        quant_config: Option<PathBuf>,
        /// Calibration corpus for SmoothQuant (defaults to --corpus).
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Add rows exempting W2 at classified explosion and decay layers.
        #[arg(long)]
        exempt_defects: bool,
        #[arg(long, default_value_t = 5.0)]
        tau: f64,
    },
    /// Generate a planted synthetic model with ground truth and a corpus.
    ToyGen {
        #[arg(long, default_value_t = 32)]
        d: usize,
        /// Defaults to 2d.
        #[arg(long)]
        d_ff: Option<usize>,
        #[arg(long, default_value_t = 6)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 2)]
        explosion: usize,
        #[arg(long, default_value_t = 5)]
        decay: usize,
        #[arg(long, default_value_t = 100.0)]
        gain: f64,
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        lambda: f64,
        /// Seed for the planted directions; defaults to --seed.
        #[arg(long)]
        direction_seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        corpus_rows: usize,
        #[arg(long, default_value_t = 128)]
        corpus_len: usize,
    },
    /// Generate a model whose blocks are exactly linear on single tokens.
    LinearToyGen {
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        /// Multiplier on all block weights; 0 gives identity layers.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TraceNorms { .. } => "trace-norms",
            Command::EmpiricalDir { .. } => "empirical-dir",
            Command::DefectProfile { .. } => "defect-profile",
            Command::DecayEigen { .. } => "decay-eigen",
            Command::ExplosionScan { .. } => "explosion-scan",
            Command::AblateAttn { .. } => "ablate-attn",
            Command::VocabScan { .. } => "vocab-scan",
            Command::Trim { .. } => "trim",
            Command::Classify { .. } => "classify",
            Command::Signature { .. } => "signature",
            Command::Compare { .. } => "compare",
            Command::QuantReport { .. } => "quant-report",
            Command::ToyGen { .. } => "toy-gen",
            Command::LinearToyGen { .. } => "linear-toy-gen",
        }
    }
}

/// Written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub model_paths: Vec<PathBuf>,
    pub spec: Option<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: Option<usize>,
    pub tool_version: String,
    pub outputs: Vec<PathBuf>,
}

struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn record(&mut self, paths: Vec<PathBuf>) {
        self.written.extend(paths);
    }
}

fn model_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "safetensors"))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(Error::Input(format!("no .safetensors files in {}", p.display())));
            }
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn load_spec(args: &ModelArgs) -> Result<ModelSpec> {
    if let Some(s) = &args.spec {
        return ModelSpec::load(s);
    }
    for p in &args.model {
        let dir = if p.is_dir() { p.clone() } else { p.parent().map(Path::to_path_buf).unwrap_or_default() };
        let candidate = dir.join("spec.json");
        if candidate.is_file() {
            return ModelSpec::from_file(candidate);
        }
    }
    Err(Error::Input("no --spec given and no spec.json next to the model".into()))
}

fn load_model(args: &ModelArgs) -> Result<ModelBundle> {
    let spec = load_spec(args)?;
    let stores = model_files(&args.model)?.iter().map(TensorStore::open).collect::<Result<Vec<_>>>()?;
    load_model_bundle(&spec, &stores)
}

fn load_tokenizer(args: &CorpusArgs) -> Result<Option<Tokenizer>> {
    match &args.tokenizer {
        None => Ok(None),
        Some(p) if p.is_dir() => Tokenizer::from_dir(p).map(Some),
        Some(p) => Tokenizer::from_tokenizer_json(p).map(Some),
    }
}

fn load_corpus(args: &CorpusArgs, tok: Option<&Tokenizer>) -> Result<Option<Corpus>> {
    args.corpus.as_ref().map(|p| read_corpus(p, tok, args.rows, args.bos)).transpose()
}

fn require_corpus(args: &CorpusArgs, tok: Option<&Tokenizer>) -> Result<Corpus> {
    load_corpus(args, tok)?.ok_or_else(|| Error::Input("--corpus is required".into()))
}

fn input_ids(input: &InputArgs, corpus: &CorpusArgs, tok: Option<&Tokenizer>) -> Result<Vec<u32>> {
    let mut ids = if let Some(ids) = &input.ids {
        ids.clone()
    } else if let Some(text) = &input.text {
        let t = tok.ok_or_else(|| Error::Input("--text needs --tokenizer".into()))?;
        t.encode(text)
    } else {
        let c = require_corpus(corpus, tok).map_err(|_| Error::Input("give --ids, --text or --corpus".into()))?;
        c.rows.get(input.row).cloned().ok_or(Error::Range { index: input.row, len: c.rows.len() })?
    };
    if input.ids.is_some() || input.text.is_some() {
        if let Some(b) = corpus.bos {
            ids.insert(0, b);
        }
    }
    if ids.is_empty() {
        return Err(Error::Input("input has no tokens".into()));
    }
    Ok(ids)
}

fn parse_threshold(s: &str) -> Result<Threshold> {
    if s == "auto" {
        return Ok(Threshold::Auto);
    }
    s.parse::<f32>()
        .ok()
        .filter(|v| v.is_finite() && *v >= 0.0)
        .map(Threshold::Value)
        .ok_or_else(|| Error::Config(format!("threshold must be `auto` or a non-negative number, got {s}")))
}

fn direction_options(dir: &DirArgs, rows: Option<usize>, seed: u64) -> Result<DirectionOptions> {
    Ok(DirectionOptions { threshold: parse_threshold(&dir.threshold)?, max_rows: rows, max_pairwise: dir.max_pairwise, seed })
}

fn fit_config(fit: &FitArgs, seed: u64, bundle: &ModelBundle, corpus: Option<&Corpus>) -> Result<FitConfig> {
    let scale = if fit.fit_scale == "auto" {
        FitScale::Auto
    } else {
        let v: f64 = fit
            .fit_scale
            .parse()
            .map_err(|_| Error::Config(format!("--fit-scale must be `auto` or a number, got {}", fit.fit_scale)))?;
        if !(v > 0.0) {
            return Err(Error::Config("--fit-scale must be positive".into()));
        }
        FitScale::Fixed(v)
    };
    let calibrated_scales = if fit.fit_calibrate {
        let c = corpus.ok_or_else(|| Error::Input("--fit-calibrate needs --corpus".into()))?;
        Some(median_ffn_input_norms(bundle, c)?)
    } else {
        None
    };
    Ok(FitConfig { samples: fit.fit_samples, scale, ridge_factor: fit.fit_ridge, seed, calibrated_scales })
}

struct FfnNorms {
    norms: Vec<Vec<f64>>,
}

impl crate::engine::Observer for FfnNorms {
    fn ffn_input(&mut self, layer: usize, x: &ndarray::Array2<f32>) {
        for r in x.rows() {
            self.norms[layer].push(r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt());
        }
    }
}

/// Median post-norm FFN-input norm per layer over up to 8 corpus rows.
fn median_ffn_input_norms(bundle: &ModelBundle, corpus: &Corpus) -> Result<Vec<f64>> {
    let mut obs = FfnNorms { norms: vec![Vec::new(); bundle.n_layers()] };
    let ablation = Ablation::none();
    let opts = crate::engine::ForwardOptions::new(&ablation);
    for r in corpus.rows.iter().take(8) {
        let r = &r[..r.len().min(bundle.spec.max_seq_len)];
        crate::engine::forward(bundle, r, &opts, &mut obs)?;
    }
    Ok(obs
        .norms
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v.get(v.len() / 2).copied().unwrap_or(0.0)
        })
        .collect())
}

fn pipeline_config(fit: &FitArgs, dir: &DirArgs, corpus: &CorpusArgs, seed: u64, bundle: &ModelBundle, c: Option<&Corpus>, tau: f64) -> Result<PipelineConfig> {
    Ok(PipelineConfig {
        fit: fit_config(fit, seed, bundle, c)?,
        iter: IterConfig { tol: fit.tol, max_iter: fit.max_iter },
        tau,
        direction: direction_options(dir, corpus.rows, seed)?,
        trace_rows: 8,
    })
}

fn csv_line(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

fn token_label(tok: Option<&Tokenizer>, id: u32) -> String {
    let raw = tok.map(|t| t.token_string(id)).unwrap_or_default();
    if raw.contains([',', '"', '\n']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw
    }
}

fn default_layer(bundle: &ModelBundle, fit: &FitArgs, seed: u64, corpus: Option<&Corpus>) -> Result<usize> {
    let cfg = fit_config(fit, seed, bundle, corpus)?;
    let lins = crate::linearize::linearize_model(bundle, None, &cfg)?;
    let report = crate::spectral::analyze_layers(&lins, None, IterConfig { tol: fit.tol, max_iter: fit.max_iter })?;
    strongest_layer(&report).map(|i| report.records[i].layer).ok_or_else(|| Error::Input("model has no layers".into()))
}

fn profile_csv(a: &ModelAnalysis) -> String {
    let mut s = String::from("layer,angle_deg,sigma1,degenerate,explosion_sigma,self_rayleigh,f1_fit_error,bias_ignored\n");
    for r in &a.report.records {
        s.push_str(&csv_line(&[
            r.layer.to_string(),
            r.angle_to_reference.map(|x| format!("{x:.6}")).unwrap_or_default(),
            format!("{:.6}", r.sigma1),
            r.degenerate.to_string(),
            format!("{:.6}", r.explosion_sigma),
            format!("{:.6}", r.self_rayleigh),
            format!("{:.6}", r.f1_fit_error),
            r.bias_ignored.to_string(),
        ]));
    }
    s
}

fn run(cli: &Cli, out: &mut Outputs) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::TraceNorms { model, corpus, input, capture } => {
            let bundle = load_model(model)?;
            let tok = load_tokenizer(corpus)?;
            let ids = input_ids(input, corpus, tok.as_ref())?;
            let pairs = capture
                .iter()
                .map(|c| {
                    let (r, t) = c.split_once(':').ok_or_else(|| Error::Config(format!("capture `{c}` is not row:token")))?;
                    let parse = |x: &str| x.parse::<usize>().map_err(|_| Error::Config(format!("bad capture `{c}`")));
                    Ok((parse(r)?, parse(t)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let trace = forward_trace(&bundle, &ids, &pairs, &Ablation::none(), tok.as_ref())?;
            out.text("trace.csv", &trace.to_csv())?;
            out.json("trace.json", &trace)?;
            println!("max norm {:.3} over {} tokens", trace.max_norm(), ids.len());
        }
        Command::EmpiricalDir { model, corpus, dir } => {
            let bundle = load_model(model)?;
            let tok = load_tokenizer(corpus)?;
            let c = require_corpus(corpus, tok.as_ref())?;
            let e = empirical_high_norm_direction(&bundle, &c, &direction_options(dir, corpus.rows, seed)?)?;
            out.json("empirical_dir.json", &e)?;
            println!(
                "{} high-norm states above {:.3} (max {:.3}) over {} rows; mean pairwise angle {:.4} deg",
                e.count, e.threshold, e.max_norm, e.rows_used, e.mean_pairwise_angle
            );
        }
        Command::DefectProfile { model, corpus, fit, dir } => {
            let bundle = load_model(model)?;
            let tok = load_tokenizer(corpus)?;
            let c = load_corpus(corpus, tok.as_ref())?;
            let cfg = pipeline_config(fit, dir, corpus, seed, &bundle, c.as_ref(), 5.0)?;
            let a = analyze_model(&bundle, c.as_ref(), &cfg)?;
            out.text("profile.csv", &profile_csv(&a))?;
            out.json("reference.json", &a.reference)?;
            out.json("report.json", &a.report)?;
        }
        Command::DecayEigen { model, corpus, fit, dir, layer } => {
            let bundle = load_model(model)?;
            let tok = load_tokenizer(corpus)?;
            let c = load_corpus(corpus, tok.as_ref())?;
            let cfg = pipeline_config(fit, dir, corpus, seed, &bundle, c.as_ref(), 5.0)?;
            let a = analyze_model(&bundle, c.as_ref(), &cfg)?;
            let mut s = String::from("layer,lambda,residual,iterations,likely_complex,angle_deg\n");
            for lin in &a.linearizations {
                if layer.is_some_and(|l| l != lin.layer) {
                    continue;
                }
                let (pair, angle) = match decay_eigen_analysis(lin, a.reference.direction().as_slice().expect("contiguous"), cfg.iter) {
                    Ok(p) => p,
                    Err(Error::Convergence { best: Some(best), .. }) => {
                        let ang = crate::linalg::acute_angle(best.w.as_slice().expect("contiguous"), a.reference.direction().as_slice().expect("contiguous"))?;
                        (*best, ang)
                    }
                    Err(e) => return Err(e),
                };
                s.push_str(&csv_line(&[
                    lin.layer.to_string(),
                    format!("{:.8}", pair.lambda),
                    format!("{:.3e}", pair.residual),
                    pair.iterations.to_string(),
                    pair.likely_complex.to_string(),
                    format!("{angle:.6}"),
                ]));
            }
            out.text("decay_eigen.csv", &s)?;
            out.json("reference.json", &a.reference)?;
        }
        Command::ExplosionScan { model, corpus, fit, input, layer, random } => {
            let bundle = load_model(model)?;
            let tok = load_tokenizer(corpus)?;
            let c = load_corpus(corpus, tok.as_ref())?;
            let layer = match layer {
                Some(l) => *l,
                None => default_layer(&bundle, fit, seed, c.as_ref())?,
            };
            let cfg = fit_config(fit, seed, &bundle, c.as_ref())?;
            let lin = linearize_layer(bundle.layer(layer)?, &bundle.spec, &cfg)?;
            let ex = explosion_subspace(&lin, IterConfig { tol: fit.tol, max_iter: fit.max_iter })?;
            let d = bundle.d();
            let scale = (d as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut vectors = vec![&ex.v * scale];
            for _ in 0..*random {
                let g: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = g.dot(&g).sqrt();
                vectors.push(g * (scale / n));
            }
            let resp = ffn_response_spectrum(bundle.layer(layer)?, &bundle.spec, &vectors)?;
            let mut s = String::from("kind,index,response_norm\n");
            s.push_str(&format!("v1,0,{:.6}\n", resp[0]));
            for (i, r) in resp[1..].iter().enumerate() {
                s.push_str(&format!("random,{i},{r:.6}\n"));
            }
            out.text("explosion_response.csv", &s)?;
            if input.ids.is_some() || input.text.is_some() || c.is_some() {
                let ids = input_ids(input, corpus, tok.as_ref())?;
                let coef = subspace_coefficient(&bundle, &ids, layer, ex.v.as_slice().expect("contiguous"))?;
                let mut s = String::from("token_index,token_id,token,coefficient\n");
                for (i, (&id, k)) in ids.iter().zip(&coef).enumerate() {
                    s.push_str(&csv_line(&[i.to_string(), id.to_string(), token_label(tok.as_ref(), id), format!("{k:.6}")]));
                }
                out.text("subspace_coefficients.csv", &s)?;
            }
            #[derive(Serialize)]
            struct Summary<'a> {
                layer: usize,
                sigma: f64,
                degenerate: bool,
                v1: &'a Array1<f64>,
                f1_fit_error: f64,
            }
            out.json(
                "explosion.json",
                &Summary { layer, sigma: ex.sigma, degenerate: ex.degenerate, v1: &ex.v, f1_fit_error: lin.f1_fit_error },
            )?;
            println!("layer {layer}: sigma {:.4}, v1 response {:.4}", ex.sigma, resp[0]);
        }
        Command::AblateAttn { model, corpus, layer } => {
            let bundle = load_model(model)?;
            let tok = load_tokenizer(corpus)?;
            let scan = attention_ablation_scan(&bundle, *layer)?;
            let mut s = String::from("rank,token_id,token,norm_before,norm_after\n");
            for (rank, (id, n)) in scan.ranked().into_iter().enumerate() {
                s.push_str(&csv_line(&[
                    rank.to_string(),
                    id.to_string(),
                    token_label(tok.as_ref(), id),
                    format!("{:.6}", scan.norms_before[id as usize]),
                    format!("{n:.6}"),
                ]));
            }
            out.text("ablate_attn.csv", &s)?;
        }
        Command::VocabScan { model, corpus, layer, random } => {
            let bundle = load_model(model)?;
            let tok = load_tokenizer(corpus)?;
            let scan = vocab_initial_scan(&bundle, *layer, *random, seed)?;
            let mut s = String::from("rank,token_id,token,norm_before,norm_after\n");
            for (rank, (id, n)) in scan.ranked().into_iter().enumerate() {
                s.push_str(&csv_line(&[
                    rank.to_string(),
                    id.to_string(),
                    token_label(tok.as_ref(), id),
                    format!("{:.6}", scan.norms_before[id as usize]),
                    format!("{n:.6}"),
                ]));
            }
            out.text("vocab_scan.csv", &s)?;
            let mut r = String::from("index,norm_before,norm_after\n");
            for (i, (b, a)) in scan.random_before.iter().zip(&scan.random_norms).enumerate() {
                r.push_str(&format!("{i},{b:.6},{a:.6}\n"));
            }
            out.text("vocab_scan_random.csv", &r)?;
        }
        Command::Trim { model, corpus, fit, input, layer, generate } => {
            let bundle = load_model(model)?;
            let tok = load_tokenizer(corpus)?;
            let c = load_corpus(corpus, tok.as_ref())?;
            let layer = match layer {
                Some(l) => *l,
                None => default_layer(&bundle, fit, seed, c.as_ref())?,
            };
            let cfg = fit_config(fit, seed, &bundle, c.as_ref())?;
            let lin = linearize_layer(bundle.layer(layer)?, &bundle.spec, &cfg)?;
            let ex = explosion_subspace(&lin, IterConfig { tol: fit.tol, max_iter: fit.max_iter })?;
            let ids = input_ids(input, corpus, tok.as_ref())?;
            let res = trim_and_trace(&bundle, &ids, layer, ex.v.as_slice().expect("contiguous"), *generate, tok.as_ref())?;
            let mut s = String::from("row,token_index,baseline,trimmed\n");
            for ((idx, b), t) in res.baseline.norms.indexed_iter().zip(res.trimmed.norms.iter()) {
                s.push_str(&format!("{},{},{b},{t}\n", idx.0, idx.1));
            }
            out.text("trim.csv", &s)?;
            #[derive(Serialize)]
            struct Summary<'a> {
                layer: usize,
                max_baseline: f32,
                max_trimmed: f32,
                continuation: &'a [u32],
                continuation_text: Option<&'a str>,
            }
            let sum = Summary {
                layer,
                max_baseline: res.baseline.max_norm(),
                max_trimmed: res.trimmed.max_norm(),
                continuation: &res.continuation,
                continuation_text: res.continuation_text.as_deref(),
            };
            out.json("trim.json", &sum)?;
            println!("layer {layer}: max norm {:.3} -> {:.3}", sum.max_baseline, sum.max_trimmed);
        }
        Command::Classify { model, corpus, fit, dir, tau, trace_rows } => {
            let bundle = load_model(model)?;
            let tok = load_tokenizer(corpus)?;
            let c = require_corpus(corpus, tok.as_ref())?;
            let mut cfg = pipeline_config(fit, dir, corpus, seed, &bundle, Some(&c), *tau)?;
            cfg.trace_rows = *trace_rows;
            let a = analyze_model(&bundle, Some(&c), &cfg)?;
            let cls = a.classification.as_ref().expect("corpus given");
            out.json("classification.json", cls)?;
            out.text("profile.csv", &profile_csv(&a))?;
            out.json("reference.json", &a.reference)?;
            println!("explosion layers {:?}, decay layers {:?}", cls.explosion_layers, cls.decay_layers);
        }
        Command::Signature { model, corpus, fit, dir, tau, id } => {
            let bundle = load_model(model)?;
            let tok = load_tokenizer(corpus)?;
            let c = load_corpus(corpus, tok.as_ref())?;
            let cfg = pipeline_config(fit, dir, corpus, seed, &bundle, c.as_ref(), *tau)?;
            let a = analyze_model(&bundle, c.as_ref(), &cfg)?;
            let label = id.clone().unwrap_or_else(|| {
                model.model[0].file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
            });
            let empty = crate::spectral::LayerClassification {
                explosion_layers: vec![],
                decay_layers: vec![],
                evidence: vec![],
                empty: true,
            };
            let sig = model_signature(&a.report, a.classification.as_ref().unwrap_or(&empty), &label);
            let path = out.dir.join("signature.json");
            sig.save(&path)?;
            out.record(vec![path]);
            println!("{label}: {} layers, preferred layer {:?}", sig.n_layers(), sig.preferred_layer);
        }
        Command::Compare { signatures, cluster_threshold } => {
            let sigs = signatures.iter().map(|p| ModelSignature::load(p)).collect::<Result<Vec<_>>>()?;
            let m = distance_matrix(&sigs);
            out.text("distance.csv", &m.to_csv())?;
            let heat = m.heat_table();
            out.text("distance_heat.txt", &heat)?;
            print!("{heat}");
            if let Some(t) = cluster_threshold {
                let groups: Vec<Vec<String>> =
                    m.clusters(*t).into_iter().map(|g| g.into_iter().map(|i| m.labels[i].clone()).collect()).collect();
                out.json("clusters.json", &groups)?;
            }
        }
        Command::QuantReport { model, corpus, fit, dir, quant_config, calib, exempt_defects, tau } => {
            let bundle = load_model(model)?;
            let tok = load_tokenizer(corpus)?;
            let c = require_corpus(corpus, tok.as_ref())?;
            let mut configs: Vec<QuantConfig> = match quant_config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    let v: serde_json::Value = serde_json::from_str(&text)?;
                    if v.is_array() {
                        serde_json::from_value(v)?
                    } else {
                        vec![serde_json::from_value(v)?]
                    }
                }
                None => vec![
                    QuantConfig::full_precision(),
                    QuantConfig::new(QuantScheme::Rtn),
                    QuantConfig::new(QuantScheme::SmoothQuant),
                ],
            };
            if *exempt_defects {
                let cfg = pipeline_config(fit, dir, corpus, seed, &bundle, Some(&c), *tau)?;
                let a = analyze_model(&bundle, Some(&c), &cfg)?;
                let cls = a.classification.expect("corpus given");
                let extra: Vec<QuantConfig> = configs
                    .iter()
                    .filter(|q| q.scheme != QuantScheme::None)
                    .map(|q| q.clone().with_defect_exemption(&cls))
                    .collect();
                configs.extend(extra);
                out.json("classification.json", &cls)?;
            }
            let calib_corpus = match calib {
                Some(p) => Some(read_corpus(p, tok.as_ref(), corpus.rows, corpus.bos)?),
                None => None,
            };
            let rows = quant_report(&bundle, &c, &configs, calib_corpus.as_ref())?;
            let md = report_markdown(&rows);
            out.text("quant_report.md", &md)?;
            out.text("quant_report.csv", &report_csv(&rows))?;
            print!("{md}");
        }
        Command::ToyGen {
            d,
            d_ff,
            layers,
            vocab,
            explosion,
            decay,
            gain,
            lambda,
            direction_seed,
            corpus_rows,
            corpus_len,
        } => {
            let p = PlantedSpec::new(
                *d,
                d_ff.unwrap_or(2 * d),
                *layers,
                *vocab,
                *explosion,
                *decay,
                *gain,
                *lambda,
                direction_seed.unwrap_or(seed),
            );
            let m = gen_planted_model(&p, seed)?;
            out.record(m.write(&out.dir.clone())?);
            let gt = m.ground_truth.as_ref().expect("planted");
            let corpus = sample_corpus(gt, *corpus_rows, *corpus_len, seed);
            let path = out.dir.join("corpus.ids");
            write_id_file(&path, &corpus.rows)?;
            out.record(vec![path]);
        }
        Command::LinearToyGen { d, layers, scale } => {
            let m = gen_linear_model_scaled(*d, *layers, seed, *scale)?;
            out.record(m.write(&out.dir.clone())?);
        }
    }
    Ok(())
}

fn model_args(cmd: &Command) -> Option<&ModelArgs> {
    match cmd {
        Command::TraceNorms { model, .. }
        | Command::EmpiricalDir { model, .. }
        | Command::DefectProfile { model, .. }
        | Command::DecayEigen { model, .. }
        | Command::ExplosionScan { model, .. }
        | Command::AblateAttn { model, .. }
        | Command::VocabScan { model, .. }
        | Command::Trim { model, .. }
        | Command::Classify { model, .. }
        | Command::Signature { model, .. }
        | Command::QuantReport { model, .. } => Some(model),
        _ => None,
    }
}

/// Run with explicit arguments (the first is the program name). Returns the
/// process exit code: 0 on success, 2 on input or usage errors, 3 when an
/// iteration fails to converge.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = (|| -> Result<()> {
        let mut out = Outputs::new(&cli.out)?;
        match cli.threads {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
                pool.install(|| run(&cli, &mut out))?;
            }
            None => run(&cli, &mut out)?,
        }
        let model = model_args(&cli.command);
        let manifest = RunManifest {
            command: cli.command.name().to_string(),
            argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            model_paths: model.map(|m| m.model.clone()).unwrap_or_default(),
            spec: model.and_then(|m| m.spec.clone()),
            config: serde_json::to_value(&cli.command)?,
            seed: cli.seed,
            threads: cli.threads,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: out.written.clone(),
        };
        out.json("manifest.json", &manifest)
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    run_with_args(std::env::args_os())
}
