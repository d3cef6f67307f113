//! Perplexity over non-overlapping windows of the joined corpus stream.

use rayon::prelude::*;

use super::{forward, Ablation, Corpus, ForwardOptions, LinearHook};
use crate::checkpoint::ModelBundle;
use crate::error::{Error, Result};

/// `exp(mean next-token NLL)`. The window is `min(2048, max_seq_len)` and
/// the stride equals the window; each window predicts its own tokens
/// `1..len`. Windows run in parallel and are summed in order.
pub fn perplexity(bundle: &ModelBundle, corpus: &Corpus, hook: Option<&dyn LinearHook>, ablation: &Ablation) -> Result<f64> {
    let stream = corpus.stream();
    let window = bundle.spec.max_seq_len.min(2048);
    let chunks: Vec<&[u32]> = stream.chunks(window).filter(|c| c.len() >= 2).collect();
    if chunks.is_empty() {
        return Err(Error::Input("corpus too short for perplexity (need at least 2 tokens)".into()));
    }
    let opts = ForwardOptions { ablation, hook, stop_after: None, logits: true };
    let parts: Vec<(f64, usize)> = chunks
        .par_iter()
        .enumerate()
        .map(|(i, chunk)| {
            let out = forward(bundle, chunk, &opts, &mut ())?;
            let logits = out.logits.expect("requested");
            let mut nll = 0.0f64;
            for t in 0..chunk.len() - 1 {
                let row = logits.row(t);
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let lse = max + row.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln();
                nll += lse - row[chunk[t + 1] as usize] as f64;
            }
            if !nll.is_finite() {
                return Err(Error::Numeric { location: format!("loss of window {i}") });
            }
            Ok((nll, chunk.len() - 1))
        })
        .collect::<Result<_>>()?;
    let (total, count) = parts.iter().fold((0.0, 0usize), |(a, n), &(b, m)| (a + b, n + m));
    Ok((total / count as f64).exp())
}
