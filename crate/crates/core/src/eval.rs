//! BLEU, perplexity and latency percentiles.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{bail, Result};
use crate::model::{Example, Packed, Session, Weights, PAD};
use crate::tensor::tape::cross_entropy_value;
use crate::tensor::Tensor;

/// Corpus-level BLEU-4 with its components.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuScore {
    /// In [0, 100].
    #[serde(rename = "bleu")]
    pub score: f64,
    /// Clipped n-gram precisions p₁..p₄ as fractions.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams<'t, 's>(tokens: &'t [&'s str], n: usize) -> HashMap<&'t [&'s str], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_default() += 1;
    }
    m
}

/// Corpus BLEU over whitespace tokens with clipped counts, the exponential
/// brevity penalty and no smoothing. With `case_sensitive` false both
/// sides are lowercased first.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[R], case_sensitive: bool) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        bail!(Usage, "{} hypotheses for {} references", hypotheses.len(), references.len());
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = if case_sensitive {
            (h.as_ref().to_string(), r.as_ref().to_string())
        } else {
            (h.as_ref().to_lowercase(), r.as_ref().to_lowercase())
        };
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        hyp_len += ht.len();
        ref_len += rt.len();
        for n in 1..=4 {
            let rc = ngrams(&rt, n);
            for (g, c) in ngrams(&ht, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += ht.len().saturating_sub(n - 1);
        }
    }
    let precisions = std::array::from_fn(|i| if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.iter().any(|&p: &f64| p == 0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp() * 100.0
    };
    Ok(BleuScore { score, precisions, brevity_penalty, hyp_len, ref_len })
}

/// Summed negative log-likelihood (no label smoothing) and token count of
/// `examples`, evaluated in packed chunks of about `chunk_tokens` targets.
pub fn total_nll(weights: &dyn Weights<f32>, examples: &[Example], chunk_tokens: usize) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut count = 0;
    let mut start = 0;
    while start < examples.len() {
        let mut end = start;
        let mut tokens = 0;
        while end < examples.len() && (end == start || tokens + examples[end].tgt.len() + 1 <= chunk_tokens) {
            tokens += examples[end].tgt.len() + 1;
            end += 1;
        }
        let packed = Packed::from_examples(&examples[start..end])?;
        let mut s = Session::inference(weights);
        let logits = s.forward(&packed)?;
        let logits: Tensor<f64> = s.tape.value(logits).cast();
        let (loss, n) = cross_entropy_value(&logits, &packed.labels, 0.0, Some(PAD))?;
        nll += loss;
        count += n;
        start = end;
    }
    Ok((nll, count))
}

/// exp(total NLL / non-pad target tokens) over `examples`.
pub fn perplexity(weights: &dyn Weights<f32>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        bail!(Usage, "perplexity of an empty corpus");
    }
    let (nll, count) = total_nll(weights, examples, 4096)?;
    if count == 0 {
        bail!(Value, "corpus has no target tokens");
    }
    Ok((nll / count as f64).exp())
}

/// Perplexity of per-sentence logits `[rows × vocab]` against their labels;
/// PAD labels are ignored.
pub fn perplexity_from_logits(sentences: &[(&Tensor, &[usize])]) -> Result<f64> {
    let (mut nll, mut count) = (0.0, 0);
    for (logits, labels) in sentences {
        let (l, n) = cross_entropy_value(&logits.cast::<f64>(), labels, 0.0, Some(PAD))?;
        nll += l;
        count += n;
    }
    if count == 0 {
        bail!(Usage, "perplexity needs at least one target token");
    }
    Ok((nll / count as f64).exp())
}

/// Nearest-rank percentile: the ⌈p/100 · n⌉-th smallest value.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        bail!(Usage, "percentile of an empty list");
    }
    if !(p > 0.0 && p <= 100.0) {
        bail!(Usage, "percentile must be in (0, 100], got {p}");
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}
