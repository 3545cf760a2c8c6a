//! Beam search, vocabulary shortlists and batch-1 translation with latency
//! measurement.

use std::cmp::Ordering;

use crate::error::{bail, Result};
use crate::model::{DecoderState, SourceInput, TransformerModel, Weights, BOS, EOS, PAD};
use crate::quant::QuantizedModel;

mod shortlist;
mod translate;

pub use crate::data::apply_case_factors;
pub use shortlist::{build_shortlist, ShortlistTable};
pub use translate::{translate_corpus, Clock, LatencyReport, MonotonicClock, Translator};

/// f32 or int8 weights behind one interface.
#[derive(Clone, Debug)]
pub enum ModelExec {
    F32(TransformerModel),
    Int8(QuantizedModel),
}

impl ModelExec {
    pub fn weights(&self) -> &dyn Weights<f32> {
        match self {
            ModelExec::F32(m) => m,
            ModelExec::Int8(m) => m,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOptions {
    pub beam_size: usize,
    /// Maximum target length, EOS included.
    pub max_len: usize,
    /// Length penalty exponent α.
    pub alpha: f64,
}

impl Default for BeamOptions {
    fn default() -> Self {
        Self { beam_size: 5, max_len: 64, alpha: 1.0 }
    }
}

/// A (partial) translation.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Target ids, without BOS and EOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Length-normalized score.
    pub score: f64,
    /// Ended with EOS. A returned unfinished hypothesis hit `max_len`.
    pub finished: bool,
    state: Option<DecoderState>,
}

impl Hypothesis {
    pub fn truncated(&self) -> bool {
        !self.finished
    }

    /// The decoder state after the last token, if it is still extendable.
    pub fn state(&self) -> Option<&DecoderState> {
        self.state.as_ref()
    }
}

/// `((5 + len) / 6)^α`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Log-softmax in f64 with PAD and BOS excluded; `ids` maps logit positions
/// to token ids.
fn log_probs(logits: &[f32], ids: Option<&[usize]>) -> Vec<(usize, f64)> {
    let id = |i: usize| ids.map_or(i, |v| v[i]);
    let allowed = |i: usize| {
        let t = id(i);
        t != PAD && t != BOS
    };
    let max = logits.iter().enumerate().filter(|&(i, _)| allowed(i)).map(|(_, &x)| x as f64).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().enumerate().filter(|&(i, _)| allowed(i)).map(|(_, &x)| (x as f64 - max).exp()).sum::<f64>().ln();
    logits.iter().enumerate().filter(|&(i, _)| allowed(i)).map(|(i, &x)| (id(i), x as f64 - lse)).collect()
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Beam search with length normalization `logp / ((5+len)/6)^α`, where
/// `len` counts EOS. The output vocabulary is restricted to `shortlist`
/// when given. Finished hypotheses leave the beam, which shrinks until it
/// is empty or `max_len` is reached; if nothing finished, the best
/// unfinished hypothesis is returned with `finished == false`.
pub fn beam_search(weights: &dyn Weights<f32>, src: &SourceInput, opts: &BeamOptions, shortlist: Option<&[usize]>) -> Result<Hypothesis> {
    if opts.beam_size == 0 {
        bail!(Usage, "beam size must be at least 1");
    }
    if src.is_empty() {
        bail!(Usage, "empty source sentence");
    }
    let max_len = opts.max_len.min(weights.config().max_seq_len);
    if max_len == 0 {
        bail!(Usage, "max_len must be positive");
    }
    let output = weights.output_layer(shortlist)?;
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        score: 0.0,
        finished: false,
        state: Some(DecoderState::new(weights, src)?),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let k = opts.beam_size;

    for t in 0..max_len {
        // (parent, token, log prob)
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (b, hyp) in active.iter_mut().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let state = hyp.state.as_mut().expect("active hypotheses keep their state");
            let logits = state.step(weights, prev, &output)?;
            let mut lp = log_probs(&logits, shortlist);
            lp.sort_by(|x, y| by_score_desc(x.1, y.1).then(x.0.cmp(&y.0)));
            lp.truncate(k);
            candidates.extend(lp.into_iter().map(|(tok, p)| (b, tok, hyp.log_prob + p)));
        }
        candidates.sort_by(|x, y| by_score_desc(x.2, y.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        candidates.truncate(k);

        let mut next = Vec::with_capacity(k);
        for (b, tok, log_prob) in candidates {
            let parent = &active[b];
            let mut tokens = parent.tokens.clone();
            let len = tokens.len() + 1;
            let score = log_prob / length_penalty(len, opts.alpha);
            if tok == EOS {
                finished.push(Hypothesis { tokens, log_prob, score, finished: true, state: None });
            } else {
                tokens.push(tok);
                let state = if t + 1 < max_len { parent.state.clone() } else { None };
                next.push(Hypothesis { tokens, log_prob, score, finished: false, state });
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { active } else { finished };
    let best = pool.into_iter().reduce(|a, b| if b.score > a.score { b } else { a });
    match best {
        Some(h) => Ok(h),
        None => bail!(State, "beam search produced no hypothesis"),
    }
}

/// Greedy decoding (argmax at every step), for reference.
pub fn greedy(weights: &dyn Weights<f32>, src: &SourceInput, max_len: usize) -> Result<Vec<usize>> {
    let output = weights.output_layer(None)?;
    let mut state = DecoderState::new(weights, src)?;
    let mut out = Vec::new();
    let mut prev = BOS;
    for _ in 0..max_len.min(weights.config().max_seq_len) {
        let lp = log_probs(&state.step(weights, prev, &output)?, None);
        let (tok, _) = lp.into_iter().fold((PAD, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
        if tok == EOS {
            break;
        }
        out.push(tok);
        prev = tok;
    }
    Ok(out)
}
