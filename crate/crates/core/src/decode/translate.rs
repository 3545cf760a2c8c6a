use std::time::{Duration, Instant};

use serde::Serialize;

use super::{beam_search, build_shortlist, BeamOptions, ShortlistTable};
use crate::data::{SourceEncoder, Vocabulary};
use crate::error::Result;
use crate::eval::percentile;
use crate::model::{SourceInput, Weights, EOS};

/// Time source for latency measurement.
pub trait Clock {
    /// Time elapsed since an arbitrary fixed origin; never decreases.
    fn now(&mut self) -> Duration;
}

/// Wall-clock time from [`Instant`].
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for MonotonicClock {
    fn now(&mut self) -> Duration {
        self.origin.elapsed()
    }
}

/// Per-sentence timings of a translation run.
///
/// Percentiles use the nearest-rank rule and are only filled in for
/// sequential runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LatencyReport {
    pub count: usize,
    pub p50_ms: Option<f64>,
    pub p90_ms: Option<f64>,
    pub mean_ms: Option<f64>,
    pub tokens_per_sec: f64,
    #[serde(skip)]
    pub durations_ms: Vec<f64>,
    #[serde(skip)]
    pub output_tokens: usize,
    #[serde(skip)]
    pub total_ms: f64,
}

impl LatencyReport {
    /// Summarizes per-sentence durations.
    pub fn from_durations(durations_ms: Vec<f64>, output_tokens: usize) -> Result<Self> {
        let total_ms: f64 = durations_ms.iter().sum();
        let mut r = Self::from_total(durations_ms.len(), total_ms, output_tokens);
        if !durations_ms.is_empty() {
            r.p50_ms = Some(percentile(&durations_ms, 50.0)?);
            r.p90_ms = Some(percentile(&durations_ms, 90.0)?);
            r.mean_ms = Some(total_ms / durations_ms.len() as f64);
        }
        r.durations_ms = durations_ms;
        Ok(r)
    }

    /// Throughput only, for runs without per-sentence timings.
    pub fn from_total(count: usize, total_ms: f64, output_tokens: usize) -> Self {
        let tokens_per_sec = if total_ms > 0.0 { output_tokens as f64 / (total_ms / 1000.0) } else { 0.0 };
        Self { count, tokens_per_sec, output_tokens, total_ms, ..Self::default() }
    }
}

/// Everything needed to translate raw lines.
pub struct Translator<'a> {
    pub weights: &'a dyn Weights<f32>,
    pub src: &'a SourceEncoder,
    pub tgt: &'a Vocabulary,
    pub beam: BeamOptions,
    pub shortlist: Option<&'a ShortlistTable>,
    /// Shortlist budget; 0 disables the shortlist.
    pub shortlist_k: usize,
}

impl Translator<'_> {
    /// Preprocesses `line`, truncating it to the model's maximum length.
    pub fn prepare(&self, line: &str) -> SourceInput {
        let mut x = self.src.encode(line);
        let max = self.weights.config().max_seq_len;
        if x.len() > max {
            for stream in std::iter::once(&mut x.words).chain(x.factors.iter_mut()) {
                stream.truncate(max - 1);
                stream.push(EOS);
            }
        }
        x
    }

    /// Translates one line; returns the output text and its token count.
    /// Blank lines translate to blank lines.
    pub fn translate(&self, line: &str) -> Result<(String, usize)> {
        if line.trim().is_empty() {
            return Ok((String::new(), 0));
        }
        let x = self.prepare(line);
        let ids = match self.shortlist {
            Some(table) => build_shortlist(table, &x.words, self.shortlist_k),
            None => None,
        };
        let hyp = beam_search(self.weights, &x, &self.beam, ids.as_deref())?;
        Ok((self.tgt.decode(&hyp.tokens), hyp.tokens.len()))
    }

    fn translate_or_log(&self, i: usize, line: &str) -> (String, usize) {
        self.translate(line).unwrap_or_else(|e| {
            log::warn!("line {}: {e}", i + 1);
            (String::new(), 0)
        })
    }
}

/// Translates every line independently.
///
/// With `workers <= 1` sentences run one at a time and each translate call
/// (preprocessing, search and detokenization) is timed with `clock`. With
/// more workers, contiguous slices run in parallel and only the total time
/// is reported. A failing sentence is logged and yields an empty line.
pub fn translate_corpus(
    translator: &Translator<'_>,
    lines: &[String],
    clock: &mut dyn Clock,
    workers: usize,
) -> Result<(Vec<String>, LatencyReport)> {
    if workers <= 1 {
        let mut out = Vec::with_capacity(lines.len());
        let mut durations = Vec::with_capacity(lines.len());
        let mut tokens = 0;
        for (i, line) in lines.iter().enumerate() {
            let start = clock.now();
            let (text, n) = translator.translate_or_log(i, line);
            durations.push((clock.now() - start).as_secs_f64() * 1000.0);
            out.push(text);
            tokens += n;
        }
        return Ok((out, LatencyReport::from_durations(durations, tokens)?));
    }
    let start = clock.now();
    let chunk = lines.len().div_ceil(workers).max(1);
    let results: Vec<Vec<(String, usize)>> = std::thread::scope(|s| {
        let handles: Vec<_> = lines
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| s.spawn(move || part.iter().enumerate().map(|(j, l)| translator.translate_or_log(c * chunk + j, l)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("translation worker panicked")).collect()
    });
    let total_ms = (clock.now() - start).as_secs_f64() * 1000.0;
    let flat: Vec<(String, usize)> = results.into_iter().flatten().collect();
    let tokens = flat.iter().map(|x| x.1).sum();
    Ok((flat.into_iter().map(|x| x.0).collect(), LatencyReport::from_total(lines.len(), total_ms, tokens)))
}
