//! Synthetic parallel tasks over closed vocabularies of made-up words.

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::case::CaseClass;
use super::ParallelCorpus;
use crate::error::{bail, Result};
use crate::rng::{derive_seed, seeded};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Probability of each case category for a source token when casing is on,
/// in [`CaseClass::ALL`] order.
pub const CASE_WEIGHTS: [f64; 4] = [0.78, 0.2175, 0.002, 0.0005];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Cipher,
}

/// Parameters of [`generate_task`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub sentences: usize,
    /// Inclusive sentence length range, in tokens.
    pub lengths: RangeInclusive<usize>,
    pub casing: bool,
    pub seed: u64,
}

/// `n` distinct lowercase words built from consonant-vowel syllables.
pub fn synthetic_words(n: usize, seed: u64) -> Vec<String> {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let mut per_word = 2;
    while syllables.pow(per_word) < n {
        per_word += 1;
    }
    let space = syllables.pow(per_word);
    let mut rng = seeded(derive_seed(seed, "words"));
    rand::seq::index::sample(&mut rng, space, n)
        .into_iter()
        .map(|mut code| {
            let mut w = String::with_capacity(2 * per_word as usize);
            for _ in 0..per_word {
                let s = code % syllables;
                code /= syllables;
                w.push(CONSONANTS[s / VOWELS.len()] as char);
                w.push(VOWELS[s % VOWELS.len()] as char);
            }
            w
        })
        .collect()
}

/// The cipher substitution: word `i` is replaced by word `perm[i]`.
pub fn cipher_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeded(derive_seed(seed, "cipher")));
    perm
}

fn pick_case(rng: &mut crate::rng::Rng) -> CaseClass {
    let mut u: f64 = rng.gen();
    for (c, w) in CaseClass::ALL.into_iter().zip(CASE_WEIGHTS) {
        if u < w {
            return c;
        }
        u -= w;
    }
    CaseClass::Lowercase
}

/// Generates a parallel corpus for `spec.kind`.
///
/// With casing on, each source token gets a random case category and the
/// category names form the single factor stream; targets stay lowercase.
pub fn generate_task(spec: &TaskSpec) -> Result<ParallelCorpus> {
    if spec.vocab_size < 2 {
        bail!(Usage, "a task needs at least 2 words, got {}", spec.vocab_size);
    }
    let (lo, hi) = (*spec.lengths.start(), *spec.lengths.end());
    if lo == 0 || lo > hi {
        bail!(Usage, "invalid sentence length range {lo}..={hi}");
    }
    let words = synthetic_words(spec.vocab_size, spec.seed);
    let perm = cipher_permutation(spec.vocab_size, spec.seed);
    let mut rng = seeded(derive_seed(spec.seed, "sentences"));
    let mut corpus = ParallelCorpus::default();
    let mut cases = Vec::new();
    for _ in 0..spec.sentences {
        let len = rng.gen_range(lo..=hi);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
        let tgt: Vec<&str> = match spec.kind {
            TaskKind::Copy => ids.iter().map(|&i| words[i].as_str()).collect(),
            TaskKind::Reverse => ids.iter().rev().map(|&i| words[i].as_str()).collect(),
            TaskKind::Cipher => ids.iter().map(|&i| words[perm[i]].as_str()).collect(),
        };
        let src: Vec<String> = if spec.casing {
            let classes: Vec<CaseClass> = ids.iter().map(|_| pick_case(&mut rng)).collect();
            cases.push(classes.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(" "));
            ids.iter().zip(&classes).map(|(&i, c)| c.apply(&words[i])).collect()
        } else {
            ids.iter().map(|&i| words[i].clone()).collect()
        };
        corpus.src.push(src.join(" "));
        corpus.tgt.push(tgt.join(" "));
    }
    if spec.casing {
        corpus.factors.push(cases);
    }
    Ok(corpus)
}
