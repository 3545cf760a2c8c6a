use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{Example, BOS, EOS, PAD, UNK};

const SPECIALS: [usize; 4] = [PAD, UNK, BOS, EOS];

/// Per source token, candidate target tokens ranked by co-occurrence count.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortlistTable {
    pub tgt_vocab_size: usize,
    /// `rows[src]` holds `(target, count)` pairs, highest count first and
    /// ties by lower id.
    pub rows: Vec<Vec<(usize, u32)>>,
}

impl ShortlistTable {
    /// Counts, for every sentence pair, each distinct (source, target)
    /// token pair once; keeps the `per_token` best targets per source token.
    pub fn from_examples(examples: &[Example], src_vocab_size: usize, tgt_vocab_size: usize, per_token: usize) -> Self {
        let mut counts: Vec<HashMap<usize, u32>> = vec![HashMap::new(); src_vocab_size];
        for e in examples {
            let mut src: Vec<usize> = e.src.words.iter().copied().filter(|w| !SPECIALS.contains(w) && *w < src_vocab_size).collect();
            src.sort_unstable();
            src.dedup();
            let mut tgt: Vec<usize> = e.tgt.iter().copied().filter(|t| !SPECIALS.contains(t)).collect();
            tgt.sort_unstable();
            tgt.dedup();
            for &s in &src {
                for &t in &tgt {
                    *counts[s].entry(t).or_default() += 1;
                }
            }
        }
        let rows = counts
            .into_iter()
            .map(|m| {
                let mut row: Vec<(usize, u32)> = m.into_iter().collect();
                row.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                row.truncate(per_token);
                row
            })
            .collect();
        Self { tgt_vocab_size, rows }
    }

    /// Maps every source id `i` to target id `i` (for tasks whose source and
    /// target vocabularies coincide).
    pub fn identity(vocab_size: usize) -> Self {
        let rows = (0..vocab_size).map(|i| if SPECIALS.contains(&i) { Vec::new() } else { vec![(i, 1)] }).collect();
        Self { tgt_vocab_size: vocab_size, rows }
    }
}

/// Target ids allowed for a sentence, sorted, or `None` for the full
/// vocabulary (when `k` is 0 or at least the vocabulary size).
///
/// Candidates of all source tokens are merged by their best count and the
/// `k` highest kept; PAD, UNK, BOS and EOS are always added on top.
pub fn build_shortlist(table: &ShortlistTable, src: &[usize], k: usize) -> Option<Vec<usize>> {
    if k == 0 || k >= table.tgt_vocab_size {
        return None;
    }
    let mut best: BTreeMap<usize, u32> = BTreeMap::new();
    for &s in src {
        for &(t, c) in table.rows.get(s).map(Vec::as_slice).unwrap_or(&[]) {
            if SPECIALS.contains(&t) || t >= table.tgt_vocab_size {
                continue;
            }
            let e = best.entry(t).or_default();
            *e = (*e).max(c);
        }
    }
    let mut ranked: Vec<(usize, u32)> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut ids: Vec<usize> = ranked.into_iter().take(k).map(|(t, _)| t).chain(SPECIALS).collect();
    ids.sort_unstable();
    Some(ids)
}
