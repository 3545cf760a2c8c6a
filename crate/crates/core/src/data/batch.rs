use crate::error::{bail, Result};
use crate::model::{Example, Packed, PAD};

/// A group of examples of similar length.
///
/// The padded views (`src`, `labels` and their masks) describe the batch as
/// a rectangle; training itself packs the examples without padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub examples: Vec<Example>,
    /// Source ids (EOS included), right-padded with PAD.
    pub src: Vec<Vec<usize>>,
    /// `true` at real tokens.
    pub src_mask: Vec<Vec<bool>>,
    /// Target labels (EOS included), right-padded with PAD.
    pub labels: Vec<Vec<usize>>,
    pub label_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn new(examples: Vec<Example>) -> Self {
        let (src, src_mask) = pad(examples.iter().map(|e| e.src.words.clone()).collect());
        let (labels, label_mask) = pad(examples.iter().map(Example::labels).collect());
        Self { examples, src, src_mask, labels, label_mask }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Non-pad target tokens, the unit of the batch budget.
    pub fn tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tgt.len() + 1).sum()
    }

    pub fn packed(&self) -> Result<Packed> {
        Packed::from_examples(&self.examples)
    }
}

fn pad(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mask = rows.iter().map(|r| (0..width).map(|i| i < r.len()).collect()).collect();
    let ids = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (ids, mask)
}

/// Output of [`make_batches`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batches {
    pub batches: Vec<Batch>,
    /// Examples dropped for exceeding `max_seq_len`.
    pub skipped: usize,
}

/// Sorts examples by length and fills batches greedily so that each holds
/// at most `tokens_per_batch` target tokens (EOS included).
///
/// Examples whose source (with EOS) or decoder input (with BOS) is longer
/// than `max_seq_len` are dropped and counted.
pub fn make_batches(examples: &[Example], tokens_per_batch: usize, max_seq_len: usize) -> Result<Batches> {
    let mut kept: Vec<(usize, &Example)> = Vec::with_capacity(examples.len());
    let mut skipped = 0;
    for (i, e) in examples.iter().enumerate() {
        if e.src.len() > max_seq_len || e.tgt.len() + 1 > max_seq_len {
            skipped += 1;
            continue;
        }
        if e.tgt.len() + 1 > tokens_per_batch {
            bail!(Usage, "tokens_per_batch {tokens_per_batch} is smaller than a {}-token target", e.tgt.len() + 1);
        }
        kept.push((i, e));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} examples longer than {max_seq_len} tokens");
    }
    kept.sort_by_key(|&(i, e)| (e.tgt.len(), e.src.len(), i));

    let mut batches = Vec::new();
    let mut current: Vec<Example> = Vec::new();
    let mut tokens = 0;
    for (_, e) in kept {
        let n = e.tgt.len() + 1;
        if tokens + n > tokens_per_batch {
            batches.push(Batch::new(std::mem::take(&mut current)));
            tokens = 0;
        }
        current.push(e.clone());
        tokens += n;
    }
    if !current.is_empty() {
        batches.push(Batch::new(current));
    }
    Ok(Batches { batches, skipped })
}
