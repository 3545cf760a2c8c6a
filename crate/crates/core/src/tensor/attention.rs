//! Scaled dot-product multi-head attention over packed sequences.
//!
//! Several sequences are stored back to back in the rows of `q`, `k` and
//! `v`. A [`Segment`] tells which query rows attend to which key rows, so a
//! batch needs no padding and no mask tensor.

use super::ops::dot;
use super::{Scalar, Tensor};
use crate::error::{bail, Result};

/// Query rows `q_start..q_start+q_len` attend to key rows
/// `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    pub fn square(start: usize, len: usize) -> Self {
        Self { q_start: start, q_len: len, k_start: start, k_len: len }
    }

    /// Number of keys visible to local query `i`.
    #[inline]
    fn visible(&self, i: usize, causal: bool) -> usize {
        if causal {
            // Queries are aligned with the last q_len keys.
            (i + 1 + self.k_len - self.q_len).min(self.k_len)
        } else {
            self.k_len
        }
    }
}

fn check<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, segments: &[Segment], heads: usize, causal: bool) -> Result<usize> {
    let d = q.cols();
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        bail!(Shape, "attention inputs must be matrices");
    }
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        bail!(Shape, "attention q/k/v shapes {:?} {:?} {:?} disagree", q.shape(), k.shape(), v.shape());
    }
    if heads == 0 || d % heads != 0 {
        bail!(Shape, "model width {d} is not divisible by {heads} heads");
    }
    for s in segments {
        if s.q_start + s.q_len > q.rows() || s.k_start + s.k_len > k.rows() {
            bail!(Shape, "attention segment {s:?} out of range");
        }
        if s.q_len > 0 && s.k_len == 0 {
            bail!(Shape, "attention segment {s:?} has queries but no keys");
        }
        if causal && s.q_len > s.k_len {
            bail!(Shape, "causal segment {s:?} has more queries than keys");
        }
    }
    Ok(d / heads)
}

/// Returns the attention output and, when `keep_probs` is set, the
/// attention weights laid out segment by segment, head by head.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    segments: &[Segment],
    heads: usize,
    causal: bool,
    keep_probs: bool,
) -> Result<(Tensor<T>, Vec<T>)> {
    let dh = check(q, k, v, segments, heads, causal)?;
    let d = q.cols();
    let scale = T::one() / T::of_f64(dh as f64).sqrt();
    let mut out = Tensor::zeros(q.shape().to_vec());
    let mut probs = Vec::new();
    let mut p = Vec::new();
    for s in segments {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..s.q_len {
                let qi = &q.row(s.q_start + i)[cols.clone()];
                let n = s.visible(i, causal);
                p.clear();
                p.extend((0..n).map(|j| dot(qi, &k.row(s.k_start + j)[cols.clone()]) * scale));
                super::ops::softmax_slice(&mut p);
                let orow = &mut out.data_mut()[(s.q_start + i) * d..(s.q_start + i + 1) * d][cols.clone()];
                for (j, &pj) in p.iter().enumerate() {
                    for (o, &vv) in orow.iter_mut().zip(&v.row(s.k_start + j)[cols.clone()]) {
                        *o += pj * vv;
                    }
                }
                if keep_probs {
                    probs.extend_from_slice(&p);
                    probs.resize(probs.len() + s.k_len - n, T::zero());
                }
            }
        }
    }
    Ok((out, probs))
}

/// Gradients of [`attention`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    segments: &[Segment],
    heads: usize,
    causal: bool,
    probs: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = T::one() / T::of_f64(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape().to_vec());
    let mut dk = Tensor::zeros(k.shape().to_vec());
    let mut dv = Tensor::zeros(v.shape().to_vec());
    let mut offset = 0;
    let mut ds = Vec::new();
    for s in segments {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..s.q_len {
                let n = s.visible(i, causal);
                let p = &probs[offset..offset + n];
                offset += s.k_len;
                let qrow = s.q_start + i;
                let gi = &g.row(qrow)[c0..c0 + dh];
                ds.clear();
                ds.extend((0..n).map(|j| dot(gi, &v.row(s.k_start + j)[c0..c0 + dh])));
                let mean: T = p.iter().zip(&ds).map(|(&a, &b)| a * b).sum();
                for (dsj, &pj) in ds.iter_mut().zip(p) {
                    *dsj = pj * (*dsj - mean) * scale;
                }
                for j in 0..n {
                    let krow = s.k_start + j;
                    let dqi = &mut dq.data_mut()[qrow * d + c0..qrow * d + c0 + dh];
                    for (o, &kv) in dqi.iter_mut().zip(&k.row(krow)[c0..c0 + dh]) {
                        *o += ds[j] * kv;
                    }
                    let dkj = &mut dk.data_mut()[krow * d + c0..krow * d + c0 + dh];
                    for (o, &qv) in dkj.iter_mut().zip(&q.row(qrow)[c0..c0 + dh]) {
                        *o += ds[j] * qv;
                    }
                    let dvj = &mut dv.data_mut()[krow * d + c0..krow * d + c0 + dh];
                    for (o, &gv) in dvj.iter_mut().zip(gi) {
                        *o += p[j] * gv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
