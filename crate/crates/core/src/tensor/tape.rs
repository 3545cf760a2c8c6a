use std::borrow::Cow;

use super::ops::{self, row_stats};
use super::attention::{self, Segment};
use super::{Scalar, Tensor};
use crate::error::{bail, Result};
use crate::rng::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, causal: bool, probs: Vec<T> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: T, ignore: Option<usize> },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Values are kept on the tape until it is dropped. Parameters can be
/// borrowed for the lifetime `'p` instead of copied. A tape supports a single
/// backward pass; a second call is rejected with a state error.
pub struct Tape<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
    grad_enabled: bool,
    backward_done: bool,
}

/// Gradients of the leaves that required them, indexed by [`Var`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, backward_done: false }
    }

    /// A tape that never tracks gradients, for inference.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, backward_done: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Owned leaf without gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Borrowed parameter that receives a gradient.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Borrowed tensor without gradient.
    pub fn frozen(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Elementwise sum; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product; `b` may broadcast over leading dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = ops::scale(self.value(a), s);
        self.push_op(v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        self.push_op(v, Op::Relu(a), &[a])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = ops::softmax_rows(self.value(a));
        self.push_op(v, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let v = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let (mean, rstd) = if self.grad_enabled { row_stats(self.value(x), eps) } else { Default::default() };
        Ok(self.push_op(v, Op::LayerNorm { x, gain, bias, mean, rstd }, &[x, gain, bias]))
    }

    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        match ops::dropout_mask(self.value(x).numel(), p, training, rng)? {
            None => Ok(x),
            Some(mask) => {
                let mask: Vec<T> = mask.into_iter().map(T::of_f64).collect();
                let mut v = self.value(x).clone();
                v.data_mut().iter_mut().zip(&mask).for_each(|(a, &m)| *a *= m);
                Ok(self.push_op(v, Op::Dropout { x, mask }, &[x]))
            }
        }
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = ops::embedding_lookup(self.value(table), ids)?;
        Ok(self.push_op(v, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = ops::slice_cols(self.value(x), start, len)?;
        Ok(self.push_op(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let v = {
            let ts: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            ops::concat_cols(&ts)?
        };
        Ok(self.push_op(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let v = {
            let ts: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            ops::concat_rows(&ts)?
        };
        Ok(self.push_op(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Multi-head attention over packed sequences, see [`attention::attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment], heads: usize, causal: bool) -> Result<Var> {
        let keep = self.grad_enabled && [q, k, v].iter().any(|&x| self.requires_grad(x));
        let (out, probs) = attention::attention(self.value(q), self.value(k), self.value(v), segments, heads, causal, keep)?;
        let op = Op::Attention { q, k, v, segments: segments.to_vec(), heads, causal, probs };
        Ok(self.push_op(out, op, &[q, k, v]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Summed label-smoothed cross entropy over the rows of `logits`.
    ///
    /// Rows whose target equals `ignore` contribute nothing. Returns the
    /// scalar loss and the number of counted rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: T,
        ignore: Option<usize>,
    ) -> Result<(Var, usize)> {
        let (loss, count) = cross_entropy_value(self.value(logits), targets, smoothing, ignore)?;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing, ignore };
        Ok((self.push_op(Tensor::scalar(loss), op, &[logits]), count))
    }

    /// Backpropagates from the scalar `loss`, returning leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            bail!(State, "backward called without a recorded forward pass");
        }
        if self.backward_done {
            bail!(State, "backward already ran on this tape; record a new forward pass");
        }
        if self.value(loss).numel() != 1 {
            bail!(Value, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, ops::matmul_nt(g, self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, ops::matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, ops::matmul(g, self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, ops::matmul_tn(g, self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, reduce_broadcast(g, self.value(*b)))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, ops::mul(g, self.value(*b))?)?;
                }
                if self.wants(*b) {
                    let prod = zip_same(g, self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, reduce_broadcast(&prod, self.value(*b)))?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, ops::scale(g, *s))?,
            Op::Relu(a) => {
                let dx = zip_same(g, self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *a, dx)?;
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_exact_mut(c).zip(out.data().chunks_exact(c)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let c = xv.cols();
                let n = T::of_f64(c as f64);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                let rows = xv.data().chunks_exact(c).zip(g.data().chunks_exact(c));
                for (r, ((xrow, grow), dxrow)) in rows.zip(dx.data_mut().chunks_exact_mut(c)).enumerate() {
                    let xhat: Vec<T> = xrow.iter().map(|&v| (v - mean[r]) * rstd[r]).collect();
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..c {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        let d = grow[j] * gv[j];
                        sum_d += d;
                        sum_dx += d * xhat[j];
                    }
                    let (md, mdx) = (sum_d / n, sum_dx / n);
                    for j in 0..c {
                        dxrow[j] = rstd[r] * (grow[j] * gv[j] - md - xhat[j] * mdx);
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, dx)?;
                }
                if self.wants(*gain) {
                    let shape = self.value(*gain).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(shape, dgain)?)?;
                }
                if self.wants(*bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, dbias)?)?;
                }
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().zip(mask).for_each(|(d, &m)| *d *= m);
                self.accumulate(grads, *x, dx)?;
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let dim = tv.cols();
                let mut dt = Tensor::zeros(tv.shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * dim..(r + 1) * dim];
                    for (d, &s) in dt.data_mut()[id * dim..(id + 1) * dim].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *table, dt)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (cols, len) = (xv.cols(), g.cols());
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (drow, grow) in dx.data_mut().chunks_exact_mut(cols).zip(g.data().chunks_exact(len)) {
                    drow[*start..*start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        self.accumulate(grads, p, ops::slice_cols(g, start, w)?)?;
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        let part = Tensor::new(vec![n / c.max(1), c], g.data()[start..start + n].to_vec())?;
                        self.accumulate(grads, p, part)?;
                    }
                    start += n;
                }
            }
            Op::Attention { q, k, v, segments, heads, causal, probs } => {
                let (dq, dk, dv) = attention::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    segments,
                    *heads,
                    *causal,
                    probs,
                    g,
                );
                for (x, dx) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(x) {
                        self.accumulate(grads, x, dx)?;
                    }
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.data()[0]))?;
            }
            Op::CrossEntropy { logits, targets, smoothing, ignore } => {
                let lv = self.value(*logits);
                let v = lv.cols();
                let upstream = g.data()[0];
                let mut dl = ops::softmax_rows(lv);
                let uniform = *smoothing / T::of_f64(v as f64);
                for (row, &t) in dl.data_mut().chunks_exact_mut(v).zip(targets) {
                    if Some(t) == *ignore {
                        row.iter_mut().for_each(|d| *d = T::zero());
                        continue;
                    }
                    for d in row.iter_mut() {
                        *d = (*d - uniform) * upstream;
                    }
                    row[t] -= (T::one() - *smoothing) * upstream;
                }
                self.accumulate(grads, *logits, dl)?;
            }
        }
        Ok(())
    }
}

fn zip_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        bail!(Shape, "elementwise shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Sums `g` over the leading dimensions that `like` was broadcast across.
fn reduce_broadcast<T: Scalar>(g: &Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    if g.shape() == like.shape() {
        return g.clone();
    }
    let n = like.numel();
    let mut out = Tensor::zeros(like.shape().to_vec());
    for chunk in g.data().chunks_exact(n) {
        out.data_mut().iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

/// Summed smoothed negative log-likelihood and counted rows.
pub(crate) fn cross_entropy_value<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    smoothing: T,
    ignore: Option<usize>,
) -> Result<(T, usize)> {
    let v = logits.cols();
    if logits.rows() != targets.len() {
        bail!(Shape, "{} logit rows for {} targets", logits.rows(), targets.len());
    }
    if !(smoothing >= T::zero() && smoothing < T::one()) {
        bail!(Value, "label smoothing must be in [0, 1)");
    }
    let uniform = smoothing / T::of_f64(v as f64);
    let mut total = T::zero();
    let mut count = 0;
    for (row, &t) in logits.data().chunks_exact(v.max(1)).zip(targets) {
        if Some(t) == ignore {
            continue;
        }
        if t >= v {
            bail!(Index, "target id {t} outside vocabulary of {v}");
        }
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
        let mut loss = (T::one() - smoothing) * (lse - row[t]);
        if smoothing > T::zero() {
            loss += uniform * row.iter().map(|&x| lse - x).sum::<T>();
        }
        total += loss;
        count += 1;
    }
    Ok((total, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn rand_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks every leaf gradient of `f` against central finite differences.
    fn gradcheck(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>) {
        let h = 1e-3;
        let eval = |xs: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
            let out = f(&mut tape, &vars).unwrap();
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let grads = tape.backward(out).unwrap();
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
            for i in 0..x.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-3, "input {k} element {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Reduces a tensor to a scalar with fixed random weights so that every
    /// output element gets a distinct upstream gradient.
    fn weighted_sum(tape: &mut Tape<'_, f64>, x: Var, seed: u64) -> Result<Var> {
        let mut rng = seeded(seed);
        let w = rand_tensor(tape.value(x).shape().to_vec(), &mut rng);
        let w = tape.constant(w);
        let p = tape.mul(x, w)?;
        Ok(tape.sum(p))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape: Tape<'_, f32> = Tape::new();
        let w = tape.variable(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape: Tape<'_, f32> = Tape::new();
        let w = tape.variable(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape: Tape<'_, f32> = Tape::new();
        let w = tape.variable(Tensor::from_vec(vec![1.0]));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(crate::Error::State(_))));
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let mut other: Tape<'_, f32> = Tape::new();
        let w = other.variable(Tensor::from_vec(vec![1.0]));
        let s = other.sum(w);
        let mut empty: Tape<'_, f32> = Tape::new();
        assert!(matches!(empty.backward(s), Err(crate::Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape: Tape<'_, f32> = Tape::new();
        let w = tape.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let mut tape: Tape<'_, f32> = Tape::inference();
        let w = tape.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let s = tape.sum(w);
        assert!(!tape.requires_grad(s));
        let g = tape.backward(s).unwrap();
        assert!(g.get(w).is_none());
    }

    #[test]
    fn gradcheck_matmul_family() {
        let mut rng = seeded(11);
        let a = rand_tensor(vec![3, 4], &mut rng);
        let b = rand_tensor(vec![4, 2], &mut rng);
        gradcheck(vec![a.clone(), b], |t, v| {
            let c = t.matmul(v[0], v[1])?;
            weighted_sum(t, c, 1)
        });
        let b = rand_tensor(vec![5, 4], &mut rng);
        gradcheck(vec![a, b], |t, v| {
            let c = t.matmul_nt(v[0], v[1])?;
            weighted_sum(t, c, 2)
        });
    }

    #[test]
    fn gradcheck_elementwise() {
        let mut rng = seeded(12);
        let a = rand_tensor(vec![3, 4], &mut rng);
        let b = rand_tensor(vec![3, 4], &mut rng);
        let row = rand_tensor(vec![4], &mut rng);
        gradcheck(vec![a.clone(), b.clone()], |t, v| {
            let c = t.add(v[0], v[1])?;
            weighted_sum(t, c, 3)
        });
        gradcheck(vec![a.clone(), row.clone()], |t, v| {
            let c = t.add(v[0], v[1])?;
            weighted_sum(t, c, 4)
        });
        gradcheck(vec![a.clone(), b], |t, v| {
            let c = t.mul(v[0], v[1])?;
            weighted_sum(t, c, 5)
        });
        gradcheck(vec![a.clone(), row], |t, v| {
            let c = t.mul(v[0], v[1])?;
            weighted_sum(t, c, 6)
        });
        gradcheck(vec![a.clone()], |t, v| {
            let c = t.scale(v[0], 0.37);
            weighted_sum(t, c, 7)
        });
        // Keep inputs away from the kink at zero.
        let away = a.map(|x| if x.abs() < 0.05 { 0.3 } else { x });
        gradcheck(vec![away], |t, v| {
            let c = t.relu(v[0]);
            weighted_sum(t, c, 8)
        });
    }

    #[test]
    fn gradcheck_softmax_and_layer_norm() {
        let mut rng = seeded(13);
        let x = rand_tensor(vec![3, 5], &mut rng);
        gradcheck(vec![x.clone()], |t, v| {
            let c = t.softmax(v[0]);
            weighted_sum(t, c, 9)
        });
        let g = rand_tensor(vec![5], &mut rng);
        let b = rand_tensor(vec![5], &mut rng);
        gradcheck(vec![x, g, b], |t, v| {
            let c = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, c, 10)
        });
    }

    #[test]
    fn gradcheck_indexing_ops() {
        let mut rng = seeded(14);
        let table = rand_tensor(vec![6, 3], &mut rng);
        gradcheck(vec![table], |t, v| {
            let c = t.embedding(v[0], &[1, 4, 1, 0])?;
            weighted_sum(t, c, 11)
        });
        let a = rand_tensor(vec![2, 5], &mut rng);
        let b = rand_tensor(vec![2, 3], &mut rng);
        gradcheck(vec![a, b], |t, v| {
            let s = t.slice_cols(v[0], 1, 3)?;
            let c = t.concat_cols(&[s, v[1], s])?;
            weighted_sum(t, c, 12)
        });
    }

    #[test]
    fn gradcheck_concat_rows() {
        let mut rng = seeded(17);
        let a = rand_tensor(vec![2, 3], &mut rng);
        let b = rand_tensor(vec![1, 3], &mut rng);
        gradcheck(vec![a, b], |t, v| {
            let c = t.concat_rows(&[v[1], v[0], v[1]])?;
            weighted_sum(t, c, 14)
        });
    }

    #[test]
    fn gradcheck_attention() {
        let mut rng = seeded(18);
        let q = rand_tensor(vec![5, 4], &mut rng);
        let k = rand_tensor(vec![6, 4], &mut rng);
        let v = rand_tensor(vec![6, 4], &mut rng);
        let segs = vec![
            Segment { q_start: 0, q_len: 2, k_start: 0, k_len: 4 },
            Segment { q_start: 2, q_len: 3, k_start: 3, k_len: 3 },
        ];
        for causal in [false, true] {
            let segs = segs.clone();
            gradcheck(vec![q.clone(), k.clone(), v.clone()], move |t, x| {
                let c = t.attention(x[0], x[1], x[2], &segs, 2, causal)?;
                weighted_sum(t, c, 15)
            });
        }
    }

    #[test]
    fn gradcheck_dropout_with_fixed_mask() {
        let mut rng = seeded(15);
        let x = rand_tensor(vec![4, 4], &mut rng);
        gradcheck(vec![x], |t, v| {
            let mut r = seeded(99);
            let c = t.dropout(v[0], 0.3, true, &mut r)?;
            weighted_sum(t, c, 13)
        });
    }

    #[test]
    fn gradcheck_cross_entropy() {
        let mut rng = seeded(16);
        let logits = rand_tensor(vec![4, 6], &mut rng);
        for smoothing in [0.0, 0.1] {
            gradcheck(vec![logits.clone()], move |t, v| {
                Ok(t.cross_entropy(v[0], &[2, 0, 5, 1], smoothing, Some(0))?.0)
            });
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = Tensor::<f64>::zeros(vec![3, 7]);
        let (loss, n) = cross_entropy_value(&uniform, &[1, 2, 3], 0.0, None).unwrap();
        assert_eq!(n, 3);
        assert!((loss / 3.0 - 7f64.ln()).abs() < 1e-12);
        let two = Tensor::<f64>::zeros(vec![1, 2]);
        let (loss, _) = cross_entropy_value(&two, &[0], 0.2, None).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        let sharp = Tensor::<f64>::matrix(1, 3, vec![0.0, 200.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy_value(&sharp, &[1], 0.0, None).unwrap();
        assert!(loss < 1e-12);
        let (_, n) = cross_entropy_value(&uniform, &[0, 0, 4], 0.0, Some(0)).unwrap();
        assert_eq!(n, 1);
    }
}
