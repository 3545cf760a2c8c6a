//! Eager tensor kernels.
//!
//! Matrix products use a fixed accumulation order per output element, so a
//! result never depends on the worker count or on whether the SIMD-enabled
//! build of a kernel was selected at runtime.

use rand::Rng as _;

use super::parallel::for_each_row_chunk;
use super::{Scalar, Tensor};
use crate::error::{bail, Result};
use crate::rng::Rng;

/// Default layer-normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

macro_rules! avx2_dispatch {
    ($(#[$m:meta])* fn $name:ident => $kernel:ident ($($arg:ident : $ty:ty),*)) => {
        $(#[$m])*
        fn $name<T: Scalar>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide<T: Scalar>($($arg: $ty),*) {
                    $kernel($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: the required CPU feature was detected above.
                    return unsafe { wide($($arg),*) };
                }
            }
            $kernel($($arg),*)
        }
    };
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        bail!(Shape, "{what} must be a matrix, got shape {:?}", t.shape());
    }
    Ok((t.shape()[0], t.shape()[1]))
}

#[inline(always)]
fn nn_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], first: usize, k: usize, n: usize) {
    for (r, crow) in out.chunks_exact_mut(n).enumerate() {
        let arow = &a[(first + r) * k..(first + r + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aik * bv;
            }
        }
    }
}

/// Dot product with eight interleaved partial sums and a fixed reduction tree.
#[inline(always)]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        acc[l] += x * y;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

#[inline(always)]
fn nt_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], first: usize, k: usize, n: usize) {
    for (r, crow) in out.chunks_exact_mut(n).enumerate() {
        let arow = &a[(first + r) * k..(first + r + 1) * k];
        for (j, c) in crow.iter_mut().enumerate() {
            *c = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

#[inline(always)]
fn tn_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], first: usize, m: usize, n: usize) {
    let k = a.len() / m.max(1);
    for (r, crow) in out.chunks_exact_mut(n).enumerate() {
        let i = first + r;
        for kk in 0..k {
            let aki = a[kk * m + i];
            let brow = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aki * bv;
            }
        }
    }
}

avx2_dispatch!(fn nn_rows => nn_kernel(a: &[T], b: &[T], out: &mut [T], first: usize, k: usize, n: usize));
avx2_dispatch!(fn nt_rows => nt_kernel(a: &[T], b: &[T], out: &mut [T], first: usize, k: usize, n: usize));
avx2_dispatch!(fn tn_rows => tn_kernel(a: &[T], b: &[T], out: &mut [T], first: usize, m: usize, n: usize));

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        bail!(Shape, "matmul inner dimensions differ: {m}x{k} · {k2}x{n}");
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for_each_row_chunk(&mut out, n, k * n, |first, chunk| nn_rows(ad, bd, chunk, first, k, n));
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul_nt lhs")?;
    let (n, k2) = matrix_dims(b, "matmul_nt rhs")?;
    if k != k2 {
        bail!(Shape, "matmul_nt inner dimensions differ: {m}x{k} · ({n}x{k2})ᵀ");
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for_each_row_chunk(&mut out, n, k * n, |first, chunk| nt_rows(ad, bd, chunk, first, k, n));
    Tensor::new(vec![m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = matrix_dims(a, "matmul_tn lhs")?;
    let (k2, n) = matrix_dims(b, "matmul_tn rhs")?;
    if k != k2 {
        bail!(Shape, "matmul_tn inner dimensions differ: ({k}x{m})ᵀ · {k2}x{n}");
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for_each_row_chunk(&mut out, n, k * n, |first, chunk| tn_rows(ad, bd, chunk, first, m, n));
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = matrix_dims(a, "transpose input")?;
    let d = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// True when `b` broadcasts against `a`: equal shapes, or `b` matches a
/// trailing run of `a`'s dimensions.
pub fn broadcasts<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    let (sa, sb) = (a.shape(), b.shape());
    sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb
}

fn zip_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    what: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if !broadcasts(a, b) {
        bail!(Shape, "{what}: cannot broadcast {:?} against {:?}", b.shape(), a.shape());
    }
    let bd = b.data();
    let data = a
        .data()
        .chunks_exact(bd.len().max(1))
        .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_broadcast(a, b, "add", |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_broadcast(a, b, "mul", |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Softmax of one contiguous slice in place, with max subtraction.
#[inline]
pub(crate) fn softmax_slice<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax along the last dimension.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = out.cols();
    if c > 0 {
        out.data_mut().chunks_exact_mut(c).for_each(softmax_slice);
    }
    out
}

/// Softmax along an arbitrary axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        bail!(Shape, "softmax axis {axis} out of range for shape {:?}", shape);
    }
    if axis + 1 == shape.len() {
        return Ok(softmax_rows(x));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            for (a, b) in buf.iter_mut().enumerate() {
                *b = data[(o * len + a) * inner + i];
            }
            softmax_slice(&mut buf);
            for (a, &b) in buf.iter().enumerate() {
                data[(o * len + a) * inner + i] = b;
            }
        }
    }
    Ok(out)
}

/// Per-row mean and reciprocal standard deviation used by layer norm.
pub(crate) fn row_stats<T: Scalar>(x: &Tensor<T>, eps: T) -> (Vec<T>, Vec<T>) {
    let c = x.cols();
    let n = T::of_f64(c as f64);
    x.data()
        .chunks_exact(c.max(1))
        .map(|row| {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            (mean, T::one() / (var + eps).sqrt())
        })
        .unzip()
}

/// Layer normalization over the last dimension with affine gain and bias.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let c = x.cols();
    if gain.numel() != c || bias.numel() != c {
        bail!(Shape, "layer_norm gain/bias must have {c} elements");
    }
    let (mean, rstd) = row_stats(x, eps);
    let (g, b) = (gain.data(), bias.data());
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_exact_mut(c.max(1)).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[r]) * rstd[r] * g[j] + b[j];
        }
    }
    Ok(out)
}

/// Inverted dropout. Identity when `training` is false or `p == 0`.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, training: bool, rng: &mut Rng) -> Result<Tensor<T>> {
    Ok(dropout_mask(x.numel(), p, training, rng)?
        .map(|mask| {
            let mut out = x.clone();
            out.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= T::of_f64(m));
            out
        })
        .unwrap_or_else(|| x.clone()))
}

/// Mask of `0` or `1/(1-p)` values, or `None` when dropout is inactive.
pub(crate) fn dropout_mask(n: usize, p: f64, training: bool, rng: &mut Rng) -> Result<Option<Vec<f64>>> {
    if !(0.0..1.0).contains(&p) {
        bail!(Value, "dropout probability must be in [0, 1), got {p}");
    }
    if !training || p == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - p);
    Ok(Some((0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()))
}

/// Gathers rows of `table` (`[vocab × dim]`).
pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (rows, dim) = matrix_dims(table, "embedding table")?;
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        if id >= rows {
            bail!(Index, "embedding id {id} out of range for table with {rows} rows");
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), dim], out)
}

/// Column slice `[rows × len]` of a matrix starting at column `start`.
pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (rows, cols) = matrix_dims(x, "slice_cols input")?;
    if start + len > cols {
        bail!(Shape, "column slice {start}..{} exceeds width {cols}", start + len);
    }
    let data = (0..rows).flat_map(|r| x.row(r)[start..start + len].iter().copied()).collect();
    Tensor::new(vec![rows, len], data)
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let rows = match parts.first() {
        Some(p) => matrix_dims(p, "concat_cols part")?.0,
        None => bail!(Shape, "concat_cols needs at least one part"),
    };
    let mut width = 0;
    for p in parts {
        let (r, c) = matrix_dims(p, "concat_cols part")?;
        if r != rows {
            bail!(Shape, "concat_cols row mismatch: {r} vs {rows}");
        }
        width += c;
    }
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![rows, width], data)
}

/// Vertical concatenation of matrices with equal column counts.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let cols = match parts.first() {
        Some(p) => matrix_dims(p, "concat_rows part")?.1,
        None => bail!(Shape, "concat_rows needs at least one part"),
    };
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        let (r, c) = matrix_dims(p, "concat_rows part")?;
        if c != cols {
            bail!(Shape, "concat_rows column mismatch: {c} vs {cols}");
        }
        data.extend_from_slice(p.data());
        rows += r;
    }
    Tensor::new(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn m(rows: usize, cols: usize, v: &[f32]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = m(2, 2, &[0.3, -1.25, 7.0, 1e-3]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let z: Tensor = matmul(&Tensor::zeros(vec![3, 4]), &Tensor::ones(vec![4, 2])).unwrap();
        assert_eq!(z, Tensor::zeros(vec![3, 2]));
    }

    #[test]
    fn matmul_hand_computed() {
        let c = matmul(&m(2, 2, &[1., 2., 3., 4.]), &m(2, 2, &[5., 6., 7., 8.])).unwrap();
        assert_eq!(c.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Tensor::<f32>::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3]));
        assert!(matches!(err, Err(crate::Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = m(3, 5, &(0..15).map(|v| v as f32 * 0.5 - 3.0).collect::<Vec<_>>());
        let b = m(4, 5, &(0..20).map(|v| (v as f32).sin()).collect::<Vec<_>>());
        let nt = matmul_nt(&a, &b).unwrap();
        let direct = matmul(&a, &transpose(&b).unwrap()).unwrap();
        for (x, y) in nt.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-5);
        }
        let at = transpose(&a).unwrap();
        let tn = matmul_tn(&at, &at).unwrap();
        let direct = matmul(&a, &at).unwrap();
        for (x, y) in tn.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn identity_is_bit_exact_for_transposed_rhs() {
        let x = m(3, 3, &[1.5, -2.25, 3.0, 1e-8, 7.0, -0.0, 4.0, 5.0, 6.0]);
        let xt = transpose(&x).unwrap();
        assert_eq!(matmul_nt(&Tensor::eye(3), &xt).unwrap(), x);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_vec(vec![0.0f32, 0.0, 0.0]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax_rows(&Tensor::from_vec(vec![1000.0f32, 0.0]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-7 && s.data()[1] < 1e-30);
        let s = softmax_rows(&Tensor::from_vec(vec![1.0f64, 2.0]));
        let e = std::f64::consts::E;
        assert!((s.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((s.data()[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((s.data()[0] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_over_leading_axis() {
        let x = m(2, 3, &[1., 2., 3., 1., 0., -1.]);
        let s = softmax(&x, 0).unwrap();
        for col in 0..3 {
            let sum = s.data()[col] + s.data()[3 + col];
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!((s.data()[0] - 0.5).abs() < 1e-7);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::ones(vec![2]);
        let zeros = Tensor::zeros(vec![2]);
        let y = layer_norm(&Tensor::from_vec(vec![1.0f32, 3.0]), &ones, &zeros, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        let y = layer_norm(&Tensor::from_vec(vec![4.0f32; 4]), &Tensor::ones(vec![4]), &Tensor::zeros(vec![4]), 1e-5)
            .unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
        let x = Tensor::from_vec(vec![0.3f32, -2.0, 5.5, 1.0, 0.0]);
        let y = layer_norm(&x, &Tensor::ones(vec![5]), &Tensor::zeros(vec![5]), 1e-5).unwrap();
        let mean: f32 = y.data().iter().sum::<f32>() / 5.0;
        assert!(mean.abs() < 1e-6);
        assert!(layer_norm(&x, &Tensor::ones(vec![4]), &Tensor::zeros(vec![5]), 1e-5).is_err());
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(relu(&Tensor::from_vec(vec![-1.0f32, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let x = Tensor::from_vec(vec![1.0f32, -2.0, 3.0]);
        let mut rng = seeded(0);
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap(), x);
        let table = m(3, 2, &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(embedding_lookup(&table, &[0, 0]).unwrap().data(), &[1., 2., 1., 2.]);
        assert!(matches!(embedding_lookup(&table, &[3]), Err(crate::Error::Index(_))));
        let sum = add(&m(2, 2, &[1., 2., 3., 4.]), &Tensor::from_vec(vec![10., 20.])).unwrap();
        assert_eq!(sum.data(), &[11., 22., 13., 24.]);
        assert!(add(&m(2, 2, &[1., 2., 3., 4.]), &Tensor::from_vec(vec![1., 2., 3.])).is_err());
    }

    #[test]
    fn dropout_scales_survivors() {
        let x = Tensor::ones(vec![1000]);
        let mut rng = seeded(3);
        let y: Tensor = dropout(&x, 0.25, true, &mut rng).unwrap();
        let keep = 1.0 / 0.75;
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - keep).abs() < 1e-6));
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&zeros));
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn slice_and_concat_invert() {
        let x = m(2, 5, &(0..10).map(|v| v as f32).collect::<Vec<_>>());
        let a = slice_cols(&x, 0, 2).unwrap();
        let b = slice_cols(&x, 2, 3).unwrap();
        assert_eq!(concat_cols(&[&a, &b]).unwrap(), x);
        assert!(slice_cols(&x, 4, 2).is_err());
    }

    #[test]
    fn matmul_is_worker_count_invariant() {
        let a = Tensor::matrix(67, 129, (0..67 * 129).map(|v| ((v * 37 % 101) as f32 - 50.0) / 7.0).collect())
            .unwrap();
        let b = Tensor::matrix(129, 300, (0..129 * 300).map(|v| ((v * 13 % 97) as f32 - 48.0) / 11.0).collect())
            .unwrap();
        let before = super::super::parallel::workers();
        super::super::parallel::set_workers(1);
        let one = matmul(&a, &b).unwrap();
        let one_nt = matmul_nt(&a, &transpose(&b).unwrap()).unwrap();
        super::super::parallel::set_workers(4);
        let four = matmul(&a, &b).unwrap();
        let four_nt = matmul_nt(&a, &transpose(&b).unwrap()).unwrap();
        super::super::parallel::set_workers(before);
        assert_eq!(one, four);
        assert_eq!(one_nt, four_nt);
    }
}
