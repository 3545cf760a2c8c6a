//! 8-bit symmetric quantization and integer matrix products.
//!
//! A tensor is quantized with a single scale `127 / max|x|`, so its largest
//! magnitude maps to ±127. Products of two quantized operands are
//! accumulated exactly in `i32` and rescaled to `f32` at the end.

use crate::error::{bail, Result};
use crate::tensor::parallel::for_each_row_chunk;
use crate::tensor::Tensor;

pub mod file;
pub mod kernels;
mod model;

pub use file::{ContainerFile, Entry, Payload};
pub use kernels::Kernel;
pub use model::{quantize_model, quantize_params, QuantMode, QuantizeOptions, QuantizedModel};

/// Largest magnitude of a quantized value.
pub const QMAX: f32 = 127.0;

/// Longest inner dimension for which an `i32` accumulator cannot overflow.
pub const MAX_INNER_DIM: usize = 1 << 16;

/// Int8 values with one scale for the whole tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    qdata: Vec<i8>,
    scale: f32,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, qdata: Vec<i8>, scale: f32) -> Result<Self> {
        if shape.iter().product::<usize>() != qdata.len() {
            bail!(Shape, "shape {:?} does not match {} int8 values", shape, qdata.len());
        }
        if !(scale.is_finite() && scale > 0.0) {
            bail!(Value, "quantization scale must be positive and finite, got {scale}");
        }
        if qdata.contains(&i8::MIN) {
            bail!(Value, "int8 payload contains -128, outside the symmetric range");
        }
        Ok(Self { shape, qdata, scale })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn qdata(&self) -> &[i8] {
        &self.qdata
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self.qdata.iter().map(|&q| q as f32 / self.scale).collect();
        Tensor::new(self.shape.clone(), data).expect("shape checked at construction")
    }
}

/// Quantizes `x` with scale `127 / max|x|` and round-half-away-from-zero.
///
/// An all-zero tensor gets scale 1 and all-zero values.
pub fn quantize(x: &Tensor) -> Result<QuantizedTensor> {
    if !x.is_finite() {
        bail!(Value, "cannot quantize a tensor with non-finite values");
    }
    let max_abs = x.max_abs();
    let scale = if max_abs == 0.0 { 1.0 } else { QMAX / max_abs };
    let s = scale as f64;
    let qdata = x
        .data()
        .iter()
        .map(|&v| (v as f64 * s).round().clamp(-127.0, 127.0) as i8)
        .collect();
    QuantizedTensor::new(x.shape().to_vec(), qdata, scale)
}

/// On-the-fly quantization of an activation tensor before a matrix product.
pub fn quantize_activations(x: &Tensor) -> Result<QuantizedTensor> {
    quantize(x)
}

/// Weight matrix packed for `x · W` with int8 operands.
///
/// Stored output-major: row `j` holds the `k` weights feeding output `j`,
/// so both operands of every dot product are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct QMatrix {
    k: usize,
    n: usize,
    rows: Vec<i8>,
    row_sums: Vec<i32>,
    scale: f32,
}

impl QMatrix {
    /// Packs a logical `[k × n]` weight (used as `x · W`).
    pub fn from_weight(w: &QuantizedTensor) -> Result<Self> {
        let (k, n) = dims2(w.shape())?;
        let mut rows = vec![0i8; k * n];
        for i in 0..k {
            for j in 0..n {
                rows[j * k + i] = w.qdata[i * n + j];
            }
        }
        Self::from_parts(k, n, rows, w.scale)
    }

    /// Packs an output-major `[n × k]` matrix (used as `x · Eᵀ`).
    pub fn from_rows(e: &QuantizedTensor) -> Result<Self> {
        let (n, k) = dims2(e.shape())?;
        Self::from_parts(k, n, e.qdata.clone(), e.scale)
    }

    fn from_parts(k: usize, n: usize, rows: Vec<i8>, scale: f32) -> Result<Self> {
        if k > MAX_INNER_DIM {
            bail!(Shape, "inner dimension {k} exceeds the int32 accumulator limit {MAX_INNER_DIM}");
        }
        let row_sums = rows.chunks(k.max(1)).map(|r| r.iter().map(|&v| v as i32).sum()).collect();
        Ok(Self { k, n, rows, row_sums, scale })
    }

    pub fn inner_dim(&self) -> usize {
        self.k
    }

    pub fn outputs(&self) -> usize {
        self.n
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// Restricts the outputs to `ids`, keeping the original scale.
    pub fn select_outputs(&self, ids: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(ids.len() * self.k);
        for &id in ids {
            if id >= self.n {
                bail!(Index, "output {id} out of range for {} outputs", self.n);
            }
            rows.extend_from_slice(&self.rows[id * self.k..(id + 1) * self.k]);
        }
        Self::from_parts(self.k, ids.len(), rows, self.scale)
    }

    /// Exact integer products `a_q · W` as an `m × n` row-major buffer.
    pub fn gemm_i32(&self, a: &QuantizedTensor, kernel: Kernel) -> Result<Vec<i32>> {
        let (m, k) = dims2(a.shape())?;
        if k != self.k {
            bail!(Shape, "int8 product inner dimensions differ: {m}x{k} · {}x{}", self.k, self.n);
        }
        // Parallel over outputs: worker w owns a contiguous range of columns.
        let mut by_output = vec![0i32; self.n * m];
        for_each_row_chunk(&mut by_output, m, m * k, |first, chunk| {
            kernels::gemm_i8_block(kernel, a.qdata(), m, k, &self.rows, &self.row_sums, first, chunk)
        });
        if m == 1 {
            return Ok(by_output);
        }
        let mut out = vec![0i32; m * self.n];
        for j in 0..self.n {
            for i in 0..m {
                out[i * self.n + j] = by_output[j * m + i];
            }
        }
        Ok(out)
    }

    /// `a_q · W` rescaled to `f32`.
    pub fn matmul_quantized(&self, a: &QuantizedTensor, kernel: Kernel) -> Result<Tensor> {
        let m = a.shape()[0];
        let denom = a.scale * self.scale;
        let acc = self.gemm_i32(a, kernel)?;
        Tensor::matrix(m, self.n, acc.into_iter().map(|v| v as f32 / denom).collect())
    }

    /// Quantizes the activations `x` on the fly and multiplies.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.matmul_quantized(&quantize_activations(x)?, Kernel::best())
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[a, b] => Ok((a, b)),
        _ => bail!(Shape, "expected a matrix, got shape {:?}", shape),
    }
}

/// Product of two quantized matrices `a_q[m×k] · b_q[k×n]`.
pub fn qmatmul(a: &QuantizedTensor, b: &QuantizedTensor) -> Result<Tensor> {
    qmatmul_with(a, b, Kernel::best())
}

pub fn qmatmul_with(a: &QuantizedTensor, b: &QuantizedTensor, kernel: Kernel) -> Result<Tensor> {
    let (_, k) = dims2(a.shape())?;
    let (k2, _) = dims2(b.shape())?;
    if k != k2 {
        bail!(Shape, "qmatmul inner dimensions differ: {k} vs {k2}");
    }
    QMatrix::from_weight(b)?.matmul_quantized(a, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::ops::matmul;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, rng: &mut crate::rng::Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let q = quantize(&Tensor::zeros(vec![4])).unwrap();
        assert_eq!(q.scale(), 1.0);
        assert_eq!(q.qdata(), &[0; 4]);
        let q = quantize(&Tensor::from_vec(vec![2.0, -2.0, 1.0])).unwrap();
        assert_eq!(q.scale(), 63.5);
        assert_eq!(q.qdata(), &[127, -127, 64]);
        let q = quantize(&Tensor::from_vec(vec![1.0])).unwrap();
        assert_eq!((q.qdata(), q.scale()), (&[127i8][..], 127.0));
    }

    #[test]
    fn quantize_rejects_non_finite() {
        assert!(matches!(quantize(&Tensor::from_vec(vec![1.0, f32::NAN])), Err(crate::Error::Value(_))));
        assert!(quantize(&Tensor::from_vec(vec![f32::INFINITY])).is_err());
    }

    #[test]
    fn activation_quantization_is_deterministic() {
        let mut rng = seeded(2);
        let x = random_matrix(3, 17, &mut rng);
        assert_eq!(quantize_activations(&x).unwrap(), quantize_activations(&x).unwrap());
        assert_eq!(quantize_activations(&x).unwrap(), quantize(&x).unwrap());
    }

    #[test]
    fn exact_values_multiply_exactly() {
        let x = Tensor::matrix(2, 2, vec![-1.0, 0.0, 1.0, 1.0]).unwrap();
        let out = qmatmul(&quantize(&Tensor::eye(2)).unwrap(), &quantize(&x).unwrap()).unwrap();
        assert_eq!(out, x);
        let z = qmatmul(&quantize(&Tensor::zeros(vec![2, 3])).unwrap(), &quantize(&random_matrix(3, 2, &mut seeded(1))).unwrap())
            .unwrap();
        assert_eq!(z, Tensor::zeros(vec![2, 2]));
    }

    #[test]
    fn qmatmul_shape_mismatch() {
        let a = quantize(&Tensor::ones(vec![2, 3])).unwrap();
        assert!(matches!(qmatmul(&a, &a), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn error_bound_against_f32_oracle() {
        let mut rng = seeded(9);
        let a = random_matrix(64, 64, &mut rng);
        let b = random_matrix(64, 64, &mut rng);
        let (qa, qb) = (quantize(&a).unwrap(), quantize(&b).unwrap());
        let exact = matmul(&a, &b).unwrap();
        let approx = qmatmul(&qa, &qb).unwrap();
        let (da, db) = (0.5 / qa.scale(), 0.5 / qb.scale());
        let bound = 64.0 * (da * b.max_abs() + db * a.max_abs() + da * db);
        for (x, y) in exact.data().iter().zip(approx.data()) {
            assert!((x - y).abs() <= bound);
        }
    }

    #[test]
    fn select_outputs_matches_full_product() {
        let mut rng = seeded(4);
        let e = quantize(&random_matrix(10, 8, &mut rng)).unwrap();
        let x = random_matrix(1, 8, &mut rng);
        let full = QMatrix::from_rows(&e).unwrap().forward(&x).unwrap();
        let part = QMatrix::from_rows(&e).unwrap().select_outputs(&[7, 2]).unwrap().forward(&x).unwrap();
        assert_eq!(part.data(), &[full.data()[7], full.data()[2]]);
        assert!(QMatrix::from_rows(&e).unwrap().select_outputs(&[10]).is_err());
    }

    #[test]
    fn parallel_gemm_is_bit_identical() {
        let mut rng = seeded(8);
        let a = quantize(&random_matrix(7, 300, &mut rng)).unwrap();
        let w = QMatrix::from_weight(&quantize(&random_matrix(300, 257, &mut rng)).unwrap()).unwrap();
        let before = crate::tensor::parallel::workers();
        crate::tensor::parallel::set_workers(1);
        let one = w.gemm_i32(&a, Kernel::best()).unwrap();
        crate::tensor::parallel::set_workers(3);
        let three = w.gemm_i32(&a, Kernel::best()).unwrap();
        crate::tensor::parallel::set_workers(before);
        assert_eq!(one, three);
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(values in proptest::collection::vec(-1e3f32..1e3, 1..64)) {
            let x = Tensor::from_vec(values);
            let q = quantize(&x).unwrap();
            let step = 0.5 / q.scale() as f64;
            for (&orig, &qv) in x.data().iter().zip(q.qdata()) {
                let back = qv as f64 / q.scale() as f64;
                // Slack covers rounding of the f64 evaluation itself.
                prop_assert!((back - orig as f64).abs() <= step * (1.0 + 1e-9));
            }
        }

        #[test]
        fn nonzero_tensor_hits_full_range(values in proptest::collection::vec(-50f32..50.0, 1..64)) {
            let x = Tensor::from_vec(values);
            let q = quantize(&x).unwrap();
            prop_assert!(q.qdata().iter().all(|&v| (-127..=127).contains(&v)));
            if x.max_abs() > 0.0 {
                prop_assert!(q.qdata().iter().any(|&v| v.abs() == 127));
            }
        }
    }
}
