//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus row-major f64 storage. The
//! reverse-mode machinery lives in [`tape::Tape`]; free functions here
//! ([`matmul`], [`softmax_rows`], [`layer_norm`]) are graph-free and share
//! kernels with the tape so both paths produce identical bits.

pub mod gradcheck;
pub mod kernels;
pub mod tape;

pub use gradcheck::finite_diff_check;
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};

/// Dense row-major f64 array. Shapes are 1-D or 2-D throughout this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} does not describe a buffer of {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(rows.iter().all(|x| x.len() == c), "ragged rows");
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian init, Box-Muller from the supplied RNG.
    pub fn randn(rows: usize, cols: usize, sigma: f64, rng: &mut impl rand::Rng) -> Self {
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
            data.push(r * c * sigma);
            if data.len() < n {
                data.push(r * s * sigma);
            }
        }
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interpret as a matrix. 1-D shapes count as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("tensor of rank {} used as a matrix", self.shape.len()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let (_, cols) = self.dims2();
        self.data[r * cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// True when both tensors carry identical bit patterns.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn l2_norm(&self) -> f64 {
        kernels::dot(&self.data, &self.data).sqrt()
    }
}

/// Plain matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2();
    let (kb, n) = b.dims2();
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(m, n);
    kernels::matmul_acc(&a.data, &b.data, &mut out.data, m, ka, n);
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2();
    if c < 1 {
        return Err(Error::Contract("softmax over empty rows".into()));
    }
    let mut out = Tensor::zeros(r, c);
    kernels::softmax_rows(&x.data, &mut out.data, r, c);
    Ok(out)
}

/// Per-row standardization to zero mean / unit variance (no affine).
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, c) = x.dims2();
    if c < 2 {
        return Err(Error::Contract(
            "layer_norm needs at least two columns".into(),
        ));
    }
    let stats = kernels::row_stats(&x.data, r, c, eps);
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let (mean, rstd) = stats[i];
        for j in 0..c {
            out.data[i * c + j] = (x.data[i * c + j] - mean) * rstd;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let got = matmul(&Tensor::eye(2), &a).unwrap();
        assert!(got.bitwise_eq(&a));
        let z = Tensor::zeros(2, 2);
        let got = matmul(&a, &z).unwrap();
        assert!(got.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_small_case_matches_scalar_oracle() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        // independent scalar triple loop
        let mut want = [[0.0f64; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for t in 0..2 {
                    want[i][j] += a.at(i, t) * b.at(t, j);
                }
            }
        }
        assert_eq!(want, [[19.0, 22.0], [43.0, 50.0]]);
        let got = matmul(&a, &b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(got.at(i, j), want[i][j]);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_singleton() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]);
        let s = softmax_rows(&x).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let one = softmax_rows(&Tensor::from_rows(&[vec![3.7]])).unwrap();
        assert_eq!(one.at(0, 0), 1.0);
    }

    #[test]
    fn softmax_two_logits_matches_direct_exp() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![2.0, 0.0]])).unwrap();
        // direct e^x evaluation
        let e2 = 2.0f64.exp();
        let want0 = e2 / (e2 + 1.0);
        assert!((s.at(0, 0) - want0).abs() < 1e-12);
        assert!((s.at(0, 0) - 0.880797).abs() < 1e-6);
        assert!((s.at(0, 1) - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = crate::test_rng(3);
        for _ in 0..20 {
            let x = Tensor::randn(5, 7, 3.0, &mut rng);
            let s = softmax_rows(&x).unwrap();
            for r in 0..5 {
                let sum: f64 = s.row(r).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
            let mut shifted = x.clone();
            for r in 0..5 {
                for c in 0..7 {
                    let v = shifted.at(r, c) + 11.25;
                    shifted.set(r, c, v);
                }
            }
            let s2 = softmax_rows(&shifted).unwrap();
            assert!(s.max_abs_diff(&s2) < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_and_already_normalized() {
        let x = Tensor::from_rows(&[vec![5.0, 5.0, 5.0, 5.0]]);
        let y = layer_norm(&x, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]);
        let y = layer_norm(&x, 1e-15).unwrap();
        assert!((y.at(0, 0) - 1.0).abs() < 1e-7);
        assert!((y.at(0, 1) + 1.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_three_values_matches_scalar_oracle() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let y = layer_norm(&x, 1e-5).unwrap();
        // scalar mean/variance oracle
        let mean = 2.0;
        let var = (1.0 + 0.0 + 1.0) / 3.0;
        let rstd = 1.0 / (var + 1e-5f64).sqrt();
        for j in 0..3 {
            let want = (x.at(0, j) - mean) * rstd;
            assert!((y.at(0, j) - want).abs() < 1e-15);
        }
        assert!((y.at(0, 0) + 1.224734).abs() < 1e-6);
        assert!(y.at(0, 1).abs() < 1e-12);
        assert!((y.at(0, 2) - 1.224734).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_moments_for_random_rows() {
        let mut rng = crate::test_rng(7);
        for _ in 0..20 {
            let x = Tensor::randn(4, 16, 2.5, &mut rng);
            let y = layer_norm(&x, 1e-12).unwrap();
            for r in 0..4 {
                let mean: f64 = y.row(r).iter().sum::<f64>() / 16.0;
                let var: f64 = y.row(r).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }
}
