//! Dense row-major 2-D tensors of `f64`.
//!
//! Vectors are `1×n` or `n×1` tensors; scalars are `1×1`. All arithmetic here
//! is eager and gradient-free; the differentiable versions of these ops live
//! on [`crate::autodiff::Tape`].

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardUniform};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Whether the tensor is a trainable leaf.
    pub requires_grad: bool,
    /// Accumulated gradient; same length as `data` when present.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::Input(format!(
                "tensor data has {} values, shape {rows}x{cols} needs {}",
                data.len(),
                rows * cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("tensor construction".into()));
        }
        Ok(Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds from nested rows. Panics on ragged input; intended for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Self::from_vec(r, c, data).expect("finite literal")
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| StandardUniform.sample(rng))
            .collect();
        Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks this tensor as a trainable leaf.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Callers are responsible for keeping
    /// them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value-only copy: drops `requires_grad` and any gradient.
    pub fn detached(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn grad_tensor(&self) -> Option<Tensor> {
        self.grad.as_ref().map(|g| Tensor {
            rows: self.rows,
            cols: self.cols,
            data: g.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.shape() {
            return Err(LabError::dim("accumulate_grad", self.shape(), g.shape()));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.data.clone()),
        }
        Ok(())
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(LabError::NonFinite(op.to_string()))
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(LabError::dim("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_vec(m, n, out).map_err(|_| LabError::NonFinite("matmul".into()))
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data: out,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(LabError::dim(op, self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Tensor::from_vec(self.rows, self.cols, data).map_err(|_| LabError::NonFinite(op.into()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(LabError::dim("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Row indices of the per-row maximum (first wins on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Gathers the listed rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: idx.len(),
            cols: self.cols,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Reinterprets row `r` as a `(tokens × width)` matrix.
    pub fn row_as_matrix(&self, r: usize, tokens: usize, width: usize) -> Result<Tensor> {
        if tokens * width != self.cols {
            return Err(LabError::dim("row_as_matrix", (1, self.cols), (tokens, width)));
        }
        Tensor::from_vec(tokens, width, self.row(r).to_vec())
    }
}

/// Vanilla SGD: `θ ← θ − lr·∇θ` for every parameter. Gradients are left in
/// place.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    if params.iter().any(|p| p.grad.is_none()) {
        return Err(LabError::Usage("sgd_step on a parameter without gradient".into()));
    }
    for p in params.iter_mut() {
        let g = p.grad.as_ref().expect("checked above");
        let updated: Vec<f64> = p.data.iter().zip(g).map(|(w, g)| w - lr * g).collect();
        if updated.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("sgd_step".into()));
        }
        p.data = updated;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let one = Tensor::scalar(2.0).matmul(&Tensor::scalar(3.0)).unwrap();
        assert_eq!(one.data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(2, 3).matmul(&Tensor::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("(2, 3)"), "{err}");
    }

    #[test]
    fn transpose_twice_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(3, 5, 1.0, &mut rng);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn from_vec_rejects_bad_length_and_nan() {
        assert!(Tensor::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn sgd_direct_update() {
        let mut w = Tensor::scalar(1.0).trainable();
        w.grad = Some(vec![2.0]);
        sgd_step(&mut [&mut w], 0.5).unwrap();
        assert_eq!(w.data(), &[0.0]);
        assert_eq!(w.grad.as_deref(), Some(&[2.0][..]));
    }

    #[test]
    fn sgd_zero_lr_and_missing_grad() {
        let mut w = Tensor::scalar(1.5).trainable();
        w.grad = Some(vec![7.0]);
        sgd_step(&mut [&mut w], 0.0).unwrap();
        assert_eq!(w.data(), &[1.5]);
        let mut v = Tensor::scalar(1.0).trainable();
        assert!(matches!(sgd_step(&mut [&mut v], 0.1), Err(LabError::Usage(_))));
    }

    #[test]
    fn accumulate_grad_adds() {
        let mut w = Tensor::zeros(1, 2).trainable();
        let g = Tensor::from_rows(&[&[1.0, 2.0]]);
        w.accumulate_grad(&g).unwrap();
        w.accumulate_grad(&g).unwrap();
        assert_eq!(w.grad.as_deref(), Some(&[2.0, 4.0][..]));
    }
}
