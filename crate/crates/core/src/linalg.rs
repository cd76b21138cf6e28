//! Dense row-major matrices and vectors in f64, plus the activations and
//! loss functions shared by every cell and model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul: {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// y = W x
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if self.cols != x.dim() {
            return Err(Error::shape(format!(
                "matvec: {}x{} by vector of dim {}",
                self.rows,
                self.cols,
                x.dim()
            )));
        }
        let mut out = Vector::zeros(self.rows);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x.as_slice()) {
                acc += w * v;
            }
            out.as_mut_slice()[i] = acc;
        }
        Ok(out)
    }

    /// y += W^T g, used for backpropagating through an affine map.
    pub fn transpose_matvec_into(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for i in 0..self.rows {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += gi * w;
            }
        }
    }

    /// self += g x^T (rank-one gradient accumulation).
    pub fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for i in 0..self.rows {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (w, v) in row.iter_mut().zip(x) {
                *w += gi * v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Vector { data: s.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn add_assign(&mut self, other: &Vector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn apply_activation(x: &Vector, kind: Activation) -> Vector {
    let f = match kind {
        Activation::Sigmoid => sigmoid,
        Activation::Tanh => f64::tanh,
    };
    Vector::from_vec(x.as_slice().iter().map(|&v| f(v)).collect())
}

/// Softmax with max-subtraction so large logits cannot overflow.
pub fn softmax(logits: &Vector) -> Vector {
    let max = logits
        .as_slice()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.as_slice().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector::from_vec(exps.into_iter().map(|e| e / sum).collect())
}

/// Negative log-likelihood of the true class under the predicted
/// distribution `y`, with `y_hat` one-hot ground truth. Probabilities are
/// clamped at `LOG_CLAMP` before the log so an exact zero never produces
/// infinity.
pub fn cross_entropy(y: &Vector, y_hat: &Vector) -> f64 {
    debug_assert_eq!(y.dim(), y_hat.dim());
    let mut loss = 0.0;
    for (p, t) in y.as_slice().iter().zip(y_hat.as_slice()) {
        if *t != 0.0 {
            loss -= t * p.max(LOG_CLAMP).ln();
        }
    }
    loss
}

/// lambda * sum of squared entries over every learnable parameter slice.
pub fn l2_penalty(params: &[&[f64]], lambda: f64) -> f64 {
    let sum: f64 = params
        .iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>())
        .sum();
    lambda * sum
}

pub fn one_hot(class: usize, num_classes: usize) -> Vector {
    let mut v = Vector::zeros(num_classes);
    v[class] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let id = Matrix::identity(3);
        assert_eq!(id.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_zero() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let z = Matrix::zeros(2, 2);
        assert_eq!(z.matmul(&m).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_basic() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0], &[6.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn matmul_associative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let rand_mat = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
                Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
            };
            let a = rand_mat(&mut rng, 4, 5);
            let b = rand_mat(&mut rng, 5, 3);
            let c = rand_mat(&mut rng, 3, 6);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.as_slice().iter().zip(right.as_slice()) {
                assert_abs_diff_eq!(l, r, epsilon = 1e-9 * l.abs().max(1.0));
            }
        }
    }

    #[test]
    fn activation_values() {
        let x = Vector::from_vec(vec![0.0]);
        assert_abs_diff_eq!(apply_activation(&x, Activation::Sigmoid)[0], 0.5);
        assert_abs_diff_eq!(apply_activation(&x, Activation::Tanh)[0], 0.0);
        let v = 1.7;
        assert_abs_diff_eq!(sigmoid(-v), 1.0 - sigmoid(v), epsilon = 1e-15);
    }

    #[test]
    fn softmax_uniform() {
        let s = softmax(&Vector::zeros(6));
        for p in s.as_slice() {
            assert_abs_diff_eq!(*p, 1.0 / 6.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let v = Vector::from_vec(vec![0.3, -1.2, 2.5]);
        let shifted = Vector::from_vec(v.as_slice().iter().map(|x| x + 100.0).collect());
        let a = softmax(&v);
        let b = softmax(&shifted);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_reference_values() {
        // scalar reference: e^1, e^2, e^3 normalized
        let s = softmax(&Vector::from_vec(vec![1.0, 2.0, 3.0]));
        assert_abs_diff_eq!(s[0], 0.09003057317038046, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 0.24472847105479767, epsilon = 1e-12);
        assert_abs_diff_eq!(s[2], 0.6652409557748219, epsilon = 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_for_extreme_logits() {
        let s = softmax(&Vector::from_vec(vec![500.0, -500.0, 0.0]));
        let sum: f64 = s.as_slice().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        assert!(s.as_slice().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn cross_entropy_values() {
        let truth = one_hot(2, 6);
        assert_abs_diff_eq!(cross_entropy(&one_hot(2, 6), &truth), 0.0);
        let uniform = Vector::from_vec(vec![1.0 / 6.0; 6]);
        assert_abs_diff_eq!(cross_entropy(&uniform, &truth), 6.0_f64.ln(), epsilon = 1e-12);
        let mut half = Vector::from_vec(vec![0.1; 6]);
        half[2] = 0.5;
        assert_abs_diff_eq!(cross_entropy(&half, &truth), 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero() {
        let truth = one_hot(0, 3);
        let y = Vector::from_vec(vec![0.0, 0.5, 0.5]);
        let loss = cross_entropy(&y, &truth);
        assert!(loss.is_finite());
        assert_abs_diff_eq!(loss, -(LOG_CLAMP.ln()), epsilon = 1e-9);
    }

    #[test]
    fn l2_penalty_values() {
        let zeros = vec![0.0; 10];
        assert_eq!(l2_penalty(&[&zeros], 0.5), 0.0);
        let theta = [2.0];
        assert_abs_diff_eq!(l2_penalty(&[&theta], 0.01), 0.04, epsilon = 1e-15);
    }
}
