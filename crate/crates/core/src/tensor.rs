//! Dense row-major `f64` matrices.
//!
//! Everything in the crate (weights, activations, gradients, batches) is a
//! [`Tensor`]. Shape errors are reported as [`Error::Dimension`]; products
//! that overflow to NaN/Inf are reported as [`Error::NonFinite`] instead of
//! being passed on silently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a tensor from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Gathers the given rows, in order, into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Dimension(format!("row {i} of a {}-row tensor", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Tensor {
            rows: self.rows,
            cols,
            data,
        }
    }

    /// Horizontal concatenation.
    pub fn hcat(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(Error::Dimension(format!(
                "hcat of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Tensor {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::finite_or("matmul", n, m, out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(Error::Dimension(format!(
                "t_matmul {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::finite_or("t_matmul", n, m, out)
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::finite_or("matmul_t", n, m, out)
    }

    fn finite_or(op: &str, rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(Tensor { rows, cols, data })
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{op} of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn hadamard_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "hadamard_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn scale_assign(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &Tensor) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Dimension(format!(
                "broadcast {:?} over {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums as a `1 x cols` tensor.
    pub fn sum_rows(&self) -> Tensor {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Tensor {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let scale = b.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        a.max_abs_diff(b) / scale
    }

    #[test]
    fn identity_product() {
        let i = Tensor::identity(2);
        let b = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(i.matmul(&b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn random_5x7_by_7x3_matches_triple_loop() {
        let mut rng = Rng::new(5);
        let a = rng.gaussian_tensor(5, 7, 0.0, 1.0).unwrap();
        let b = rng.gaussian_tensor(7, 3, 0.0, 1.0).unwrap();
        assert!(rel_err(&a.matmul(&b).unwrap(), &naive(&a, &b)) < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
        assert!(matches!(Tensor::from_vec(2, 2, vec![1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let a = Tensor::full(1, 2, 1e308);
        let b = Tensor::full(2, 1, 1e308);
        assert!(matches!(a.matmul(&b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = Rng::new(9);
        let a = rng.gaussian_tensor(6, 4, 0.0, 1.0).unwrap();
        let b = rng.gaussian_tensor(6, 5, 0.0, 1.0).unwrap();
        let c = rng.gaussian_tensor(3, 4, 0.0, 1.0).unwrap();
        assert!(rel_err(&a.t_matmul(&b).unwrap(), &naive(&a.transpose(), &b)) < 1e-12);
        assert!(rel_err(&a.matmul_t(&c).unwrap(), &naive(&a, &c.transpose())) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn matmul_matches_reference(n in 1usize..=32, k in 1usize..=32, m in 1usize..=32, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = rng.gaussian_tensor(n, k, 0.0, 1.0).unwrap();
            let b = rng.gaussian_tensor(k, m, 0.0, 1.0).unwrap();
            prop_assert!(rel_err(&a.matmul(&b).unwrap(), &naive(&a, &b)) < 1e-12);
        }
    }
}
