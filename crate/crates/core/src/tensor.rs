//! Dense row-major `f64` tensors.
//!
//! Elementwise arithmetic requires exact shape agreement; there is no
//! broadcasting. Matrix-vector products and the convolution kernels in
//! [`crate::conv`] are the only shape-changing operations.

use serde::{Deserialize, Serialize};

use crate::error::{EpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `product(shape) == data.len()` and that
    /// every dimension is positive.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(EpError::Dimension {
                op: "Tensor::new",
                axes: format!("shape {shape:?} has an empty or zero-sized axis"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(EpError::Shape {
                op: "Tensor::new",
                expected: vec![n],
                found: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A 1-D tensor holding `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must have at least one element");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// A 2-D tensor from nested rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(EpError::Dimension {
                op: "Tensor::matrix",
                axes: "ragged rows".into(),
            });
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(EpError::Shape {
                op: "reshape",
                expected: shape.to_vec(),
                found: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(EpError::Shape {
                op,
                expected: self.shape.clone(),
                found: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| alpha * v)
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(EpError::Dimension {
                op,
                axes: format!("expected a matrix, got shape {:?}", self.shape),
            }),
        }
    }

    /// `self · v` for a matrix `self` of shape (m × n) and `v` of length n.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.rows_cols("matvec")?;
        if v.len() != n {
            return Err(EpError::Shape {
                op: "matvec",
                expected: vec![n],
                found: v.shape.clone(),
            });
        }
        let out = self.data.chunks_exact(n).map(|row| dot(row, &v.data)).collect();
        Ok(Tensor {
            shape: vec![m],
            data: out,
        })
    }

    /// `selfᵀ · v` for a matrix `self` of shape (m × n) and `v` of length m.
    pub fn matvec_t(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.rows_cols("matvec_t")?;
        if v.len() != m {
            return Err(EpError::Shape {
                op: "matvec_t",
                expected: vec![m],
                found: v.shape.clone(),
            });
        }
        let mut out = vec![0.0; n];
        for (row, &vi) in self.data.chunks_exact(n).zip(&v.data) {
            if vi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += vi * w;
            }
        }
        Ok(Tensor {
            shape: vec![n],
            data: out,
        })
    }

    /// Outer product `a · bᵀ` with shape (|a| × |b|).
    pub fn outer(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(&[a.len(), b.len()]);
        out.add_outer(1.0, a, b).expect("shape built from operands");
        out
    }

    /// `self += alpha · a · bᵀ`
    pub fn add_outer(&mut self, alpha: f64, a: &Tensor, b: &Tensor) -> Result<()> {
        let (m, n) = self.rows_cols("add_outer")?;
        if a.len() != m || b.len() != n {
            return Err(EpError::Shape {
                op: "add_outer",
                expected: vec![m, n],
                found: vec![a.len(), b.len()],
            });
        }
        for (row, &ai) in self.data.chunks_exact_mut(n).zip(&a.data) {
            let s = alpha * ai;
            if s == 0.0 {
                continue;
            }
            for (r, &bj) in row.iter_mut().zip(&b.data) {
                *r += s * bj;
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Index of the largest element (first one on ties).
    pub fn argmax(&self) -> usize {
        argmax_slice(&self.data)
    }
}

/// Index of the largest element, first on ties.
pub(crate) fn argmax_slice(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(EpError::Shape { .. })
        ));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn elementwise_requires_equal_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(a.add(&b).is_err());
        assert!(a.add(&a).is_ok());
    }

    #[test]
    fn matvec_and_transpose_agree() {
        let w = Tensor::matrix(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let v = Tensor::vector(vec![1.0, 0.0, -1.0]);
        assert_eq!(w.matvec(&v).unwrap().data(), &[-2.0, -2.0]);
        let u = Tensor::vector(vec![1.0, 1.0]);
        let direct = w.matvec_t(&u).unwrap();
        let via_transpose = w.transpose().unwrap().matvec(&u).unwrap();
        assert_eq!(direct, via_transpose);
        assert_eq!(direct.data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn outer_product() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0, 5.0]);
        let o = Tensor::outer(&a, &b);
        assert_eq!(o.shape(), &[2, 3]);
        assert_eq!(o.data(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(Tensor::vector(vec![0.1, 0.9, 0.9]).argmax(), 1);
    }
}
