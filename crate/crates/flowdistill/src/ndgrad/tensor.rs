//! Dense row-major f64 tensors of rank 0, 1, or 2, plus the hot loops.

use crate::{Error, Result};

/// A dense row-major f64 tensor. Rank 0 is a scalar (empty shape), rank 1 a
/// vector, rank 2 a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.len() > 2 {
            return Err(Error::contract(
                "Tensor::new",
                format!("rank {} not supported (max 2)", shape.len()),
            ));
        }
        if data.len() != expect {
            return Err(Error::contract(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of rows when viewed as a matrix; vectors count as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.cols();
        &self.data[i * m..(i + 1) * m]
    }

    /// Scalar value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(
                "Tensor::item",
                format!("expected a single element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Elementwise map into a new tensor of the same shape.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combine with a same-shape tensor. `op` names the caller in
    /// the shape-mismatch error.
    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::contract(
                op,
                format!("shape mismatch: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn first_non_finite(&self) -> Option<f64> {
        self.data.iter().copied().find(|v| !v.is_finite())
    }
}

/// Fixed-order f64 loops shared by the tape forward and backward passes and
/// by the no-tape network fast paths. Each output element is produced by a
/// single accumulation chain, so results do not depend on call context.
pub(crate) mod kernels {
    /// out = a @ b, a: (n,k), b: (k,m), out: (n,m) pre-zeroed or freshly allocated.
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        debug_assert_eq!(a.len(), n * k);
        debug_assert_eq!(b.len(), k * m);
        debug_assert_eq!(out.len(), n * m);
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for l in 0..k {
                let ail = a[i * k + l];
                if ail == 0.0 {
                    continue;
                }
                let b_row = &b[l * m..(l + 1) * m];
                for j in 0..m {
                    out_row[j] += ail * b_row[j];
                }
            }
        }
    }

    /// out += d @ b^T, d: (n,m), b: (k,m), out: (n,k). Backward for the left
    /// matmul operand.
    pub fn matmul_nt_acc(d: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        debug_assert_eq!(d.len(), n * m);
        debug_assert_eq!(b.len(), k * m);
        debug_assert_eq!(out.len(), n * k);
        for i in 0..n {
            let d_row = &d[i * m..(i + 1) * m];
            let out_row = &mut out[i * k..(i + 1) * k];
            for l in 0..k {
                let b_row = &b[l * m..(l + 1) * m];
                let mut acc = 0.0;
                for j in 0..m {
                    acc += d_row[j] * b_row[j];
                }
                out_row[l] += acc;
            }
        }
    }

    /// out += a^T @ d, a: (n,k), d: (n,m), out: (k,m). Backward for the right
    /// matmul operand.
    pub fn matmul_tn_acc(a: &[f64], d: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        debug_assert_eq!(a.len(), n * k);
        debug_assert_eq!(d.len(), n * m);
        debug_assert_eq!(out.len(), k * m);
        for i in 0..n {
            let d_row = &d[i * m..(i + 1) * m];
            for l in 0..k {
                let ail = a[i * k + l];
                if ail == 0.0 {
                    continue;
                }
                let out_row = &mut out[l * m..(l + 1) * m];
                for j in 0..m {
                    out_row[j] += ail * d_row[j];
                }
            }
        }
    }

    pub fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    /// d/dx silu(x) = s(x) * (1 + x * (1 - s(x))) with s the logistic sigmoid.
    pub fn silu_deriv(x: f64) -> f64 {
        let s = 1.0 / (1.0 + (-x).exp());
        s * (1.0 + x * (1.0 - s))
    }
}
