//! Dense row-major matrices.
//!
//! Everything the engine moves around — token features, attention weights,
//! transport plans, similarity matrices — is a [`TensorBase`]: a 2-D
//! row-major buffer. Vectors are 1×N or N×1, scalars are 1×1. The raw
//! kernels here are the single forward implementation; the autodiff graph
//! validates shapes and records ops on top of them.

use crate::scalar::Scalar;

/// Dense 2-D matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBase<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> TensorBase<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    /// Build from a flat row-major buffer. Panics if the length does not
    /// match `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length {} != {}x{}", data.len(), rows, cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    /// 1×1 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// The single value of a 1×1 tensor.
    pub fn item(&self) -> S {
        assert!(self.is_scalar(), "item() on {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer with a new shape of the same element count.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len(), "reshape {}x{} -> {}x{}", self.rows, self.cols, rows, cols);
        Self { rows, cols, data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul {}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols);
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == S::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Self { rows: m, cols: n, data: out }
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![S::zero(); self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self { rows: self.cols, cols: self.rows, data: out }
    }

    pub fn scale(&self, factor: S) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add_scalar(&self, shift: S) -> Self {
        self.map(|v| v + shift)
    }

    /// Add a 1×C row vector to every row.
    pub fn add_bias(&self, bias: &Self) -> Self {
        assert_eq!(bias.rows, 1, "bias must be a row vector");
        assert_eq!(bias.cols, self.cols, "bias width {} != {}", bias.cols, self.cols);
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] += bias.data[c];
            }
        }
        out
    }

    /// Numerically stable softmax over each row.
    pub fn row_softmax(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Sum over an axis: axis 0 collapses rows into a 1×C vector, axis 1
    /// collapses columns into an R×1 vector.
    pub fn sum_axis(&self, axis: usize) -> Self {
        match axis {
            0 => {
                let mut out = vec![S::zero(); self.cols];
                for r in 0..self.rows {
                    for c in 0..self.cols {
                        out[c] += self.data[r * self.cols + c];
                    }
                }
                Self { rows: 1, cols: self.cols, data: out }
            }
            1 => {
                let mut out = vec![S::zero(); self.rows];
                for r in 0..self.rows {
                    for c in 0..self.cols {
                        out[r] += self.data[r * self.cols + c];
                    }
                }
                Self { rows: self.rows, cols: 1, data: out }
            }
            _ => panic!("axis must be 0 or 1"),
        }
    }

    pub fn mean_axis(&self, axis: usize) -> Self {
        let n = if axis == 0 { self.rows } else { self.cols };
        self.sum_axis(axis).scale(S::one() / S::from_f64_lossy(n as f64))
    }

    pub fn sum_all(&self) -> S {
        let mut acc = S::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Max over an axis, with the first-winning argmax per lane.
    pub fn max_axis(&self, axis: usize) -> (Self, Vec<usize>) {
        match axis {
            0 => {
                let mut vals = vec![S::neg_infinity(); self.cols];
                let mut arg = vec![0usize; self.cols];
                for r in 0..self.rows {
                    for c in 0..self.cols {
                        let v = self.data[r * self.cols + c];
                        if v > vals[c] {
                            vals[c] = v;
                            arg[c] = r;
                        }
                    }
                }
                (Self { rows: 1, cols: self.cols, data: vals }, arg)
            }
            1 => {
                let mut vals = vec![S::neg_infinity(); self.rows];
                let mut arg = vec![0usize; self.rows];
                for r in 0..self.rows {
                    for c in 0..self.cols {
                        let v = self.data[r * self.cols + c];
                        if v > vals[r] {
                            vals[r] = v;
                            arg[r] = c;
                        }
                    }
                }
                (Self { rows: self.rows, cols: 1, data: vals }, arg)
            }
            _ => panic!("axis must be 0 or 1"),
        }
    }

    /// Columns `[start, end)` as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.cols, "slice {}..{} of {} cols", start, end, self.cols);
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * self.cols + start..r * self.cols + end]);
        }
        Self { rows: self.rows, cols: w, data }
    }

    /// Concatenate along the last axis; all parts must share a row count.
    pub fn concat_cols(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "concat row mismatch");
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Self { rows, cols, data }
    }

    /// L2-normalize each row. Zero rows pass through unchanged; the returned
    /// mask records which rows were degenerate.
    pub fn l2_normalize_rows(&self) -> (Self, Vec<bool>) {
        let mut out = self.clone();
        let mut zero_rows = vec![false; self.rows];
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let mut sq = S::zero();
            for &v in row.iter() {
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm == S::zero() {
                zero_rows[r] = true;
                continue;
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        (out, zero_rows)
    }

    pub fn frobenius_dot(&self, other: &Self) -> S {
        assert_eq!(self.shape(), other.shape(), "frobenius_dot shape mismatch");
        let mut acc = S::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        acc
    }

    /// Largest absolute entry, 0 for empty tensors.
    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }
}

impl TensorBase<f32> {
    /// Exact widening to f64.
    pub fn widen(&self) -> TensorBase<f64> {
        TensorBase::from_vec(self.rows, self.cols, self.data.iter().map(|&v| v as f64).collect())
    }
}

impl TensorBase<f64> {
    /// Narrowing to f32 (rounds; exact when values came from f32).
    pub fn narrow(&self) -> TensorBase<f32> {
        TensorBase::from_vec(self.rows, self.cols, self.data.iter().map(|&v| v as f32).collect())
    }
}

/// Stable softplus ln(1 + e^x), linear for large x, e^x for very negative x.
pub fn softplus<S: Scalar>(x: S) -> S {
    let threshold = S::from_f64_lossy(30.0);
    if x > threshold {
        x
    } else if x < -threshold {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of softplus: the logistic sigmoid.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// GELU in its tanh form: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let c = S::from_f64_lossy(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64_lossy(0.044715);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

/// Derivative of the tanh-form GELU.
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let c = S::from_f64_lossy(0.797_884_560_802_865_4);
    let a = S::from_f64_lossy(0.044715);
    let three = S::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}
