//! Dense row-major 2-D tensors. Everything the model touches is a matrix or a
//! vector; vectors are 1×n or n×1, scalars are 1×1.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type the engine is generic over. f64 is the test/oracle mode;
/// f32 is available for training speed.
pub trait Real:
    num_traits::Float + Copy + Debug + Display + Sum + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Row-major data; panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data }
    }

    pub fn row_vec(data: Vec<T>) -> Self {
        let cols = data.len();
        Tensor { rows: 1, cols, data }
    }

    pub fn col_vec(data: Vec<T>) -> Self {
        let rows = data.len();
        Tensor { rows, cols: 1, data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_f64s(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&x| T::from_f64(x)).collect())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Scalar value of a 1×1 tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }

    /// C = A · B with optional transposes; plain loops, row-contiguous inner
    /// dimension so LLVM can vectorize.
    pub fn matmul(&self, other: &Self, trans_a: bool, trans_b: bool) -> Self {
        let (m, k1) = if trans_a { (self.cols, self.rows) } else { (self.rows, self.cols) };
        let (k2, n) = if trans_b { (other.cols, other.rows) } else { (other.rows, other.cols) };
        assert_eq!(k1, k2, "matmul inner dims {k1} vs {k2}");
        let mut out = Self::zeros(m, n);
        match (trans_a, trans_b) {
            (false, false) => {
                for i in 0..m {
                    for k in 0..k1 {
                        let a = self.data[i * self.cols + k];
                        let brow = &other.data[k * n..(k + 1) * n];
                        let orow = &mut out.data[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] = orow[j] + a * brow[j];
                        }
                    }
                }
            }
            (false, true) => {
                // A (m×k) · Bᵀ where B is n×k: dot products of contiguous rows.
                for i in 0..m {
                    let arow = &self.data[i * k1..(i + 1) * k1];
                    for j in 0..n {
                        let brow = &other.data[j * k1..(j + 1) * k1];
                        let mut acc = T::zero();
                        for k in 0..k1 {
                            acc = acc + arow[k] * brow[k];
                        }
                        out.data[i * n + j] = acc;
                    }
                }
            }
            (true, false) => {
                // Aᵀ (m×k) · B where A is k×m.
                for k in 0..k1 {
                    let arow = &self.data[k * m..(k + 1) * m];
                    let brow = &other.data[k * n..(k + 1) * n];
                    for i in 0..m {
                        let a = arow[i];
                        let orow = &mut out.data[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] = orow[j] + a * brow[j];
                        }
                    }
                }
            }
            (true, true) => {
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = T::zero();
                        for k in 0..k1 {
                            acc = acc + self.data[k * m + i] * other.data[j * k2 + k];
                        }
                        out.data[i * n + j] = acc;
                    }
                }
            }
        }
        out
    }
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Tensor {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}
