use std::fmt;

use crate::error::{Error, Result};

/// Element type a [`Matrix`] can store.
///
/// Arithmetic that feeds a reduction always happens in `f64`; the element
/// type only decides storage width.
pub trait Scalar: Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Dense row-major matrix. Weights are stored as `Matrix<f32>`; activations
/// and gradients use `Matrix<f64>`.
#[derive(Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::from_f64(1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows explicitly
        let cols = self.cols;
        (0..self.rows).map(move |r| &self.data[r * cols..(r + 1) * cols])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Matrix<f64> {
        self.map(T::to_f64)
    }

    pub fn to_f32(&self) -> Matrix<f32> {
        self.map(|v| v.to_f64() as f32)
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Keeps the listed rows, in the listed order.
    pub fn select_rows(&self, keep: &[usize]) -> Matrix<T> {
        let mut data = Vec::with_capacity(keep.len() * self.cols);
        for &r in keep {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: keep.len(),
            cols: self.cols,
            data,
        }
    }

    /// Keeps the listed columns, in the listed order.
    pub fn select_cols(&self, keep: &[usize]) -> Matrix<T> {
        let mut data = Vec::with_capacity(keep.len() * self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(keep.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: self.rows,
            cols: keep.len(),
            data,
        }
    }

    pub fn heap_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }
}

impl Matrix<f64> {
    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Matrix<f64>) -> Result<()> {
        check_same_shape(self.shape(), other.shape())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Matrix<f64> {
        self.map(|v| v * factor)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn check_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "operand shapes differ: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Standard product `a · b`. Each output element is a dot product accumulated
/// in `f64` over the inner index in ascending order.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            let av = av.to_f64();
            let brow = b.row(p);
            for (slot, &bv) in acc.iter_mut().zip(brow) {
                *slot += av * bv.to_f64();
            }
        }
        for (o, &v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = T::from_f64(v);
        }
    }
    Ok(out)
}

/// `x · wᵀ` for a weight stored as `[out_features × in_features]`.
pub fn linear(x: &Matrix<f64>, w: &Matrix<f32>) -> Result<Matrix<f64>> {
    if x.cols != w.cols {
        return Err(Error::Shape(format!(
            "linear: input width {} does not match weight in_features {}",
            x.cols, w.cols
        )));
    }
    let mut out = Matrix::zeros(x.rows, w.rows);
    for t in 0..x.rows {
        let xr = x.row(t);
        let orow = &mut out.data[t * w.rows..(t + 1) * w.rows];
        for (o, slot) in orow.iter_mut().enumerate() {
            *slot = dot_mixed(xr, w.row(o));
        }
    }
    Ok(out)
}

/// Gradient of [`linear`] with respect to its input: `dy · w`.
pub fn linear_backward_input(dy: &Matrix<f64>, w: &Matrix<f32>) -> Result<Matrix<f64>> {
    if dy.cols != w.rows {
        return Err(Error::Shape(format!(
            "linear backward: upstream width {} does not match weight out_features {}",
            dy.cols, w.rows
        )));
    }
    let mut out = Matrix::zeros(dy.rows, w.cols);
    for t in 0..dy.rows {
        let drow = dy.row(t);
        let orow = &mut out.data[t * w.cols..(t + 1) * w.cols];
        for (o, &d) in drow.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (slot, &wv) in orow.iter_mut().zip(w.row(o)) {
                *slot += d * wv as f64;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot_mixed(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y as f64).sum()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_times_identity() {
        let i2 = Matrix::<f32>::identity(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::<f32>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::<f32>::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matches_triple_loop_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::<f32>::new(5, 7, (0..35).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::<f32>::new(7, 3, (0..21).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for p in 0..7 {
                    s += a.get(i, p) as f64 * b.get(p, j) as f64;
                }
                assert_eq!(c.get(i, j).to_bits(), (s as f32).to_bits());
            }
        }
    }

    #[test]
    fn inner_dimension_mismatch_is_shape_error() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_agrees_with_matmul_of_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::<f64>::new(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Matrix::<f32>::new(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = linear(&x, &w).unwrap();
        let y2 = matmul(&x, &w.to_f64().transpose()).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let dy = Matrix::<f64>::new(3, 5, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let dx = linear_backward_input(&dy, &w).unwrap();
        let dx2 = matmul(&dy, &w.to_f64()).unwrap();
        for (a, b) in dx.data().iter().zip(dx2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn column_and_row_selection() {
        let m = Matrix::<f32>::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.select_cols(&[0, 2]).data(), &[1.0, 3.0, 4.0, 6.0]);
        assert_eq!(m.select_rows(&[1]).data(), &[4.0, 5.0, 6.0]);
    }
}
