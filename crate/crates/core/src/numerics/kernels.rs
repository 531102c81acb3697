//! Scalar kernels over vectors and matrices, each paired with its
//! hand-derived backward form.

use super::matrix::{check_same_shape, Matrix, Scalar};
use crate::error::{Error, Result};

/// Probabilities below this are clamped inside logarithms only.
pub const LOG_FLOOR: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-5;

#[inline]
fn log2_clamped(p: f64) -> f64 {
    p.max(LOG_FLOOR).log2()
}

#[inline]
fn ln_clamped(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx [x·σ(x)] = σ(x)(1 + x(1 − σ(x))).
#[inline]
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| T::from_f64(silu_scalar(v.to_f64())))
}

pub fn silu_backward<T: Scalar>(x: &Matrix<T>, upstream: &Matrix<T>) -> Result<Matrix<T>> {
    check_same_shape(x.shape(), upstream.shape())?;
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xv, &u)| T::from_f64(u.to_f64() * silu_grad_scalar(xv.to_f64())))
        .collect();
    Matrix::new(x.rows(), x.cols(), data)
}

/// A next-token distribution over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates non-negativity and unit mass (±1e−5).
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidArgument("empty distribution".into()));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Numeric(format!("probabilities sum to {total}")));
        }
        Ok(ProbVector(p))
    }

    pub fn uniform(v: usize) -> Self {
        ProbVector(vec![1.0 / v as f64; v])
    }

    pub fn one_hot(v: usize, index: usize) -> Self {
        let mut p = vec![0.0; v];
        p[index] = 1.0;
        ProbVector(p)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Max-subtracted softmax. Accepts any finite logits, including magnitudes
/// far beyond the `exp` overflow threshold.
pub fn softmax_stable<T: Scalar>(logits: &[T]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty logits".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &z in logits {
        let z = z.to_f64();
        if !z.is_finite() {
            return Err(Error::Numeric(format!("non-finite logit {z}")));
        }
        max = max.max(z);
    }
    let mut p: Vec<f64> = logits.iter().map(|&z| (z.to_f64() - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(ProbVector(p))
}

/// Shannon entropy in bits, with 0·log 0 = 0.
pub fn entropy_bits(p: &ProbVector) -> f64 {
    -p.0
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * log2_clamped(v))
        .sum::<f64>()
}

/// Gradient of `entropy_bits(softmax(z))` with respect to the logits `z`:
/// `g_j = −p_j (log₂ p_j + H)`.
pub fn entropy_grad_logits(p: &ProbVector) -> Vec<f64> {
    let h = entropy_bits(p);
    p.0.iter()
        .map(|&v| if v > 0.0 { -v * (log2_clamped(v) + h) } else { 0.0 })
        .collect()
}

/// `−ln p_target`.
pub fn cross_entropy_nats(p: &ProbVector, target: usize) -> Result<f64> {
    check_target(p, target)?;
    Ok(-ln_clamped(p.0[target]))
}

/// Gradient of `−ln softmax(z)_target` with respect to `z`.
pub fn ce_grad_logits(p: &ProbVector, target: usize) -> Result<Vec<f64>> {
    check_target(p, target)?;
    Ok(p.0
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == target { v - 1.0 } else { v })
        .collect())
}

fn check_target(p: &ProbVector, target: usize) -> Result<()> {
    if target >= p.len() {
        return Err(Error::Vocab(format!(
            "target token {target} outside vocabulary of {}",
            p.len()
        )));
    }
    Ok(())
}

fn check_lengths(a: &ProbVector, b: &ProbVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "distribution lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `KL(teacher ∥ student)` in nats.
pub fn kl_divergence_nats(teacher: &ProbVector, student: &ProbVector) -> Result<f64> {
    check_lengths(teacher, student)?;
    Ok(teacher
        .0
        .iter()
        .zip(&student.0)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &s)| t * (ln_clamped(t) - ln_clamped(s)))
        .sum())
}

/// Gradient of `KL(teacher ∥ softmax(z))` with respect to the student
/// logits `z`; the teacher is held fixed: `g_j = s_j − t_j`.
pub fn kl_grad_logits(teacher: &ProbVector, student: &ProbVector) -> Result<Vec<f64>> {
    check_lengths(teacher, student)?;
    Ok(student.0.iter().zip(&teacher.0).map(|(s, t)| s - t).collect())
}

fn kl_bits_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &mv)| pv * (log2_clamped(pv) - log2_clamped(mv)))
        .sum()
}

/// Jensen–Shannon distance with base-2 logarithms, so the result lies in
/// `[0, 1]`.
pub fn js_distance(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_lengths(p, q)?;
    let m: Vec<f64> = p.0.iter().zip(&q.0).map(|(a, b)| 0.5 * (a + b)).collect();
    let div = 0.5 * kl_bits_to_mixture(&p.0, &m) + 0.5 * kl_bits_to_mixture(&q.0, &m);
    Ok(div.max(0.0).sqrt().min(1.0))
}

/// Indices of the `k` most probable tokens, ties broken by lower index.
pub fn topk_indices(p: &ProbVector, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} outside 1..={}",
            p.len()
        )));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p.0[b].total_cmp(&p.0[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

pub fn topk_jaccard(p: &ProbVector, q: &ProbVector, k: usize) -> Result<f64> {
    check_lengths(p, q)?;
    let a = topk_indices(p, k)?;
    let b = topk_indices(q, k)?;
    let inter = a.iter().filter(|i| b.binary_search(i).is_ok()).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// RMS normalisation of one row. Returns the output and `1/rms`.
pub fn rmsnorm(x: &[f64], weight: &[f32], eps: f64) -> (Vec<f64>, f64) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    let y = x
        .iter()
        .zip(weight)
        .map(|(&v, &w)| v * inv * w as f64)
        .collect();
    (y, inv)
}

/// Backward of [`rmsnorm`] for one row:
/// `dx_i = w_i dy_i / r − x_i Σ_j(w_j dy_j x_j) / (n r³)`.
pub fn rmsnorm_backward(x: &[f64], weight: &[f32], eps: f64, dy: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    let inv = 1.0 / (ms + eps).sqrt();
    let proj: f64 = x
        .iter()
        .zip(weight)
        .zip(dy)
        .map(|((&xv, &w), &d)| w as f64 * d * xv)
        .sum();
    let coef = proj * inv * inv * inv / n;
    x.iter()
        .zip(weight)
        .zip(dy)
        .map(|((&xv, &w), &d)| w as f64 * d * inv - xv * coef)
        .collect()
}

/// Row-wise [`rmsnorm`] over a matrix; also returns the per-row `1/rms`.
pub fn rmsnorm_rows(x: &Matrix<f64>, weight: &[f32], eps: f64) -> Result<(Matrix<f64>, Vec<f64>)> {
    if weight.len() != x.cols() {
        return Err(Error::Shape(format!(
            "norm weight of length {} for width {}",
            weight.len(),
            x.cols()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut invs = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let (y, inv) = rmsnorm(x.row(t), weight, eps);
        out.row_mut(t).copy_from_slice(&y);
        invs.push(inv);
    }
    Ok((out, invs))
}

pub fn rmsnorm_rows_backward(
    x: &Matrix<f64>,
    weight: &[f32],
    eps: f64,
    dy: &Matrix<f64>,
) -> Result<Matrix<f64>> {
    check_same_shape(x.shape(), dy.shape())?;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        let dx = rmsnorm_backward(x.row(t), weight, eps, dy.row(t));
        out.row_mut(t).copy_from_slice(&dx);
    }
    Ok(out)
}
