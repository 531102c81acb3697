//! Rotary position embedding and causal multi-head attention, forward and
//! backward.
//!
//! RoPE uses the split-half pairing: within each head of width `d`, element
//! `i` rotates together with element `i + d/2`.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Rotates every head of one `d_model`-wide row in place by the angles for
/// position `pos`. `inverse` applies the transpose rotation, which is the
/// backward of the forward rotation.
pub fn rope_apply(row: &mut [f64], n_heads: usize, pos: usize, theta: f64, inverse: bool) {
    let head_dim = row.len() / n_heads;
    let half = head_dim / 2;
    for h in 0..n_heads {
        let head = &mut row[h * head_dim..(h + 1) * head_dim];
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            let (sin, cos) = angle.sin_cos();
            let sin = if inverse { -sin } else { sin };
            let a = head[i];
            let b = head[i + half];
            head[i] = a * cos - b * sin;
            head[i + half] = a * sin + b * cos;
        }
    }
}

pub fn rope_rows(x: &mut Matrix<f64>, n_heads: usize, theta: f64, inverse: bool) {
    for t in 0..x.rows() {
        rope_apply(x.row_mut(t), n_heads, t, theta, inverse);
    }
}

/// Forward outputs of [`causal_attention`].
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Concatenated head outputs, `T × d_model`.
    pub out: Matrix<f64>,
    /// One `T × T` lower-triangular probability matrix per head.
    pub probs: Vec<Matrix<f64>>,
}

fn check_qkv(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>, n_heads: usize) -> Result<()> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Shape("q, k and v must share a shape".into()));
    }
    if n_heads == 0 || !q.cols().is_multiple_of(n_heads) {
        return Err(Error::Shape(format!(
            "width {} not divisible by {n_heads} heads",
            q.cols()
        )));
    }
    Ok(())
}

/// Scaled dot-product attention where position `t` attends to `u ≤ t`.
pub fn causal_attention(
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    v: &Matrix<f64>,
    n_heads: usize,
) -> Result<AttentionOutput> {
    check_qkv(q, k, v, n_heads)?;
    let (t_len, width) = q.shape();
    let hd = width / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(t_len, width);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        let mut p = Matrix::zeros(t_len, t_len);
        for t in 0..t_len {
            let qt = &q.row(t)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            let mut scores = Vec::with_capacity(t + 1);
            for u in 0..=t {
                let s = dot(qt, &k.row(u)[cols.clone()]) * scale;
                max = max.max(s);
                scores.push(s);
            }
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let prow = p.row_mut(t);
            for (u, s) in scores.iter().enumerate() {
                prow[u] = s / total;
            }
            let orow = &mut out.row_mut(t)[cols.clone()];
            for u in 0..=t {
                let w = p.get(t, u);
                for (o, &vv) in orow.iter_mut().zip(&v.row(u)[cols.clone()]) {
                    *o += w * vv;
                }
            }
        }
        probs.push(p);
    }
    Ok(AttentionOutput { out, probs })
}

/// Gradients of [`causal_attention`] with respect to `q`, `k` and `v`
/// (post-rotation), given the upstream gradient of its output.
pub fn causal_attention_backward(
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    v: &Matrix<f64>,
    probs: &[Matrix<f64>],
    d_out: &Matrix<f64>,
    n_heads: usize,
) -> Result<(Matrix<f64>, Matrix<f64>, Matrix<f64>)> {
    check_qkv(q, k, v, n_heads)?;
    if d_out.shape() != q.shape() || probs.len() != n_heads {
        return Err(Error::Shape("attention backward operands disagree".into()));
    }
    let (t_len, width) = q.shape();
    let hd = width / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(t_len, width);
    let mut dk = Matrix::zeros(t_len, width);
    let mut dv = Matrix::zeros(t_len, width);
    for (h, p) in probs.iter().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for t in 0..t_len {
            let dot_t = &d_out.row(t)[cols.clone()];
            // dP[t][u] = dOut_t · v_u, then softmax backward along u.
            let dp: Vec<f64> = (0..=t).map(|u| dot(dot_t, &v.row(u)[cols.clone()])).collect();
            let mean: f64 = (0..=t).map(|u| p.get(t, u) * dp[u]).sum();
            for u in 0..=t {
                let w = p.get(t, u);
                let ds = w * (dp[u] - mean) * scale;
                if w != 0.0 {
                    let dvr = &mut dv.row_mut(u)[cols.clone()];
                    for (slot, &g) in dvr.iter_mut().zip(dot_t) {
                        *slot += w * g;
                    }
                }
                if ds != 0.0 {
                    let ku: Vec<f64> = k.row(u)[cols.clone()].to_vec();
                    let qt: Vec<f64> = q.row(t)[cols.clone()].to_vec();
                    for (slot, kv) in dq.row_mut(t)[cols.clone()].iter_mut().zip(&ku) {
                        *slot += ds * kv;
                    }
                    for (slot, qv) in dk.row_mut(u)[cols.clone()].iter_mut().zip(&qt) {
                        *slot += ds * qv;
                    }
                }
            }
        }
    }
    Ok((dq, dk, dv))
}
