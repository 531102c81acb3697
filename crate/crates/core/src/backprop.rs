//! Reverse-mode sweep from a criterion's logits gradient down to every MLP
//! hidden activation.
//!
//! The sweep is hand-written for the fixed backbone and computes only
//! activation gradients. `g[l][t][i] = ∂C/∂h_i` at position `t` of layer `l`,
//! treating `h` as the independent variable; the residual stream is
//! differentiated exactly so that lower layers see the full downstream
//! effect of their own activations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::criteria::{CriterionKind, Objective};
use crate::error::{Error, Result};
use crate::model::{forward, forward_edited, ActivationCache, HiddenEdit, Model, TokenId};
use crate::numerics::{
    causal_attention_backward, linear_backward_input, rmsnorm_rows_backward, rope_rows, sigmoid,
    Matrix,
};

/// `∂C/∂h` for every layer, shaped like the cached activations.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenGradients {
    pub layers: Vec<Matrix<f64>>,
}

impl HiddenGradients {
    pub fn layer(&self, l: usize) -> &Matrix<f64> {
        &self.layers[l]
    }
}

fn check_cache(model: &Model, cache: &ActivationCache, grad_logits: &Matrix<f64>) -> Result<()> {
    let c = &model.config;
    if cache.layers.len() != c.n_layers {
        return Err(Error::Shape(format!(
            "cache holds {} layers, model has {}",
            cache.layers.len(),
            c.n_layers
        )));
    }
    if grad_logits.shape() != cache.logits.shape() || grad_logits.cols() != c.vocab_size {
        return Err(Error::Shape(format!(
            "logits gradient {:?} does not match cached logits {:?}",
            grad_logits.shape(),
            cache.logits.shape()
        )));
    }
    for (l, lc) in cache.layers.iter().enumerate() {
        if lc.h.cols() != model.d_hidden(l) || lc.h.rows() != grad_logits.rows() {
            return Err(Error::Shape(format!(
                "cached activations of layer {l} are {:?}, model expects width {}",
                lc.h.shape(),
                model.d_hidden(l)
            )));
        }
    }
    Ok(())
}

/// Backpropagates `grad_logits` (`T × V`) through the head, the final norm
/// and every block, returning `∂C/∂h` for all layers.
pub fn backward_to_hidden(
    model: &Model,
    cache: &ActivationCache,
    grad_logits: &Matrix<f64>,
) -> Result<HiddenGradients> {
    check_cache(model, cache, grad_logits)?;
    let c = &model.config;
    let eps = c.rms_eps as f64;
    let theta = c.rope_theta as f64;

    let d_final = linear_backward_input(grad_logits, model.head())?;
    let mut d_resid = rmsnorm_rows_backward(&cache.final_input, &model.final_norm, eps, &d_final)?;
    let mut grads = vec![Matrix::zeros(0, 0); c.n_layers];

    for l in (0..c.n_layers).rev() {
        let lc = &cache.layers[l];
        let w = &model.layers[l];

        // block output = mid + h · w_downᵀ
        let dh = linear_backward_input(&d_resid, &w.w_down)?;

        // h = SiLU(gate) ⊙ up
        let mut d_gate = Matrix::zeros(dh.rows(), dh.cols());
        let mut d_up = Matrix::zeros(dh.rows(), dh.cols());
        for idx in 0..dh.data().len() {
            let g = lc.gate.data()[idx];
            let u = lc.up.data()[idx];
            let s = sigmoid(g);
            let d = dh.data()[idx];
            d_gate.data_mut()[idx] = d * u * s * (1.0 + g * (1.0 - s));
            d_up.data_mut()[idx] = d * g * s;
        }
        grads[l] = dh;
        if l == 0 {
            break;
        }

        let mut d_mlp_in = linear_backward_input(&d_gate, &w.w_gate)?;
        d_mlp_in.add_assign(&linear_backward_input(&d_up, &w.w_up)?)?;
        let mut d_mid = rmsnorm_rows_backward(&lc.mid, &w.mlp_norm, eps, &d_mlp_in)?;
        d_mid.add_assign(&d_resid)?;

        // mid = input + attention(input) · w_oᵀ
        let d_attn = linear_backward_input(&d_mid, &w.wo)?;
        let (mut dq, mut dk, dv) =
            causal_attention_backward(&lc.q, &lc.k, &lc.v, &lc.attn_probs, &d_attn, c.n_heads)?;
        rope_rows(&mut dq, c.n_heads, theta, true);
        rope_rows(&mut dk, c.n_heads, theta, true);
        let mut d_norm = linear_backward_input(&dq, &w.wq)?;
        d_norm.add_assign(&linear_backward_input(&dk, &w.wk)?)?;
        d_norm.add_assign(&linear_backward_input(&dv, &w.wv)?)?;
        let mut d_input = rmsnorm_rows_backward(&lc.input, &w.attn_norm, eps, &d_norm)?;
        d_input.add_assign(&d_mid)?;
        d_resid = d_input;
    }
    Ok(HiddenGradients { layers: grads })
}

/// Central difference `(C(h+εe) − C(h−εe)) / 2ε` for one hidden coordinate,
/// re-running the network with the perturbation injected.
pub fn finite_diff_hidden(
    model: &Model,
    objective: &Objective,
    tokens: &[TokenId],
    layer: usize,
    neuron: usize,
    position: usize,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    let value = |delta: f64| -> Result<f64> {
        let edit = HiddenEdit::Offset {
            layer,
            neuron,
            position,
            delta,
        };
        let logits = forward_edited(model, tokens, &[edit])?;
        Ok(objective.evaluate(&logits)?.value)
    };
    Ok((value(epsilon)? - value(-epsilon)?) / (2.0 * epsilon))
}

/// Relative error used by the gradient check. Coordinates whose gradients are
/// both below `floor` in magnitude are compared in absolute terms against it.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Absolute floor for [`relative_error`] in gradient checks.
pub const GRADCHECK_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Serialize)]
pub struct GradSample {
    pub layer: usize,
    pub neuron: usize,
    pub position: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub criterion: CriterionKind,
    pub samples: usize,
    pub epsilon: f64,
    pub max_rel_error: f64,
    pub worst: GradSample,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares `backward` against [`finite_diff_hidden`] on `samples` random
/// (layer, neuron, position) coordinates.
pub fn gradient_check_with<B>(
    model: &Model,
    tokens: &[TokenId],
    kind: CriterionKind,
    samples: usize,
    epsilon: f64,
    seed: u64,
    backward: B,
) -> Result<GradCheckReport>
where
    B: Fn(&Model, &ActivationCache, &Matrix<f64>) -> Result<HiddenGradients>,
{
    if samples == 0 {
        return Err(Error::InvalidArgument("gradient check needs at least one sample".into()));
    }
    let objective = Objective::with_teacher(kind, model, tokens)?;
    let (_, cache) = forward(model, tokens)?;
    let crit = objective.evaluate(&cache.logits)?;
    let grads = backward(model, &cache, &crit.grad_logits)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Option<GradSample> = None;
    for _ in 0..samples {
        let layer = rng.random_range(0..model.config.n_layers);
        let neuron = rng.random_range(0..model.d_hidden(layer));
        let position = rng.random_range(0..tokens.len());
        let analytic = grads.layers[layer].get(position, neuron);
        let numeric = finite_diff_hidden(model, &objective, tokens, layer, neuron, position, epsilon)?;
        let rel_error = relative_error(analytic, numeric, GRADCHECK_FLOOR);
        if worst.as_ref().is_none_or(|w| rel_error > w.rel_error) {
            worst = Some(GradSample {
                layer,
                neuron,
                position,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    let worst = worst.expect("at least one sample");
    Ok(GradCheckReport {
        criterion: kind,
        samples,
        epsilon,
        max_rel_error: worst.rel_error,
        worst,
    })
}

pub fn gradient_check(
    model: &Model,
    tokens: &[TokenId],
    kind: CriterionKind,
    samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    gradient_check_with(model, tokens, kind, samples, epsilon, seed, backward_to_hidden)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(layers: usize) -> Model {
        Model::random(ModelConfig::uniform(16, layers, 2, 24, 32, 8), 21).unwrap()
    }

    #[test]
    fn zero_logit_gradient_gives_zero_hidden_gradients() {
        let m = tiny(2);
        let (_, cache) = forward(&m, &[1, 2, 3]).unwrap();
        let g = backward_to_hidden(&m, &cache, &Matrix::zeros(3, 32)).unwrap();
        assert!(g.layers.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_layer_single_position_matches_finite_differences() {
        let m = tiny(1);
        let tokens = [5];
        let obj = Objective::with_teacher(CriterionKind::InformationEntropy, &m, &tokens).unwrap();
        let (_, cache) = forward(&m, &tokens).unwrap();
        let g = backward_to_hidden(&m, &cache, &obj.evaluate(&cache.logits).unwrap().grad_logits).unwrap();
        for i in 0..24 {
            let fd = finite_diff_hidden(&m, &obj, &tokens, 0, i, 0, 1e-3).unwrap();
            assert!(relative_error(g.layers[0].get(0, i), fd, GRADCHECK_FLOOR) < 1e-3);
        }
    }

    #[test]
    fn two_layer_gradients_match_finite_differences() {
        let m = tiny(2);
        let tokens = [3, 1, 4, 1, 5, 9];
        for kind in [CriterionKind::InformationEntropy, CriterionKind::CrossEntropy] {
            let r = gradient_check(&m, &tokens, kind, 60, 1e-3, 1).unwrap();
            assert!(r.passed(1e-3), "{kind}: {:?}", r.worst);
        }
    }

    #[test]
    fn linear_in_logit_gradient() {
        let m = tiny(2);
        let tokens = [7, 6, 5, 4];
        let (_, cache) = forward(&m, &tokens).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rand_grad = || {
            Matrix::new(4, 32, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (g1, g2) = (rand_grad(), rand_grad());
        let (a, b) = (0.7, -1.3);
        let mut combo = g1.scale(a);
        combo.add_assign(&g2.scale(b)).unwrap();
        let lhs = backward_to_hidden(&m, &cache, &combo).unwrap();
        let r1 = backward_to_hidden(&m, &cache, &g1).unwrap();
        let r2 = backward_to_hidden(&m, &cache, &g2).unwrap();
        for l in 0..2 {
            for idx in 0..lhs.layers[l].data().len() {
                let expect = a * r1.layers[l].data()[idx] + b * r2.layers[l].data()[idx];
                assert!((lhs.layers[l].data()[idx] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_downstream_model_has_zero_finite_difference() {
        let m = Model::zeros(ModelConfig::uniform(8, 2, 2, 6, 10, 4)).unwrap();
        let tokens = [1, 2];
        let obj = Objective::with_teacher(CriterionKind::InformationEntropy, &m, &tokens).unwrap();
        assert_eq!(finite_diff_hidden(&m, &obj, &tokens, 0, 3, 1, 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        // Deviation from the analytic gradient grows ~4x when epsilon doubles.
        let m = tiny(2);
        let tokens = [2, 7, 1, 8];
        let obj = Objective::with_teacher(CriterionKind::InformationEntropy, &m, &tokens).unwrap();
        let (_, cache) = forward(&m, &tokens).unwrap();
        let g = backward_to_hidden(&m, &cache, &obj.evaluate(&cache.logits).unwrap().grad_logits).unwrap();
        let mut ratios = Vec::new();
        for i in 0..24 {
            let a = g.layers[0].get(1, i);
            let dev = |eps: f64| (finite_diff_hidden(&m, &obj, &tokens, 0, i, 1, eps).unwrap() - a).abs();
            let (d1, d2) = (dev(0.05), dev(0.1));
            if d1 > 1e-11 {
                ratios.push(d2 / d1);
            }
        }
        ratios.sort_by(f64::total_cmp);
        let median = ratios[ratios.len() / 2];
        assert!((3.0..5.0).contains(&median), "median ratio {median}");
    }

    #[test]
    fn mismatched_cache_is_shape_error() {
        let m = tiny(2);
        let (_, cache) = forward(&m, &[1, 2]).unwrap();
        assert!(matches!(
            backward_to_hidden(&m, &cache, &Matrix::zeros(3, 32)),
            Err(Error::Shape(_))
        ));
        let other = tiny(1);
        assert!(backward_to_hidden(&other, &cache, &Matrix::zeros(2, 32)).is_err());
    }

    #[test]
    fn zero_samples_rejected() {
        let m = tiny(1);
        assert!(gradient_check(&m, &[1, 2], CriterionKind::InformationEntropy, 0, 1e-3, 0).is_err());
    }
}
