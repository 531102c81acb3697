use super::{Model, TokenId};
use crate::error::{Error, Result};
use crate::numerics::{
    causal_attention, linear, rmsnorm_rows, rope_rows, silu_scalar, Matrix,
};

/// Intermediates of one block kept for the backward sweep.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Residual stream entering the block.
    pub input: Matrix<f64>,
    /// Rotated queries and keys, and values.
    pub q: Matrix<f64>,
    pub k: Matrix<f64>,
    pub v: Matrix<f64>,
    /// Per-head causal attention probabilities.
    pub attn_probs: Vec<Matrix<f64>>,
    /// Residual stream after attention, entering the MLP norm.
    pub mid: Matrix<f64>,
    /// Normalised MLP input.
    pub mlp_in: Matrix<f64>,
    pub gate: Matrix<f64>,
    pub up: Matrix<f64>,
    /// Post-gating hidden activations `SiLU(gate) ⊙ up`, `T × d_hidden`.
    pub h: Matrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub layers: Vec<LayerCache>,
    /// Residual stream entering the final norm.
    pub final_input: Matrix<f64>,
    pub logits: Matrix<f64>,
}

impl ActivationCache {
    pub fn seq_len(&self) -> usize {
        self.logits.rows()
    }

    pub fn h(&self, layer: usize) -> &Matrix<f64> {
        &self.layers[layer].h
    }

    pub fn heap_bytes(&self) -> usize {
        let layer_bytes: usize = self
            .layers
            .iter()
            .map(|c| {
                [&c.input, &c.q, &c.k, &c.v, &c.mid, &c.mlp_in, &c.gate, &c.up, &c.h]
                    .iter()
                    .map(|m| m.heap_bytes())
                    .sum::<usize>()
                    + c.attn_probs.iter().map(Matrix::heap_bytes).sum::<usize>()
            })
            .sum();
        layer_bytes + self.final_input.heap_bytes() + self.logits.heap_bytes()
    }
}

/// An intervention on MLP hidden activations applied during a forward pass,
/// after `h` is computed and before the down projection.
#[derive(Debug, Clone, PartialEq)]
pub enum HiddenEdit {
    /// `h[:, neuron] *= factor` at every position.
    Scale { layer: usize, neuron: usize, factor: f64 },
    /// `h[position, neuron] += delta`.
    Offset {
        layer: usize,
        neuron: usize,
        position: usize,
        delta: f64,
    },
    /// Zero the listed neurons at every position.
    Mask { layer: usize, neurons: Vec<usize> },
    /// Replace the block's MLP output with zeros.
    DropMlp { layer: usize },
}

impl HiddenEdit {
    fn layer(&self) -> usize {
        match *self {
            HiddenEdit::Scale { layer, .. }
            | HiddenEdit::Offset { layer, .. }
            | HiddenEdit::Mask { layer, .. }
            | HiddenEdit::DropMlp { layer } => layer,
        }
    }

    fn validate(&self, model: &Model, seq_len: usize) -> Result<()> {
        let layer = self.layer();
        if layer >= model.config.n_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range (model has {})",
                model.config.n_layers
            )));
        }
        let dh = model.d_hidden(layer);
        let check_neuron = |n: usize| {
            if n >= dh {
                Err(Error::InvalidArgument(format!(
                    "neuron {n} out of range for layer {layer} (d_hidden={dh})"
                )))
            } else {
                Ok(())
            }
        };
        match self {
            HiddenEdit::Scale { neuron, .. } => check_neuron(*neuron),
            HiddenEdit::Offset { neuron, position, .. } => {
                check_neuron(*neuron)?;
                if *position >= seq_len {
                    return Err(Error::InvalidArgument(format!(
                        "position {position} out of range for length {seq_len}"
                    )));
                }
                Ok(())
            }
            HiddenEdit::Mask { neurons, .. } => neurons.iter().try_for_each(|&n| check_neuron(n)),
            HiddenEdit::DropMlp { .. } => Ok(()),
        }
    }
}

pub(crate) fn check_tokens(model: &Model, tokens: &[TokenId]) -> Result<()> {
    let c = &model.config;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > c.max_seq {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds max_seq {}",
            tokens.len(),
            c.max_seq
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::Vocab(format!(
            "token id {bad} outside vocabulary of {}",
            c.vocab_size
        )));
    }
    Ok(())
}

fn embed(model: &Model, tokens: &[TokenId]) -> Matrix<f64> {
    let d = model.config.d_model;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (t, &tok) in tokens.iter().enumerate() {
        for (dst, &src) in x.row_mut(t).iter_mut().zip(model.embedding.row(tok as usize)) {
            *dst = src as f64;
        }
    }
    x
}

fn apply_edits(h: &mut Matrix<f64>, layer: usize, edits: &[HiddenEdit]) {
    for edit in edits.iter().filter(|e| e.layer() == layer) {
        match edit {
            HiddenEdit::Scale { neuron, factor, .. } => {
                for t in 0..h.rows() {
                    let v = h.get(t, *neuron);
                    h.set(t, *neuron, v * factor);
                }
            }
            HiddenEdit::Offset {
                neuron,
                position,
                delta,
                ..
            } => {
                let v = h.get(*position, *neuron);
                h.set(*position, *neuron, v + delta);
            }
            HiddenEdit::Mask { neurons, .. } => {
                for t in 0..h.rows() {
                    for &n in neurons {
                        h.set(t, n, 0.0);
                    }
                }
            }
            HiddenEdit::DropMlp { .. } => {}
        }
    }
}

/// Runs block `layer` on residual `x`, returning the block output and, when
/// requested, its cache.
fn block(
    model: &Model,
    layer: usize,
    x: Matrix<f64>,
    edits: &[HiddenEdit],
    keep: bool,
) -> Result<(Matrix<f64>, Option<LayerCache>)> {
    let c = &model.config;
    let w = &model.layers[layer];
    let eps = c.rms_eps as f64;
    let theta = c.rope_theta as f64;

    let (a, _) = rmsnorm_rows(&x, &w.attn_norm, eps)?;
    let mut q = linear(&a, &w.wq)?;
    let mut k = linear(&a, &w.wk)?;
    let v = linear(&a, &w.wv)?;
    rope_rows(&mut q, c.n_heads, theta, false);
    rope_rows(&mut k, c.n_heads, theta, false);
    let attn = causal_attention(&q, &k, &v, c.n_heads)?;
    let mut mid = linear(&attn.out, &w.wo)?;
    mid.add_assign(&x)?;

    let (mlp_in, _) = rmsnorm_rows(&mid, &w.mlp_norm, eps)?;
    let gate = linear(&mlp_in, &w.w_gate)?;
    let up = linear(&mlp_in, &w.w_up)?;
    let mut h = Matrix::zeros(gate.rows(), gate.cols());
    for ((dst, &g), &u) in h.data_mut().iter_mut().zip(gate.data()).zip(up.data()) {
        *dst = silu_scalar(g) * u;
    }
    apply_edits(&mut h, layer, edits);
    let drop_mlp = edits
        .iter()
        .any(|e| matches!(e, HiddenEdit::DropMlp { layer: l } if *l == layer));
    let mut out = if drop_mlp {
        Matrix::zeros(mid.rows(), mid.cols())
    } else {
        linear(&h, &w.w_down)?
    };
    // residual connection
    for (o, &r) in out.data_mut().iter_mut().zip(mid.data()) {
        *o += r;
    }
    let cache = keep.then_some(LayerCache {
        input: x,
        q,
        k,
        v,
        attn_probs: attn.probs,
        mid,
        mlp_in,
        gate,
        up,
        h,
    });
    Ok((out, cache))
}

/// Runs blocks `start..` on the residual stream `x`, then the final norm and
/// head. Returns `f64` logits.
pub(crate) fn run_from(
    model: &Model,
    start: usize,
    mut x: Matrix<f64>,
    edits: &[HiddenEdit],
    mut caches: Option<&mut Vec<LayerCache>>,
) -> Result<(Matrix<f64>, Matrix<f64>)> {
    for layer in start..model.config.n_layers {
        let (next, cache) = block(model, layer, x, edits, caches.is_some())?;
        if let (Some(dst), Some(cache)) = (caches.as_deref_mut(), cache) {
            dst.push(cache);
        }
        x = next;
    }
    let (f, _) = rmsnorm_rows(&x, &model.final_norm, model.config.rms_eps as f64)?;
    let logits = linear(&f, model.head())?;
    Ok((logits, x))
}

/// Full-sequence forward pass that records every block's intermediates.
pub fn forward(model: &Model, tokens: &[TokenId]) -> Result<(Matrix<f32>, ActivationCache)> {
    check_tokens(model, tokens)?;
    let mut layers = Vec::with_capacity(model.config.n_layers);
    let (logits, final_input) = run_from(model, 0, embed(model, tokens), &[], Some(&mut layers))?;
    let out = logits.to_f32();
    Ok((
        out,
        ActivationCache {
            layers,
            final_input,
            logits,
        },
    ))
}

/// Forward pass without a cache. Bit-identical to [`forward`]'s logits.
pub fn logits_only(model: &Model, tokens: &[TokenId]) -> Result<Matrix<f32>> {
    Ok(logits_f64(model, tokens)?.to_f32())
}

/// Full-precision logits without a cache.
pub fn logits_f64(model: &Model, tokens: &[TokenId]) -> Result<Matrix<f64>> {
    check_tokens(model, tokens)?;
    Ok(run_from(model, 0, embed(model, tokens), &[], None)?.0)
}

/// Forward pass with interventions on hidden activations; returns full
/// precision logits.
pub fn forward_edited(model: &Model, tokens: &[TokenId], edits: &[HiddenEdit]) -> Result<Matrix<f64>> {
    check_tokens(model, tokens)?;
    for e in edits {
        e.validate(model, tokens.len())?;
    }
    Ok(run_from(model, 0, embed(model, tokens), edits, None)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::softmax_stable;

    fn tiny() -> Model {
        Model::random(ModelConfig::uniform(32, 2, 4, 48, 64, 16), 11).unwrap()
    }

    #[test]
    fn causality_on_shared_prefix() {
        let m = tiny();
        let a = [3, 9, 27, 1, 5, 8];
        let b = [3, 9, 27, 60, 2, 8];
        let (la, _) = forward(&m, &a).unwrap();
        let (lb, _) = forward(&m, &b).unwrap();
        for t in 0..3 {
            assert_eq!(la.row(t), lb.row(t));
        }
        assert_ne!(la.row(3), lb.row(3));
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = Model::zeros(ModelConfig::uniform(8, 2, 2, 6, 10, 4)).unwrap();
        let (logits, _) = forward(&m, &[1, 2, 3]).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_softmax_to_valid_distributions() {
        let m = tiny();
        let (logits, cache) = forward(&m, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(cache.layers.len(), 2);
        for row in logits.row_iter() {
            let p = softmax_stable(row).unwrap();
            let s: f64 = p.as_slice().iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn logits_only_is_bit_identical() {
        let m = tiny();
        let toks = [5, 4, 3, 2, 1];
        let (a, cache) = forward(&m, &toks).unwrap();
        let b = logits_only(&m, &toks).unwrap();
        assert_eq!(a, b);
        assert!(cache.heap_bytes() > b.heap_bytes());
    }

    #[test]
    fn cached_h_matches_recomputation_from_mlp_input() {
        let m = tiny();
        let (_, cache) = forward(&m, &[7, 7, 1, 0]).unwrap();
        for (l, lc) in cache.layers.iter().enumerate() {
            let w = &m.layers[l];
            for t in 0..lc.h.rows() {
                for i in 0..lc.h.cols() {
                    let x = lc.mlp_in.row(t);
                    let g: f64 = x.iter().zip(w.w_gate.row(i)).map(|(a, b)| a * *b as f64).sum();
                    let u: f64 = x.iter().zip(w.w_up.row(i)).map(|(a, b)| a * *b as f64).sum();
                    let expect = g / (1.0 + (-g).exp()) * u;
                    assert!((lc.h.get(t, i) - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn input_errors() {
        let m = tiny();
        assert!(matches!(forward(&m, &[64]), Err(Error::Vocab(_))));
        assert!(forward(&m, &[0; 17]).is_err());
        assert!(forward(&m, &[]).is_err());
    }

    #[test]
    fn masking_all_neurons_equals_dropping_the_mlp() {
        let m = tiny();
        let toks = [1, 2, 3, 4, 5];
        let all: Vec<usize> = (0..48).collect();
        let masked = forward_edited(&m, &toks, &[HiddenEdit::Mask { layer: 0, neurons: all }]).unwrap();
        let dropped = forward_edited(&m, &toks, &[HiddenEdit::DropMlp { layer: 0 }]).unwrap();
        let bits = |x: &Matrix<f64>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&masked), bits(&dropped));
    }

    #[test]
    fn edits_are_range_checked() {
        let m = tiny();
        let e = HiddenEdit::Scale { layer: 0, neuron: 48, factor: 0.0 };
        assert!(forward_edited(&m, &[1], &[e]).is_err());
        let e = HiddenEdit::Offset { layer: 1, neuron: 0, position: 1, delta: 0.1 };
        assert!(forward_edited(&m, &[1], &[e]).is_err());
    }

    #[test]
    fn unit_scale_edit_is_identity() {
        let m = tiny();
        let toks = [9, 8, 7];
        let base = logits_f64(&m, &toks).unwrap();
        let e = HiddenEdit::Scale { layer: 1, neuron: 3, factor: 1.0 };
        assert_eq!(forward_edited(&m, &toks, &[e]).unwrap(), base);
    }
}
