//! Calibration-averaged first-order Taylor importance of MLP hidden neurons.
//!
//! For every calibration sequence the criterion is evaluated on the model's
//! own logits, backpropagated to every hidden activation, and
//! `|∂C/∂h_i · h_i|` is accumulated per neuron. Scores are divided by the
//! total number of token positions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backprop::{backward_to_hidden, HiddenGradients};
use crate::criteria::{CriterionKind, Objective};
use crate::error::{Error, Result};
use crate::model::{forward, forward_edited, ActivationCache, HiddenEdit, Model, TokenFile, TokenId};
use crate::numerics::Matrix;

pub type CalibrationSet = TokenFile;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Sequences per accumulation block. Blocks are summed in a fixed order, so
/// results do not depend on the number of workers.
const BLOCK: usize = 8;

/// Where the absolute value is taken when summing over positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Aggregation {
    /// `Σ_t |g_t h_t|`
    #[default]
    #[serde(rename = "abs-pos")]
    AbsPerPosition,
    /// `|Σ_t g_t h_t|`
    #[serde(rename = "abs-seq")]
    AbsPerSequence,
}

impl Aggregation {
    pub fn tag(self) -> &'static str {
        match self {
            Aggregation::AbsPerPosition => "abs-pos",
            Aggregation::AbsPerSequence => "abs-seq",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs-pos" => Ok(Aggregation::AbsPerPosition),
            "abs-seq" => Ok(Aggregation::AbsPerSequence),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation '{other}' (expected abs-pos or abs-seq)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub criterion: CriterionKind,
    /// What the accumulated sums were divided by.
    pub normalizer: String,
    pub aggregation: Aggregation,
    /// Unit and form of the criterion.
    pub criterion_detail: String,
    pub token_count: usize,
    pub sequence_count: usize,
    pub calib_digest: String,
    pub model_digest: String,
    pub toolkit_version: String,
    /// Per-layer, per-neuron non-negative scores.
    pub layers: Vec<Vec<f64>>,
}

impl ImportanceReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: ImportanceReport = serde_json::from_str(text)
            .map_err(|e| Error::format("importance report", e.to_string()))?;
        if report
            .layers
            .iter()
            .flatten()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(Error::format(
                "importance report.layers",
                "scores must be finite and non-negative",
            ));
        }
        Ok(report)
    }

    /// SHA-256 of the JSON encoding.
    pub fn digest(&self) -> String {
        crate::digest::sha256_hex(self.to_json().as_bytes())
    }

    pub fn max_score(&self) -> f64 {
        self.layers.iter().flatten().fold(0.0, |m, &s| m.max(s))
    }

    /// Checks that the per-layer widths match `model`.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        let widths: Vec<usize> = self.layers.iter().map(Vec::len).collect();
        if widths != model.config.d_hidden {
            return Err(Error::Shape(format!(
                "report layer widths {widths:?} do not match model d_hidden {:?}",
                model.config.d_hidden
            )));
        }
        Ok(())
    }
}

pub fn criterion_detail(kind: CriterionKind) -> &'static str {
    match kind {
        CriterionKind::InformationEntropy => "entropy of next-token distribution, log base 2",
        CriterionKind::CrossEntropy => "one-hot cross entropy vs next token, natural log",
        CriterionKind::SelfDistillation => {
            "KL(teacher || student), natural log, no temperature; teacher = unpruned model"
        }
    }
}

/// Forward, criterion and backward for one sequence.
pub fn taylor_terms(
    model: &Model,
    tokens: &[TokenId],
    kind: CriterionKind,
) -> Result<(ActivationCache, HiddenGradients)> {
    let objective = Objective::with_teacher(kind, model, tokens)?;
    let (_, cache) = forward(model, tokens)?;
    let crit = objective.evaluate(&cache.logits)?;
    let grads = backward_to_hidden(model, &cache, &crit.grad_logits)?;
    Ok((cache, grads))
}

/// Per-layer, per-neuron sums over positions of `g·h` for one sequence,
/// with the absolute value placed according to `aggregation`.
pub fn sequence_sums(
    cache: &ActivationCache,
    grads: &HiddenGradients,
    aggregation: Aggregation,
) -> Vec<Vec<f64>> {
    cache
        .layers
        .iter()
        .zip(&grads.layers)
        .map(|(lc, g)| column_sums(&lc.h, g, aggregation))
        .collect()
}

fn column_sums(h: &Matrix<f64>, g: &Matrix<f64>, aggregation: Aggregation) -> Vec<f64> {
    let mut sums = vec![0.0; h.cols()];
    for t in 0..h.rows() {
        for ((s, &hv), &gv) in sums.iter_mut().zip(h.row(t)).zip(g.row(t)) {
            *s += match aggregation {
                Aggregation::AbsPerPosition => (gv * hv).abs(),
                Aggregation::AbsPerSequence => gv * hv,
            };
        }
    }
    if aggregation == Aggregation::AbsPerSequence {
        sums.iter_mut().for_each(|s| *s = s.abs());
    }
    sums
}

fn add_into(acc: &mut [Vec<f64>], part: &[Vec<f64>]) {
    for (a, p) in acc.iter_mut().zip(part) {
        for (x, y) in a.iter_mut().zip(p) {
            *x += y;
        }
    }
}

fn check_calibration(model: &Model, calib: &CalibrationSet, kind: CriterionKind) -> Result<()> {
    if calib.is_empty() || calib.seq_len() == 0 {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    calib.check_vocab(model.config.vocab_size)?;
    if calib.seq_len() > model.config.max_seq {
        return Err(Error::Shape(format!(
            "calibration sequences of length {} exceed max_seq {}",
            calib.seq_len(),
            model.config.max_seq
        )));
    }
    if kind.requires_labels() && calib.seq_len() < 2 {
        return Err(Error::InvalidArgument(
            "cross-entropy scoring needs sequences of at least two tokens".into(),
        ));
    }
    Ok(())
}

/// Accumulates importance scores over a calibration set.
pub fn accumulate_scores(
    model: &Model,
    calib: &CalibrationSet,
    kind: CriterionKind,
    aggregation: Aggregation,
) -> Result<ImportanceReport> {
    check_calibration(model, calib, kind)?;
    let blocks: Vec<Vec<Vec<f64>>> = calib
        .sequences()
        .par_chunks(BLOCK)
        .map(|chunk| {
            let mut acc: Vec<Vec<f64>> =
                model.config.d_hidden.iter().map(|&d| vec![0.0; d]).collect();
            for seq in chunk {
                let (cache, grads) = taylor_terms(model, seq, kind)?;
                add_into(&mut acc, &sequence_sums(&cache, &grads, aggregation));
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut total: Vec<Vec<f64>> = model.config.d_hidden.iter().map(|&d| vec![0.0; d]).collect();
    for b in &blocks {
        add_into(&mut total, b);
    }
    let positions = calib.total_tokens();
    let inv = 1.0 / positions as f64;
    total.iter_mut().flatten().for_each(|s| *s *= inv);

    Ok(ImportanceReport {
        criterion: kind,
        normalizer: "token_positions".into(),
        aggregation,
        criterion_detail: criterion_detail(kind).into(),
        token_count: positions,
        sequence_count: calib.len(),
        calib_digest: calib.digest(),
        model_digest: model.digest(),
        toolkit_version: TOOLKIT_VERSION.into(),
        layers: total,
    })
}

fn check_neuron(model: &Model, layer: usize, neuron: usize) -> Result<()> {
    if layer >= model.config.n_layers || neuron >= model.d_hidden(layer) {
        return Err(Error::InvalidArgument(format!(
            "neuron ({layer}, {neuron}) out of range"
        )));
    }
    Ok(())
}

/// Signed first-order estimate of `C(h_i = 0) − C(h)`: `−Σ_t g_t h_t`.
pub fn taylor_estimate_delta(
    model: &Model,
    tokens: &[TokenId],
    kind: CriterionKind,
    layer: usize,
    neuron: usize,
) -> Result<f64> {
    check_neuron(model, layer, neuron)?;
    let (cache, grads) = taylor_terms(model, tokens, kind)?;
    let h = cache.h(layer);
    let g = grads.layer(layer);
    Ok(-(0..h.rows()).map(|t| g.get(t, neuron) * h.get(t, neuron)).sum::<f64>())
}

/// Exact criterion change when neuron `(layer, neuron)` is multiplied by
/// `factor` at every position, from a full re-forward.
pub fn scaled_ablation_delta(
    model: &Model,
    tokens: &[TokenId],
    kind: CriterionKind,
    layer: usize,
    neuron: usize,
    factor: f64,
) -> Result<f64> {
    check_neuron(model, layer, neuron)?;
    let objective = Objective::with_teacher(kind, model, tokens)?;
    let base = objective.evaluate(&crate::model::logits_f64(model, tokens)?)?.value;
    let edit = HiddenEdit::Scale {
        layer,
        neuron,
        factor,
    };
    let edited = objective.evaluate(&forward_edited(model, tokens, &[edit])?)?.value;
    Ok(edited - base)
}

/// Exact `C(h_i = 0) − C(h)`.
pub fn exact_ablation_delta(
    model: &Model,
    tokens: &[TokenId],
    kind: CriterionKind,
    layer: usize,
    neuron: usize,
) -> Result<f64> {
    scaled_ablation_delta(model, tokens, kind, layer, neuron, 0.0)
}

/// Exact ablation deltas for every neuron of `layer` on one sequence.
///
/// Reuses the cached residual stream: removing neuron `i` changes the block
/// output by `−h_i · w_down[:, i]`, after which only the blocks above are
/// re-run. Agrees with [`exact_ablation_delta`] up to float reassociation.
pub fn layer_ablation_deltas(
    model: &Model,
    tokens: &[TokenId],
    kind: CriterionKind,
    layer: usize,
) -> Result<Vec<f64>> {
    if layer >= model.config.n_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    let objective = Objective::with_teacher(kind, model, tokens)?;
    let (_, cache) = forward(model, tokens)?;
    let base = objective.evaluate(&cache.logits)?.value;
    let block_out = cache
        .layers
        .get(layer + 1)
        .map_or(&cache.final_input, |lc| &lc.input);
    let h = cache.h(layer);
    let w_down = &model.layers[layer].w_down;
    (0..model.d_hidden(layer))
        .map(|i| {
            let mut x = block_out.clone();
            for t in 0..x.rows() {
                let hv = h.get(t, i);
                for (r, xv) in x.row_mut(t).iter_mut().enumerate() {
                    *xv -= hv * w_down.get(r, i) as f64;
                }
            }
            let (logits, _) = crate::model::forward::run_from(model, layer + 1, x, &[], None)?;
            Ok(objective.evaluate(&logits)?.value - base)
        })
        .collect()
}
