//! Turning importance scores into a prune plan and cutting the MLPs down.
//!
//! Removing hidden neuron `i` deletes row `i` of `w_gate` and `w_up` and
//! column `i` of `w_down`; the result is a smaller dense model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scoring::ImportanceReport;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub d_hidden: usize,
    /// Ascending.
    pub removed: Vec<usize>,
    /// Ascending.
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// Fraction of neurons removed from every layer.
    pub rho: f64,
    pub report_digest: String,
    pub layers: Vec<LayerPlan>,
}

pub fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "prune ratio {rho} outside [0, 1)"
        )));
    }
    Ok(())
}

/// `⌊rho · d⌋`.
pub fn prune_count(rho: f64, d_hidden: usize) -> usize {
    // the small slack keeps e.g. 0.3 * 10 from landing on 2.999…
    let k = ((rho * d_hidden as f64) + 1e-9).floor() as usize;
    k.min(d_hidden.saturating_sub(1))
}

/// Indices of the `k` lowest scores; ties go to the lower index.
pub fn lowest_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut removed = idx[..k.min(idx.len())].to_vec();
    removed.sort_unstable();
    removed
}

fn layer_plan(d_hidden: usize, mut removed: Vec<usize>) -> LayerPlan {
    removed.sort_unstable();
    let kept = (0..d_hidden).filter(|i| removed.binary_search(i).is_err()).collect();
    LayerPlan {
        d_hidden,
        removed,
        kept,
    }
}

/// Removes the `⌊rho · d_hidden⌋` lowest-scoring neurons of each layer.
pub fn make_plan(report: &ImportanceReport, rho: f64) -> Result<PrunePlan> {
    check_rho(rho)?;
    if report.layers.iter().flatten().any(|s| s.is_nan()) {
        return Err(Error::Numeric("importance scores contain NaN".into()));
    }
    let layers = report
        .layers
        .iter()
        .map(|scores| layer_plan(scores.len(), lowest_k(scores, prune_count(rho, scores.len()))))
        .collect();
    Ok(PrunePlan {
        rho,
        report_digest: report.digest(),
        layers,
    })
}

/// Same per-layer counts as [`make_plan`] but with uniformly random choices.
pub fn random_plan(model: &Model, rho: f64, seed: u64) -> Result<PrunePlan> {
    check_rho(rho)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = model
        .config
        .d_hidden
        .iter()
        .map(|&d| {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.shuffle(&mut rng);
            idx.truncate(prune_count(rho, d));
            layer_plan(d, idx)
        })
        .collect();
    Ok(PrunePlan {
        rho,
        report_digest: format!("random:{seed}"),
        layers,
    })
}

impl PrunePlan {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: PrunePlan =
            serde_json::from_str(text).map_err(|e| Error::format("prune plan", e.to_string()))?;
        for (l, lp) in plan.layers.iter().enumerate() {
            let mut all: Vec<usize> = lp.removed.iter().chain(&lp.kept).copied().collect();
            all.sort_unstable();
            if all != (0..lp.d_hidden).collect::<Vec<_>>() {
                return Err(Error::format(
                    format!("prune plan.layers[{l}]"),
                    "removed and kept must partition 0..d_hidden",
                ));
            }
        }
        Ok(plan)
    }

    pub fn removed_total(&self) -> usize {
        self.layers.iter().map(|l| l.removed.len()).sum()
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        let widths: Vec<usize> = self.layers.iter().map(|l| l.d_hidden).collect();
        if widths != model.config.d_hidden {
            return Err(Error::Shape(format!(
                "plan layer widths {widths:?} do not match model d_hidden {:?}",
                model.config.d_hidden
            )));
        }
        Ok(())
    }
}

/// Structural surgery: a new model with the removed neurons cut out.
pub fn apply_plan(model: &Model, plan: &PrunePlan) -> Result<Model> {
    plan.check_model(model)?;
    let mut out = model.clone();
    for (layer, lp) in out.layers.iter_mut().zip(&plan.layers) {
        if lp.removed.is_empty() {
            continue;
        }
        layer.w_gate = layer.w_gate.select_rows(&lp.kept);
        layer.w_up = layer.w_up.select_rows(&lp.kept);
        layer.w_down = layer.w_down.select_cols(&lp.kept);
    }
    out.config.d_hidden = plan.layers.iter().map(|l| l.kept.len()).collect();
    out.validate()?;
    Ok(out)
}

/// Per-layer MLP prune fraction that removes `overall` of all parameters,
/// given total and MLP parameter counts.
pub fn rho_from_counts(total: usize, mlp: usize, overall: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&overall) {
        return Err(Error::InvalidArgument(format!(
            "overall ratio {overall} outside [0, 1]"
        )));
    }
    if overall == 0.0 {
        return Ok(0.0);
    }
    let rho = overall * total as f64 / mlp as f64;
    if !rho.is_finite() || rho >= 1.0 {
        return Err(Error::Infeasible(format!(
            "removing {:.1}% of {total} parameters needs {:.1}% of the {mlp} MLP parameters",
            overall * 100.0,
            rho * 100.0
        )));
    }
    Ok(rho)
}

pub fn rho_from_overall(model: &Model, overall: f64) -> Result<f64> {
    let counts = model.param_counts();
    rho_from_counts(counts.total, counts.mlp, overall)
}
