//! Damage measurements: perplexity, original-vs-pruned distribution
//! fidelity, and rank agreement between scores and exact ablation damage.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::CriterionKind;
use crate::error::{Error, Result};
use crate::model::{logits_f64, Model, TokenFile, TokenId};
use crate::pruning::{apply_plan, random_plan, PrunePlan};
use crate::numerics::{cross_entropy_nats, js_distance, softmax_stable, topk_jaccard};
use crate::scoring::{accumulate_scores, layer_ablation_deltas, Aggregation, CalibrationSet, TOOLKIT_VERSION};

pub const DEFAULT_TOP_K: usize = 15;
pub const MAX_ORACLE_NEURONS: usize = 4096;

/// Order-independent sum: values are sorted before adding, so any
/// permutation of the inputs gives the same bits.
fn stable_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn check_corpus(model: &Model, corpus: &TokenFile) -> Result<()> {
    if corpus.is_empty() || corpus.seq_len() == 0 {
        return Err(Error::InvalidArgument("empty token corpus".into()));
    }
    corpus.check_vocab(model.config.vocab_size)
}

/// `exp` of the mean next-token negative log-likelihood. The last position
/// of each sequence has no successor and is skipped.
pub fn perplexity(model: &Model, corpus: &TokenFile) -> Result<f64> {
    check_corpus(model, corpus)?;
    if corpus.seq_len() < 2 {
        return Err(Error::InvalidArgument(
            "perplexity needs sequences of at least two tokens".into(),
        ));
    }
    let nll: Vec<Vec<f64>> = corpus
        .sequences()
        .par_iter()
        .map(|seq| sequence_nll(model, seq))
        .collect::<Result<_>>()?;
    let n = corpus.len() * (corpus.seq_len() - 1);
    Ok((stable_sum(nll.into_iter().flatten().collect()) / n as f64).exp())
}

fn sequence_nll(model: &Model, seq: &[TokenId]) -> Result<Vec<f64>> {
    let logits = logits_f64(model, seq)?;
    (0..seq.len() - 1)
        .map(|t| {
            let p = softmax_stable(logits.row(t))?;
            cross_entropy_nats(&p, seq[t + 1] as usize)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positions {
    /// Only the next-token distribution after the full prompt.
    #[default]
    Final,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub mean_js: f64,
    pub mean_topk_jaccard: f64,
    pub k: usize,
    pub prompt_count: usize,
    pub positions_per_prompt: usize,
    pub positions: Positions,
    pub ppl_original: f64,
    pub ppl_pruned: f64,
    pub js_log_base: u32,
    pub original_digest: String,
    pub pruned_digest: String,
    pub prompts_digest: String,
    pub toolkit_version: String,
}

impl FidelityReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Per-prompt means, for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRow {
    pub prompt: usize,
    pub js: f64,
    pub topk_jaccard: f64,
}

pub fn rows_csv(rows: &[PromptRow]) -> String {
    let mut s = String::from("prompt,js,topk_jaccard\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.prompt, r.js, r.topk_jaccard);
    }
    s
}

/// JS distance and Top-k Jaccard between the next-token distributions of
/// two models on the same prompts.
pub fn distribution_fidelity(
    original: &Model,
    pruned: &Model,
    prompts: &TokenFile,
    k: usize,
    positions: Positions,
) -> Result<(FidelityReport, Vec<PromptRow>)> {
    if original.config.vocab_size != pruned.config.vocab_size {
        return Err(Error::Vocab(format!(
            "original vocab {} != pruned vocab {}",
            original.config.vocab_size, pruned.config.vocab_size
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("top-k size must be at least 1".into()));
    }
    check_corpus(original, prompts)?;
    let per_prompt: Vec<(Vec<f64>, Vec<f64>)> = prompts
        .sequences()
        .par_iter()
        .map(|seq| {
            let a = logits_f64(original, seq)?;
            let b = logits_f64(pruned, seq)?;
            let range = match positions {
                Positions::Final => seq.len() - 1..seq.len(),
                Positions::All => 0..seq.len(),
            };
            let mut js = Vec::with_capacity(range.len());
            let mut jac = Vec::with_capacity(range.len());
            for t in range {
                let (pa, pb) = (softmax_stable(a.row(t))?, softmax_stable(b.row(t))?);
                js.push(js_distance(&pa, &pb)?);
                jac.push(topk_jaccard(&pa, &pb, k)?);
            }
            Ok((js, jac))
        })
        .collect::<Result<_>>()?;

    let rows = per_prompt
        .iter()
        .enumerate()
        .map(|(i, (js, jac))| PromptRow {
            prompt: i,
            js: js.iter().sum::<f64>() / js.len() as f64,
            topk_jaccard: jac.iter().sum::<f64>() / jac.len() as f64,
        })
        .collect();
    let per = per_prompt[0].0.len();
    let n = (per * prompts.len()) as f64;
    let (js, jac): (Vec<Vec<f64>>, Vec<Vec<f64>>) = per_prompt.into_iter().unzip();
    let mean_js = stable_sum(js.into_iter().flatten().collect()) / n;
    let mean_jac = stable_sum(jac.into_iter().flatten().collect()) / n;

    let (ppl_original, ppl_pruned) = if prompts.seq_len() >= 2 {
        (perplexity(original, prompts)?, perplexity(pruned, prompts)?)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok((
        FidelityReport {
            mean_js,
            mean_topk_jaccard: mean_jac,
            k,
            prompt_count: prompts.len(),
            positions_per_prompt: per,
            positions,
            ppl_original,
            ppl_pruned,
            js_log_base: 2,
            original_digest: original.digest(),
            pruned_digest: pruned.digest(),
            prompts_digest: prompts.digest(),
            toolkit_version: TOOLKIT_VERSION.into(),
        },
        rows,
    ))
}

/// Fidelity of a uniformly random plan at `rho`: the baseline any scoring
/// criterion should beat.
pub fn random_plan_fidelity(
    model: &Model,
    prompts: &TokenFile,
    rho: f64,
    seed: u64,
    k: usize,
) -> Result<(PrunePlan, FidelityReport)> {
    let plan = random_plan(model, rho, seed)?;
    let pruned = apply_plan(model, &plan)?;
    let (report, _) = distribution_fidelity(model, &pruned, prompts, k, Positions::Final)?;
    Ok((plan, report))
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation. Zero when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!(
            "spearman needs two equal-length vectors of at least 2 (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Mean oracle value of the top-scoring decile minus that of the bottom decile.
pub fn top_bottom_gap(scores: &[f64], oracle: &[f64]) -> Result<f64> {
    if scores.len() != oracle.len() || scores.is_empty() {
        return Err(Error::Shape("scores and oracle must be non-empty and equal length".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let d = (scores.len() / 10).max(1);
    let mean = |s: &[usize]| s.iter().map(|&i| oracle[i]).sum::<f64>() / s.len() as f64;
    Ok(mean(&idx[idx.len() - d..]) - mean(&idx[..d]))
}

/// `q`-quantile of `|spearman(random scores, oracle)|` over `trials` random
/// permutations.
pub fn null_spearman_quantile(oracle: &[f64], trials: usize, q: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores: Vec<f64> = (0..oracle.len()).map(|i| i as f64).collect();
    let mut vals = Vec::with_capacity(trials);
    for _ in 0..trials {
        scores.shuffle(&mut rng);
        vals.push(spearman(&scores, oracle)?.abs());
    }
    vals.sort_by(f64::total_cmp);
    let i = ((q * trials as f64).ceil() as usize).clamp(1, trials) - 1;
    Ok(vals[i])
}

/// Mean over calibration sequences of `|C(h_i = 0) − C(h)|`, per neuron.
pub fn ablation_damage(model: &Model, calib: &CalibrationSet, kind: CriterionKind) -> Result<Vec<Vec<f64>>> {
    let total = model.total_neurons();
    if total > MAX_ORACLE_NEURONS {
        return Err(Error::InvalidArgument(format!(
            "{total} neurons exceed the exact-ablation limit of {MAX_ORACLE_NEURONS}"
        )));
    }
    check_corpus(model, calib)?;
    let jobs: Vec<(usize, usize)> = (0..calib.len())
        .flat_map(|s| (0..model.config.n_layers).map(move |l| (s, l)))
        .collect();
    let deltas: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(s, l)| layer_ablation_deltas(model, &calib.sequences()[s], kind, l))
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<f64>> = model.config.d_hidden.iter().map(|&d| vec![0.0; d]).collect();
    for (&(_, l), d) in jobs.iter().zip(&deltas) {
        for (o, v) in out[l].iter_mut().zip(d) {
            *o += v.abs();
        }
    }
    let inv = 1.0 / calib.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringQuality {
    pub criterion: CriterionKind,
    pub neuron_count: usize,
    pub spearman: f64,
    pub top_bottom_gap: f64,
}

/// Agreement between accumulated scores and exact single-neuron ablation.
pub fn scoring_quality(model: &Model, calib: &CalibrationSet, kind: CriterionKind) -> Result<ScoringQuality> {
    let oracle = ablation_damage(model, calib, kind)?;
    let report = accumulate_scores(model, calib, kind, Aggregation::default())?;
    let scores: Vec<f64> = report.layers.into_iter().flatten().collect();
    let oracle: Vec<f64> = oracle.into_iter().flatten().collect();
    Ok(ScoringQuality {
        criterion: kind,
        neuron_count: scores.len(),
        spearman: spearman(&scores, &oracle)?,
        top_bottom_gap: top_bottom_gap(&scores, &oracle)?,
    })
}
