//! LLaMA-style decoder-only transformer: pre-norm RMSNorm, rotary
//! positions, causal multi-head attention and a bias-free SwiGLU MLP.
//!
//! Every projection is stored `[out_features × in_features]`, so hidden
//! neuron `i` of a block owns row `i` of `w_gate` and `w_up` and column `i`
//! of `w_down`.

pub(crate) mod forward;
mod io;
mod tokens;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use forward::{forward, forward_edited, logits_f64, logits_only, ActivationCache, HiddenEdit, LayerCache};
pub use io::{load_model, model_bytes, parse_model, save_model};
pub use tokens::{load_tokens, parse_tokens, save_tokens, token_bytes, TokenFile};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of each MLP block; differs per layer after pruning.
    pub d_hidden: Vec<usize>,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_theta: f32,
    pub rms_eps: f32,
    /// `lm_head` shares storage with the embedding table.
    pub tied_embeddings: bool,
}

impl ModelConfig {
    /// A uniform-width configuration.
    pub fn uniform(
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_hidden: usize,
        vocab_size: usize,
        max_seq: usize,
    ) -> Self {
        ModelConfig {
            d_model,
            n_layers,
            n_heads,
            d_hidden: vec![d_hidden; n_layers],
            vocab_size,
            max_seq,
            rope_theta: 10000.0,
            rms_eps: 1e-5,
            tied_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::format(format!("config.{field}"), msg));
        if self.d_model == 0 {
            return bad("d_model", "must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(
                "n_heads",
                format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads),
            );
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad("n_heads", format!("head width {} must be even for rotary positions", self.head_dim()));
        }
        if self.d_hidden.len() != self.n_layers {
            return bad(
                "d_hidden",
                format!("{} widths for {} layers", self.d_hidden.len(), self.n_layers),
            );
        }
        if let Some(l) = self.d_hidden.iter().position(|&d| d == 0) {
            return bad("d_hidden", format!("layer {l} has zero hidden width"));
        }
        if self.vocab_size < 2 {
            return bad("vocab_size", format!("{} < 2", self.vocab_size));
        }
        if self.max_seq == 0 {
            return bad("max_seq", "must be positive".into());
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return bad("rope_theta", format!("{} is not a positive float", self.rope_theta));
        }
        if !(self.rms_eps.is_finite() && self.rms_eps > 0.0) {
            return bad("rms_eps", format!("{} is not a positive float", self.rms_eps));
        }
        Ok(())
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix<f32>,
    pub wk: Matrix<f32>,
    pub wv: Matrix<f32>,
    pub wo: Matrix<f32>,
    /// `[d_hidden × d_model]`
    pub w_gate: Matrix<f32>,
    /// `[d_hidden × d_model]`
    pub w_up: Matrix<f32>,
    /// `[d_model × d_hidden]`
    pub w_down: Matrix<f32>,
    pub attn_norm: Vec<f32>,
    pub mlp_norm: Vec<f32>,
}

impl LayerWeights {
    pub fn d_hidden(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn mlp_params(&self) -> usize {
        self.w_gate.data().len() + self.w_up.data().len() + self.w_down.data().len()
    }

    fn params(&self) -> usize {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .map(|m| m.data().len())
            .sum::<usize>()
            + self.mlp_params()
            + self.attn_norm.len()
            + self.mlp_norm.len()
    }

    fn all_finite(&self) -> bool {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_gate, &self.w_up, &self.w_down]
            .iter()
            .all(|m| m.all_finite())
            && self.attn_norm.iter().chain(&self.mlp_norm).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `[vocab × d_model]`
    pub embedding: Matrix<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `None` when the head is tied to `embedding`.
    pub lm_head: Option<Matrix<f32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub mlp: usize,
    pub per_layer_mlp: Vec<usize>,
}

impl Model {
    pub fn head(&self) -> &Matrix<f32> {
        self.lm_head.as_ref().unwrap_or(&self.embedding)
    }

    pub fn d_hidden(&self, layer: usize) -> usize {
        self.layers[layer].d_hidden()
    }

    pub fn total_neurons(&self) -> usize {
        self.config.d_hidden.iter().sum()
    }

    /// Checks every tensor against the configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let expect = |name: String, m: &Matrix<f32>, rows: usize, cols: usize| {
            if m.shape() != (rows, cols) {
                Err(Error::Shape(format!(
                    "{name}: expected {rows}x{cols}, found {}x{}",
                    m.rows(),
                    m.cols()
                )))
            } else {
                Ok(())
            }
        };
        let expect_vec = |name: String, v: &[f32]| {
            if v.len() != d {
                Err(Error::Shape(format!("{name}: expected length {d}, found {}", v.len())))
            } else {
                Ok(())
            }
        };
        expect("embedding".into(), &self.embedding, c.vocab_size, d)?;
        if let Some(head) = &self.lm_head {
            expect("lm_head".into(), head, c.vocab_size, d)?;
        }
        if self.lm_head.is_none() != c.tied_embeddings {
            return Err(Error::Shape("lm_head presence disagrees with the tied flag".into()));
        }
        expect_vec("final_norm".into(), &self.final_norm)?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "{} layers for n_layers={}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (l, (w, &dh)) in self.layers.iter().zip(&c.d_hidden).enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            expect(p("wq"), &w.wq, d, d)?;
            expect(p("wk"), &w.wk, d, d)?;
            expect(p("wv"), &w.wv, d, d)?;
            expect(p("wo"), &w.wo, d, d)?;
            expect(p("w_gate"), &w.w_gate, dh, d)?;
            expect(p("w_up"), &w.w_up, dh, d)?;
            expect(p("w_down"), &w.w_down, d, dh)?;
            expect_vec(p("attn_norm"), &w.attn_norm)?;
            expect_vec(p("mlp_norm"), &w.mlp_norm)?;
            if !w.all_finite() {
                return Err(Error::Numeric(format!("layer {l} holds non-finite weights")));
            }
        }
        if !self.embedding.all_finite()
            || !self.lm_head.as_ref().is_none_or(Matrix::all_finite)
            || !self.final_norm.iter().all(|v| v.is_finite())
        {
            return Err(Error::Numeric("non-finite embedding, head or norm".into()));
        }
        Ok(())
    }

    /// Parameter counts; a tied head is counted once.
    pub fn param_counts(&self) -> ParamCounts {
        let per_layer_mlp: Vec<usize> = self.layers.iter().map(LayerWeights::mlp_params).collect();
        let total = self.embedding.data().len()
            + self.lm_head.as_ref().map_or(0, |m| m.data().len())
            + self.final_norm.len()
            + self.layers.iter().map(LayerWeights::params).sum::<usize>();
        ParamCounts {
            total,
            mlp: per_layer_mlp.iter().sum(),
            per_layer_mlp,
        }
    }

    /// SHA-256 of the serialized weight file.
    pub fn digest(&self) -> String {
        crate::digest::sha256_hex(&model_bytes(self))
    }

    /// A model with all projections zero and all norm gains one.
    pub fn zeros(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let d = config.d_model;
        let layers = config
            .d_hidden
            .iter()
            .map(|&dh| LayerWeights {
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                w_gate: Matrix::zeros(dh, d),
                w_up: Matrix::zeros(dh, d),
                w_down: Matrix::zeros(d, dh),
                attn_norm: vec![1.0; d],
                mlp_norm: vec![1.0; d],
            })
            .collect();
        Ok(Model {
            embedding: Matrix::zeros(config.vocab_size, d),
            lm_head: (!config.tied_embeddings).then(|| Matrix::zeros(config.vocab_size, d)),
            final_norm: vec![1.0; d],
            layers,
            config,
        })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Model> {
        Model::random_with(config, seed, &RandomInit::default())
    }

    pub fn random_with(config: ModelConfig, seed: u64, init: &RandomInit) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let embedding = gauss(&mut rng, v, d, 1.0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for &dh in &config.d_hidden {
            let wq = gauss(&mut rng, d, d, init.attn_scale * inv_sqrt_d);
            let wk = gauss(&mut rng, d, d, init.attn_scale * inv_sqrt_d);
            let wv = gauss(&mut rng, d, d, inv_sqrt_d);
            let wo = gauss(&mut rng, d, d, inv_sqrt_d);
            let w_gate = gauss(&mut rng, dh, d, init.mlp_scale * inv_sqrt_d);
            let w_up = gauss(&mut rng, dh, d, init.mlp_scale * inv_sqrt_d);
            let mut w_down = gauss(&mut rng, d, dh, 1.0 / (dh as f64).sqrt());
            // Per-neuron output gain, log-normally spread so that neurons
            // differ in how much they matter.
            let gain_dist = Normal::new(0.0, init.neuron_spread).expect("non-negative spread");
            let gains: Vec<f32> = (0..dh).map(|_| gain_dist.sample(&mut rng).exp() as f32).collect();
            for r in 0..d {
                for (wv, g) in w_down.row_mut(r).iter_mut().zip(&gains) {
                    *wv *= g;
                }
            }
            layers.push(LayerWeights {
                wq,
                wk,
                wv,
                wo,
                w_gate,
                w_up,
                w_down,
                attn_norm: vec![1.0; d],
                mlp_norm: vec![1.0; d],
            });
        }
        let lm_head = (!config.tied_embeddings).then(|| gauss(&mut rng, v, d, init.logit_scale * inv_sqrt_d));
        let model = Model {
            embedding,
            layers,
            final_norm: vec![1.0; d],
            lm_head,
            config,
        };
        model.validate()?;
        Ok(model)
    }
}

fn gauss(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<f32> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng) as f32).collect();
    Matrix::new(rows, cols, data).expect("sized buffer")
}

/// Scales for [`Model::random_with`], relative to the `1/√fan_in` default.
#[derive(Debug, Clone)]
pub struct RandomInit {
    pub attn_scale: f64,
    pub mlp_scale: f64,
    /// Standard deviation of the lm head in units of `1/√d_model`; sets how
    /// peaked next-token distributions are.
    pub logit_scale: f64,
    /// Log-normal spread of per-neuron `w_down` gains.
    pub neuron_spread: f64,
}

impl Default for RandomInit {
    fn default() -> Self {
        RandomInit {
            attn_scale: 1.0,
            mlp_scale: 1.0,
            logit_scale: 3.0,
            neuron_spread: 0.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_count_for_toy_model() {
        let cfg = ModelConfig::uniform(4, 1, 1, 8, 10, 4);
        let m = Model::zeros(cfg).unwrap();
        let counts = m.param_counts();
        assert_eq!(counts.mlp, 96);
        assert_eq!(counts.per_layer_mlp, vec![96]);
        // embeddings + head + final norm + attention + mlp + two norms
        assert_eq!(counts.total, 40 + 40 + 4 + 4 * 16 + 96 + 8);
    }

    #[test]
    fn tied_head_counted_once() {
        let mut cfg = ModelConfig::uniform(4, 1, 1, 8, 10, 4);
        let untied = Model::zeros(cfg.clone()).unwrap().param_counts().total;
        cfg.tied_embeddings = true;
        let tied = Model::zeros(cfg).unwrap();
        assert!(tied.lm_head.is_none());
        assert_eq!(tied.param_counts().total, untied - 40);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::uniform(6, 1, 4, 8, 10, 4);
        assert!(cfg.validate().is_err());
        cfg.n_heads = 3; // head width 2
        assert!(cfg.validate().is_ok());
        cfg.d_hidden = vec![0];
        assert!(cfg.validate().is_err());
        cfg.d_hidden = vec![1];
        cfg.vocab_size = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn random_is_seed_deterministic() {
        let cfg = ModelConfig::uniform(8, 2, 2, 12, 16, 8);
        let a = Model::random(cfg.clone(), 7).unwrap();
        let b = Model::random(cfg.clone(), 7).unwrap();
        let c = Model::random(cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
