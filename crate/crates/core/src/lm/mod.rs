//! Small decoder-only transformer: pre-norm RMS normalization, learned
//! absolute positions, causal multi-head attention and a SiLU MLP.

mod loss;
mod model;
mod pretrain;

pub use loss::{answer_nll, masked_nll, masked_nll_on, prompt_nll, prompt_representation, TokenMask};
pub use model::{forward, forward_on, BaseVars, Forward, HiddenCapture};
pub use pretrain::{corpus_nll, pretrain_lm, PretrainConfig, PretrainLogRow, PretrainReport};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub tie_output_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
            tie_output_head: true,
        }
    }
}

impl ModelConfig {
    /// The d=16, L=2 configuration used by gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
            tie_output_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::config("model.n_layers", "must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("model.vocab_size", "must be >= 2"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config("model.n_heads", "must divide d_model"));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::config("model", "d_ff and max_seq_len must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub attn_norm: Tensor<S>,
    /// Projections are stored `[d_out, d_in]`.
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub mlp_norm: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
}

/// Frozen base weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<S> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_norm: Tensor<S>,
    /// `None` when the output head is tied to `tok_emb`.
    pub head: Option<Tensor<S>>,
}

const INIT_STD: f64 = 0.02;

impl<S: Real> LmParams<S> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(&[d], S::one()),
                wq: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wk: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wv: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wo: Tensor::randn(&[d, d], resid_std, &mut rng),
                mlp_norm: Tensor::full(&[d], S::one()),
                w_up: Tensor::randn(&[f, d], INIT_STD, &mut rng),
                w_down: Tensor::randn(&[d, f], resid_std, &mut rng),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb: Tensor::randn(&[v, d], INIT_STD, &mut rng),
            pos_emb: Tensor::randn(&[config.max_seq_len, d], INIT_STD, &mut rng),
            layers,
            final_norm: Tensor::full(&[d], S::one()),
            head: (!config.tie_output_head).then(|| Tensor::randn(&[v, d], INIT_STD, &mut rng)),
        })
    }

    /// Every array with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layers.{i}.attn_norm"), &l.attn_norm),
                (format!("layers.{i}.wq"), &l.wq),
                (format!("layers.{i}.wk"), &l.wk),
                (format!("layers.{i}.wv"), &l.wv),
                (format!("layers.{i}.wo"), &l.wo),
                (format!("layers.{i}.mlp_norm"), &l.mlp_norm),
                (format!("layers.{i}.w_up"), &l.w_up),
                (format!("layers.{i}.w_down"), &l.w_down),
            ]);
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    /// Mutable views in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Order-sensitive digest of every weight bit, for frozen-weight checks.
    pub fn fingerprint(&self) -> u64 {
        let mut acc = crate::seed::mix64(self.config.d_model as u64);
        let mut buf = Vec::new();
        for (_, t) in self.named_tensors() {
            for &x in t.data() {
                buf.clear();
                x.write_le(&mut buf);
                for &b in &buf {
                    acc = crate::seed::mix64(acc ^ u64::from(b));
                }
            }
        }
        acc
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(&self.config)?;
        let named: Vec<(String, &Tensor<S>)> = self.named_tensors();
        checkpoint::save(path, "lm", meta, &named)
    }

    /// Load and validate every array shape against the stored config.
    pub fn load(path: &Path) -> Result<Self> {
        let mut ck = checkpoint::load::<S>(path, "lm")?;
        let config: ModelConfig = serde_json::from_value(ck.manifest.meta.clone())?;
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let tok_emb = ck.take("tok_emb", &[v, d])?;
        let pos_emb = ck.take("pos_emb", &[config.max_seq_len, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerParams {
                attn_norm: ck.take(&format!("layers.{i}.attn_norm"), &[d])?,
                wq: ck.take(&format!("layers.{i}.wq"), &[d, d])?,
                wk: ck.take(&format!("layers.{i}.wk"), &[d, d])?,
                wv: ck.take(&format!("layers.{i}.wv"), &[d, d])?,
                wo: ck.take(&format!("layers.{i}.wo"), &[d, d])?,
                mlp_norm: ck.take(&format!("layers.{i}.mlp_norm"), &[d])?,
                w_up: ck.take(&format!("layers.{i}.w_up"), &[f, d])?,
                w_down: ck.take(&format!("layers.{i}.w_down"), &[d, f])?,
            });
        }
        let final_norm = ck.take("final_norm", &[d])?;
        let head = if config.tie_output_head {
            None
        } else {
            Some(ck.take("head", &[v, d])?)
        };
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
        })
    }
}
