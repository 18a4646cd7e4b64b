//! Low-rank adapters on the query and value projections of every layer.
//!
//! Block `i` addresses layer `i / 2`; even blocks adapt the query projection
//! and odd blocks the value projection. Each block holds `A: [r, d_in]` and
//! `B: [d_out, r]`, and contributes `scale * B A` to its frozen weight.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::lm::{forward_on, masked_nll_on, BaseVars, HiddenCapture, LmParams, ModelConfig, TokenMask};
use crate::real::Real;
use crate::tensor::{kernels, Graph, Tensor, Var};

/// How `alpha` enters the adapter product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraScaling {
    /// `ΔW = (alpha / r) B A`.
    AlphaOverRank,
    /// `ΔW = B A`; `alpha` is ignored.
    Unscaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation of the `A` initialization.
    pub sigma: f64,
    pub scaling: LoraScaling,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 16.0,
            sigma: 1e-2,
            scaling: LoraScaling::AlphaOverRank,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        match self.scaling {
            LoraScaling::AlphaOverRank => self.alpha / self.rank as f64,
            LoraScaling::Unscaled => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    V,
}

/// Block index for `(layer, projection)`.
pub fn block_index(layer: usize, projection: Projection) -> usize {
    2 * layer
        + match projection {
            Projection::Q => 0,
            Projection::V => 1,
        }
}

/// Inverse of [`block_index`].
pub fn block_of(index: usize) -> (usize, Projection) {
    (index / 2, if index % 2 == 0 { Projection::Q } else { Projection::V })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraBlock<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Real> LoraBlock<S> {
    /// Inner product over the `A` and `B` entries jointly.
    pub fn dot(&self, other: &Self) -> S {
        self.a.dot(&other.a) + self.b.dot(&other.b)
    }

    pub fn sq_norm(&self) -> S {
        self.dot(self)
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.a.shape() == other.a.shape() && self.b.shape() == other.b.shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraState<S> {
    pub config: LoraConfig,
    pub blocks: Vec<LoraBlock<S>>,
}

/// Per-block gradients, shaped like the adapter they were taken against.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBlocks<S> {
    pub blocks: Vec<LoraBlock<S>>,
    /// Always set for gradients handed out by this module: they are plain
    /// values with no path back to whatever produced them.
    pub detached: bool,
}

impl<S: Real> GradBlocks<S> {
    pub fn zeros_like(state: &LoraState<S>) -> Self {
        Self {
            blocks: state
                .blocks
                .iter()
                .map(|b| LoraBlock {
                    a: Tensor::zeros(b.a.shape()),
                    b: Tensor::zeros(b.b.shape()),
                })
                .collect(),
            detached: true,
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// `<self_i, other_i>` for every block.
    pub fn block_inner(&self, other: &Self) -> Result<Vec<S>> {
        self.check_compatible(other)?;
        Ok(self.blocks.iter().zip(&other.blocks).map(|(x, y)| x.dot(y)).collect())
    }

    pub fn inner(&self, other: &Self) -> Result<S> {
        Ok(self.block_inner(other)?.into_iter().fold(S::zero(), |a, b| a + b))
    }

    pub fn sq_norm(&self) -> S {
        self.blocks.iter().fold(S::zero(), |a, b| a + b.sq_norm())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.a.is_finite() && b.b.is_finite())
    }

    pub fn scaled(&self, s: S) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| LoraBlock {
                    a: b.a.map(|x| x * s),
                    b: b.b.map(|x| x * s),
                })
                .collect(),
            detached: self.detached,
        }
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.blocks.len() != other.blocks.len()
            || self.blocks.iter().zip(&other.blocks).any(|(x, y)| !x.same_shape(y))
        {
            return Err(Error::Shape("gradient blocks do not match".into()));
        }
        Ok(())
    }
}

/// Fresh adapters: every `B` zero, every `A` entry `N(0, sigma^2)`.
pub fn init_lora<S: Real>(model: &ModelConfig, cfg: &LoraConfig, seed: u64) -> Result<LoraState<S>> {
    let d = model.d_model;
    if cfg.rank == 0 {
        return Err(Error::config("lora.rank", "must be >= 1"));
    }
    if cfg.rank > d {
        return Err(Error::config(
            "lora.rank",
            format!("rank {} exceeds min(d_out, d_in) = {d}", cfg.rank),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = (0..2 * model.n_layers)
        .map(|_| LoraBlock {
            a: Tensor::randn(&[cfg.rank, d], cfg.sigma, &mut rng),
            b: Tensor::zeros(&[d, cfg.rank]),
        })
        .collect();
    Ok(LoraState { config: *cfg, blocks })
}

/// `(alpha / r) * B A`.
pub fn effective_delta<S: Real>(a: &Tensor<S>, b: &Tensor<S>, alpha: f64, r: usize) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || b.shape()[1] != a.shape()[0] || a.shape()[0] != r {
        return Err(Error::Shape(format!(
            "B {:?} A {:?} with rank {r}",
            b.shape(),
            a.shape()
        )));
    }
    let (d_out, d_in) = (b.shape()[0], a.shape()[1]);
    let mut out = vec![S::zero(); d_out * d_in];
    kernels::gemm_nn(b.data(), a.data(), &mut out, d_out, r, d_in);
    let s = S::lit(alpha / r as f64);
    out.iter_mut().for_each(|x| *x *= s);
    Tensor::new(vec![d_out, d_in], out)
}

impl<S: Real> LoraState<S> {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn delta(&self, i: usize) -> Result<Tensor<S>> {
        let blk = &self.blocks[i];
        let alpha = self.config.scale() * self.config.rank as f64;
        effective_delta(&blk.a, &blk.b, alpha, self.config.rank)
    }

    /// `block_i -= eta * scales[i] * grad_i` for every block.
    pub fn scaled_step(&self, grads: &GradBlocks<S>, eta: f64, scales: &[f64]) -> Result<Self> {
        if grads.blocks.len() != self.blocks.len() || scales.len() != self.blocks.len() {
            return Err(Error::Shape(format!(
                "{} blocks, {} gradients, {} scales",
                self.blocks.len(),
                grads.blocks.len(),
                scales.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::Input(format!("learning-rate scale {s} is negative or NaN")));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("adapter gradient".into()));
        }
        let mut next = self.clone();
        for ((blk, g), &s) in next.blocks.iter_mut().zip(&grads.blocks).zip(scales) {
            if !blk.same_shape(g) {
                return Err(Error::Shape("gradient block shape differs from adapter".into()));
            }
            if s == 0.0 {
                continue;
            }
            let step = S::lit(-eta * s);
            blk.a.axpy(step, &g.a);
            blk.b.axpy(step, &g.b);
        }
        Ok(next)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.a.is_finite() && b.b.is_finite())
    }

    /// Euclidean norm of every factor, for trace summaries.
    pub fn norms(&self) -> Vec<(f64, f64)> {
        self.blocks
            .iter()
            .map(|b| (b.a.sq_norm().as_f64().sqrt(), b.b.sq_norm().as_f64().sqrt()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<(String, String)> = (0..self.blocks.len())
            .map(|i| (format!("blocks.{i}.a"), format!("blocks.{i}.b")))
            .collect();
        let mut arrays = Vec::with_capacity(2 * self.blocks.len());
        for (blk, (na, nb)) in self.blocks.iter().zip(&names) {
            arrays.push((na.clone(), &blk.a));
            arrays.push((nb.clone(), &blk.b));
        }
        let meta = json!({ "config": self.config, "n_blocks": self.blocks.len() });
        checkpoint::save(path, "lora", meta, &arrays)
    }

    pub fn load(path: &Path, model: &ModelConfig) -> Result<Self> {
        let mut ck = checkpoint::load::<S>(path, "lora")?;
        let config: LoraConfig = serde_json::from_value(ck.manifest.meta["config"].clone())?;
        let d = model.d_model;
        let blocks = (0..2 * model.n_layers)
            .map(|i| {
                Ok(LoraBlock {
                    a: ck.take(&format!("blocks.{i}.a"), &[config.rank, d])?,
                    b: ck.take(&format!("blocks.{i}.b"), &[d, config.rank])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, blocks })
    }
}

/// Adapter factors placed on a graph.
pub struct LoraVars {
    pub blocks: Vec<(Var, Var)>,
    pub scale: f64,
}

impl LoraVars {
    pub fn leaves<S: Real>(g: &mut Graph<S>, state: &LoraState<S>) -> Self {
        Self {
            blocks: state
                .blocks
                .iter()
                .map(|b| (g.leaf(b.a.clone()), g.leaf(b.b.clone())))
                .collect(),
            scale: state.config.scale(),
        }
    }

    pub fn constants<S: Real>(g: &mut Graph<S>, state: &LoraState<S>) -> Self {
        Self {
            blocks: state
                .blocks
                .iter()
                .map(|b| (g.constant(b.a.clone()), g.constant(b.b.clone())))
                .collect(),
            scale: state.config.scale(),
        }
    }
}

/// Everything one adaptation step needs from a single prompt pass.
#[derive(Debug, Clone)]
pub struct PromptPass<S> {
    /// Mean prompt NLL at the current adapter state.
    pub loss: S,
    pub grads: GradBlocks<S>,
    pub capture: HiddenCapture<S>,
}

fn masked_grad<S: Real>(
    params: &LmParams<S>,
    lora: &LoraState<S>,
    tokens: &[usize],
    mask: &TokenMask,
) -> Result<(S, GradBlocks<S>, HiddenCapture<S>)> {
    let mut g = Graph::new();
    let base = BaseVars::constants(&mut g, params)?;
    let lv = LoraVars::leaves(&mut g, lora);
    let out = forward_on(&mut g, params, &base, Some(&lv), tokens)?;
    let loss = masked_nll_on(&mut g, out.logits, tokens, mask)?;
    let value = g.value(loss).item();
    let capture = out.capture(&g);
    let mut grads = g.backward(loss)?;
    let blocks = lv
        .blocks
        .iter()
        .map(|&(a, b)| LoraBlock {
            a: grads.take(a),
            b: grads.take(b),
        })
        .collect();
    Ok((value, GradBlocks { blocks, detached: true }, capture))
}

/// Prompt NLL, its adapter gradient and the prompt's hidden capture.
pub fn prompt_pass<S: Real>(params: &LmParams<S>, lora: &LoraState<S>, episode: &Episode) -> Result<PromptPass<S>> {
    let n = episode.prompt_tokens.len();
    if n == 0 {
        return Err(Error::Empty(format!("episode {} has an empty prompt", episode.id)));
    }
    let (loss, grads, capture) = masked_grad(params, lora, &episode.prompt_tokens, &TokenMask::prompt(n))?;
    Ok(PromptPass { loss, grads, capture })
}

/// Gradient of the mean prompt NLL with respect to every adapter block.
pub fn prompt_grad<S: Real>(params: &LmParams<S>, lora: &LoraState<S>, episode: &Episode) -> Result<GradBlocks<S>> {
    Ok(prompt_pass(params, lora, episode)?.grads)
}

/// Mean answer NLL (given the prompt) and its adapter gradient.
pub fn answer_grad<S: Real>(params: &LmParams<S>, lora: &LoraState<S>, episode: &Episode) -> Result<(S, GradBlocks<S>)> {
    if episode.answer_tokens.is_empty() {
        return Err(Error::Empty(format!("episode {} has no answer", episode.id)));
    }
    let tokens = episode.joined_tokens();
    let mask = TokenMask::answer(episode.prompt_tokens.len(), episode.answer_tokens.len());
    let (loss, grads, _) = masked_grad(params, lora, &tokens, &mask)?;
    Ok((loss, grads))
}
