//! Toy pretraining that produces the frozen base model.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward, forward_on, masked_nll, masked_nll_on, BaseVars, LmParams, ModelConfig, TokenMask};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::optim::{adamw_step, clip_global_norm, AdamWConfig, OptimizerState};
use crate::real::Real;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            warmup_steps: 100,
            clip_norm: 1.0,
            eval_every: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRow {
    pub step: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub log: Vec<PretrainLogRow>,
    pub initial_held_out_nll: f64,
    pub final_held_out_nll: f64,
    /// `ln(vocab_size)`, the NLL of uniform predictions.
    pub uniform_nll: f64,
}

fn lr_at(step: usize, cfg: &PretrainConfig) -> f64 {
    let base = cfg.optimizer.lr;
    if step < cfg.warmup_steps {
        return base * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn sequence_grad<S: Real>(params: &LmParams<S>, tokens: &[usize]) -> Result<(f64, Vec<Tensor<S>>)> {
    let mut g = Graph::new();
    let base = BaseVars::leaves(&mut g, params)?;
    let out = forward_on(&mut g, params, &base, None, tokens)?;
    let loss = masked_nll_on(&mut g, out.logits, tokens, &TokenMask::all(tokens.len()))?;
    let value = g.value(loss).item().as_f64();
    let mut grads = g.backward(loss)?;
    Ok((value, base.leaves.iter().map(|&v| grads.take(v)).collect()))
}

/// Mean over episodes of the all-position NLL of the joined sequence.
pub fn corpus_nll<S: Real>(params: &LmParams<S>, episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Empty("corpus_nll over no episodes".into()));
    }
    let per: Vec<f64> = episodes
        .par_iter()
        .map(|e| {
            let tokens = e.joined_tokens();
            let (logits, _) = forward(params, None, &tokens)?;
            Ok(masked_nll(&logits, &tokens, &TokenMask::all(tokens.len()))?.as_f64())
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Train a base model on the joined prompt+answer sequences of `train`.
///
/// Fails with [`Error::Diverged`] if the held-out NLL is not below the
/// uniform baseline at the end of the budget.
pub fn pretrain_lm<S: Real>(
    train: &[Episode],
    held_out: &[Episode],
    config: &ModelConfig,
    hyper: &PretrainConfig,
) -> Result<(LmParams<S>, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::Empty("pretraining corpus is empty".into()));
    }
    if hyper.batch_size == 0 || hyper.steps == 0 {
        return Err(Error::config("pretrain", "steps and batch_size must be positive"));
    }
    let usable: Vec<Vec<usize>> = train
        .iter()
        .map(|e| e.joined_tokens())
        .filter(|t| t.len() >= 2 && t.len() <= config.max_seq_len)
        .collect();
    if usable.is_empty() {
        return Err(Error::Empty("no pretraining sequence fits max_seq_len".into()));
    }
    let eval_set = if held_out.is_empty() { train } else { held_out };

    let mut params = LmParams::<S>::init(config, hyper.seed)?;
    let mut state = OptimizerState::new(params.named_tensors().into_iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::stream_seed(hyper.seed, "pretrain-batches"));
    let uniform_nll = (config.vocab_size as f64).ln();
    let initial_held_out_nll = corpus_nll(&params, eval_set)?;
    let mut log = Vec::new();

    for step in 0..hyper.steps {
        let batch: Vec<&Vec<usize>> = (0..hyper.batch_size)
            .map(|_| usable.choose(&mut rng).expect("non-empty"))
            .collect();
        let results: Vec<(f64, Vec<Tensor<S>>)> = batch
            .par_iter()
            .map(|tokens| sequence_grad(&params, tokens))
            .collect::<Result<_>>()?;
        let mut iter = results.into_iter();
        let (mut loss_sum, mut grads) = iter.next().expect("batch_size >= 1");
        for (l, gs) in iter {
            loss_sum += l;
            for (acc, g) in grads.iter_mut().zip(&gs) {
                acc.add_assign(g);
            }
        }
        let inv = S::lit(1.0 / hyper.batch_size as f64);
        grads.iter_mut().for_each(|g| g.scale_inplace(inv));
        let grad_norm = clip_global_norm(&mut grads, hyper.clip_norm);

        let lr = lr_at(step, hyper);
        let opt = AdamWConfig { lr, ..hyper.optimizer };
        adamw_step(&mut params.tensors_mut(), &grads, &mut state, &opt)?;

        let last = step + 1 == hyper.steps;
        let held_out_nll = if last || (hyper.eval_every > 0 && (step + 1) % hyper.eval_every == 0) {
            Some(corpus_nll(&params, eval_set)?)
        } else {
            None
        };
        if let Some(h) = held_out_nll {
            log::info!("pretrain step {}: train {:.4} held-out {:.4}", step + 1, loss_sum / hyper.batch_size as f64, h);
        }
        log.push(PretrainLogRow {
            step: step + 1,
            lr,
            train_nll: loss_sum / hyper.batch_size as f64,
            grad_norm,
            held_out_nll,
        });
    }

    let final_held_out_nll = log.last().and_then(|r| r.held_out_nll).expect("evaluated on last step");
    let report = PretrainReport {
        log,
        initial_held_out_nll,
        final_held_out_nll,
        uniform_nll,
    };
    if !(final_held_out_nll < uniform_nll) || !params.is_finite() {
        return Err(Error::Diverged(format!(
            "held-out NLL {final_held_out_nll:.4} is not below the uniform baseline {uniform_nll:.4}"
        )));
    }
    Ok((params, report))
}
