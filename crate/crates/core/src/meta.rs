//! First-order meta-training of the ScaleNet: the answer loss after `K`
//! adaptation steps reaches the network only through the scales multiplying
//! each (detached) prompt gradient.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::lm::LmParams;
use crate::lora::{answer_grad, GradBlocks};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::real::Real;
use crate::scalenet::{scalenet_backward, ScaleHead, ScaleNetConfig, ScaleNetGrad, ScaleNetParams};
use crate::seed::{episode_seed, stream_seed};
use crate::tensor::Tensor;
use crate::tta::{adapt_batch, adapt_episode, seed_for, ScaleSource, TtaConfig, TtaMode, TtaTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub optimizer: AdamWConfig,
    #[serde(rename = "K_max")]
    pub k_max: usize,
    pub episodes: usize,
    /// Episodes whose meta-gradients are averaged into one update.
    pub accumulate: usize,
    /// Held-out evaluation cadence in episodes; 0 disables it.
    pub eval_every: usize,
    /// Held-out episodes used by the periodic evaluation.
    pub eval_episodes: usize,
    pub divergence_window: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            k_max: 5,
            episodes: 30_000,
            accumulate: 1,
            eval_every: 0,
            eval_episodes: 300,
            divergence_window: 100,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::config("meta.K_max", "must be >= 1"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config("meta.optimizer.lr", "must be positive"));
        }
        if self.accumulate == 0 {
            return Err(Error::config("meta.accumulate", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLogRow {
    pub episode: usize,
    #[serde(rename = "K")]
    pub total: usize,
    pub answer_nll: Option<f64>,
    pub prompt_nll_first: Option<f64>,
    pub grad_norm: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEvalRow {
    pub episode: usize,
    /// Mean held-out answer NLL at `K = 0..=K_max`.
    pub answer_nll_by_k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetaLog {
    pub rows: Vec<MetaLogRow>,
    pub evals: Vec<MetaEvalRow>,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S> {
    pub psi: ScaleNetParams<S>,
    pub optimizer: OptimizerState<S>,
    pub next_episode: usize,
}

impl<S: Real> TrainState<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let names = ["w1", "b1", "w2", "b2"];
        let mut arrays: Vec<(String, &Tensor<S>)> = names.iter().map(|n| n.to_string()).zip(self.psi.tensors()).collect();
        for (i, n) in names.iter().enumerate() {
            arrays.push((format!("m.{n}"), &self.optimizer.m[i]));
            arrays.push((format!("v.{n}"), &self.optimizer.v[i]));
        }
        let meta = json!({
            "config": self.psi.config,
            "step": self.optimizer.step,
            "skipped": self.optimizer.skipped,
            "next_episode": self.next_episode,
        });
        checkpoint::save(path, "meta-state", meta, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck = checkpoint::load::<S>(path, "meta-state")?;
        let meta = ck.manifest.meta.clone();
        let config: ScaleNetConfig = serde_json::from_value(meta["config"].clone())?;
        let field = |k: &str| {
            meta[k]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("missing '{k}' in meta-state")))
        };
        let (step, skipped, next) = (field("step")?, field("skipped")?, field("next_episode")?);
        let mut psi = ScaleNetParams::zeros(config);
        let shapes: Vec<Vec<usize>> = psi.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let names = ["w1", "b1", "w2", "b2"];
        let mut m = Vec::new();
        let mut v = Vec::new();
        for ((n, shape), slot) in names.iter().zip(&shapes).zip(psi.tensors_mut()) {
            *slot = ck.take(n, shape)?;
            m.push(ck.take(&format!("m.{n}"), shape)?);
            v.push(ck.take(&format!("v.{n}"), shape)?);
        }
        Ok(Self {
            psi,
            optimizer: OptimizerState { m, v, step, skipped },
            next_episode: next as usize,
        })
    }
}

/// Assemble the first-order meta-gradient of the final answer NLL from a
/// trace's detached prompt gradients and the answer gradient at the adapted
/// state.
pub fn meta_gradient<S: Real>(
    trace: &TtaTrace<S>,
    answer_grads: &GradBlocks<S>,
    psi: &ScaleNetParams<S>,
    eta: f64,
) -> Result<ScaleNetGrad<S>> {
    let mut total = ScaleNetGrad::zeros(&psi.config);
    for step in &trace.steps {
        total.add_assign(&step_contribution(step, answer_grads, psi, eta)?);
    }
    Ok(total)
}

/// One step's share of [`meta_gradient`].
pub fn step_contribution<S: Real>(
    step: &crate::tta::StepRecord<S>,
    answer_grads: &GradBlocks<S>,
    psi: &ScaleNetParams<S>,
    eta: f64,
) -> Result<ScaleNetGrad<S>> {
    let g = step
        .grads
        .as_ref()
        .ok_or_else(|| Error::Input(format!("step {} carries no prompt gradient", step.k)))?;
    let net = step
        .net
        .as_ref()
        .ok_or_else(|| Error::Input(format!("step {} carries no ScaleNet evaluation", step.k)))?;
    let c: Vec<f64> = answer_grads
        .block_inner(g)?
        .into_iter()
        .map(|v| -eta * v.as_f64())
        .collect();
    let upstream = match psi.config.head {
        ScaleHead::LayerWise => c,
        ScaleHead::StepWise => vec![c.iter().sum()],
    };
    scalenet_backward(psi, net, &upstream)
}

struct Rollout<S> {
    trace: TtaTrace<S>,
    grad: Option<ScaleNetGrad<S>>,
}

fn rollout<S: Real>(
    params: &LmParams<S>,
    psi: &ScaleNetParams<S>,
    episode: &Episode,
    cfg: &TtaConfig,
    seed: u64,
) -> Result<Rollout<S>> {
    let trace = adapt_episode(params, ScaleSource::Net(psi), episode, cfg, seed)?;
    if trace.diverged || trace.total == 0 {
        return Ok(Rollout { trace, grad: None });
    }
    let state = trace.final_state.as_ref().expect("adapt_episode keeps the final state");
    let (_, ans) = answer_grad(params, state, episode)?;
    let grad = meta_gradient(&trace, &ans, psi, cfg.eta)?;
    Ok(Rollout { trace, grad: Some(grad) })
}

/// Mean held-out answer NLL for each `K` in `0..=k_max`.
pub fn held_out_curve<S: Real>(
    params: &LmParams<S>,
    psi: &ScaleNetParams<S>,
    held_out: &[Episode],
    cfg: &TtaConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..=cfg.k_max)
        .map(|k| {
            let traces = adapt_batch(params, ScaleSource::Net(psi), held_out, &cfg.with(cfg.mode, k), seed)?;
            let vals: Vec<f64> = traces.iter().filter_map(|t| t.answer_nll).collect();
            Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
        })
        .collect()
}

fn mode_for(head: ScaleHead) -> TtaMode {
    match head {
        ScaleHead::LayerWise => TtaMode::LayerWise,
        ScaleHead::StepWise => TtaMode::StepWise,
    }
}

/// Fresh training state for a ScaleNet of the given head.
pub fn init_state<S: Real>(params: &LmParams<S>, head: ScaleHead, meta: &MetaConfig) -> Result<TrainState<S>> {
    let config = ScaleNetConfig::new(params.config.d_model, params.config.n_layers, head);
    let psi = ScaleNetParams::init(config, stream_seed(meta.seed, "scalenet-init"))?;
    let optimizer = OptimizerState::new(psi.tensors());
    Ok(TrainState {
        psi,
        optimizer,
        next_episode: 0,
    })
}

/// Train a ScaleNet from scratch. See [`train_scalenet_from`].
pub fn train_scalenet<S: Real>(
    params: &LmParams<S>,
    corpus: &[Episode],
    held_out: &[Episode],
    meta: &MetaConfig,
    cfg: &TtaConfig,
    head: ScaleHead,
) -> Result<(ScaleNetParams<S>, MetaLog)> {
    let state = init_state(params, head, meta)?;
    let (state, log) = train_scalenet_from(params, corpus, held_out, meta, cfg, state, |_| Ok(()))?;
    Ok((state.psi, log))
}

/// Continue training from `state` until `meta.episodes` episodes have been
/// consumed. `checkpoint` is called every `meta.checkpoint_every` episodes.
pub fn train_scalenet_from<S: Real>(
    params: &LmParams<S>,
    corpus: &[Episode],
    held_out: &[Episode],
    meta: &MetaConfig,
    cfg: &TtaConfig,
    mut state: TrainState<S>,
    mut checkpoint: impl FnMut(&TrainState<S>) -> Result<()>,
) -> Result<(TrainState<S>, MetaLog)> {
    meta.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("meta-training corpus is empty".into()));
    }
    let cfg = TtaConfig {
        mode: mode_for(state.psi.config.head),
        k_max: meta.k_max,
        ..*cfg
    };
    cfg.validate()?;
    let eval_set = &held_out[..held_out.len().min(meta.eval_episodes)];
    let mut log = MetaLog::default();
    let mut recent: std::collections::VecDeque<bool> = std::collections::VecDeque::new();

    let mut i = state.next_episode;
    while i < meta.episodes {
        let end = (i + meta.accumulate).min(meta.episodes);
        let jobs: Vec<(usize, &Episode, usize)> = (i..end)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(meta.seed, j as u64));
                let k = rng.random_range(0..=meta.k_max);
                (j, &corpus[order_index(j, corpus.len(), meta.seed)], k)
            })
            .collect();
        let psi = &state.psi;
        let results: Vec<Rollout<S>> = jobs
            .par_iter()
            .map(|&(_, ep, k)| rollout(params, psi, ep, &cfg.with(cfg.mode, k), seed_for(meta.seed, ep)))
            .collect::<Result<_>>()?;

        let mut sum = ScaleNetGrad::zeros(&state.psi.config);
        for ((j, _, k), r) in jobs.iter().zip(&results) {
            let grad_norm = r.grad.as_ref().map_or(0.0, |g| g.norm());
            if let Some(g) = &r.grad {
                sum.add_assign(g);
            }
            log.rows.push(MetaLogRow {
                episode: *j,
                total: *k,
                answer_nll: r.trace.answer_nll,
                prompt_nll_first: r.trace.steps.first().map(|s| s.prompt_nll),
                grad_norm,
                diverged: r.trace.diverged,
            });
            recent.push_back(r.trace.diverged);
            if recent.len() > meta.divergence_window {
                recent.pop_front();
            }
        }
        if meta.divergence_window > 0 && recent.len() == meta.divergence_window {
            let bad = recent.iter().filter(|&&d| d).count();
            if 2 * bad >= meta.divergence_window {
                return Err(Error::Diverged(format!(
                    "{bad} of the last {} episodes diverged (episode {})",
                    meta.divergence_window,
                    end - 1
                )));
            }
        }
        sum.scale_inplace(S::lit(1.0 / (end - i) as f64));
        let grads = sum.into_tensors();
        adamw_step(&mut state.psi.tensors_mut(), &grads, &mut state.optimizer, &meta.optimizer)?;

        let prev = i;
        i = end;
        state.next_episode = i;
        let crossed = |every: usize| every > 0 && prev / every != i / every;
        if crossed(meta.eval_every) && !eval_set.is_empty() {
            let curve = held_out_curve(params, &state.psi, eval_set, &cfg, meta.seed)?;
            log::info!("meta episode {i}: held-out answer NLL by K {curve:.4?}");
            log.evals.push(MetaEvalRow {
                episode: i,
                answer_nll_by_k: curve,
            });
        }
        if crossed(meta.checkpoint_every) {
            checkpoint(&state)?;
        }
    }
    Ok((state, log))
}

/// Corpus index of training episode `j`: a fresh seeded permutation per pass.
fn order_index(j: usize, n: usize, seed: u64) -> usize {
    use rand::seq::SliceRandom;
    let epoch = j / n;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(episode_seed(stream_seed(seed, "meta-order"), epoch as u64)));
    perm[j % n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_a_permutation_per_pass() {
        let mut seen: Vec<usize> = (0..7).map(|j| order_index(j, 7, 3)).collect();
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        let m = MetaConfig {
            k_max: 0,
            ..Default::default()
        };
        assert!(m.validate().is_err());
        let m = MetaConfig {
            accumulate: 0,
            ..Default::default()
        };
        assert!(m.validate().is_err());
    }
}
