//! Adapt-and-reset episodes: fresh adapters per prompt, `K` scaled gradient
//! steps on the prompt NLL, then the answer NLL at the adapted state.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::lm::{answer_nll, prompt_representation, LmParams};
use crate::lora::{answer_grad, init_lora, prompt_pass, GradBlocks, LoraConfig, LoraState};
use crate::real::Real;
use crate::scalenet::{scalenet_forward, ScaleHead, ScaleNetParams, ScaleTensor, DEFAULT_CLAMP};
use crate::seed::{episode_seed, hash_str};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TtaMode {
    Fixed,
    StepWise,
    LayerWise,
    SampleAveraged,
}

impl TtaMode {
    pub const ALL: [TtaMode; 4] = [TtaMode::Fixed, TtaMode::StepWise, TtaMode::LayerWise, TtaMode::SampleAveraged];

    pub fn name(self) -> &'static str {
        match self {
            TtaMode::Fixed => "fixed",
            TtaMode::StepWise => "step-wise",
            TtaMode::LayerWise => "layer-wise",
            TtaMode::SampleAveraged => "sample-averaged",
        }
    }

    /// Head a ScaleNet must have to drive this mode.
    pub fn head(self) -> Option<ScaleHead> {
        match self {
            TtaMode::StepWise => Some(ScaleHead::StepWise),
            TtaMode::LayerWise => Some(ScaleHead::LayerWise),
            _ => None,
        }
    }
}

impl std::fmt::Display for TtaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TtaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub mode: TtaMode,
    /// Base rate multiplied by the predicted scales.
    pub eta: f64,
    /// Rate of the fixed baseline.
    pub fixed_eta: f64,
    #[serde(rename = "K")]
    pub steps: usize,
    #[serde(rename = "K_max")]
    pub k_max: usize,
    pub clamp: f64,
    pub lora: LoraConfig,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            mode: TtaMode::LayerWise,
            eta: 1e-2,
            fixed_eta: 5e-2,
            steps: 1,
            k_max: 5,
            clamp: DEFAULT_CLAMP,
            lora: LoraConfig::default(),
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > self.k_max {
            return Err(Error::config("tta.K", format!("{} exceeds K_max {}", self.steps, self.k_max)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::config("tta.eta", "must be positive"));
        }
        if !(self.fixed_eta > 0.0) {
            return Err(Error::config("tta.fixed_eta", "must be positive"));
        }
        if !(self.clamp > 0.0) {
            return Err(Error::config("tta.clamp", "must be positive"));
        }
        Ok(())
    }

    pub fn with(&self, mode: TtaMode, steps: usize) -> Self {
        Self { mode, steps, ..*self }
    }
}

/// Per-step scales shared by every episode: `scales[k - 1][block]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTable {
    #[serde(rename = "K")]
    pub total: usize,
    pub scales: Vec<Vec<f64>>,
}

/// Where an episode's step scales come from.
#[derive(Debug, Clone, Copy)]
pub enum ScaleSource<'a, S> {
    None,
    Net(&'a ScaleNetParams<S>),
    Table(&'a ScaleTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StepRecord<S> {
    pub k: usize,
    /// Multiplier applied to each block's step, length `2L`.
    pub scales: Vec<f64>,
    /// Network evaluation behind `scales`, for the learned modes.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub net: Option<ScaleTensor>,
    /// Prompt NLL at the state this step starts from.
    pub prompt_nll: f64,
    /// Detached prompt gradient taken at that state.
    #[serde(skip)]
    pub grads: Option<GradBlocks<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TtaTrace<S> {
    pub id: String,
    pub mode: TtaMode,
    #[serde(rename = "K")]
    pub total: usize,
    pub eta: f64,
    pub steps: Vec<StepRecord<S>>,
    /// Mean answer NLL after adaptation; `None` when the episode has no
    /// answer or diverged.
    pub answer_nll: Option<f64>,
    pub diverged: bool,
    /// `(|A|, |B|)` per block at the end of the episode.
    pub lora_norms: Vec<(f64, f64)>,
    #[serde(skip)]
    pub final_state: Option<LoraState<S>>,
}

impl<S> TtaTrace<S> {
    pub fn n_blocks(&self) -> Option<usize> {
        self.steps.first().map(|s| s.scales.len())
    }
}

/// Seed for an episode's adapter initialization, independent of its
/// position in any batch.
pub fn seed_for(global: u64, episode: &Episode) -> u64 {
    episode_seed(global, hash_str(&episode.id))
}

/// Per-block scales for one step from a ScaleNet. A step-wise head's single
/// output is repeated across all blocks.
pub fn step_scales<S: Real>(
    psi: &ScaleNetParams<S>,
    h: &[S],
    k: usize,
    cfg: &TtaConfig,
) -> Result<(ScaleTensor, Vec<f64>)> {
    let want = cfg
        .mode
        .head()
        .ok_or_else(|| Error::config("tta.mode", format!("{} mode does not use a ScaleNet", cfg.mode)))?;
    if psi.config.head != want {
        return Err(Error::config(
            "tta.mode",
            format!("{} mode needs a {want:?} ScaleNet, got {:?}", cfg.mode, psi.config.head),
        ));
    }
    let st = scalenet_forward(psi, h, k, cfg.steps, cfg.k_max, cfg.clamp)?;
    let n = 2 * psi.config.n_layers;
    let scales = match want {
        ScaleHead::LayerWise => st.scales.clone(),
        ScaleHead::StepWise => vec![st.scales[0]; n],
    };
    Ok((st, scales))
}

/// Run one adapt-and-reset episode.
pub fn adapt_episode<S: Real>(
    params: &LmParams<S>,
    source: ScaleSource<'_, S>,
    episode: &Episode,
    cfg: &TtaConfig,
    seed: u64,
) -> Result<TtaTrace<S>> {
    cfg.validate()?;
    if episode.prompt_tokens.is_empty() {
        return Err(Error::Empty(format!("episode {} has an empty prompt", episode.id)));
    }
    let n_blocks = 2 * params.config.n_layers;
    match (cfg.mode, source) {
        (TtaMode::StepWise | TtaMode::LayerWise, ScaleSource::Net(psi)) => {
            if psi.config.d_model != params.config.d_model || psi.config.n_layers != params.config.n_layers {
                return Err(Error::config("scalenet", "ScaleNet was built for a different model shape"));
            }
        }
        (TtaMode::StepWise | TtaMode::LayerWise, _) => {
            return Err(Error::config("scalenet", format!("{} mode requires a ScaleNet", cfg.mode)));
        }
        (TtaMode::SampleAveraged, ScaleSource::Table(t)) => {
            if t.total != cfg.steps || t.scales.len() != cfg.steps || t.scales.iter().any(|s| s.len() != n_blocks) {
                return Err(Error::Shape(format!(
                    "average table for K={} does not fit K={} with {n_blocks} blocks",
                    t.total, cfg.steps
                )));
            }
        }
        (TtaMode::SampleAveraged, _) if cfg.steps > 0 => {
            return Err(Error::config("tta.mode", "sample-averaged mode requires an average table"));
        }
        _ => {}
    }
    let eta = if cfg.mode == TtaMode::Fixed { cfg.fixed_eta } else { cfg.eta };

    let mut lora = init_lora::<S>(&params.config, &cfg.lora, seed)?;
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut diverged = false;
    for k in 1..=cfg.steps {
        let pass = prompt_pass(params, &lora, episode)?;
        let prompt_nll = pass.loss.as_f64();
        if !prompt_nll.is_finite() {
            diverged = true;
            break;
        }
        let (net, scales) = match (cfg.mode, source) {
            (TtaMode::Fixed, _) => (None, vec![1.0; n_blocks]),
            (TtaMode::SampleAveraged, ScaleSource::Table(t)) => (None, t.scales[k - 1].clone()),
            (_, ScaleSource::Net(psi)) => {
                let h = prompt_representation(&pass.capture)?;
                let (st, scales) = step_scales(psi, &h, k, cfg)?;
                (Some(st), scales)
            }
            _ => unreachable!("checked above"),
        };
        let next = match lora.scaled_step(&pass.grads, eta, &scales) {
            Ok(next) => Some(next),
            Err(Error::NonFinite(_)) => None,
            Err(e) => return Err(e),
        };
        steps.push(StepRecord {
            k,
            scales,
            net,
            prompt_nll,
            grads: Some(pass.grads),
        });
        match next {
            Some(next) if next.is_finite() => lora = next,
            _ => {
                diverged = true;
                break;
            }
        }
    }

    let answer = if diverged || episode.answer_tokens.is_empty() {
        None
    } else {
        let v = answer_nll(params, Some(&lora), episode)?.as_f64();
        if !v.is_finite() {
            diverged = true;
            None
        } else {
            Some(v)
        }
    };
    if diverged {
        log::debug!("episode {} diverged in {} mode at K={}", episode.id, cfg.mode, cfg.steps);
    }
    Ok(TtaTrace {
        id: episode.id.clone(),
        mode: cfg.mode,
        total: cfg.steps,
        eta,
        steps,
        answer_nll: answer,
        diverged,
        lora_norms: lora.norms(),
        final_state: Some(lora),
    })
}

/// [`adapt_episode`] over a batch in parallel; output order follows input.
pub fn adapt_batch<S: Real>(
    params: &LmParams<S>,
    source: ScaleSource<'_, S>,
    episodes: &[Episode],
    cfg: &TtaConfig,
    global_seed: u64,
) -> Result<Vec<TtaTrace<S>>> {
    episodes
        .par_iter()
        .map(|e| adapt_episode(params, source, e, cfg, seed_for(global_seed, e)))
        .collect()
}

/// Mean scale per `(step, block)` over traces sharing `K` and block count.
pub fn average_scales<S>(traces: &[TtaTrace<S>]) -> Result<ScaleTable> {
    let first = traces.first().ok_or_else(|| Error::Empty("no traces to average".into()))?;
    let total = first.total;
    let n_blocks = first.n_blocks().unwrap_or(0);
    let mut sums = vec![vec![0.0; n_blocks]; total];
    for t in traces {
        if t.total != total || t.steps.len() != total || t.steps.iter().any(|s| s.scales.len() != n_blocks) {
            return Err(Error::Shape(format!(
                "trace {} does not share K={total} with {n_blocks} blocks",
                t.id
            )));
        }
        for (row, s) in sums.iter_mut().zip(&t.steps) {
            for (acc, v) in row.iter_mut().zip(&s.scales) {
                *acc += v;
            }
        }
    }
    let n = traces.len() as f64;
    sums.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(ScaleTable { total, scales: sums })
}

/// `<grad log P(x), grad log P(y | x)>` over every adapter block.
pub fn cross_gradient<S: Real>(params: &LmParams<S>, lora: &LoraState<S>, episode: &Episode) -> Result<f64> {
    let gx = prompt_pass(params, lora, episode)?.grads;
    let (_, gy) = answer_grad(params, lora, episode)?;
    Ok(gx.inner(&gy)?.as_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub etas: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Least-squares slope of `ln r` against `ln eta` over positive pairs.
    pub slope: f64,
    pub cross_gradient: f64,
}

/// Least-squares slope of `ys` on `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// First-order Taylor residual of the answer log-likelihood after one
/// unscaled prompt step, for each rate in `etas`.
pub fn taylor_residual<S: Real>(
    params: &LmParams<S>,
    lora: &LoraState<S>,
    episode: &Episode,
    etas: &[f64],
) -> Result<TaylorReport> {
    if etas.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::Input("Taylor rates must be non-negative".into()));
    }
    let gx = prompt_pass(params, lora, episode)?.grads;
    let (base, gy) = answer_grad(params, lora, episode)?;
    let cross = gx.inner(&gy)?.as_f64();
    let base = base.as_f64();
    let ones = vec![1.0; lora.n_blocks()];
    let mut residuals = Vec::with_capacity(etas.len());
    for &eta in etas {
        let moved = lora.scaled_step(&gx, eta, &ones)?;
        let after = answer_nll(params, Some(&moved), episode)?.as_f64();
        // log P rises by (base - after); the first-order prediction is
        // eta * <grad log P(x), grad log P(y|x)> = eta * <gx, gy> on NLLs.
        let r = ((base - after) - eta * cross).abs();
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("Taylor residual at eta {eta}")));
        }
        residuals.push(r);
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = etas
        .iter()
        .zip(&residuals)
        .filter(|(e, r)| **e > 0.0 && **r > 0.0)
        .map(|(e, r)| (e.ln(), r.ln()))
        .unzip();
    let slope = if lx.len() >= 2 { fit_slope(&lx, &ly) } else { f64::NAN };
    Ok(TaylorReport {
        etas: etas.to_vec(),
        residuals,
        slope,
        cross_gradient: cross,
    })
}

/// One JSON object per trace, optionally preceded by a `header` object.
pub fn write_traces<S>(path: &Path, traces: &[TtaTrace<S>], header: Option<&serde_json::Value>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(h) = header {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n")?;
    }
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Traces from a JSONL file; objects without an `id` (headers) are skipped.
pub fn read_traces<S>(path: &Path) -> Result<Vec<TtaTrace<S>>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v.get("id").is_none() {
            continue;
        }
        out.push(serde_json::from_value(v)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(scales: Vec<Vec<f64>>) -> TtaTrace<f64> {
        TtaTrace {
            id: "t".into(),
            mode: TtaMode::LayerWise,
            total: scales.len(),
            eta: 0.01,
            steps: scales
                .into_iter()
                .enumerate()
                .map(|(i, s)| StepRecord {
                    k: i + 1,
                    scales: s,
                    net: None,
                    prompt_nll: 1.0,
                    grads: None,
                })
                .collect(),
            answer_nll: Some(1.0),
            diverged: false,
            lora_norms: vec![],
            final_state: None,
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TtaMode::ALL {
            assert_eq!(m.name().parse::<TtaMode>().unwrap(), m);
        }
        assert!("adaptive".parse::<TtaMode>().is_err());
    }

    #[test]
    fn averaging_two_traces() {
        let avg = average_scales(&[trace(vec![vec![1.0, 2.0]]), trace(vec![vec![3.0, 2.0]])]).unwrap();
        assert_eq!(avg.scales, vec![vec![2.0, 2.0]]);
    }

    #[test]
    fn averaging_rejects_mixed_shapes() {
        assert!(average_scales::<f64>(&[]).is_err());
        assert!(average_scales(&[trace(vec![vec![1.0]]), trace(vec![vec![1.0], vec![1.0]])]).is_err());
    }

    #[test]
    fn config_validation() {
        let c = TtaConfig {
            steps: 6,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TtaConfig {
            eta: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn slope_of_a_power_law() {
        let xs: Vec<f64> = [1e-3f64, 1e-2, 1e-1].iter().map(|x| x.ln()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 0.5).collect();
        assert!((fit_slope(&xs, &ys) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trace_json_round_trip_drops_gradients() {
        let t = trace(vec![vec![1.0, 2.0]]);
        let s = serde_json::to_string(&t).unwrap();
        let back: TtaTrace<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
