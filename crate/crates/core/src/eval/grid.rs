use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::greedy_generate;
use super::rouge::rouge_lsum;
use super::stats::mean_se;
use crate::data::{Episode, Tokenizer};
use crate::error::{Error, Result};
use crate::lm::LmParams;
use crate::real::Real;
use crate::scalenet::ScaleNetParams;
use crate::tta::{adapt_batch, average_scales, ScaleSource, TtaConfig, TtaMode, TtaTrace};

/// Trained networks available to the learned modes.
#[derive(Debug, Clone, Copy)]
pub struct Nets<'a, S> {
    pub layer_wise: Option<&'a ScaleNetParams<S>>,
    pub step_wise: Option<&'a ScaleNetParams<S>>,
}

#[derive(Debug, Clone)]
pub struct GridOptions<'a> {
    pub modes: Vec<TtaMode>,
    pub k_list: Vec<usize>,
    pub seed: u64,
    /// Score greedy generations against the raw answers.
    pub rouge: Option<(&'a Tokenizer, usize)>,
    /// Keep per-cell traces (without gradients) in the result.
    pub keep_traces: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: TtaMode,
    #[serde(rename = "K")]
    pub total: usize,
    /// Episodes with a finite answer NLL.
    pub n: usize,
    pub mean_nll: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub diverged: usize,
    pub rouge_lsum: Option<f64>,
    /// Lowest mean NLL among this mode's cells.
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_episodes: usize,
    pub cells: Vec<Cell>,
}

impl MetricsReport {
    pub fn cell(&self, mode: TtaMode, k: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.mode == mode && c.total == k)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,K,n,mean_nll,se,ci_low,ci_high,diverged,rouge_lsum,best\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                c.mode,
                c.total,
                c.n,
                c.mean_nll,
                c.se,
                c.ci_low,
                c.ci_high,
                c.diverged,
                c.rouge_lsum.map(|r| r.to_string()).unwrap_or_default(),
                c.best
            ));
        }
        s
    }
}

pub struct GridRun<S> {
    pub report: MetricsReport,
    pub traces: BTreeMap<(TtaMode, usize), Vec<TtaTrace<S>>>,
}

fn strip<S>(mut t: TtaTrace<S>) -> TtaTrace<S> {
    t.final_state = None;
    t.steps.iter_mut().for_each(|s| s.grads = None);
    t
}

/// Adapt every episode under every `(mode, K)` and aggregate answer NLL.
/// Sample-averaged cells average the layer-wise scales of the same episodes
/// at the same `K`.
pub fn eval_grid<S: Real>(
    params: &LmParams<S>,
    nets: Nets<'_, S>,
    dataset: &[Episode],
    cfg: &TtaConfig,
    opts: &GridOptions<'_>,
) -> Result<GridRun<S>> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    if let Some(e) = dataset.iter().find(|e| e.answer_tokens.is_empty()) {
        return Err(Error::Input(format!("evaluation episode {} has no answer", e.id)));
    }
    let net_for = |mode: TtaMode| -> Result<&ScaleNetParams<S>> {
        let net = match mode {
            TtaMode::LayerWise | TtaMode::SampleAveraged => nets.layer_wise,
            TtaMode::StepWise => nets.step_wise,
            TtaMode::Fixed => None,
        };
        net.ok_or_else(|| Error::config("scalenet", format!("{mode} evaluation needs a trained ScaleNet")))
    };

    let mut cells = Vec::new();
    let mut kept = BTreeMap::new();
    let mut layer_cache: BTreeMap<usize, Vec<TtaTrace<S>>> = BTreeMap::new();
    for &mode in &opts.modes {
        for &k in &opts.k_list {
            let c = cfg.with(mode, k);
            let traces = match mode {
                TtaMode::Fixed => adapt_batch(params, ScaleSource::None, dataset, &c, opts.seed)?,
                TtaMode::LayerWise | TtaMode::StepWise => {
                    adapt_batch(params, ScaleSource::Net(net_for(mode)?), dataset, &c, opts.seed)?
                }
                TtaMode::SampleAveraged => {
                    if !layer_cache.contains_key(&k) {
                        let lc = cfg.with(TtaMode::LayerWise, k);
                        let lw = adapt_batch(params, ScaleSource::Net(net_for(mode)?), dataset, &lc, opts.seed)?;
                        layer_cache.insert(k, lw.into_iter().map(strip).collect());
                    }
                    let usable: Vec<TtaTrace<S>> =
                        layer_cache[&k].iter().filter(|t| !t.diverged).cloned().collect();
                    let table = average_scales(&usable)?;
                    adapt_batch(params, ScaleSource::Table(&table), dataset, &c, opts.seed)?
                }
            };
            let rouge = match opts.rouge {
                None => None,
                Some((tok, max_new)) => {
                    let scores: Vec<f64> = traces
                        .par_iter()
                        .zip(dataset)
                        .map(|(t, e)| {
                            let out = greedy_generate(params, t.final_state.as_ref(), &e.prompt_tokens, max_new, None)?;
                            Ok(rouge_lsum(&tok.decode(&out)?, &e.raw_answer))
                        })
                        .collect::<Result<_>>()?;
                    Some(scores.iter().sum::<f64>() / scores.len() as f64)
                }
            };
            let vals: Vec<f64> = traces.iter().filter_map(|t| t.answer_nll).collect();
            let stats = mean_se(&vals);
            let (lo, hi) = stats.ci95();
            cells.push(Cell {
                mode,
                total: k,
                n: stats.n,
                mean_nll: stats.mean,
                se: stats.se,
                ci_low: lo,
                ci_high: hi,
                diverged: traces.iter().filter(|t| t.diverged).count(),
                rouge_lsum: rouge,
                best: false,
            });
            if mode == TtaMode::LayerWise && !layer_cache.contains_key(&k) && opts.modes.contains(&TtaMode::SampleAveraged) {
                layer_cache.insert(k, traces.iter().cloned().map(strip).collect());
            }
            if opts.keep_traces {
                kept.insert((mode, k), traces.into_iter().map(strip).collect());
            }
        }
    }
    for &mode in &opts.modes {
        let best = cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.mode == mode && c.mean_nll.is_finite())
            .min_by(|a, b| a.1.mean_nll.total_cmp(&b.1.mean_nll))
            .map(|(i, _)| i);
        if let Some(i) = best {
            cells[i].best = true;
        }
    }
    Ok(GridRun {
        report: MetricsReport {
            n_episodes: dataset.len(),
            cells,
        },
        traces: kept,
    })
}
