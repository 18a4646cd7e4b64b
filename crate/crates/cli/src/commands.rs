use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use lwtta_core::data::{build_corpus, Corpus, Episode, Tokenizer};
use lwtta_core::diagnostics::{lora_gradchecks, primitive_gradchecks, GradcheckCase};
use lwtta_core::eval::{
    eval_grid, export_heatmap, render_magnitude_svg, schedule_consistency, GridOptions, Nets,
};
use lwtta_core::lm::{pretrain_lm, LmParams};
use lwtta_core::lora::init_lora;
use lwtta_core::meta::{init_state, train_scalenet_from, TrainState};
use lwtta_core::scalenet::{ScaleHead, ScaleNetParams};
use lwtta_core::seed::stream_seed;
use lwtta_core::tta::{
    adapt_batch, average_scales, read_traces, taylor_residual, write_traces, ScaleSource, TtaMode, TtaTrace,
};
use lwtta_core::Real;
use serde_json::json;

use crate::config::RunConfig;

/// Resolved configuration plus the run directory it writes into.
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub hash: String,
}

impl Run {
    pub fn open(dir: PathBuf, config: RunConfig) -> Result<Self> {
        for sub in ["checkpoints", "traces", "reports", "figures"] {
            std::fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.join(sub).display()))?;
        }
        std::fs::write(dir.join("config.json"), config.to_pretty_json() + "\n")?;
        let hash = config.hash();
        Ok(Self { dir, config, hash })
    }

    fn path(&self, sub: &str, name: &str) -> PathBuf {
        self.dir.join(sub).join(name)
    }

    fn stamp(&self) -> String {
        format!("config_hash={}", self.hash)
    }

    fn write_csv(&self, path: &Path, body: &str) -> Result<()> {
        std::fs::write(path, format!("# {}\n{body}", self.stamp()))?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn write_json(&self, path: &Path, key: &str, value: impl serde::Serialize) -> Result<()> {
        let doc = json!({ "config_hash": self.hash, key: value });
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn write_traces<S>(&self, path: &Path, traces: &[TtaTrace<S>]) -> Result<()> {
        write_traces(path, traces, Some(&json!({ "config_hash": self.hash })))?;
        info!("wrote {} traces to {}", traces.len(), path.display());
        Ok(())
    }

    fn corpus(&self) -> Result<Corpus> {
        Ok(build_corpus(&self.config.data, self.config.model.max_seq_len, self.config.seed)?)
    }

    fn lm_path(&self) -> PathBuf {
        self.path("checkpoints", "lm.json")
    }

    fn net_path(&self, head: ScaleHead) -> PathBuf {
        self.path("checkpoints", &format!("scalenet-{}.json", head_name(head)))
    }

    fn state_path(&self, head: ScaleHead) -> PathBuf {
        self.path("checkpoints", &format!("meta-state-{}.json", head_name(head)))
    }

    /// The pretrained model, checked against the resolved model config.
    fn load_lm<S: Real>(&self, corpus: &Corpus) -> Result<LmParams<S>> {
        let path = self.lm_path();
        if !path.exists() {
            bail!("no pretrained model at {}; run `pretrain` first", path.display());
        }
        let params = LmParams::<S>::load(&path)?;
        let want = self.model_config(&corpus.tokenizer);
        if params.config != want {
            bail!(
                "checkpoint {} was trained with a different model config; re-run `pretrain`",
                path.display()
            );
        }
        let tok: Tokenizer = serde_json::from_str(&std::fs::read_to_string(self.path("checkpoints", "tokenizer.json"))?)?;
        if tok != corpus.tokenizer {
            bail!("stored tokenizer does not match the data config; re-run `pretrain`");
        }
        Ok(params)
    }

    fn load_net<S: Real>(&self, head: ScaleHead) -> Result<Option<ScaleNetParams<S>>> {
        let path = self.net_path(head);
        if path.exists() {
            Ok(Some(ScaleNetParams::load(&path)?))
        } else {
            Ok(None)
        }
    }

    fn require_net<S: Real>(&self, head: ScaleHead) -> Result<ScaleNetParams<S>> {
        self.load_net(head)?.with_context(|| {
            format!(
                "no {} ScaleNet at {}; run `train-scalenet --head {}` first",
                head_name(head),
                self.net_path(head).display(),
                head_name(head)
            )
        })
    }

    fn model_config(&self, tok: &Tokenizer) -> lwtta_core::lm::ModelConfig {
        lwtta_core::lm::ModelConfig {
            vocab_size: tok.vocab_size(),
            ..self.config.model.clone()
        }
    }

    fn eval_set<'a>(&self, corpus: &'a Corpus, limit: Option<usize>) -> Result<&'a [Episode]> {
        let n = limit.unwrap_or(self.config.eval.episodes).min(corpus.held_out.len());
        if n == 0 {
            bail!("held-out split is empty");
        }
        Ok(&corpus.held_out[..n])
    }
}

pub fn head_name(head: ScaleHead) -> &'static str {
    match head {
        ScaleHead::LayerWise => "layer-wise",
        ScaleHead::StepWise => "step-wise",
    }
}

pub fn pretrain<S: Real>(run: &Run) -> Result<()> {
    let corpus = run.corpus()?;
    let model = run.model_config(&corpus.tokenizer);
    info!(
        "pretraining on {} episodes ({} held out), vocab {}",
        corpus.train.len(),
        corpus.held_out.len(),
        model.vocab_size
    );
    let (params, report) = pretrain_lm::<S>(&corpus.train, &corpus.held_out, &model, &run.config.pretrain)?;
    params.save(&run.lm_path())?;
    std::fs::write(
        run.path("checkpoints", "tokenizer.json"),
        serde_json::to_string_pretty(&corpus.tokenizer)? + "\n",
    )?;
    run.write_json(&run.path("reports", "pretrain.json"), "report", &report)?;
    println!(
        "held-out NLL {:.4} -> {:.4} (uniform {:.4})",
        report.initial_held_out_nll, report.final_held_out_nll, report.uniform_nll
    );
    Ok(())
}

pub fn train_scalenet<S: Real>(run: &Run, head: ScaleHead, resume: bool) -> Result<()> {
    let corpus = run.corpus()?;
    let params = run.load_lm::<S>(&corpus)?;
    let meta = &run.config.meta;
    let state_path = run.state_path(head);
    let state = if resume && state_path.exists() {
        let s = TrainState::<S>::load(&state_path)?;
        info!("resuming at episode {}", s.next_episode);
        s
    } else {
        init_state(&params, head, meta)?
    };
    let (state, log) = train_scalenet_from(&params, &corpus.train, &corpus.held_out, meta, &run.config.tta, state, |s| {
        s.save(&state_path)?;
        info!("checkpointed at episode {}", s.next_episode);
        Ok(())
    })?;
    state.save(&state_path)?;
    state.psi.save(&run.net_path(head))?;
    let name = head_name(head);
    run.write_json(&run.path("reports", &format!("meta-log-{name}.json")), "log", &log)?;
    let tail: Vec<f64> = log.rows.iter().rev().take(500).filter_map(|r| r.answer_nll).collect();
    if !tail.is_empty() {
        println!(
            "{name}: {} episodes, mean answer NLL over the last {} = {:.4}",
            state.next_episode,
            tail.len(),
            tail.iter().sum::<f64>() / tail.len() as f64
        );
    }
    Ok(())
}

fn adapt_mode<S: Real>(
    run: &Run,
    params: &LmParams<S>,
    episodes: &[Episode],
    mode: TtaMode,
    k: usize,
) -> Result<Vec<TtaTrace<S>>> {
    let cfg = run.config.tta.with(mode, k);
    let seed = run.config.seed;
    let traces = match mode {
        TtaMode::Fixed => adapt_batch(params, ScaleSource::None, episodes, &cfg, seed)?,
        TtaMode::LayerWise | TtaMode::StepWise => {
            let net = run.require_net::<S>(mode.head().expect("learned mode"))?;
            adapt_batch(params, ScaleSource::Net(&net), episodes, &cfg, seed)?
        }
        TtaMode::SampleAveraged => {
            let net = run.require_net::<S>(ScaleHead::LayerWise)?;
            let lc = run.config.tta.with(TtaMode::LayerWise, k);
            let lw: Vec<TtaTrace<S>> = adapt_batch(params, ScaleSource::Net(&net), episodes, &lc, seed)?
                .into_iter()
                .filter(|t| !t.diverged)
                .collect();
            let table = average_scales(&lw)?;
            adapt_batch(params, ScaleSource::Table(&table), episodes, &cfg, seed)?
        }
    };
    Ok(traces)
}

pub fn adapt<S: Real>(run: &Run, mode: TtaMode, k: usize, limit: Option<usize>) -> Result<PathBuf> {
    let corpus = run.corpus()?;
    let params = run.load_lm::<S>(&corpus)?;
    let episodes = run.eval_set(&corpus, limit)?;
    let traces = adapt_mode(run, &params, episodes, mode, k)?;
    let path = run.path("traces", &format!("{mode}-K{k}.jsonl"));
    run.write_traces(&path, &traces)?;
    let vals: Vec<f64> = traces.iter().filter_map(|t| t.answer_nll).collect();
    let stats = lwtta_core::eval::mean_se(&vals);
    println!(
        "{mode} K={k}: answer NLL {:.4} ± {:.4} over {} episodes ({} diverged)",
        stats.mean,
        stats.se,
        stats.n,
        traces.iter().filter(|t| t.diverged).count()
    );
    Ok(path)
}

pub fn eval<S: Real>(run: &Run, limit: Option<usize>) -> Result<()> {
    let corpus = run.corpus()?;
    let params = run.load_lm::<S>(&corpus)?;
    let episodes = run.eval_set(&corpus, limit)?;
    let settings = &run.config.eval;
    let layer_wise = run.load_net::<S>(ScaleHead::LayerWise)?;
    let step_wise = run.load_net::<S>(ScaleHead::StepWise)?;
    let opts = GridOptions {
        modes: settings.modes.clone(),
        k_list: settings.k_list.clone(),
        seed: run.config.seed,
        rouge: settings.rouge.then_some((&corpus.tokenizer, settings.max_new_tokens)),
        keep_traces: true,
    };
    let nets = Nets {
        layer_wise: layer_wise.as_ref(),
        step_wise: step_wise.as_ref(),
    };
    let out = eval_grid(&params, nets, episodes, &run.config.tta, &opts)?;
    run.write_csv(&run.path("reports", "metrics.csv"), &out.report.to_csv())?;
    run.write_json(&run.path("reports", "metrics.json"), "report", &out.report)?;
    for ((mode, k), traces) in &out.traces {
        run.write_traces(&run.path("traces", &format!("eval-{mode}-K{k}.jsonl")), traces)?;
    }
    for c in &out.report.cells {
        println!(
            "{:<15} K={} NLL {:.4} [{:.4}, {:.4}] diverged {}{}",
            c.mode.name(),
            c.total,
            c.mean_nll,
            c.ci_low,
            c.ci_high,
            c.diverged,
            c.rouge_lsum.map(|r| format!(" ROUGE-Lsum {r:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

pub fn export_scales(run: &Run, from: &Path) -> Result<()> {
    let path = if from.exists() {
        from.to_path_buf()
    } else {
        let alt = run.dir.join("traces").join(from);
        if !alt.exists() {
            bail!("trace file {} not found", from.display());
        }
        alt
    };
    let traces = read_traces::<f64>(&path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("traces");
    let grid = export_heatmap(
        &traces,
        &run.path("figures", &format!("{stem}-scales.csv")),
        &run.path("figures", &format!("{stem}-scales.svg")),
        &run.stamp(),
    )?;
    println!("exported {} layers x {} columns", grid.cells.len(), grid.columns.len());
    Ok(())
}

pub fn consistency<S: Real>(run: &Run, baseline_k: usize, limit: Option<usize>) -> Result<()> {
    let corpus = run.corpus()?;
    let params = run.load_lm::<S>(&corpus)?;
    let episodes = run.eval_set(&corpus, limit)?;
    let mut groups = BTreeMap::new();
    for k in 1..=baseline_k {
        groups.insert(k, adapt_mode(run, &params, episodes, TtaMode::LayerWise, k)?);
    }
    let report = schedule_consistency(&groups, baseline_k)?;
    run.write_csv(&run.path("reports", "consistency.csv"), &report.to_csv())?;
    run.write_json(&run.path("reports", "consistency.json"), "report", &report)?;
    std::fs::write(run.path("figures", "scale-magnitude.svg"), render_magnitude_svg(&report, &run.stamp()))?;
    for r in &report.rows {
        println!(
            "K={} k={}: {:+.2}% [{:+.2}, {:+.2}] (n={})",
            r.total, r.k, r.mean_pct, r.ci_low, r.ci_high, r.n
        );
    }
    Ok(())
}

/// Always at 64-bit: the residuals at small rates sit far below f32 resolution.
pub fn taylor_check(run: &Run, limit: usize) -> Result<bool> {
    let corpus = run.corpus()?;
    let params = run.load_lm::<f64>(&corpus)?;
    let episodes = run.eval_set(&corpus, Some(limit))?;
    let etas: Vec<f64> = (0..9).map(|i| 10f64.powf(-4.0 + 0.25 * i as f64)).collect();
    let mut rows = Vec::new();
    for e in episodes {
        let seed = stream_seed(lwtta_core::tta::seed_for(run.config.seed, e), "taylor");
        let lora = init_lora(&params.config, &run.config.tta.lora, seed)?;
        rows.push(json!({ "id": e.id, "report": taylor_residual(&params, &lora, e, &etas)? }));
    }
    let slopes: Vec<f64> = rows
        .iter()
        .filter_map(|r| r["report"]["slope"].as_f64())
        .filter(|s| s.is_finite())
        .collect();
    let median = median(&slopes);
    run.write_json(&run.path("reports", "taylor.json"), "episodes", &rows)?;
    println!("median log-log slope {median:.3} over {} episodes", slopes.len());
    Ok((median - 2.0).abs() <= 0.3)
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn gradcheck(run: &Run) -> Result<bool> {
    let seed = run.config.seed;
    let mut cases: Vec<GradcheckCase> = primitive_gradchecks(seed)?;
    cases.extend(lora_gradchecks(seed, 8)?);
    let ok = cases.iter().all(|c| c.report.passed());
    for c in &cases {
        println!(
            "{} {:<28} max rel error {:.3e}",
            if c.report.passed() { "ok  " } else { "FAIL" },
            c.name,
            c.report.max_rel_error
        );
    }
    run.write_json(&run.path("reports", "gradcheck.json"), "cases", &cases)?;
    Ok(ok)
}
