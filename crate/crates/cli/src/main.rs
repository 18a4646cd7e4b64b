mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use lwtta_core::scalenet::ScaleHead;
use lwtta_core::tta::TtaMode;
use lwtta_core::Dtype;

use commands::Run;
use config::{parse_k_list, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "lwtta", version, about = "Layer-wise scaled test-time adaptation on a toy language model")]
struct Cli {
    /// Directory holding run directories.
    #[arg(long, env = "LWTTA_RUN_ROOT", default_value = "runs", global = true)]
    run_root: PathBuf,
    /// Run name under the run root.
    #[arg(long, default_value = "default", global = true)]
    run: String,
    /// JSON config file. Defaults to the run's config.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, value_enum, global = true)]
    precision: Option<Precision>,
    /// Episode-level worker threads. Results do not depend on this.
    #[arg(long, default_value_t = 1, global = true)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Head {
    LayerWise,
    StepWise,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the base language model.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Meta-train a ScaleNet against the frozen model.
    TrainScalenet {
        #[arg(long, value_enum)]
        head: Head,
        #[arg(long)]
        episodes: Option<usize>,
        /// Continue from the saved meta-training state.
        #[arg(long)]
        resume: bool,
    },
    /// Adapt held-out episodes under one mode and write their traces.
    Adapt {
        #[arg(long, value_parser = parse_mode)]
        mode: TtaMode,
        #[arg(long = "K")]
        k: usize,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score every (mode, K) cell on the held-out split.
    Eval {
        #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
        modes: Option<Vec<TtaMode>>,
        /// `0..5`, `1..=3` or `0,1,5`.
        #[arg(long = "K", value_parser = parse_k_list)]
        k: Option<std::vec::Vec<usize>>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        rouge: bool,
    },
    /// Heatmap CSV and SVG of the scales in a trace file.
    ExportScales {
        #[arg(long)]
        from: PathBuf,
    },
    /// Compare layer-wise scales of shorter schedules against a baseline K.
    Consistency {
        #[arg(long = "baseline-K", default_value_t = 5)]
        baseline_k: usize,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// First-order Taylor residual slope on held-out prompts.
    TaylorCheck {
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Finite-difference checks of every primitive and the adapted prompt NLL.
    Gradcheck,
}

fn parse_mode(s: &str) -> std::result::Result<TtaMode, String> {
    s.parse().map_err(|e: lwtta_core::Error| e.to_string())
}

fn resolve(cli: &Cli, dir: &std::path::Path) -> Result<RunConfig> {
    let existing = dir.join("config.json");
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if existing.exists() => RunConfig::load(&existing)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.pretrain.seed = s;
        cfg.meta.seed = s;
    }
    if let Some(p) = cli.precision {
        cfg.precision = match p {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        };
    }
    match &cli.command {
        Command::Pretrain { steps: Some(n) } => cfg.pretrain.steps = *n,
        Command::TrainScalenet { episodes: Some(n), .. } => cfg.meta.episodes = *n,
        Command::Eval { modes, k, episodes, rouge } => {
            if let Some(m) = modes {
                cfg.eval.modes = m.clone();
            }
            if let Some(k) = k {
                cfg.eval.k_list = k.clone();
            }
            if let Some(n) = episodes {
                cfg.eval.episodes = *n;
            }
            cfg.eval.rouge |= *rouge;
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch<S: lwtta_core::Real>(cli: &Cli, run: &Run) -> Result<bool> {
    match &cli.command {
        Command::Pretrain { .. } => commands::pretrain::<S>(run)?,
        Command::TrainScalenet { head, resume, .. } => {
            let head = match head {
                Head::LayerWise => ScaleHead::LayerWise,
                Head::StepWise => ScaleHead::StepWise,
            };
            commands::train_scalenet::<S>(run, head, *resume)?
        }
        Command::Adapt { mode, k, limit } => {
            if *k > run.config.tta.k_max {
                anyhow::bail!(config::ConfigError(format!("K: {k} exceeds K_max {}", run.config.tta.k_max)));
            }
            commands::adapt::<S>(run, *mode, *k, *limit)?;
        }
        Command::Eval { .. } => commands::eval::<S>(run, None)?,
        Command::ExportScales { from } => commands::export_scales(run, from)?,
        Command::Consistency { baseline_k, episodes } => commands::consistency::<S>(run, *baseline_k, *episodes)?,
        Command::TaylorCheck { episodes } => return commands::taylor_check(run, *episodes),
        Command::Gradcheck => return commands::gradcheck(run),
    }
    Ok(true)
}

fn main_inner(cli: &Cli) -> Result<bool> {
    rayon::ThreadPoolBuilder::new().num_threads(cli.workers.max(1)).build_global()?;
    let dir = cli.run_root.join(&cli.run);
    let cfg = resolve(cli, &dir)?;
    let run = Run::open(dir, cfg)?;
    log::info!("run {} (config_hash={})", run.dir.display(), run.hash);
    match run.config.precision {
        Dtype::F32 => dispatch::<f32>(cli, &run),
        Dtype::F64 => dispatch::<f64>(cli, &run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match main_inner(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
