use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dbfnet::data::{synth_generate, Dataset};
use dbfnet::metrics::{summarize_folds, MetricsReport};
use dbfnet::plot::emit_plots;
use dbfnet::train::{self, parse_grid, RunLog, TrainConfig, SYNTHETIC_IMAGES, SYNTHETIC_SIZE};

#[derive(Parser)]
#[command(name = "dbfnet", version, about = "Body/boundary fusion segmentation: train, evaluate, ablate, plot")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; its keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// busi, uns, uhes or synthetic.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Dataset root holding images/ and masks/ (defaults to data/<preset>).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    fold: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one fold.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a fold's validation split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate every fold's `fold<k>/best.safetensors` under this
        /// directory instead, and aggregate.
        #[arg(long)]
        all_folds: bool,
    },
    /// Run an ablation grid: modules, losses or axes like `ffs_count=0,1,2;use_ffm=on,off`.
    Ablate {
        #[arg(long, default_value = "modules")]
        grid: String,
        /// Comma-separated seeds; defaults to --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Draw PR/ROC curves from metrics.json files and a loss curve from a run log.
    Plot {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        runlog: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = SYNTHETIC_IMAGES)]
        count: usize,
        /// HxW, multiples of 16.
        #[arg(long, default_value = "128x128")]
        size: String,
    },
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.preset {
        Some(p) => {
            let root = c.data.clone().unwrap_or_else(|| Path::new("data").join(p));
            TrainConfig::preset(p, root)?
        }
        None => TrainConfig::default(),
    };
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let overlay: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut table: toml::Table = toml::from_str(&cfg.to_toml()?)?;
        merge(&mut table, overlay);
        cfg = toml::Value::Table(table).try_into().with_context(|| format!("applying {}", path.display()))?;
    }
    if c.preset.is_none() {
        if let Some(root) = &c.data {
            cfg.dataset.image_dir = root.join("images");
            cfg.dataset.mask_dir = root.join("masks");
        }
    }
    if let Some(f) = c.fold {
        cfg.fold = f;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if c.deterministic {
        cfg.deterministic = true;
    }
    if let Some(out) = &c.out {
        cfg.checkpoint_dir = out.clone();
    }
    Ok(cfg)
}

/// Generates the synthetic dataset on first use.
fn ensure_synthetic(cfg: &TrainConfig, preset: Option<&str>) -> Result<()> {
    if preset == Some("synthetic") && !cfg.dataset.image_dir.exists() {
        let root = cfg
            .dataset
            .image_dir
            .parent()
            .context("synthetic image_dir has no parent")?;
        log::info!("generating synthetic dataset in {}", root.display());
        synth_generate(root, SYNTHETIC_IMAGES, [SYNTHETIC_SIZE, SYNTHETIC_SIZE], cfg.dataset.seed)?;
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<[usize; 2]> {
    let Some((h, w)) = s.split_once(['x', 'X']) else {
        bail!("size must look like 128x128, got {s:?}");
    };
    Ok([h.trim().parse()?, w.trim().parse()?])
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    match cli.command {
        Command::Train {
            epochs,
            max_steps,
            batch_size,
            resume,
        } => {
            let mut cfg = resolve_config(c)?;
            if let Some(e) = epochs {
                cfg.max_epochs = e;
            }
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            cfg.resume = resume;
            ensure_synthetic(&cfg, c.preset.as_deref())?;
            std::fs::create_dir_all(&cfg.checkpoint_dir)?;
            std::fs::write(cfg.checkpoint_dir.join("config.toml"), cfg.to_toml()?)?;
            let outcome = train::train(&cfg)?;
            println!(
                "trained {} steps; last checkpoint {}",
                outcome.run_log.steps().count(),
                outcome.last_checkpoint.display()
            );
            if let Some(best) = outcome.best_checkpoint {
                println!("best checkpoint {} (val DSC {:.2})", best.display(), outcome.best_val_dsc.unwrap_or(f64::NAN));
            }
            dbfnet::plot::plot_loss(&outcome.run_log, &cfg.checkpoint_dir.join("loss.png"))?;
        }
        Command::Evaluate { checkpoint, all_folds } => {
            let cfg = resolve_config(c)?;
            ensure_synthetic(&cfg, c.preset.as_deref())?;
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
            if all_folds {
                let mut reports = Vec::new();
                for fold in 0..cfg.dataset.fold_count {
                    let ckpt = checkpoint.join(format!("fold{fold}")).join(train::BEST_CHECKPOINT);
                    let dir = out.join(format!("fold{fold}"));
                    reports.push(train::evaluate(&ckpt, &cfg.dataset, fold, Some(&cfg.model), &dir)?);
                }
                let summary = summarize_folds(&reports);
                println!("DSC {} | HD {}", summary.dsc, summary.hd);
                std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            } else {
                let r = train::evaluate(&checkpoint, &cfg.dataset, cfg.fold, Some(&cfg.model), &out)?;
                println!("DSC {} | HD {} {} | MAP {:.4} | AUC {:.4}", r.dsc, r.hd, r.hd_units, r.map, r.auc);
            }
        }
        Command::Ablate { grid, seeds } => {
            let cfg = resolve_config(c)?;
            ensure_synthetic(&cfg, c.preset.as_deref())?;
            let cells = parse_grid(&grid)?.cells()?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let dataset = Dataset::open(cfg.dataset.clone())?;
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("ablation"));
            let table = train::ablate(&cfg, &cells, &seeds, &dataset, &out)?;
            println!("{}", table.to_markdown());
            println!("{}", table.lambda_markdown());
        }
        Command::Plot { reports, runlog } => {
            let reports = reports
                .iter()
                .map(|p| MetricsReport::read(p))
                .collect::<dbfnet::Result<Vec<_>>>()?;
            let log = runlog.as_deref().map(RunLog::read_jsonl).transpose()?;
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("plots"));
            for p in emit_plots(&reports, log.as_ref(), &out)? {
                println!("{}", p.display());
            }
        }
        Command::Synth { count, size } => {
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("data/synthetic"));
            let m = synth_generate(&out, count, parse_size(&size)?, c.seed.unwrap_or(0))?;
            println!("wrote {} samples to {}", m.ids.len(), out.display());
        }
    }
    Ok(())
}
