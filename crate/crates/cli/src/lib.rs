//! Command-line front end: dataset generation, training, inference,
//! evaluation and the self-test battery.

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vistr_core::annotations::{load_annotations, load_dataset, save_annotations, ANNOTATION_FILE};
use vistr_core::config::{TrainConfig, SEED_ENV};
use vistr_core::eval::{default_thresholds, evaluate, results_from_json, results_to_json, EvalReport, VideoTruth};
use vistr_core::selftest::{run_all, Hooks};
use vistr_core::synth::generate_dataset;
use vistr_core::train::{build_model, infer, Trainer, CHECKPOINT_FILE, CONFIG_FILE};

pub const RESULTS_FILE: &str = "results.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "vistr", version, about = "Clip-level video instance segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset described by the config.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to the config's `data.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory for the checkpoint, metrics and logs.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; defaults to the config's `data.dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Print a progress line every this many steps (0 disables).
        #[arg(long, default_value_t = 10)]
        log_every: usize,
    },
    /// Write scored mask sequences for every video of a dataset.
    Infer {
        /// Defaults to the `config.txt` saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory receiving `results.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a results file against annotations.
    Eval {
        #[arg(long)]
        results: PathBuf,
        /// An annotation file or a dataset directory.
        #[arg(long)]
        annotations: PathBuf,
        /// Directory receiving `report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the numerical building blocks against independent oracles.
    Selftest,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Dotted `key = value` config file; omitted keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Force deterministic kernels regardless of the config.
    #[arg(long)]
    pub deterministic: bool,
}

impl ConfigArgs {
    /// The config with the seed override from the environment applied.
    pub fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => TrainConfig::default(),
        };
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        if self.deterministic {
            cfg.train.deterministic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn annotation_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(ANNOTATION_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.data.dir));
            let path = gen_data(&cfg, &dir)?;
            println!("wrote {} videos to {}", cfg.synth.clips, path.display());
        }
        Command::Train { config, out, data, log_every } => {
            let cfg = config.load()?;
            let data = data.unwrap_or_else(|| PathBuf::from(&cfg.data.dir));
            train(cfg, &data, &out, log_every)?;
        }
        Command::Infer { config, checkpoint, data, out } => {
            let config = config.unwrap_or_else(|| checkpoint.with_file_name(CONFIG_FILE));
            let cfg = ConfigArgs { config: Some(config), deterministic: false }.load()?;
            let data = data.unwrap_or_else(|| PathBuf::from(&cfg.data.dir));
            let path = infer_cmd(&cfg, &checkpoint, &data, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { results, annotations, out } => {
            let report = eval_cmd(&results, &annotations)?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join(REPORT_FILE), text + "\n")?;
            }
        }
        Command::Selftest => {
            let reports = run_all(&Hooks::default());
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{status} {:<12} {:>7.2}s  {}", r.name, r.seconds, r.detail);
                failed += !r.passed as usize;
            }
            if failed > 0 {
                bail!("{failed} of {} suites failed", reports.len());
            }
            println!("all {} suites passed", reports.len());
        }
    }
    Ok(())
}

pub fn gen_data(cfg: &TrainConfig, dir: &Path) -> Result<PathBuf> {
    let samples = generate_dataset(&cfg.synth)?;
    save_annotations(&samples, dir).with_context(|| format!("writing dataset to {}", dir.display()))
}

/// Samples of a dataset directory whose clips fit the model.
fn load_samples(cfg: &TrainConfig, dir: &Path) -> Result<Vec<vistr_core::annotations::Sample>> {
    let path = annotation_path(dir);
    let (file, samples) = load_dataset(&path).with_context(|| format!("loading dataset {}", path.display()))?;
    let m = &cfg.model;
    for v in &file.videos {
        if (v.t, v.height, v.width) != (m.t, m.height, m.width) {
            bail!(
                "video {} is {}x{}x{} (T x H x W) but the model expects {}x{}x{}",
                v.id, v.t, v.height, v.width, m.t, m.height, m.width
            );
        }
    }
    for a in &file.annotations {
        if a.category_id >= m.k {
            bail!("video {} uses category {} but the model has {} classes", a.video_id, a.category_id, m.k);
        }
    }
    Ok(samples)
}

pub fn train(cfg: TrainConfig, data: &Path, out: &Path, log_every: usize) -> Result<()> {
    let samples = load_samples(&cfg, data)?;
    let mut trainer = Trainer::new(cfg)?;
    let start = Instant::now();
    let summary = trainer.fit(&samples, Some(out), |_, r| {
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!(
                "step {:>5} epoch {:>3} loss {:.4} (class {:.4} box {:.4} mask {:.4}) lr {:.1e} {:.0}s",
                r.step,
                r.epoch,
                r.loss.total,
                r.loss.class_nll,
                r.loss.box_loss,
                r.loss.mask,
                r.lr_transformer,
                start.elapsed().as_secs_f64()
            );
        }
        ControlFlow::Continue(())
    })?;
    println!(
        "trained {} steps over {} epochs; checkpoint {}",
        summary.steps,
        summary.epochs_completed,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn infer_cmd(cfg: &TrainConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<PathBuf> {
    let (model, mut store) = build_model(&cfg.model, cfg.train.seed)?;
    store.load(checkpoint).with_context(|| {
        format!("checkpoint {} does not match the configured model", checkpoint.display())
    })?;
    let samples = load_samples(cfg, data)?;
    let results = infer(&model, &store, &samples)?;
    fs::create_dir_all(out)?;
    let path = out.join(RESULTS_FILE);
    fs::write(&path, results_to_json(&results)?)?;
    Ok(path)
}

pub fn eval_cmd(results: &Path, annotations: &Path) -> Result<EvalReport> {
    let path = annotation_path(annotations);
    let file = load_annotations(&path).with_context(|| format!("reading annotations {}", path.display()))?;
    let bytes = fs::read(results).with_context(|| format!("reading results {}", results.display()))?;
    let results = results_from_json(&bytes, |id| file.video(id).map(|v| (v.height, v.width)))?;
    let truths = file
        .videos
        .iter()
        .map(|v| Ok(VideoTruth { video_id: v.id, instances: file.truths(v.id)? }))
        .collect::<Result<Vec<_>>>()?;
    let categories: Vec<usize> = file.categories.iter().map(|c| c.id).collect();
    Ok(evaluate(&results, &truths, &categories, &default_thresholds())?)
}
