//! `ltgsr`: data generation, training, inference and evaluation.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ltgsr_core::checkpoint::Checkpoint;
use ltgsr_core::eval::{evaluate, ref_sensitivity};
use ltgsr_core::imaging::io::{read_image, write_image};
use ltgsr_core::imaging::{load_dataset, write_dataset};
use ltgsr_core::model::infer;
use ltgsr_core::search::oracle_check;
use ltgsr_core::train::{FitHooks, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "ltgsr", version, about = "Reference-based angiogram super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of LR / HR / Ref / Ref↓ groups.
    GenData {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side length in pixels (multiple of 16).
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or resume) a model and write a checkpoint.
    Train(TrainArgs),
    /// Reference-free super-resolution of one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score refless inference on a dataset; JSON to stdout.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare fast texture search against the brute-force oracle.
    OracleCheck {
        #[arg(long, default_value_t = 32)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Shuffle reference assignments and compare search vs refless inference.
    RefSensitivity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint; its stored config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    msfp_blocks: Option<usize>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    lambda_tg: Option<f64>,
    #[arg(long)]
    lambda_per: Option<f64>,
    #[arg(long)]
    lambda_adv: Option<f64>,
    #[arg(long)]
    gp_lambda: Option<f64>,
    #[arg(long)]
    critic_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    no_global_skip: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)
                .with_context(|| format!("reading config {}", path.display()))?;
        }
        let mut set = |k: &str, v: Option<String>| -> Result<()> {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
            Ok(())
        };
        set("epochs", self.epochs.map(|v| v.to_string()))?;
        set("batch", self.batch.map(|v| v.to_string()))?;
        set("crop", self.crop.map(|v| v.to_string()))?;
        set("msfp_blocks", self.msfp_blocks.map(|v| v.to_string()))?;
        set("channels", self.channels.clone())?;
        set("lambda_tg", self.lambda_tg.map(|v| v.to_string()))?;
        set("lambda_per", self.lambda_per.map(|v| v.to_string()))?;
        set("lambda_adv", self.lambda_adv.map(|v| v.to_string()))?;
        set("gp_lambda", self.gp_lambda.map(|v| v.to_string()))?;
        set("critic_steps", self.critic_steps.map(|v| v.to_string()))?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("checkpoint_every", self.checkpoint_every.map(|v| v.to_string()))?;
        if self.no_global_skip {
            set("global_skip", Some("false".into()))?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').context("--set expects KEY=VALUE")?;
            set(k, Some(v.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let data = load_dataset(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(Checkpoint::load(path)?)?;
            if let Some(e) = args.epochs {
                t.set_epochs(e);
            }
            t
        }
        None => Trainer::new(args.config()?)?,
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    let mut hooks = FitHooks {
        checkpoint: Some(&args.out),
        log: Some(&mut lock),
    };
    if trainer.fit(&data, &mut hooks)?.is_empty() {
        // Nothing left to train; still leave a checkpoint at `--out`.
        trainer.checkpoint().save(&args.out)?;
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LTGSR_THREADS") {
        let n: usize = v.parse().context("LTGSR_THREADS must be a positive integer")?;
        if n == 0 {
            bail!("LTGSR_THREADS must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    configure_threads()?;
    match Cli::parse().command {
        Command::GenData { n, seed, size, out } => {
            let m = write_dataset(&out, n, seed, size, size)?;
            eprintln!("wrote {} groups to {}", m.groups.len(), out.display());
        }
        Command::Train(args) => train(&args)?,
        Command::Infer { ckpt, input, out } => {
            let ck = load_ckpt(&ckpt)?;
            let lr = read_image(&input)?;
            let sr = infer(&lr, &ck.params, &ck.config.model)?;
            write_image(&sr, &out)?;
        }
        Command::Eval { ckpt, data, csv } => {
            let ck = load_ckpt(&ckpt)?;
            let report = evaluate(&ck, &load_dataset(&data)?)?;
            if let Some(path) = csv {
                fs::write(&path, report.to_csv())?;
            }
            print_json(&report)?;
        }
        Command::OracleCheck { trials, seed } => {
            let report = oracle_check(trials, seed)?;
            print_json(&report)?;
            if report.index_mismatches > 0 || report.max_relevance_dev > 1e-6 || report.max_texture_dev > 1e-6 {
                bail!("fast search disagrees with the oracle");
            }
        }
        Command::RefSensitivity { ckpt, data, seeds } => {
            let ck = load_ckpt(&ckpt)?;
            print_json(&ref_sensitivity(&ck, &load_dataset(&data)?, &seeds)?)?;
        }
    }
    Ok(())
}
