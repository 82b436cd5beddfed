use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use styleless::checkpoint::{trainlog_path, Checkpoint};
use styleless::eval::{evaluate, DataSources, Experiment, ExperimentConfig, MetricsReport, Protocol};
use styleless::filters::{FilterConfig, FilterKind};
use styleless::model::{FilterHook, ForwardOptions, LayeredNetwork, TAP_LAYERS};
use styleless::style::{gram_matrix, LayerId};
use styleless::toyscenes::{CorruptionKind, CorruptionSpec, Dataset, Split};
use styleless::train::{finetune_task_only, train_stage1, train_stage2, TrainConfig, TrainOutcome};
use styleless::{stls, Tensor};

#[derive(Parser)]
#[command(name = "styleless", version, about = "Toy segmentation with Gram-based style suppression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural segmentation dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Write a corrupted copy of a dataset.
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kind: CorruptionKind,
        #[arg(long)]
        severity: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 1: train the backbone on the task loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opt: OptimArgs,
    },
    /// Stage 2: insert StyleLess layers and fine-tune on task + Gram loss.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = styleless::train::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long = "sl-lr-mult", default_value_t = styleless::train::DEFAULT_STYLELESS_LR_MULTIPLIER)]
        sl_lr_mult: f64,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        /// Defaults to the seed recorded in the input checkpoint.
        #[arg(long)]
        seed: Option<u64>,
        /// Fine-tune on the task loss alone, without inserting StyleLess layers.
        #[arg(long)]
        task_only: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opt: OptimArgs,
    },
    /// Evaluate a checkpoint on a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint with a style-perturbation filter at inference.
    FilterApply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        filter: FilterKind,
        #[arg(long, default_value_t = 10.0)]
        p: f64,
        #[arg(long, default_value_t = 4.0)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated feature taps; all taps when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<LayerId>>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Per-layer Gram statistics of one image.
    GramAnalyze {
        #[arg(long)]
        model: PathBuf,
        /// STLS1 image file, or a dataset directory together with `--index`.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 8)]
        top_k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one of the comparison protocols over several seeds.
    Experiment {
        #[arg(long)]
        protocol: Protocol,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        train_size: usize,
        #[arg(long, default_value_t = 32)]
        val_size: usize,
        #[arg(long, default_value_t = 48)]
        test_size: usize,
        /// Stage-1 epochs; stage 2 runs half as many.
        #[arg(long, default_value_t = 24)]
        epochs: usize,
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[arg(long)]
        test_data: Option<PathBuf>,
    },
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = styleless::train::DEFAULT_CROP)]
    crop: usize,
}

impl OptimArgs {
    fn apply(&self, cfg: TrainConfig) -> TrainConfig {
        TrainConfig { batch_size: self.batch_size, lr: self.lr, crop_size: self.crop, ..cfg }
    }
}

fn save_outcome(outcome: &TrainOutcome, out: &Path) -> anyhow::Result<()> {
    outcome.checkpoint.save(out)?;
    outcome.log.write_jsonl(trainlog_path(out))?;
    let summary = outcome.log.summary.as_ref();
    eprintln!(
        "wrote {} ({} steps, final-epoch task loss {:.4})",
        out.display(),
        summary.map_or(0, |s| s.steps),
        summary.map_or(f64::NAN, |s| s.last_epoch_l_task)
    );
    Ok(())
}

fn write_report(report: &MetricsReport, path: Option<&Path>) -> anyhow::Result<()> {
    let json = report.to_json()?;
    match path {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    eprintln!("{} on {}: mIoU {:.2}", report.model, report.dataset, 100.0 * report.miou);
    Ok(())
}

fn load_image(path: &Path, index: usize) -> anyhow::Result<Tensor<f32>> {
    if path.is_dir() {
        let ds = Dataset::load(path)?;
        match ds.samples.get(index) {
            Some(s) => Ok(s.image.clone()),
            None => bail!("{} has {} samples, index {index} requested", path.display(), ds.len()),
        }
    } else {
        Ok(stls::load(path)?)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { out, n, seed, split } => {
            Dataset::generate(split, n, seed)?.save(&out)?;
            eprintln!("wrote {n} {split} samples to {}", out.display());
        }
        Command::Corrupt { input, out, kind, severity, seed } => {
            let spec = CorruptionSpec::new(kind, severity, seed)?;
            Dataset::load(&input)?.corrupted(&spec)?.save(&out)?;
            eprintln!("wrote {} to {}", spec.tag(), out.display());
        }
        Command::Train { data, epochs, seed, out, opt } => {
            let ds = Dataset::load(&data)?;
            let cfg = opt.apply(TrainConfig { data: data.display().to_string(), ..TrainConfig::stage1(epochs, seed) });
            let outcome = train_stage1(LayeredNetwork::new(seed)?, &ds, &cfg)?;
            save_outcome(&outcome, &out)?;
        }
        Command::Finetune { model, data, alpha, sl_lr_mult, epochs, seed, task_only, out, opt } => {
            let ckpt = Checkpoint::load(&model)?;
            let ds = Dataset::load(&data)?;
            let cfg = opt.apply(TrainConfig {
                stage: 2,
                alpha,
                styleless_lr_multiplier: sl_lr_mult,
                data: data.display().to_string(),
                ..TrainConfig::stage1(epochs, seed.unwrap_or(ckpt.manifest.seed))
            });
            let outcome = if task_only {
                finetune_task_only(&ckpt, &ds, &cfg)?
            } else {
                train_stage2(&ckpt, &ds, &cfg)?
            };
            save_outcome(&outcome, &out)?;
        }
        Command::Eval { model, data, report, seed } => {
            let r = styleless::eval::evaluate_paths(&model, &data, &ForwardOptions::default(), seed)?;
            write_report(&r, report.as_deref())?;
        }
        Command::FilterApply { model, data, filter, p, tau, seed, layers, report } => {
            let hook = FilterHook {
                config: FilterConfig { kind: filter, p, tau, seed },
                layers: layers.unwrap_or_else(|| TAP_LAYERS.to_vec()),
            };
            let ckpt = Checkpoint::load(&model)?;
            let ds = Dataset::load(&data)?;
            let opts = ForwardOptions { filter: Some(hook) };
            let r = evaluate(&format!("filter-{filter}"), &ckpt.network, &ckpt.hash()?, &ds, &opts, seed)?;
            write_report(&r, report.as_deref())?;
        }
        Command::GramAnalyze { model, image, index, top_k, out } => {
            let ckpt = Checkpoint::load(&model)?;
            let x = load_image(&image, index)?;
            let summaries = ckpt
                .network
                .features(&x)?
                .iter()
                .map(|f| gram_matrix(f)?.summary(top_k))
                .collect::<styleless::Result<Vec<_>>>()?;
            let json = serde_json::to_string_pretty(&summaries)?;
            match out {
                Some(p) => fs::write(&p, json + "\n")?,
                None => println!("{json}"),
            }
        }
        Command::Experiment { protocol, seeds, out, train_size, val_size, test_size, epochs, train_data, val_data, test_data } => {
            let cfg = ExperimentConfig {
                seeds,
                train_size,
                val_size,
                test_size,
                stage1: TrainConfig::stage1(epochs, 0),
                sources: DataSources { train: train_data, val: val_data, test: test_data },
                ..ExperimentConfig::default()
            };
            let first = cfg.seeds.first().copied();
            let mut experiment = Experiment::new(cfg);
            let bundle = experiment.run(protocol)?;
            bundle.save(&out)?;
            if let (Some(seed), Protocol::BaselineVsStyleless) = (first, protocol) {
                experiment.save_qualitative(seed, 4, 4, out.join("qualitative.png"))?;
            }
            print!("{}", bundle.table_csv());
            eprintln!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
