use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::{Device, Tensor};
use clap::{Parser, Subcommand};
use pestvision::data_io::{
    load_fixed_split, make_random_split, scan_label_space, scan_records, LabelSpace, SplitName, SplitRatios,
    LABELS_FILE,
};
use pestvision::ensemble::{argmax, soft_vote, ProbMatrix};
use pestvision::explain::{grad_cam, overlay};
use pestvision::metrics::{MetricsReport, DEFAULT_WORST_K};
use pestvision::model::{Model, ModelTag};
use pestvision::preprocess::{denormalize, Mode};
use pestvision::report::{
    append_row, comparison_table, config_hash, read_ledger, select_rows, worst_table, LedgerRow,
};
use pestvision::trainer::{evaluate_export, load_checkpoint, metrics_of, train, TrainRunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Overrides where relative checkpoint paths are looked up and where
/// training runs are written by default.
const CACHE_ENV: &str = "PESTVISION_CACHE";

#[derive(Parser)]
#[command(name = "pestvision", version, about = "Insect pest image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct LedgerArgs {
    /// Append a result row to this ledger CSV.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Dataset name recorded in the ledger.
    #[arg(long, default_value = "default")]
    dataset: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write a stratified train/val/test split of an image folder.
    Split {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "0.7,0.1,0.2")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and keep its best checkpoint.
    Train {
        #[arg(long)]
        model: ModelTag,
        /// TOML run config; unspecified keys keep the per-model defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image folder root.
        #[arg(long)]
        data: PathBuf,
        /// Directory with labels.txt and split manifests (default: --data).
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Run directory (default: $PESTVISION_CACHE/<model> or runs/<model>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// ImageNet ResNet-50 weights in safetensors with torchvision names.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Predict a split with a checkpoint and export class probabilities.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        export: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[command(flatten)]
        ledger: LedgerArgs,
    },
    /// Soft-vote exported probability files.
    Ensemble {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ledger: LedgerArgs,
    },
    /// Write a Grad-CAM overlay for one image.
    Gradcam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Target class (default: the predicted class).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the model comparison table and the worst classes of one model.
    Report {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        /// Probability export of the model whose worst classes are listed.
        #[arg(long)]
        probs: Option<PathBuf>,
        /// Class names for the worst-class table.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_WORST_K)]
        worst: usize,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic shapes dataset for smoke tests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 72)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ensemble { .. } => "ensemble",
            Command::Gradcam { .. } => "gradcam",
            Command::Report { .. } => "report",
            Command::Synth { .. } => "synth",
        }
    }
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

/// Relative checkpoint paths that do not exist are retried under the cache.
fn resolve_checkpoint(path: &Path) -> PathBuf {
    match cache_dir() {
        Some(cache) if path.is_relative() && !path.exists() => cache.join(path),
        _ => path.to_path_buf(),
    }
}

fn parse_split(name: &str) -> Result<SplitName> {
    SplitName::ALL
        .into_iter()
        .find(|s| s.as_str() == name)
        .with_context(|| format!("unknown split '{name}', expected train|val|test"))
}

fn load_labels(splits: &Path) -> Result<LabelSpace> {
    let path = splits.join(LABELS_FILE);
    LabelSpace::read(&path).with_context(|| format!("reading {}", path.display()))
}

fn record(args: &LedgerArgs, model: &str, report: &MetricsReport, config: &str) -> Result<()> {
    if let Some(ledger) = &args.ledger {
        let timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        let row = LedgerRow::from_report(timestamp, &args.dataset, model, report, config_hash(config));
        append_row(ledger, &row)?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Split { root, ratios, seed, out } => {
            let ratios = SplitRatios::parse(&ratios)?;
            let labels = scan_label_space(&root)?;
            let records = scan_records(&root, &labels)?;
            std::fs::create_dir_all(&out)?;
            labels.write(&out.join(LABELS_FILE))?;
            for manifest in make_random_split(&records, ratios, seed)? {
                manifest.write(&out.join(manifest.split_name.file_name()))?;
                println!("{}: {} images", manifest.split_name, manifest.len());
            }
        }
        Command::Train {
            model,
            config,
            data,
            splits,
            out,
            seed,
            pretrained,
        } => {
            let mut cfg = match &config {
                Some(path) => TrainRunConfig::load(model, path)?,
                None => TrainRunConfig::defaults(model),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let splits = splits.unwrap_or_else(|| data.clone());
            let labels = load_labels(&splits)?;
            let train_set = load_fixed_split(&splits.join(SplitName::Train.file_name()), &labels, SplitName::Train)?;
            let val_set = load_fixed_split(&splits.join(SplitName::Val.file_name()), &labels, SplitName::Val)?;
            let out = out.unwrap_or_else(|| cache_dir().unwrap_or_else(|| PathBuf::from("runs")).join(model.as_str()));
            let outcome = train(&cfg, &labels, &data, &train_set, &val_set, &out, pretrained.as_deref())?;
            let best = outcome.history.best_val_accuracy().unwrap_or(0.0);
            println!(
                "{model}: {} epochs, best val accuracy {best:.4}, checkpoint {}",
                outcome.history.epochs.len(),
                outcome.checkpoint.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            splits,
            split,
            export,
            batch_size,
            ledger,
        } => {
            let ckpt = resolve_checkpoint(&ckpt);
            let split = parse_split(&split)?;
            let splits = splits.unwrap_or_else(|| data.clone());
            let labels = load_labels(&splits)?;
            let manifest = load_fixed_split(&splits.join(split.file_name()), &labels, split)?;
            let (probs, report) = evaluate_export(&ckpt, &data, &manifest, &labels, &export, batch_size)?;
            print!("{}", report.to_text());
            let config = Model::read_metadata(&ckpt)?.remove("config").unwrap_or_default();
            record(&ledger, &probs.model_id, &report, &config)?;
        }
        Command::Ensemble { inputs, out, ledger } => {
            let members = inputs
                .iter()
                .map(|p| ProbMatrix::read_csv(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let combined = soft_vote(&members)?;
            combined.write_csv(&out)?;
            let report = metrics_of(&combined)?;
            print!("{}", report.to_text());
            let sources: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
            record(&ledger, "ensemble", &report, &sources.join("\n"))?;
        }
        Command::Gradcam { ckpt, image, class, out } => {
            let (model, labels, prep) = load_checkpoint(&resolve_checkpoint(&ckpt))?;
            let original = image::open(&image)
                .with_context(|| format!("decoding {}", image.display()))?
                .to_rgb8();
            // eval mode never draws from the rng
            let chw = prep.apply(&original, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
            let input = Tensor::from_vec(chw.data.clone(), (1, 3, chw.height, chw.width), &Device::Cpu)?;
            let target = match class {
                Some(k) if k >= labels.count() => bail!("class {k} out of range for {} classes", labels.count()),
                Some(k) => k,
                None => argmax(&model.probabilities(&input)?.flatten_all()?.to_vec1::<f32>()?
                    .into_iter()
                    .map(f64::from)
                    .collect::<Vec<_>>()),
            };
            let heatmap = grad_cam(&model, &input, target)?;
            let shown = denormalize(&chw, &prep.channel_mean, &prep.channel_std);
            overlay(&heatmap, &shown, &out)?;
            println!(
                "class {target} ({}), layer {}, {}x{} map -> {}",
                labels.names()[target],
                heatmap.source_layer,
                heatmap.height,
                heatmap.width,
                out.display()
            );
        }
        Command::Report {
            ledger,
            dataset,
            probs,
            labels,
            worst,
            out,
        } => {
            let rows = select_rows(&read_ledger(&ledger)?, dataset.as_deref());
            let mut text = comparison_table(&rows);
            if let Some(path) = probs {
                let probs = ProbMatrix::read_csv(&path).with_context(|| format!("reading {}", path.display()))?;
                let names = match labels {
                    Some(p) => LabelSpace::read(&p)?.names().to_vec(),
                    None => (0..probs.num_classes()).map(|c| c.to_string()).collect(),
                };
                if names.len() != probs.num_classes() {
                    bail!("{} class names for {} probability columns", names.len(), probs.num_classes());
                }
                text.push('\n');
                text.push_str(&worst_table(&metrics_of(&probs)?, &names, worst));
            }
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Synth {
            out,
            classes,
            per_class,
            size,
            seed,
        } => {
            pestvision::synth::write_shapes_dataset(&out, classes, per_class, size, seed)?;
            println!("{} images in {}", classes * per_class, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name} failed: {e:#}");
            ExitCode::FAILURE
        }
    }
}
