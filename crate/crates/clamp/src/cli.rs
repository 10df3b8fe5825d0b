//! The `clamp` command line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clamp_core::checks::acceptance_checks;
use clamp_core::model::ClampModel;
use clamp_core::schema::{build_fewshot_split, build_zeroshot_split, DatasetSplit, SplitKind};
use clamp_core::synthetic::{blob_dataset, BlobConfig};
use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::clip::load_clip;
use crate::coco::{load_coco, write_coco, CocoDataset};
use crate::config::RunConfig;
use crate::error::{write_atomic, Error, Result};
use crate::harness::{evaluate_to_dir, save_png, train, Validation};
use crate::manifest::{read_ids, write_ids, write_summary, SplitSummary};
use crate::visualize::{render, select_keypoints, Mode};

#[derive(Debug, Parser)]
#[command(name = "clamp", version, about = "Prompt-based animal pose estimation: data preparation, training, evaluation and figures")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted `key=value` override, e.g. `loss_weights.alpha1=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Directory receiving every output; created if absent.
    #[arg(long, global = true, default_value = "clamp-out")]
    pub output_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write split manifests and a summary; optionally generate a synthetic dataset.
    Prepare(PrepareArgs),
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train,
    /// Evaluate a checkpoint: metrics JSON, per-instance OKS CSV, predictions.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render score maps, skeletons or match matrices as PNG files.
    Visualize(VisualizeArgs),
    /// Run the property suite; nonzero exit on any failure.
    Selfcheck {
        /// Skip long-running checks.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Sample up to N records per species.
    #[arg(long, value_name = "N")]
    pub fewshot: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Family split `TRAIN:TEST`; each side may list families separated by commas.
    #[arg(long, value_name = "TRAIN:TEST")]
    pub zeroshot: Option<String>,
    /// Generate this many synthetic blob images with annotations and use them as the dataset.
    #[arg(long, value_name = "COUNT")]
    pub synthetic: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotation ids to render.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<u64>,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Restrict to these keypoint names (default: all).
    #[arg(long, value_delimiter = ',')]
    pub keypoints: Vec<String>,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let out = &cli.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match cli.command {
        Command::Prepare(args) => prepare(&cfg, &args, out),
        Command::Train => cmd_train(&cfg, out),
        Command::Evaluate { checkpoint } => cmd_evaluate(&cfg, &checkpoint, out),
        Command::Visualize(args) => cmd_visualize(&cfg, &args, out),
        Command::Selfcheck { quick } => selfcheck(quick),
    }
}

fn load_data(cfg: &RunConfig) -> Result<CocoDataset> {
    load_coco(cfg.annotations()?, cfg.data.images.as_deref(), cfg.data.schema)
}

fn load_eval_data(cfg: &RunConfig) -> Result<CocoDataset> {
    match &cfg.data.eval_annotations {
        Some(p) => load_coco(p, cfg.data.eval_images.as_deref(), cfg.data.schema),
        None => load_data(cfg),
    }
}

fn restrict(split: &DatasetSplit, ids: Option<&Path>, kind: SplitKind) -> Result<DatasetSplit> {
    match ids {
        Some(p) => Ok(split.select_ids(&read_ids(p)?, kind)?),
        None => Ok(split.clone()),
    }
}

fn families(list: &str) -> BTreeSet<String> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn prepare(cfg: &RunConfig, args: &PrepareArgs, out: &Path) -> Result<()> {
    let data = match args.synthetic {
        Some(count) => {
            let blobs = blob_dataset(&BlobConfig {
                count,
                seed: args.seed,
                ..BlobConfig::default()
            })?;
            let image_dir = out.join("images");
            for r in &blobs.split.records {
                save_png(&image_dir.join(&r.image_path), blobs.image_for(r))?;
            }
            let annotations = out.join("annotations.json");
            write_coco(&annotations, &blobs.split)?;
            write_atomic(
                &out.join("clamp.toml"),
                b"[data]\nannotations = \"annotations.json\"\nimages = \"images\"\nschema = \"from-file\"\n",
            )?;
            println!("wrote {count} synthetic images to {}", image_dir.display());
            load_coco(&annotations, Some(&image_dir), crate::coco::SchemaChoice::FromFile)?
        }
        None => load_data(cfg)?,
    };
    if !data.dropped.is_empty() {
        println!("dropped {} crowd or unlabeled annotations", data.dropped.len());
    }
    let mut summaries = vec![SplitSummary::of("full", &data.split)];
    if let Some(n) = args.fewshot {
        let split = build_fewshot_split(&data.split, n, args.seed)?;
        write_ids(&out.join("fewshot.json"), &split.ids())?;
        println!("fewshot: {} records", split.len());
        summaries.push(SplitSummary::of("fewshot", &split));
    }
    if let Some(spec) = &args.zeroshot {
        let (a, b) = spec
            .split_once(':')
            .ok_or_else(|| Error::Input(format!("--zeroshot {spec:?} is not TRAIN:TEST")))?;
        let (train_split, test_split) = build_zeroshot_split(&data.split, &families(a), &families(b))?;
        write_ids(&out.join("zeroshot_train.json"), &train_split.ids())?;
        write_ids(&out.join("zeroshot_test.json"), &test_split.ids())?;
        println!("zeroshot: {} train, {} test records", train_split.len(), test_split.len());
        summaries.push(SplitSummary::of("zeroshot_train", &train_split));
        summaries.push(SplitSummary::of("zeroshot_test", &test_split));
    }
    write_summary(&out.join("summary.json"), &summaries)
}

fn build_model(cfg: &RunConfig, split: &DatasetSplit) -> Result<ClampModel> {
    let tokenizer = cfg.tokenizer.build()?;
    let mut model = ClampModel::new(cfg.model.clone(), &split.schema, tokenizer.as_ref())?;
    if let Some(w) = &cfg.clip.weights {
        let report = load_clip(&mut model, w)?;
        eprintln!(
            "loaded {} pretrained tensors; {} missing, {} unused",
            report.loaded,
            report.missing.len(),
            report.unused.len()
        );
    }
    Ok(model)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let split = restrict(&data.split, cfg.data.train_ids.as_deref(), SplitKind::Supervised)?;
    let val = match &cfg.data.val_ids {
        Some(p) => Some(data.split.select_ids(&read_ids(p)?, SplitKind::Supervised)?),
        None => None,
    };
    let mut model = build_model(cfg, &split)?;
    write_atomic(&out.join("config.toml"), toml::to_string(cfg).expect("config serializes").as_bytes())?;
    let started = Instant::now();
    let summary = train(
        &mut model,
        &cfg.tokenizer,
        &split,
        &data,
        &cfg.train,
        val.as_ref().map(|split| Validation { split, images: &data }),
        out,
    )?;
    println!(
        "trained {} steps in {:.1}s; final checkpoint {}",
        summary.steps,
        started.elapsed().as_secs_f64(),
        summary.final_checkpoint.display()
    );
    if let Some((epoch, ap)) = summary.best {
        println!("best validation AP {ap:.4} after epoch {epoch}");
    }
    Ok(())
}

fn load_checked(cfg: &RunConfig, path: &Path, split: &DatasetSplit) -> Result<ClampModel> {
    let ckpt = checkpoint::load(path)?;
    let embed = if cfg.model_given { cfg.model.encoder.embed_dim() } else { ckpt.model.config.encoder.embed_dim() };
    checkpoint::check_compatible(&ckpt.model, &split.schema, embed)?;
    Ok(ckpt.model)
}

fn cmd_evaluate(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<()> {
    let data = load_eval_data(cfg)?;
    let split = restrict(&data.split, cfg.data.eval_ids.as_deref(), SplitKind::Supervised)?;
    let model = load_checked(cfg, ckpt, &split)?;
    let e = evaluate_to_dir(&model, &split, &data, out)?;
    let m = e.metrics;
    println!(
        "AP {:.4}  AP50 {:.4}  AP75 {:.4}  APM {:.4}  APL {:.4}  AR {:.4}",
        m.ap, m.ap50, m.ap75, m.apm, m.apl, m.ar
    );
    if !e.skipped.is_empty() {
        println!("skipped {} instances without labeled keypoints", e.skipped.len());
    }
    Ok(())
}

fn cmd_visualize(cfg: &RunConfig, args: &VisualizeArgs, out: &Path) -> Result<()> {
    let data = load_eval_data(cfg)?;
    let model = load_checked(cfg, &args.checkpoint, &data.split)?;
    let keypoints = select_keypoints(&model.schema, &args.keypoints)?;
    let records = args
        .ids
        .iter()
        .map(|id| {
            data.split
                .records
                .iter()
                .find(|r| r.id == *id)
                .ok_or_else(|| Error::Input(format!("annotation {id} is not in {}", cfg.annotations().map(|p| p.display().to_string()).unwrap_or_default())))
        })
        .collect::<Result<Vec<_>>>()?;
    let files = render(&model, &records, &data, args.mode, &keypoints, out)?;
    println!("wrote {} images to {}", files.len(), out.display());
    Ok(())
}

fn selfcheck(quick: bool) -> Result<()> {
    let mut failed = Vec::new();
    for check in acceptance_checks() {
        if quick && check.slow {
            println!("SKIP {}", check.name);
            continue;
        }
        let started = Instant::now();
        let result = (check.run)();
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("PASS {} ({secs:.1}s)", check.name),
            Err(why) => {
                println!("FAIL {} ({secs:.1}s): {why}", check.name);
                failed.push(check.name);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::SelfCheck(failed.join(", ")))
    }
}
