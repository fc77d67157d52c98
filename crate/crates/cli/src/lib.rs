//! `bcsam`: runs the pipeline stages from one JSON config.
//!
//! Precedence is flags over config file over built-in defaults. Every
//! pipeline command writes the resolved config to
//! `<output_dir>/config.resolved.json`, which can be passed back with
//! `--config` to replay the run.

pub mod config;
pub mod stages;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Result};
use bcsam_core::classifiers::ClassifierSpec;
use bcsam_core::dataset::DomainId;
use bcsam_core::synthetic::{write_synthetic_dataset, SyntheticConfig};
use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "bcsam", version, about = "Cross-domain blood-cell classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan dataset roots into a manifest and assign stratified folds.
    Ingest(PipelineArgs),
    /// Fine-tune the segmentation backbone's adapters on the annotated subset.
    FinetuneSeg(PipelineArgs),
    /// Embed, segment and crop every image into the embedding store.
    Embed(PipelineArgs),
    /// Train the cross-domain autoencoder on the embedding store.
    TrainAe(PipelineArgs),
    /// Encode every image to its latent feature vector.
    Features(PipelineArgs),
    /// Run the cross-domain protocol for each classifier.
    Evaluate(EvaluateArgs),
    /// Render report.json as a markdown table.
    Report(ReportArgs),
    /// All stages in order.
    RunAll(PipelineArgs),
    /// Write a synthetic two-domain dataset with masks.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// JSON pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Backbone variant: vit_b, vit_l, vit_h, tiny or stub.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    masks_root: Option<PathBuf>,
    #[arg(long)]
    label_map: Option<PathBuf>,
    /// Root of the Matek-19 images (`<root>/<label>/<file>`).
    #[arg(long)]
    matek19: Option<PathBuf>,
    /// Root of the Acevedo-20 images.
    #[arg(long)]
    acevedo20: Option<PathBuf>,
    #[arg(long)]
    epochs_seg: Option<usize>,
    #[arg(long)]
    epochs_ae: Option<usize>,
    #[arg(long)]
    batch_ae: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated classifier families.
    #[arg(long, value_delimiter = ',')]
    classifiers: Option<Vec<String>>,
    #[arg(long)]
    k: Option<usize>,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut datasets = std::collections::BTreeMap::new();
        if let Some(p) = &self.matek19 {
            datasets.insert(DomainId::Matek19, p.clone());
        }
        if let Some(p) = &self.acevedo20 {
            datasets.insert(DomainId::Acevedo20, p.clone());
        }
        let flags = Overrides {
            output_dir: self.output_dir.clone(),
            seed: self.seed,
            backbone: self.backbone.clone(),
            weights: self.weights.clone(),
            masks_root: self.masks_root.clone(),
            label_map: self.label_map.clone(),
            datasets,
            epochs_seg: self.epochs_seg,
            epochs_ae: self.epochs_ae,
            batch_ae: self.batch_ae,
            lambda: self.lambda,
            classifiers: self.classifiers.clone(),
            k: self.k,
        };
        PipelineConfig::resolve(self.config.as_deref(), &flags)
    }

    /// Resolved config with its snapshot written.
    fn prepare(&self) -> Result<PipelineConfig> {
        let cfg = self.resolve()?;
        let snap = cfg.write_snapshot()?;
        log::info!("stage=config step=snapshot path={}", snap.display());
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Source-domain feature CSV; switches to single-direction file mode.
    #[arg(long, requires_all = ["features_tgt", "folds", "out"])]
    features_src: Option<PathBuf>,
    #[arg(long, requires = "features_src")]
    features_tgt: Option<PathBuf>,
    /// Fold assignment of the source domain.
    #[arg(long, requires = "features_src")]
    folds: Option<PathBuf>,
    /// Classifier families, comma-separated; defaults to the configured list.
    #[arg(long, value_delimiter = ',')]
    spec: Option<Vec<String>>,
    #[arg(long, requires = "features_src")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// report.json to render instead of the run directory's.
    #[arg(long, requires = "out")]
    report: Option<PathBuf>,
    #[arg(long, requires = "report")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    #[arg(long, default_value_t = 224)]
    side: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, rec| writeln!(buf, "{} {}", rec.level(), rec.args()))
        .try_init();
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let Some(src) = &args.features_src else {
        if args.spec.is_some() {
            bail!("--spec applies to file mode; use --classifiers for the pipeline");
        }
        return stages::evaluate(&args.pipeline.prepare()?);
    };
    let (Some(tgt), Some(folds), Some(out)) = (&args.features_tgt, &args.folds, &args.out) else {
        bail!("file mode needs --features-tgt, --folds and --out");
    };
    let mut cfg = args.pipeline.resolve()?;
    if let Some(names) = &args.spec {
        cfg.classifiers = names.iter().map(|n| config::ClassifierEntry::Name(n.clone())).collect();
    }
    let specs: Vec<ClassifierSpec> = cfg.specs()?;
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(std::path::Path::new("."));
    cfg.output_dir = out_dir.to_path_buf();
    cfg.write_snapshot()?;
    stages::evaluate_files(src, tgt, folds, &specs, cfg.training.seed, out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => stages::ingest(&a.prepare()?),
        Command::FinetuneSeg(a) => stages::finetune_seg(&a.prepare()?),
        Command::Embed(a) => stages::embed(&a.prepare()?),
        Command::TrainAe(a) => stages::train_ae(&a.prepare()?),
        Command::Features(a) => stages::features(&a.prepare()?),
        Command::Evaluate(a) => evaluate(&a),
        Command::Report(a) => match (&a.report, &a.out) {
            (Some(input), Some(out)) => stages::report_files(input, out),
            _ => stages::report(&a.pipeline.prepare()?),
        },
        Command::RunAll(a) => stages::run_all(&a.prepare()?),
        Command::Synth(a) => {
            let cfg = SyntheticConfig {
                per_class: a.per_class,
                side: a.side,
                seed: a.seed,
                noise: a.noise,
            };
            let ds = write_synthetic_dataset(&a.out, &cfg)?;
            log::info!(
                "stage=synth step=done out={} classes={} per_class={}",
                ds.root.display(),
                ds.classes.len(),
                a.per_class
            );
            Ok(())
        }
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit status: 0 on success, 1 on a failed stage, 2 on bad usage.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
