//! Command-line front end: polar warping, synthetic data generation,
//! contrastive pretraining, frozen-backbone fine-tuning, evaluation,
//! feature export, and the built-in numeric audits, all as reproducible
//! file-based artifacts.
//!
//! Conventions: no subcommand mutates its inputs; results land at the
//! `--out`/`--output` paths; progress goes to standard error and
//! machine-readable output to files or standard output. The same
//! arguments and seed always produce byte-identical artifacts. Exit
//! codes: 0 on success, 1 for a usage error (bad or missing flags),
//! 2 for a runtime failure or a failed audit.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use poco::contrastive::FeatureSource;
use poco::error::{Error, Result};
use poco::gradcheck::{check_model_gradients, GradCheckOptions};
use poco::metrics::embed_export;
use poco::model::Model;
use poco::pipeline::{
    evaluate_checkpoint, feature_matrix, finetune, load_checkpoint, pretrain, save_checkpoint,
    write_val_curve, TrainConfig,
};
use poco::polar::{warp_to_polar, PolarGrid};
use poco::selfcheck;
use poco::synth::{
    generate_dataset, load_dataset, load_image_dir, read_png, save_dataset, write_png, LabeledSet,
    LoadedDir, SynthConfig, UnlabeledSet,
};
use poco::tensor::Tensor;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
/// `gradcheck` pass bars on the guarded relative error.
const GRADCHECK_MAX_TOL: f64 = 1e-3;
const GRADCHECK_MEDIAN_TOL: f64 = 1e-6;

/// Polar-transformation contrastive pretraining toolkit.
#[derive(Parser)]
#[command(name = "poco", version, about, long_about = None)]
struct Cli {
    /// More progress detail on standard error (-v debug, -vv trace)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Polar-warp a single image
    Warp(WarpArgs),
    /// Generate a synthetic annular-image dataset
    Synth(SynthArgs),
    /// Self-supervised contrastive pretraining on unlabeled images
    Pretrain(PretrainArgs),
    /// Frozen-backbone fine-tuning on a labeled dataset
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint and write a metrics report
    Eval(EvalArgs),
    /// Export per-image features, with a 2-D PCA projection, to CSV
    Embed(EmbedArgs),
    /// Audit analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Run the built-in verification battery
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct WarpArgs {
    /// Source image (PNG or JPEG, square)
    #[arg(long)]
    input: PathBuf,
    /// Destination PNG
    #[arg(long, visible_alias = "out")]
    output: PathBuf,
    /// Outer sampling radius in pixels (default: half the image side)
    #[arg(long)]
    rmax: Option<f64>,
    /// Output width and height (default: the input side)
    #[arg(long)]
    out_size: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root directory to create
    #[arg(long)]
    out: PathBuf,
    /// Generation parameters as JSON (built-in defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true)))]
struct PretrainArgs {
    /// Unlabeled images: a dataset root (its pretrain split) or any
    /// folder of images
    #[arg(long, group = "source")]
    data: Option<PathBuf>,
    /// Generate the training pool in memory instead of reading --data
    #[arg(long, group = "source")]
    synth: bool,
    /// Generation parameters for --synth (defaults when omitted)
    #[arg(long, conflicts_with = "data")]
    synth_config: Option<PathBuf>,
    /// Training configuration JSON
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint destination
    #[arg(long)]
    out: PathBuf,
    /// Per-batch loss table (default: --out with a .loss.csv suffix)
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Override the seed from --config
    #[arg(long)]
    seed: Option<u64>,
    /// Override the view-preparation thread count (never changes results)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pretrained checkpoint to start from; omit to probe a random
    /// initialization (the no-pretraining baseline)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset root holding finetune-train and finetune-val splits
    #[arg(long)]
    data: PathBuf,
    /// Training configuration JSON
    #[arg(long)]
    config: PathBuf,
    /// Fine-tuned checkpoint destination
    #[arg(long)]
    out: PathBuf,
    /// Validation-accuracy curve (default: --out with a .val.csv suffix)
    #[arg(long)]
    val_csv: Option<PathBuf>,
    /// Override the seed from --config
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Fine-tuned checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root (scores its test split) or a flat image directory
    /// (needs --labels)
    #[arg(long)]
    data: PathBuf,
    /// Label table, one `filename,label` row per image, for a flat
    /// --data directory
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Metrics report (JSON) destination
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// Checkpoint (pretrained or fine-tuned)
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root (its test split) or a flat image directory
    #[arg(long)]
    data: PathBuf,
    /// Label table for a flat --data directory (labels default to 0)
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Embedding CSV destination
    #[arg(long)]
    out: PathBuf,
    /// Which feature to export
    #[arg(long, value_enum, default_value_t = StageArg::F)]
    stage: StageArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    /// pooled backbone output
    F,
    /// first projection head
    H1,
    /// second projection head
    H2,
}

impl StageArg {
    fn source(self) -> FeatureSource {
        match self {
            StageArg::F => FeatureSource::F,
            StageArg::H1 => FeatureSource::H1,
            StageArg::H2 => FeatureSource::H2,
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the audited network and batch
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Anchor count, a multiple of 4 (4 leaves the last stage without
    /// negatives)
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Also write the report to a file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Also write the table to a file
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap routes help/version to stdout and usage errors to
            // stderr by itself
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        // an audit ran to completion and reported a failed verdict
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Warp(a) => run_warp(&a).map(|()| true),
        Command::Synth(a) => run_synth(&a).map(|()| true),
        Command::Pretrain(a) => run_pretrain(&a).map(|()| true),
        Command::Finetune(a) => run_finetune(&a).map(|()| true),
        Command::Eval(a) => run_eval(&a).map(|()| true),
        Command::Embed(a) => run_embed(&a).map(|()| true),
        Command::Gradcheck(a) => run_gradcheck(&a),
        Command::Selfcheck(a) => run_selfcheck(&a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn run_warp(a: &WarpArgs) -> Result<()> {
    let img = read_png(&a.input)?;
    if img.width() != img.height() {
        return Err(Error::Data(format!(
            "{}: {}x{} input, the polar warp needs a square image",
            a.input.display(),
            img.width(),
            img.height()
        )));
    }
    let side = img.width();
    let n = a.out_size.unwrap_or(side);
    let grid = match a.rmax {
        Some(r) => PolarGrid::with_rmax(side, n, n, r)?,
        None => PolarGrid::new(side, n, n)?,
    };
    let warped = warp_to_polar(&grid, &img)?;
    write_png(&warped, &a.output)?;
    eprintln!(
        "warped {} ({side}x{side}) -> {} ({n}x{n}, r_max {:.1} px)",
        a.input.display(),
        a.output.display(),
        grid.radial_spacing() * n as f64
    );
    Ok(())
}

fn load_synth_config(path: Option<&Path>) -> Result<SynthConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => SynthConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let cfg = load_synth_config(a.config.as_deref())?;
    let ds = generate_dataset(&cfg, a.seed)?;
    save_dataset(&ds, &cfg, a.seed, &a.out)?;
    eprintln!(
        "wrote {}: {} classes at {} px; {} pretrain / {} train / {} val / {} test images",
        a.out.display(),
        ds.num_classes,
        cfg.image_size,
        ds.pretrain.len(),
        ds.finetune_train.len(),
        ds.finetune_val.len(),
        ds.test.len()
    );
    Ok(())
}

/// A dataset root (anything with a manifest) contributes its pretrain
/// split; any other directory is read as a flat unlabeled pool.
fn load_unlabeled(dir: &Path, input_size: usize) -> Result<UnlabeledSet> {
    if dir.join("manifest.json").exists() {
        let (ds, _) = load_dataset(dir)?;
        eprintln!("loaded {} (pretrain split: {} images)", dir.display(), ds.pretrain.len());
        Ok(ds.pretrain)
    } else {
        match load_image_dir(dir, None, input_size)? {
            LoadedDir::Unlabeled(set) => {
                eprintln!("loaded {} images from {}", set.len(), dir.display());
                Ok(set)
            }
            LoadedDir::Labeled { .. } => unreachable!("no label table was passed"),
        }
    }
}

fn source_name(source: FeatureSource) -> &'static str {
    match source {
        FeatureSource::F => "f",
        FeatureSource::H1 => "h1",
        FeatureSource::H2 => "h2",
    }
}

fn run_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_json_file(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = a.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;

    let data = match &a.data {
        Some(dir) => load_unlabeled(dir, cfg.model.input_size)?,
        None => {
            let synth_cfg = load_synth_config(a.synth_config.as_deref())?;
            eprintln!(
                "generating {} synthetic pretraining images (seed {})",
                synth_cfg.counts.pretrain, cfg.seed
            );
            generate_dataset(&synth_cfg, cfg.seed)?.pretrain
        }
    };

    let plans = cfg.stage_plans()?;
    eprintln!(
        "stage plan: {}/{}/{} negatives on {}/{}/{}",
        plans[0].n_neg,
        plans[1].n_neg,
        plans[2].n_neg,
        source_name(plans[0].source),
        source_name(plans[1].source),
        source_name(plans[2].source)
    );
    eprintln!(
        "pretraining on {} images: {} epochs, batch {}, polar {}, pcl {}",
        data.len(),
        cfg.epochs,
        cfg.batch_size,
        if cfg.use_polar { "on" } else { "off" },
        if cfg.use_pcl { "on" } else { "off" }
    );

    let (ckpt, history) = pretrain::<f32>(&cfg, &data)?;
    save_checkpoint(&ckpt, &a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("loss.csv"));
    history.write_csv(&csv)?;
    eprintln!("wrote {} (hash {}) and {}", a.out.display(), ckpt.hash_hex()?, csv.display());
    Ok(())
}

fn run_finetune(a: &FinetuneArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_json_file(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let base = match &a.ckpt {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    if !a.data.join("manifest.json").exists() {
        return Err(Error::Data(format!(
            "{}: fine-tuning needs a dataset root (see `poco synth`) with \
             finetune-train and finetune-val splits",
            a.data.display()
        )));
    }
    let (ds, _) = load_dataset(&a.data)?;
    eprintln!(
        "fine-tuning {} on {} train / {} val images, {} epochs",
        if base.is_some() { "the pretrained backbone" } else { "a random initialization" },
        ds.finetune_train.len(),
        ds.finetune_val.len(),
        cfg.epochs
    );

    let (ckpt, curve) = finetune::<f32>(base.as_ref(), &cfg, &ds.finetune_train, &ds.finetune_val)?;
    save_checkpoint(&ckpt, &a.out)?;
    let csv = a.val_csv.clone().unwrap_or_else(|| a.out.with_extension("val.csv"));
    write_val_curve(&curve, &csv)?;
    eprintln!(
        "best validation accuracy {:.4} at epoch {}; wrote {} and {}",
        ckpt.meta.best_val_accuracy.unwrap_or(f64::NAN),
        ckpt.meta.epoch,
        a.out.display(),
        csv.display()
    );
    Ok(())
}

/// A dataset root contributes its test split; a flat directory needs the
/// label table.
fn load_labeled(dir: &Path, labels: Option<&Path>, input_size: usize) -> Result<LabeledSet> {
    if dir.join("manifest.json").exists() {
        let (ds, _) = load_dataset(dir)?;
        eprintln!("loaded {} (test split: {} images)", dir.display(), ds.test.len());
        Ok(ds.test)
    } else {
        match load_image_dir(dir, labels, input_size)? {
            LoadedDir::Labeled { set, .. } => Ok(set),
            LoadedDir::Unlabeled(_) => Err(Error::Data(format!(
                "{}: scoring needs labels; pass --labels <csv> or point --data at a dataset root",
                dir.display()
            ))),
        }
    }
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = load_labeled(&a.data, a.labels.as_deref(), ckpt.meta.model.input_size)?;
    let output = evaluate_checkpoint::<f32>(&ckpt, &data)?;
    output.write_json(&a.out)?;
    let auc = output.report.auc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "accuracy {:.4}, macro F1 {:.4}, AUC {auc} on {} images; wrote {}",
        output.report.accuracy,
        output.report.macro_f1,
        data.len(),
        a.out.display()
    );
    Ok(())
}

fn run_embed(a: &EmbedArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let mut model = Model::<f32>::new(ckpt.meta.model.clone(), 0)?;
    model.load_named(&ckpt.tensors)?;

    let (images, labels) = if a.data.join("manifest.json").exists() {
        let (ds, _) = load_dataset(&a.data)?;
        eprintln!("loaded {} (test split: {} images)", a.data.display(), ds.test.len());
        (ds.test.images().to_vec(), ds.test.labels().to_vec())
    } else {
        match load_image_dir(&a.data, a.labels.as_deref(), ckpt.meta.model.input_size)? {
            LoadedDir::Labeled { set, .. } => (set.images().to_vec(), set.labels().to_vec()),
            LoadedDir::Unlabeled(set) => {
                let n = set.len();
                (set.images, vec![0usize; n])
            }
        }
    };

    let feats = feature_matrix::<f32>(&model, &images, ckpt.meta.use_polar, a.stage.source())?;
    let wide: Vec<f64> = feats.data().iter().map(|&v| f64::from(v)).collect();
    let feats64 = Tensor::new(feats.shape().to_vec(), wide)?;
    embed_export(&feats64, &labels, &a.out)?;
    eprintln!(
        "wrote {} ({} rows, {} feature dims plus the 2-D projection)",
        a.out.display(),
        feats.shape()[0],
        feats.shape()[1]
    );
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    eprintln!("auditing gradients (batch {}, seed {})", a.batch, a.seed);
    let report = check_model_gradients(a.batch, a.seed, &GradCheckOptions::default())?;
    let passed = report.passes(GRADCHECK_MAX_TOL, GRADCHECK_MEDIAN_TOL);
    let mut text = format!(
        "checked {} coordinates ({} skipped at activation kinks)\n\
         max relative error    {:.3e} (tolerance {GRADCHECK_MAX_TOL:.0e})\n\
         median relative error {:.3e} (tolerance {GRADCHECK_MEDIAN_TOL:.0e})\n",
        report.checked, report.skipped, report.max_rel_err, report.median_rel_err
    );
    if let Some((name, coord)) = &report.worst {
        text.push_str(&format!("largest deviation at {name}[{coord}]\n"));
    }
    text.push_str(if passed { "PASS\n" } else { "FAIL\n" });
    print!("{text}");
    if let Some(path) = &a.out {
        write_text(path, &text)?;
    }
    Ok(passed)
}

fn run_selfcheck(a: &SelfcheckArgs) -> Result<bool> {
    let results = selfcheck::run_all();
    let mut text = String::new();
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        text.push_str(&format!("{verdict}  {:<26}  {}\n", r.name, r.detail));
    }
    let n_pass = results.iter().filter(|r| r.passed).count();
    text.push_str(&format!("{n_pass}/{} checks passed\n", results.len()));
    print!("{text}");
    if let Some(path) = &a.out {
        write_text(path, &text)?;
    }
    Ok(selfcheck::all_passed(&results))
}
