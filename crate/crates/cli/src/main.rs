//! `gcgvt` command line: synthesize datasets, aggregate geo layers onto
//! patch grids, train and evaluate the guided-attention models, run the
//! ablation table, and export attention explanations.
//!
//! Exit codes: 0 success, 1 usage/config, 2 data/format, 3 numeric
//! failure. `GCGVT_THREADS` caps the worker count; outputs are
//! byte-identical across runs for identical inputs and seeds.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gcgvt_core::data::{load_dataset, split, Dataset, SplitSpec};
use gcgvt_core::error::{Error, Result};
use gcgvt_core::explain::{build_report, render_report_overlays};
use gcgvt_core::geo::{aggregate, GeoLayerSet, PatchGrid};
use gcgvt_core::model::{
    forward, prepare_samples, Checkpoint, ForwardOptions, ModelConfig, Sample, Variant,
};
use gcgvt_core::synth::{generate_synthetic, SynthConfig};
use gcgvt_core::train::{
    ablation_suite, evaluate, train, AblationRow, MetricsReport, TrainConfig, TrainSetup,
};

#[derive(Parser)]
#[command(name = "gcgvt", version, about = "Geo-context guided visual transformer, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted image/geo/area signal.
    Synth(SynthArgs),
    /// Aggregate a geo layer file onto a patch grid and export CSV.
    Aggregate(AggregateArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the ablation comparison table on one outcome.
    Ablate(AblateArgs),
    /// Export head-weight rankings and attention-map overlays.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian noise level of the target formulas.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 8)]
    patch_size: usize,
    /// Area extent as a multiple of the local extent.
    #[arg(long, default_value_t = 2)]
    area_factor: usize,
}

#[derive(Args)]
struct AggregateArgs {
    /// Geo layer JSON file.
    #[arg(long)]
    geo: PathBuf,
    /// Square patch size in pixels; must tile the layer extent.
    #[arg(long)]
    patch_size: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Architecture variant: A, G, L, or vit.
    #[arg(long, default_value = "G")]
    variant: String,
    /// Model preset: desk or paper.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Optional JSON config file with "model" and/or "train" sections;
    /// CLI flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run with all head gates pinned to 1 (image-only ablation mode).
    #[arg(long, default_value_t = false)]
    disable_head_weights: bool,
    /// Keep only these geo categories (comma separated); others zeroed.
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    /// Zero all image inputs (geo-only setting).
    #[arg(long, default_value_t = false)]
    zero_image: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Train a single-outcome model on this outcome name.
    #[arg(long)]
    single_outcome: Option<String>,
    /// Output directory for checkpoint.json, history.jsonl, metrics.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Split seed (must match the one used at training time).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    single_outcome: Option<String>,
    #[arg(long, default_value_t = false)]
    zero_image: bool,
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    /// Optional metrics JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Outcome to ablate on (defaults to the first outcome).
    #[arg(long)]
    outcome: Option<String>,
    /// Number of seeds (0..n).
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    eval_every: usize,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Sample ids (comma separated); defaults to the first sample.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_thread_pool();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("GCGVT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Aggregate(args) => cmd_aggregate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Explain(args) => cmd_explain(args),
    }
}

// ── synth ───────────────────────────────────────────────────────────────

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_samples: args.n,
        image_size: args.image_size,
        patch_size: args.patch_size,
        area_factor: args.area_factor,
        sigma: args.sigma,
        seed: args.seed,
    };
    let output = generate_synthetic(&cfg)?;
    if output.clamp_fraction >= 0.01 {
        eprintln!(
            "warning: {:.2}% of targets hit the [0, 100] clamp; consider lowering sigma",
            output.clamp_fraction * 100.0
        );
    }
    let manifest = output.write(&args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

// ── aggregate ───────────────────────────────────────────────────────────

fn cmd_aggregate(args: AggregateArgs) -> Result<()> {
    let layers = GeoLayerSet::load(&args.geo)?;
    let (w, h) = (layers.image_extent[0], layers.image_extent[1]);
    if w.fract() != 0.0 || h.fract() != 0.0 {
        return Err(Error::Config(format!("extent {w}x{h} must be integral pixels")));
    }
    let grid = PatchGrid::square(w as usize, h as usize, args.patch_size)?;
    if layers.categories.iter().all(|c| c.polygons.is_empty()) {
        eprintln!("warning: geo layer file has no polygons; all values will be zero");
    }
    let matrix = aggregate(&layers, &grid)?;
    let low_coverage =
        matrix.coverage.iter().filter(|&&c| c < 0.5).count() as f64 / matrix.n_patches() as f64;
    if low_coverage > 0.1 {
        eprintln!(
            "warning: {:.0}% of patches have coverage below 0.5",
            low_coverage * 100.0
        );
    }
    std::fs::write(&args.out, matrix.to_csv())?;
    println!("{}", args.out.display());
    Ok(())
}

// ── shared config assembly ──────────────────────────────────────────────

#[derive(Deserialize, Default)]
struct FileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn load_file_config(path: Option<&PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        }
    }
}

fn model_config_for(dataset: &Dataset, flags: &ModelFlags, seed: u64) -> Result<ModelConfig> {
    let variant: Variant = flags.variant.parse()?;
    let file = load_file_config(flags.config.as_ref())?;
    let mut cfg = match file.model {
        Some(m) => m,
        None => match flags.preset.as_str() {
            "desk" => ModelConfig::desk(variant),
            "paper" => ModelConfig::paper(variant),
            other => return Err(Error::Usage(format!("unknown preset {other:?} (desk|paper)"))),
        },
    };
    cfg.variant = variant;
    cfg.seed = seed;
    if flags.disable_head_weights {
        cfg.head_weights_enabled = false;
    }
    // The dataset drives the schema: categories, outcomes, image size.
    if !dataset.categories.is_empty() {
        cfg.categories = dataset
            .categories
            .iter()
            .map(|c| gcgvt_core::model::CategorySpec { name: c.name.clone(), n_vars: c.variables.len() })
            .collect();
    }
    cfg.n_outcomes = dataset.outcomes.len();
    if let Some(rec) = dataset.records.first() {
        let img = &rec.local_image;
        if img.width != img.height {
            return Err(Error::Config(format!(
                "local images must be square, got {}x{}",
                img.width, img.height
            )));
        }
        cfg.image_size = img.width;
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn forward_options(flags: &ModelFlags) -> ForwardOptions {
    ForwardOptions {
        zero_image: flags.zero_image,
        restrict_categories: (!flags.categories.is_empty()).then(|| flags.categories.clone()),
        ..Default::default()
    }
}

fn split_dataset(dataset: &Dataset, seed: u64) -> Result<SplitSpec> {
    split(&dataset.ids(), seed)
}

fn print_report(report: &MetricsReport) {
    for (name, r2) in &report.per_outcome {
        println!("{} {name}: R2 = {r2:.4}", report.split);
    }
    println!("{} mean: {:.4} +/- {:.4}", report.split, report.mean, report.std);
}

// ── train ───────────────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.manifest)?;
    if dataset.records.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let model_config = model_config_for(&dataset, &args.model, args.seed)?;

    let file = load_file_config(args.model.config.as_ref())?;
    let mut train_config = file.train.unwrap_or_default();
    train_config.seed = args.seed;
    if let Some(e) = args.epochs {
        train_config.epochs = e;
    }
    if let Some(b) = args.batch_size {
        train_config.batch_size = b;
    }
    if let Some(lr) = args.lr {
        train_config.learning_rate = lr;
    }
    if let Some(ev) = args.eval_every {
        train_config.eval_every = ev;
    }

    let split_spec = split_dataset(&dataset, args.seed)?;
    let samples = prepare_samples(&dataset, &model_config)?;
    let outcome = match &args.single_outcome {
        Some(name) => Some(dataset.outcome_index(name)?),
        None => None,
    };
    let setup = TrainSetup {
        samples: &samples,
        split: &split_spec,
        outcome_names: dataset.outcomes.clone(),
        outcome,
        opts: forward_options(&args.model),
    };
    let result = train(&setup, &model_config, &train_config)?;

    std::fs::create_dir_all(&args.out)?;
    result.best.save(&args.out.join("checkpoint.json"))?;
    let mut history = String::new();
    for rec in &result.history {
        history.push_str(&serde_json::to_string(rec).map_err(fmt_err)?);
        history.push('\n');
    }
    std::fs::write(args.out.join("history.jsonl"), history)?;
    let best_val = result
        .history
        .iter()
        .find(|r| r.epoch == result.best_epoch)
        .map(|r| r.val.clone());
    let metrics = serde_json::json!({
        "best_epoch": result.best_epoch,
        "split_seed": args.seed,
        "best_val": best_val,
        "test": result.test,
    });
    std::fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).map_err(fmt_err)?,
    )?;
    std::fs::write(
        args.out.join("split.json"),
        serde_json::to_string_pretty(&split_spec).map_err(fmt_err)?,
    )?;

    print_report(&result.test);
    println!("checkpoint: {}", args.out.join("checkpoint.json").display());
    Ok(())
}

fn fmt_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

// ── eval ────────────────────────────────────────────────────────────────

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_dataset(&args.manifest)?;
    if dataset.outcomes.len() != ckpt.config.n_outcomes && args.single_outcome.is_none() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} outcomes but the dataset has {}",
            ckpt.config.n_outcomes,
            dataset.outcomes.len()
        )));
    }
    let params = ckpt.into_params()?;
    let split_spec = split_dataset(&dataset, args.seed)?;
    let samples = prepare_samples(&dataset, &ckpt.config)?;
    let ids = match args.split.as_str() {
        "train" => &split_spec.train,
        "val" => &split_spec.val,
        "test" => &split_spec.test,
        other => return Err(Error::Usage(format!("unknown split {other:?} (train|val|test)"))),
    };
    let picked: Vec<&Sample> = ids
        .iter()
        .filter_map(|id| samples.iter().find(|s| &s.id == id))
        .collect();
    let outcome = match &args.single_outcome {
        Some(name) => Some(dataset.outcome_index(name)?),
        None => None,
    };
    let opts = ForwardOptions {
        zero_image: args.zero_image,
        restrict_categories: (!args.categories.is_empty()).then(|| args.categories.clone()),
        ..Default::default()
    };
    let report = evaluate(
        &args.split,
        &picked,
        &dataset.outcomes,
        &ckpt.config,
        &params,
        &opts,
        outcome,
    )?;
    print_report(&report);
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report).map_err(fmt_err)?)?;
    }
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────────

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let dataset = load_dataset(&args.manifest)?;
    let model_config = model_config_for(&dataset, &args.model, args.seed)?;
    let outcome_index = match &args.outcome {
        Some(name) => dataset.outcome_index(name)?,
        None => 0,
    };
    let train_config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        eval_every: args.eval_every,
        seed: args.seed,
        ..Default::default()
    };
    let split_spec = split_dataset(&dataset, args.seed)?;
    let samples = prepare_samples(&dataset, &model_config)?;
    let rows = AblationRow::all(&model_config.categories[0].name);
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let table = ablation_suite(
        &samples,
        &split_spec,
        &dataset.outcomes,
        outcome_index,
        &model_config,
        &train_config,
        &rows,
        &seeds,
    )?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("comparison.csv"), table.to_csv())?;
    std::fs::write(args.out.join("comparison.md"), table.to_markdown())?;
    print!("{}", table.to_markdown());
    Ok(())
}

// ── explain ─────────────────────────────────────────────────────────────

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if !matches!(ckpt.config.variant, Variant::A | Variant::G) || !ckpt.config.head_weights_enabled
    {
        return Err(Error::Usage(format!(
            "explain needs head weights (variant A or G with gates enabled), checkpoint is {} ",
            ckpt.config.variant
        )));
    }
    let params = ckpt.into_params()?;
    let dataset = load_dataset(&args.manifest)?;
    if dataset.records.is_empty() {
        return Err(Error::Usage("dataset has no samples to explain".into()));
    }
    let ids: Vec<String> = if args.ids.is_empty() {
        vec![dataset.records[0].id.clone()]
    } else {
        args.ids.clone()
    };
    std::fs::create_dir_all(&args.out)?;

    let opts = ForwardOptions { collect_attention: true, ..Default::default() };
    for id in &ids {
        let record = dataset
            .record(id)
            .ok_or_else(|| Error::Usage(format!("sample {id:?} not found in the manifest")))?;
        let sample = gcgvt_core::model::prepare_sample(record, &ckpt.config)?;
        let (_, diag) = forward(&sample, &ckpt.config, &params, &opts)?;
        let report = build_report(id, &diag)?;

        std::fs::write(
            args.out.join(format!("{id}_report.json")),
            serde_json::to_string_pretty(&report).map_err(fmt_err)?,
        )?;
        std::fs::write(
            args.out.join(format!("{id}_diagnostics.json")),
            serde_json::to_string(&diag).map_err(fmt_err)?,
        )?;
        let files = render_report_overlays(&sample.local_image, &report, &diag, &args.out)?;

        println!("sample {id}:");
        for hr in &report.head_ranking {
            println!("  head weight: {}", hr.label);
        }
        println!(
            "  head-averaged top token: {} (row {}, col {})",
            report.head_averaged.token, report.head_averaged.row, report.head_averaged.col
        );
        println!("  overlays: {}", files.len());
    }
    Ok(())
}
