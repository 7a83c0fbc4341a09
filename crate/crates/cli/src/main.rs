//! Command-line interface: scene synthesis, feature extraction, scaler
//! fitting, training, evaluation, inference, and dataset reports.
//!
//! Exit codes: 0 success, 1 user error (bad input, bad config), 2 internal
//! error.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use seldde_core::codec::DistanceScaler;
use seldde_core::features::StftConfig;
use seldde_core::io::{load_metadata_csv, write_foa_wav, write_metadata_csv, DistanceUnit};
use seldde_core::pipeline::{self, Manifest, ManifestEntry, TrainConfig, CACHE_DIR_ENV};
use seldde_core::synth::{synth_scene, SceneConfig};
use seldde_core::types::SourceTag;
use seldde_core::Error;

#[derive(Parser)]
#[command(
    name = "seldde",
    about = "Sound event localization, detection, and distance estimation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic FOA scenes with exact ground truth
    Synth(SynthArgs),
    /// Extract features for every clip in a manifest into the cache
    Extract(ExtractArgs),
    /// Fit the distance scaler from manifest ground truth
    FitScaler(FitScalerArgs),
    /// Train a model from a JSON config
    Train(TrainArgs),
    /// Evaluate a checkpoint against a labeled manifest
    Evaluate(EvaluateArgs),
    /// Run a checkpoint over one WAV file and write a prediction CSV
    Infer(InferArgs),
    /// Render distance-distribution histograms and summary tables
    Report(ReportArgs),
}

fn parse_unit(s: &str) -> Result<DistanceUnit, Error> {
    s.parse()
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for WAV/CSV pairs and the manifest
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    num_clips: usize,
    #[arg(long, default_value_t = 13)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    events_per_clip: usize,
    #[arg(long, default_value_t = 5.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 3)]
    max_polyphony: usize,
    #[arg(long, default_value_t = 0.5)]
    distance_min: f64,
    #[arg(long, default_value_t = 6.5)]
    distance_max: f64,
    /// Manifest name (defaults to the output directory name)
    #[arg(long)]
    name: Option<String>,
    /// Tag the generated clips as real recordings (exercises the
    /// fine-tuning and channel-swap paths)
    #[arg(long, default_value_t = false)]
    tag_real: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Feature cache directory (falls back to SELDDE_CACHE_DIR, then ./cache)
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value = "m", value_parser = parse_unit)]
    distance_unit: DistanceUnit,
}

#[derive(Args)]
struct FitScalerArgs {
    /// One or more labeled manifests
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// Output JSON path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "m", value_parser = parse_unit)]
    distance_unit: DistanceUnit,
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration JSON
    #[arg(long)]
    config: PathBuf,
    /// Write a default configuration template and exit
    #[arg(long, default_value_t = false)]
    emit_template: bool,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's epoch count
    #[arg(long)]
    epochs: Option<usize>,
    /// Force single-stream, bit-reproducible execution
    #[arg(long, default_value_t = false)]
    deterministic: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Metrics JSON output path
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value = "m", value_parser = parse_unit)]
    distance_unit: DistanceUnit,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    /// Prediction CSV output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more manifests to compare
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// Output directory for SVG/CSV files
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "m", value_parser = parse_unit)]
    distance_unit: DistanceUnit,
}

fn resolve_cache_dir(cli: Option<PathBuf>) -> PathBuf {
    cli.or_else(|| std::env::var(CACHE_DIR_ENV).ok().filter(|s| !s.is_empty()).map(Into::into))
        .unwrap_or_else(|| PathBuf::from("cache"))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(args) => synth(args),
        Command::Extract(args) => extract(args),
        Command::FitScaler(args) => fit_scaler(args),
        Command::Train(args) => train(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Infer(args) => infer(args),
        Command::Report(args) => report(args),
    }
}

fn synth(args: SynthArgs) -> Result<(), Error> {
    std::fs::create_dir_all(&args.out)?;
    let name = args.name.unwrap_or_else(|| {
        args.out
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "synth".into())
    });
    let base_config = SceneConfig {
        duration_s: args.duration,
        num_events: args.events_per_clip,
        class_weights: vec![1.0 / args.classes as f64; args.classes],
        distance_range_m: (args.distance_min, args.distance_max),
        max_polyphony: args.max_polyphony,
        snr_db: args.snr_db,
        seed: args.seed,
    };
    base_config.validate()?;
    let source = if args.tag_real { SourceTag::Real } else { SourceTag::Synthetic };
    let mut entries = Vec::new();
    for i in 0..args.num_clips {
        let config = SceneConfig { seed: args.seed.wrapping_add(i as u64), ..base_config.clone() };
        let (clip, events) = synth_scene(&config)?;
        let wav = format!("scene_{i:03}.wav");
        let csv = format!("scene_{i:03}.csv");
        write_foa_wav(&args.out.join(&wav), &clip)?;
        write_metadata_csv(&args.out.join(&csv), &events)?;
        entries.push(ManifestEntry { wav: wav.into(), csv: csv.into(), source });
    }
    let manifest =
        Manifest { name, seed: Some(args.seed), scene_config: Some(base_config), entries };
    let path = args.out.join("manifest.json");
    manifest.save(&path)?;
    println!("wrote {} clips and {}", args.num_clips, path.display());
    Ok(())
}

fn extract(args: ExtractArgs) -> Result<(), Error> {
    let manifest = Manifest::load(&args.manifest)?;
    let cache = resolve_cache_dir(args.cache_dir);
    let ds =
        pipeline::load_dataset(&manifest, &StftConfig::default(), &cache, args.distance_unit)?;
    println!(
        "extracted {} segments from {} clips into {}",
        ds.items.len(),
        manifest.entries.len(),
        cache.display()
    );
    Ok(())
}

fn fit_scaler(args: FitScalerArgs) -> Result<(), Error> {
    let mut distances = Vec::new();
    for path in &args.manifest {
        let manifest = Manifest::load(path)?;
        for entry in &manifest.entries {
            let events = load_metadata_csv(&entry.csv, args.distance_unit)?;
            distances.extend(events.events.iter().map(|e| e.distance_m));
        }
    }
    let scaler = DistanceScaler::fit(&distances)?;
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&scaler)?)?;
    println!(
        "fitted scaler from {} distances: mean {:.4} m, std {:.4} m -> {}",
        distances.len(),
        scaler.mean_m,
        scaler.std_m,
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Error> {
    if args.emit_template {
        let template = TrainConfig {
            train_synth_manifest: Some(PathBuf::from("data/synth/manifest.json")),
            train_real_manifest: Some(PathBuf::from("data/real/manifest.json")),
            validation_manifest: PathBuf::from("data/val/manifest.json"),
            ..TrainConfig::default()
        };
        template.save(&args.config)?;
        println!("wrote template config to {}", args.config.display());
        return Ok(());
    }
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    let outcome = pipeline::train(&cfg)?;
    println!(
        "best validation F20 {:.4} ({} epoch {}); checkpoint at {}",
        outcome.best_f20,
        outcome.best_stage,
        outcome.best_epoch,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), Error> {
    let cache = resolve_cache_dir(args.cache_dir);
    let metrics =
        pipeline::evaluate(&args.checkpoint, &args.manifest, &cache, args.distance_unit)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn infer(args: InferArgs) -> Result<(), Error> {
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let events = pipeline::infer(&args.checkpoint, &args.wav, &args.out)?;
    println!("wrote {} events to {}", events.len(), args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Error> {
    let files = pipeline::report(&args.manifest, &args.out, args.distance_unit)?;
    println!("wrote {}", files.histogram_svg.display());
    for csv in &files.histogram_csvs {
        println!("wrote {}", csv.display());
    }
    println!("wrote {}", files.summary_csv.display());
    Ok(())
}

/// 1 for errors traceable to user input, 2 for internal failures.
fn classify(err: &Error) -> u8 {
    match err {
        Error::Io(_)
        | Error::Wav(_)
        | Error::Format(_)
        | Error::Parse { .. }
        | Error::Validation(_)
        | Error::Precondition(_)
        | Error::ScalerFit(_)
        | Error::Config(_)
        | Error::Checkpoint(_)
        | Error::Generation(_)
        | Error::Json(_) => 1,
        Error::Diverged(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(classify(&err))
        }
    }
}
