//! `histobof` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use histobof::bof::{kmeans_fit, DEFAULT_MAX_ITER, DEFAULT_TOL};
use histobof::features::{export_features, extract_records_features, import_features, FeatureStore};
use histobof::gradcheck::run_suite;
use histobof::harness::{emit_report, pivot_csv, run_grid_with, Report};
use histobof::patches::{dump_patches, Patch, PatchError, SamplingParams};
use histobof::synth::{generate_corpus, CorpusSpec, DegradationParams, DEFAULT_IMAGE_SIZE};
use histobof::{Manifest, Modality, WsiRecord};

use config::{env_seed, ConfigError, Extractor, RunConfig};

/// Largest tolerated relative error of the gradient checks.
const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "histobof",
    version,
    about = "Bag-of-features slide classification experiments"
)]
struct Cli {
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-class, two-modality corpus.
    Synth(SynthArgs),
    /// Sample patches and compute descriptors for every slide of a manifest.
    Features(FeaturesArgs),
    /// Fit a k-means codebook on stored descriptors.
    Codebook(CodebookArgs),
    /// Run the evaluation grid and write results.json and results.csv.
    Grid(GridArgs),
    /// Rebuild the CSV pivot table from a results JSON file.
    Report(ReportArgs),
    /// Finite-difference check of the translation loss gradients.
    LossesCheck(LossesArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Slides per class and modality.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    size: u32,
    /// Corpus seed (HISTOBOF_SEED applies when omitted) [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Frozen-section blur sigma in pixels.
    #[arg(long, default_value_t = DegradationParams::default().gaussian_blur_sigma)]
    blur: f64,
    /// Frozen-section additive noise sigma in 8-bit units.
    #[arg(long, default_value_t = DegradationParams::default().additive_noise_sigma)]
    noise: f64,
    /// Frozen-section contrast factor toward mid-gray.
    #[arg(long, default_value_t = DegradationParams::default().contrast_scale)]
    contrast: f64,
    /// Freezing holes per megapixel.
    #[arg(long, default_value_t = DegradationParams::default().hole_density)]
    hole_density: f64,
    /// Mean freezing hole radius in pixels.
    #[arg(long, default_value_t = DegradationParams::default().hole_radius_px)]
    hole_radius: f64,
}

#[derive(Args)]
struct SamplingArgs {
    /// Patches per slide.
    #[arg(long, default_value_t = histobof::patches::DEFAULT_PATCHES_PER_WSI)]
    n_patches: usize,
    /// Patch side in pixels.
    #[arg(long, default_value_t = histobof::patches::DEFAULT_PATCH_SIZE)]
    patch_size: u32,
    /// Minimum tissue fraction of an accepted patch.
    #[arg(long, default_value_t = histobof::patches::DEFAULT_MIN_COVERAGE)]
    min_coverage: f64,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output feature store.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Extractor::Handcrafted)]
    extractor: Extractor,
    /// Externally computed store to validate and copy (imported extractor).
    #[arg(long = "import")]
    import_path: Option<PathBuf>,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Patch-sampling seed (HISTOBOF_SEED applies when omitted) [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Also write every sampled patch as PNG plus an index CSV here.
    #[arg(long)]
    dump_patches: Option<PathBuf>,
}

#[derive(Args)]
struct CodebookArgs {
    #[arg(long)]
    feature_store: PathBuf,
    /// Restrict to slides of this modality listed in the manifest.
    #[arg(long, requires = "manifest")]
    modality: Option<Modality>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of centroids.
    #[arg(long, default_value_t = 32)]
    k: usize,
    /// k-means seed (HISTOBOF_SEED applies when omitted) [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    /// `key = value` configuration file; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, conflicts_with = "raw_images")]
    feature_store: Option<PathBuf>,
    /// Extract handcrafted descriptors from the manifest images.
    #[arg(long)]
    raw_images: bool,
    #[arg(long, value_enum)]
    extractor: Option<Extractor>,
    /// Output directory [default: results].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict the grid, e.g. `modality=paraffin,k=32,aug=aug1,clf=rbf`.
    #[arg(long)]
    only: Option<String>,
    /// Base seed (overrides HISTOBOF_SEED and the config file) [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Repetitions per cell [default: 32].
    #[arg(long)]
    repetitions: Option<usize>,
    /// Training fraction of each split [default: 0.8].
    #[arg(long)]
    train_ratio: Option<f64>,
    /// Patches per slide [default: 512].
    #[arg(long)]
    n_patches: Option<usize>,
    /// Patch side in pixels [default: 256].
    #[arg(long)]
    patch_size: Option<u32>,
    /// Minimum tissue fraction of an accepted patch [default: 0.75].
    #[arg(long)]
    min_coverage: Option<f64>,
    /// Inner cross-validation folds [default: 5].
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// results.json written by `grid`.
    #[arg(long)]
    results: PathBuf,
    /// Write results.csv here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LossesArgs {
    /// Random instances per loss term.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Seed (HISTOBOF_SEED applies when omitted) [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(ConfigError(msg.into()))
}

/// Flag, then environment, then `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, CliError> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(fallback),
    })
}

fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    if !path.is_file() {
        return Err(config_err(format!("manifest {} does not exist", path.display())));
    }
    Manifest::load(path).map_err(CliError::runtime)
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = CorpusSpec {
        n_per_class_per_modality: args.n,
        image_size: args.size,
        seed: resolve_seed(args.seed, 0)?,
        frozen_degradation: DegradationParams {
            gaussian_blur_sigma: args.blur,
            additive_noise_sigma: args.noise,
            contrast_scale: args.contrast,
            hole_density: args.hole_density,
            hole_radius_px: args.hole_radius,
        },
        ..CorpusSpec::default()
    };
    spec.validate().map_err(|e| config_err(e.to_string()))?;
    let manifest = generate_corpus(&spec, &args.out).map_err(CliError::runtime)?;
    println!("wrote {} images and {}", 4 * args.n, manifest.display());
    Ok(())
}

/// Handcrafted descriptors for `records`, optionally dumping the patches.
fn extract(
    manifest: &Manifest,
    records: &[&WsiRecord],
    params: &SamplingParams,
    seed: u64,
    dump: Option<&Path>,
) -> Result<FeatureStore, CliError> {
    let load =
        |r: &WsiRecord| -> Result<image::RgbImage, PatchError> { Ok(image::open(manifest.resolve(r))?.to_rgb8()) };
    let lock = Mutex::new(());
    let on_patches = |patches: &[Patch]| -> Result<(), PatchError> {
        match dump {
            Some(dir) => {
                let _guard = lock.lock().expect("dump lock");
                dump_patches(dir, patches)
            }
            None => Ok(()),
        }
    };
    extract_records_features(records, &load, params, seed, &on_patches).map_err(CliError::runtime)
}

fn check_coverage(store: &FeatureStore, records: &[&WsiRecord], n: Option<usize>) -> Result<(), CliError> {
    for r in records {
        let Some(group) = store.get(&r.wsi_id) else {
            return Err(CliError::Runtime(format!(
                "feature store has no descriptors for {}",
                r.wsi_id
            )));
        };
        if let Some(n) = n {
            if group.vectors.len() != n {
                return Err(CliError::Runtime(format!(
                    "{} has {} descriptors, expected {n}",
                    r.wsi_id,
                    group.vectors.len()
                )));
            }
        }
    }
    Ok(())
}

fn cmd_features(args: FeaturesArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.manifest)?;
    let records: Vec<&WsiRecord> = manifest.records.iter().collect();
    let store = match args.extractor {
        Extractor::Handcrafted => {
            if args.import_path.is_some() {
                return Err(config_err("--import needs --extractor imported"));
            }
            let params = SamplingParams {
                size: args.sampling.patch_size,
                min_coverage: args.sampling.min_coverage,
                ..SamplingParams::with_count(args.sampling.n_patches)
            };
            let seed = resolve_seed(args.seed, 0)?;
            extract(&manifest, &records, &params, seed, args.dump_patches.as_deref())?
        }
        Extractor::Imported => {
            let Some(path) = args.import_path else {
                return Err(config_err("the imported extractor needs --import <store>"));
            };
            if !path.is_file() {
                return Err(config_err(format!("store {} does not exist", path.display())));
            }
            let store = import_features(&path).map_err(CliError::runtime)?;
            check_coverage(&store, &records, None)?;
            store
        }
    };
    export_features(&store, &args.out).map_err(CliError::runtime)?;
    println!(
        "wrote {} descriptors of dimension {} for {} slides to {}",
        store.len(),
        store.dimension(),
        store.wsi_count(),
        args.out.display()
    );
    Ok(())
}

fn cmd_codebook(args: CodebookArgs) -> Result<(), CliError> {
    if !args.feature_store.is_file() {
        return Err(config_err(format!(
            "feature store {} does not exist",
            args.feature_store.display()
        )));
    }
    let store = import_features(&args.feature_store).map_err(CliError::runtime)?;
    let keep: Option<Vec<String>> = match (&args.modality, &args.manifest) {
        (Some(m), Some(path)) => Some(
            load_manifest(path)?
                .by_modality(*m)
                .into_iter()
                .map(|r| r.wsi_id.clone())
                .collect(),
        ),
        _ => None,
    };
    let vectors: Vec<&[f64]> = store
        .records()
        .filter(|r| keep.as_ref().is_none_or(|ids| ids.contains(&r.wsi_id)))
        .map(|r| r.values.as_slice())
        .collect();
    let seed = resolve_seed(args.seed, 0)?;
    let codebook = kmeans_fit(&vectors, args.k, seed, args.max_iter, args.tol).map_err(CliError::runtime)?;
    std::fs::write(&args.out, codebook.to_json()).map_err(CliError::runtime)?;
    println!(
        "k = {}: {} iterations, distortion {:.6} over {} descriptors",
        codebook.k,
        codebook.iterations_run,
        codebook.final_distortion,
        vectors.len()
    );
    Ok(())
}

fn resolve_grid_config(args: &GridArgs) -> Result<RunConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = env_seed()? {
        config.experiment.base_seed = seed;
    }
    if args.manifest.is_some() {
        config.manifest.clone_from(&args.manifest);
    }
    if let Some(store) = &args.feature_store {
        config.feature_store = Some(store.clone());
        config.raw_images = false;
    }
    if args.raw_images {
        config.raw_images = true;
        config.feature_store = None;
    }
    if let Some(e) = args.extractor {
        config.extractor = e;
    }
    if let Some(out) = &args.out {
        config.output_dir.clone_from(out);
    }
    let e = &mut config.experiment;
    if let Some(v) = args.seed {
        e.base_seed = v;
    }
    if let Some(v) = args.repetitions {
        e.repetitions = v;
    }
    if let Some(v) = args.train_ratio {
        e.train_ratio = v;
    }
    if let Some(v) = args.n_patches {
        e.n_patches = v;
    }
    if let Some(v) = args.patch_size {
        e.patch_size = v;
    }
    if let Some(v) = args.min_coverage {
        e.min_coverage = v;
    }
    if let Some(v) = args.folds {
        e.folds = v;
    }
    if let Some(only) = &args.only {
        config.restrict(only)?;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_grid(args: GridArgs) -> Result<(), CliError> {
    let config = resolve_grid_config(&args)?;
    let manifest = load_manifest(config.manifest.as_deref().expect("validated"))?;
    let e = &config.experiment;
    let store = match &config.feature_store {
        Some(path) => {
            let store = import_features(path).map_err(CliError::runtime)?;
            if let Some(d) = config.expected_dimension() {
                if store.dimension() != d {
                    return Err(config_err(format!(
                        "store dimension {} does not match the {d}-dimensional handcrafted extractor",
                        store.dimension()
                    )));
                }
            }
            store
        }
        None => {
            let params = SamplingParams {
                size: e.patch_size,
                min_coverage: e.min_coverage,
                ..SamplingParams::with_count(e.n_patches)
            };
            let records: Vec<&WsiRecord> = manifest.records.iter().collect();
            extract(&manifest, &records, &params, e.base_seed, None)?
        }
    };
    let records = run_grid_with(&manifest, &store, e, &config.grid).map_err(CliError::runtime)?;
    let resolved = serde_json::to_value(&config).map_err(CliError::runtime)?;
    let report = Report::new(records, Some(resolved));
    let (json, csv) = emit_report(&report, &config.output_dir).map_err(CliError::runtime)?;
    println!("{} records", report.records.len());
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    if !args.results.is_file() {
        return Err(config_err(format!("{} does not exist", args.results.display())));
    }
    let report = Report::load(&args.results).map_err(CliError::runtime)?;
    match args.out {
        Some(dir) => {
            let (_, csv) = emit_report(&report, &dir).map_err(CliError::runtime)?;
            println!("wrote {}", csv.display());
        }
        None => print!("{}", pivot_csv(&report.records)),
    }
    Ok(())
}

fn cmd_losses_check(args: LossesArgs) -> Result<(), CliError> {
    if args.instances == 0 {
        return Err(config_err("--instances must be >= 1"));
    }
    let seed = resolve_seed(args.seed, 0)?;
    let summaries = run_suite(args.instances, seed);
    let mut worst = 0.0f64;
    for s in &summaries {
        println!(
            "{:<24} instances={:<5} max_rel_error={:.3e}",
            s.name, s.instances, s.max_relative_error
        );
        worst = worst.max(s.max_relative_error);
    }
    println!("max relative gradient error {worst:.3e} (tolerance {GRADIENT_TOLERANCE:e})");
    if worst < GRADIENT_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {worst:e} >= {GRADIENT_TOLERANCE:e}"
        )))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(config_err("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(CliError::runtime)?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Features(a) => cmd_features(a),
        Command::Codebook(a) => cmd_codebook(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Report(a) => cmd_report(a),
        Command::LossesCheck(a) => cmd_losses_check(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
