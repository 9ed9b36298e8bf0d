//! `ofa` — the command-line harness around the object-focused attention
//! workbench.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
//! files), 3 numeric failure (NaN during training, gradient check above
//! threshold).

mod config;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use config::{parse_usize_list, ConfigOverrides};
use ofa_core::data::{self, SyntheticSpec};
use ofa_core::grid::GridSpec;
use ofa_core::model::{self, VitConfig};
use ofa_core::train::{self, Corruption, LoadedDataset, StepLog};
use ofa_core::{checkpoint, heatmap, metrics, netpbm, pam};
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "ofa",
    version,
    about = "Mini vision transformer with an object-focused attention loss: \
             synthetic data, training, evaluation, corruption studies."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multilabel shape dataset with exact masks.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint, metrics JSON, and a JSONL loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint; optionally corrupt images before inference.
    Eval(EvalArgs),
    /// Write a corrupted copy of a dataset (patch shuffle or background swap).
    Corrupt(CorruptArgs),
    /// Patch-adjacency edge statistics over a dataset's region maps.
    PamStats(PamStatsArgs),
    /// Export per-layer attention heatmaps for one image as PGM files.
    ExportAttn(ExportAttnArgs),
    /// Finite-difference check of the full-model gradients at a tiny config.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    canvas: usize,
    /// Shape classes (4..=20).
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Background texture classes (>= 5).
    #[arg(long, default_value_t = 5)]
    backgrounds: usize,
    #[arg(long, default_value_t = 1)]
    min_objects: usize,
    #[arg(long, default_value_t = 3)]
    max_objects: usize,
    #[arg(long, default_value_t = 12)]
    min_size: usize,
    #[arg(long, default_value_t = 28)]
    max_size: usize,
    /// Probability that the background class follows the smallest object class.
    #[arg(long, default_value_t = 0.9)]
    bg_correlation: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (images/, masks/, manifest.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Alternate manifest file name inside the dataset directory.
    #[arg(long, default_value = "manifest.jsonl")]
    manifest: String,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// TOML or JSON run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics JSON output (default: <out>.metrics.json).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Per-step JSONL loss log (default: <out>.log.jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "manifest.jsonl")]
    manifest: String,
    /// Apply a corruption before inference: shuffle:K or bg-swap:CLASS.
    #[arg(long)]
    corrupt: Option<String>,
    /// Blocks per side for shuffle corruption (default: canvas / patch size).
    #[arg(long)]
    grid_n: Option<usize>,
    /// Seed for corruption randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "manifest.jsonl")]
    manifest: String,
    #[arg(long)]
    out: PathBuf,
    /// Shuffle K blocks of the grid.
    #[arg(long, conflicts_with = "bg_swap")]
    shuffle: Option<usize>,
    /// Blocks per side for --shuffle.
    #[arg(long, default_value_t = 8)]
    grid_n: usize,
    /// Replace backgrounds with this texture class.
    #[arg(long)]
    bg_swap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PamStatsArgs {
    /// Dataset directory; aggregates over every mask in the manifest.
    #[arg(long, conflicts_with = "mask")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "manifest.jsonl")]
    manifest: String,
    /// Single PGM region map instead of a dataset.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    patch_size: usize,
}

#[derive(Args)]
struct ExportAttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input PPM image (must match the model canvas).
    #[arg(long)]
    image: PathBuf,
    /// Comma-separated 1-based layers (default: the checkpoint's OFA layers).
    #[arg(long)]
    layers: Option<String>,
    /// Output directory for layer{L}_cls.pgm / layer{L}_mean.pgm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    patch_size: usize,
    /// Canvas side; 16 with patch 8 gives N = 4 patch tokens.
    #[arg(long, default_value_t = 16)]
    canvas: usize,
    #[arg(long, default_value = "1,2")]
    ofa_layers: String,
    #[arg(long, default_value_t = 0.7)]
    alpha: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = model::MODEL_GRADCHECK_EPS)]
    eps: f64,
    /// Pass/fail threshold on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
}

/// Exit-code buckets.
enum CliError {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &anyhow::Error {
        match self {
            CliError::Usage(e) | CliError::Data(e) | CliError::Numeric(e) => e,
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with successful exit.
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Corrupt(args) => cmd_corrupt(args),
        Command::PamStats(args) => cmd_pam_stats(args),
        Command::ExportAttn(args) => cmd_export_attn(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(e) = result {
        eprintln!("error: {:#}", e.message());
        std::process::exit(e.code());
    }
}

fn data_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Data(e.into())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        canvas: args.canvas,
        n_shape_classes: args.classes,
        n_background_classes: args.backgrounds,
        min_objects: args.min_objects,
        max_objects: args.max_objects,
        min_object_px: args.min_size,
        max_object_px: args.max_size,
        bg_correlation: args.bg_correlation,
        seed: args.seed,
    };
    spec.validate().map_err(|e| CliError::Usage(e.into()))?;
    if args.n == 0 {
        return Err(CliError::Usage(anyhow!("--n must be >= 1")));
    }
    let manifest = data::generate_dataset(&spec, args.n, &args.out).map_err(data_err)?;
    println!(
        "wrote {} samples to {} ({} classes, canvas {})",
        manifest.records.len(),
        args.out.display(),
        spec.n_shape_classes,
        spec.canvas
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    config: &'a config::RunConfig,
    n_samples: usize,
    n_steps: u64,
    final_loss: Option<StepLog>,
    wall_clock_s: f64,
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let run = config::resolve(args.config.as_deref(), &args.overrides).map_err(CliError::Usage)?;
    let opts = run.train_options().map_err(CliError::Usage)?;
    run.model.validate().map_err(|e| CliError::Usage(e.into()))?;

    let dataset = train::load_dataset(&args.data, &args.manifest).map_err(data_err)?;
    if dataset.max_label >= run.model.n_classes {
        return Err(CliError::Data(anyhow!(
            "dataset labels reach {} but the model has {} classes",
            dataset.max_label,
            run.model.n_classes
        )));
    }

    let log_path = args.log.unwrap_or_else(|| suffixed(&args.out, ".log.jsonl"));
    let metrics_path = args.metrics.unwrap_or_else(|| suffixed(&args.out, ".metrics.json"));
    let mut log_file = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))
        .map_err(data_err)?;

    let start = Instant::now();
    let mut last: Option<StepLog> = None;
    let mut n_steps = 0;
    let params = train::train(&run.model, &opts, &dataset, |step| {
        n_steps = step.step;
        last = Some(step.clone());
        let line = serde_json::to_string(step).expect("step log json");
        let _ = writeln!(log_file, "{line}");
    })
    .map_err(|e| match e {
        ofa_core::Error::NonFinite { .. } => CliError::Numeric(e.into()),
        other => CliError::Data(other.into()),
    })?;

    checkpoint::save(&params, &args.out).map_err(data_err)?;
    let report = TrainMetrics {
        config: &run,
        n_samples: dataset.samples.len(),
        n_steps,
        final_loss: last,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    fs::write(&metrics_path, serde_json::to_vec_pretty(&report).map_err(data_err)?)
        .map_err(data_err)?;
    println!(
        "trained {} for {} steps in {:.1}s; checkpoint {} ({} parameters)",
        run.mode,
        n_steps,
        report.wall_clock_s,
        args.out.display(),
        params.n_scalars()
    );
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint_config: VitConfig,
    n_samples: usize,
    corrupt: Option<String>,
    per_class_ap: Vec<metrics::ClassAp>,
    excluded_classes: Vec<usize>,
    map: f64,
    wall_clock_s: f64,
}

fn eval_dataset(
    params: &model::ModelParams,
    dataset: &LoadedDataset,
) -> Result<metrics::MapReport, CliError> {
    let scores = train::predict_scores(params, dataset).map_err(data_err)?;
    let labels = train::label_matrix(dataset, params.cfg.n_classes);
    metrics::compute_map(&scores, &labels).map_err(data_err)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let params = checkpoint::load(&args.checkpoint).map_err(data_err)?;
    let dataset = train::load_dataset(&args.data, &args.manifest).map_err(data_err)?;

    let corruption = match &args.corrupt {
        None => Corruption::None,
        Some(spec) => {
            let default_grid = args
                .grid_n
                .unwrap_or(params.cfg.scales[0] / params.cfg.patch_size);
            Corruption::parse(spec, default_grid).map_err(|e| CliError::Usage(e.into()))?
        }
    };
    let dataset = train::corrupt_dataset(&dataset, corruption, args.seed).map_err(data_err)?;

    let report = eval_dataset(&params, &dataset)?;
    let out = EvalReport {
        checkpoint_config: params.cfg.clone(),
        n_samples: dataset.samples.len(),
        corrupt: args.corrupt.clone(),
        per_class_ap: report.per_class,
        excluded_classes: report.excluded_classes,
        map: report.map,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&out).map_err(data_err)?;
    println!("{json}");
    if let Some(path) = args.out {
        fs::write(&path, json.as_bytes()).map_err(data_err)?;
    }
    Ok(())
}

fn cmd_corrupt(args: CorruptArgs) -> Result<(), CliError> {
    let corruption = match (args.shuffle, args.bg_swap) {
        (Some(k), None) => Corruption::Shuffle { k, grid_n: args.grid_n },
        (None, Some(class)) => Corruption::BgSwap { class },
        _ => {
            return Err(CliError::Usage(anyhow!(
                "exactly one of --shuffle K or --bg-swap CLASS is required"
            )))
        }
    };
    let manifest =
        data::Manifest::load(&args.data.join(&args.manifest)).map_err(data_err)?;
    let dataset = train::load_dataset(&args.data, &args.manifest).map_err(data_err)?;
    let corrupted = train::corrupt_dataset(&dataset, corruption, args.seed).map_err(data_err)?;

    fs::create_dir_all(args.out.join("images")).map_err(data_err)?;
    fs::create_dir_all(args.out.join("masks")).map_err(data_err)?;
    for (record, sample) in manifest.records.iter().zip(&corrupted.samples) {
        netpbm::write_ppm_file(&args.out.join(&record.image), &sample.image).map_err(data_err)?;
        netpbm::write_pgm_file(
            &args.out.join(&record.mask),
            sample.region_map.width(),
            sample.region_map.height(),
            sample.region_map.labels(),
        )
        .map_err(data_err)?;
    }
    manifest.save(&args.out.join("manifest.jsonl")).map_err(data_err)?;
    println!(
        "wrote {} corrupted samples to {}",
        corrupted.samples.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PamStatsOut {
    restricted_edges: u64,
    full_edges: u64,
    retained_fraction: f64,
    restricted_edges_undirected: u64,
    full_edges_undirected: u64,
    n_maps: usize,
}

fn cmd_pam_stats(args: PamStatsArgs) -> Result<(), CliError> {
    let mut maps: Vec<pam::RegionMap> = Vec::new();
    if let Some(mask_path) = &args.mask {
        let gray = netpbm::read_pgm_file(mask_path).map_err(data_err)?;
        maps.push(pam::RegionMap::new(gray.width, gray.height, gray.pixels).map_err(data_err)?);
    } else if let Some(dir) = &args.data {
        let manifest = data::Manifest::load(&dir.join(&args.manifest)).map_err(data_err)?;
        for record in &manifest.records {
            let gray = netpbm::read_pgm_file(&dir.join(&record.mask)).map_err(data_err)?;
            maps.push(
                pam::RegionMap::new(gray.width, gray.height, gray.pixels).map_err(data_err)?,
            );
        }
    } else {
        return Err(CliError::Usage(anyhow!("pass --data DIR or --mask FILE")));
    }

    let mut total = PamStatsOut {
        restricted_edges: 0,
        full_edges: 0,
        retained_fraction: 0.0,
        restricted_edges_undirected: 0,
        full_edges_undirected: 0,
        n_maps: maps.len(),
    };
    for map in &maps {
        let spec = GridSpec::new(map.height(), map.width(), args.patch_size)
            .map_err(|e| CliError::Usage(e.into()))?;
        let pam_matrices = pam::build_pam(map, &spec).map_err(data_err)?;
        let stats = pam::adjacency_stats(&pam_matrices.b);
        total.restricted_edges += stats.restricted_edges;
        total.full_edges += stats.full_edges;
        total.restricted_edges_undirected += stats.restricted_edges_undirected;
        total.full_edges_undirected += stats.full_edges_undirected;
    }
    total.retained_fraction = if total.full_edges == 0 {
        0.0
    } else {
        total.restricted_edges as f64 / total.full_edges as f64
    };
    println!("{}", serde_json::to_string_pretty(&total).map_err(data_err)?);
    Ok(())
}

fn cmd_export_attn(args: ExportAttnArgs) -> Result<(), CliError> {
    let params = checkpoint::load(&args.checkpoint).map_err(data_err)?;
    let image = netpbm::read_ppm_file(&args.image).map_err(data_err)?;
    let layers = match &args.layers {
        Some(s) => parse_usize_list(s).map_err(CliError::Usage)?,
        None => params.cfg.ofa.ofa_layers.clone(),
    };
    for &l in &layers {
        if l == 0 || l > params.cfg.depth {
            return Err(CliError::Usage(anyhow!(
                "layer {l} out of range 1..={}",
                params.cfg.depth
            )));
        }
    }

    let scale_imgs = train::scale_images(&image, &params.cfg).map_err(data_err)?;
    let (_logits, traces) =
        model::forward_attention(&params, &scale_imgs, &layers).map_err(data_err)?;

    let full = params.cfg.scale_set().map_err(data_err)?;
    let spec = *full.full();
    let (rows, cols) = (spec.rows(), spec.cols());
    let n_patches = rows * cols;

    fs::create_dir_all(&args.out).map_err(data_err)?;
    for (layer, heads) in &traces {
        let mean = heatmap::head_mean(heads);
        let cls = heatmap::cls_attention_row(&mean, n_patches);
        let avg = heatmap::mean_patch_attention(&mean, n_patches);
        for (tag, values) in [("cls", cls), ("mean", avg)] {
            let img = heatmap::values_to_heatmap(&values, rows, cols, image.height, image.width)
                .map_err(data_err)?;
            let path = args.out.join(format!("layer{layer}_{tag}.pgm"));
            netpbm::write_pgm_file(&path, img.width, img.height, &img.pixels)
                .map_err(data_err)?;
        }
    }
    println!("wrote {} heatmaps to {}", 2 * traces.len(), args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let layers = parse_usize_list(&args.ofa_layers).map_err(CliError::Usage)?;
    let cfg = VitConfig {
        depth: args.depth,
        dim: args.dim,
        heads: args.heads,
        patch_size: args.patch_size,
        scales: vec![args.canvas],
        n_classes: 2,
        mlp_ratio: 2,
        ofa: ofa_core::ofa::OfaConfig { alpha: args.alpha, ofa_layers: layers, decay: 0.9 },
        mae_ratio: 0.5,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.into()))?;
    if args.eps <= 0.0 {
        return Err(CliError::Usage(anyhow!("--eps must be > 0")));
    }
    let start = Instant::now();
    let report = model::model_grad_check(&cfg, args.seed, args.eps).map_err(data_err)?;
    println!(
        "max relative error {:.3e} over {} coordinates ({:.1}s)",
        report.max_rel_err,
        report.n_coords,
        start.elapsed().as_secs_f64()
    );
    if report.max_rel_err < args.threshold {
        Ok(())
    } else {
        Err(CliError::Numeric(anyhow!(
            "gradient check failed: {:.3e} >= {:.0e}",
            report.max_rel_err,
            args.threshold
        )))
    }
}
