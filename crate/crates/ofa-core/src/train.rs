//! Dataset loading, batch preparation, the training loop, and evaluation
//! with optional corruptions. This is the library surface the CLI drives.

use crate::data::{self, Manifest};
use crate::error::{Error, Result};
use crate::grid::{self, GridSpec};
use crate::model::{
    self, mae_train_step, train_step, LossBreakdown, ModelParams, OptimizerState, TrainItem,
    VitConfig,
};
use crate::netpbm::RgbImage;
use crate::pam::{self, PatchRegionIncidence, RegionMap};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Baseline,
    Ofa,
    Mae,
    MaeOfa,
}

impl TrainMode {
    pub fn uses_ofa_finetune(self) -> bool {
        matches!(self, TrainMode::Ofa | TrainMode::MaeOfa)
    }

    pub fn uses_mae_pretrain(self) -> bool {
        matches!(self, TrainMode::Mae | TrainMode::MaeOfa)
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "ofa" => Ok(TrainMode::Ofa),
            "mae" => Ok(TrainMode::Mae),
            "mae+ofa" | "mae_ofa" => Ok(TrainMode::MaeOfa),
            other => Err(Error::contract(format!(
                "unknown mode {other:?}; expected baseline | ofa | mae | mae+ofa"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Ofa => "ofa",
            TrainMode::Mae => "mae",
            TrainMode::MaeOfa => "mae+ofa",
        };
        write!(f, "{s}")
    }
}

/// A dataset sample as stored on disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub image: RgbImage,
    pub region_map: RegionMap,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub samples: Vec<LoadedSample>,
    pub max_label: usize,
}

/// Reads every sample named by the manifest. `manifest_name` defaults to
/// manifest.jsonl; an alternate name selects a subsampled view.
pub fn load_dataset(dir: &Path, manifest_name: &str) -> Result<LoadedDataset> {
    let manifest = Manifest::load(&dir.join(manifest_name))?;
    if manifest.records.is_empty() {
        return Err(Error::contract(format!("empty manifest in {}", dir.display())));
    }
    let samples: Vec<LoadedSample> = manifest
        .records
        .par_iter()
        .map(|record| -> Result<LoadedSample> {
            let (image, region_map) = data::load_sample_files(dir, record)?;
            Ok(LoadedSample { image, region_map, labels: record.labels.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_label = samples.iter().flat_map(|s| s.labels.iter().copied()).max().unwrap_or(0);
    Ok(LoadedDataset { samples, max_label })
}

/// u8 image → normalized [0,1] pixel tensor.
pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let data: Vec<f64> = image.pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![image.height, image.width, 3], data).expect("image tensor")
}

/// Per-scale pixel tensors: the full-resolution image plus area-downscaled
/// copies for the remaining scales.
pub fn scale_images(image: &RgbImage, cfg: &VitConfig) -> Result<Vec<Tensor>> {
    let full = image_to_tensor(image);
    if image.width != cfg.scales[0] || image.height != cfg.scales[0] {
        return Err(Error::contract(format!(
            "image {}x{} does not match configured canvas {}",
            image.width, image.height, cfg.scales[0]
        )));
    }
    let mut out = vec![full.clone()];
    for &side in &cfg.scales[1..] {
        out.push(grid::downscale_area(&full, cfg.scales[0] / side)?);
    }
    Ok(out)
}

/// Joint patch-region incidence over every scale's patch grid: scale s uses
/// an effective patch of patch_size · (full/side) full-resolution pixels.
pub fn multiscale_incidence(map: &RegionMap, cfg: &VitConfig) -> Result<PatchRegionIncidence> {
    let full = cfg.scales[0];
    let mut regions = Vec::new();
    for &side in &cfg.scales {
        let effective = cfg.patch_size * (full / side);
        let spec = GridSpec::new(full, full, effective)?;
        let inc = pam::patch_region_incidence(map, &spec)?;
        regions.extend(inc.regions);
    }
    Ok(PatchRegionIncidence { regions })
}

/// Object flags and the B″ target over the joint multiscale token list.
pub fn pam_targets(map: &RegionMap, cfg: &VitConfig) -> Result<(Vec<bool>, Tensor)> {
    let inc = multiscale_incidence(map, cfg)?;
    let object_rows = inc.object_flags();
    let b = pam::build_b(&inc);
    let b_prime = pam::build_b_prime(&b);
    let b_dprime = pam::build_b_dprime(&b_prime, &object_rows)?;
    Ok((object_rows, b_dprime))
}

pub fn labels_tensor(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::contract(format!("label {l} out of range ({n_classes} classes)")));
        }
        data[l] = 1.0;
    }
    Tensor::new(vec![1, n_classes], data)
}

/// Prepares one sample for training; PAM targets are built only when the
/// mode needs them.
pub fn prepare_item(sample: &LoadedSample, cfg: &VitConfig, with_pam: bool) -> Result<TrainItem> {
    let (b_dprime, object_rows) = if with_pam {
        let (rows, b) = pam_targets(&sample.region_map, cfg)?;
        (Some(b), Some(rows))
    } else {
        (None, None)
    };
    Ok(TrainItem {
        scale_images: scale_images(&sample.image, cfg)?,
        labels: labels_tensor(&sample.labels, cfg.n_classes)?,
        b_dprime,
        object_rows,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainOptions {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Pretraining epochs for the MAE phase (mae / mae+ofa modes).
    pub mae_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            mode: TrainMode::Ofa,
            epochs: 20,
            mae_epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// One JSONL log row per optimizer step.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub phase: &'static str,
    pub epoch: usize,
    pub task: f64,
    pub ofa_total: f64,
    pub total: f64,
}

fn epoch_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Full training pipeline: optional MAE pretraining, then the supervised
/// phase (with the auxiliary attention loss when the mode asks for it).
/// Deterministic in (cfg, opts, dataset).
pub fn train(
    cfg: &VitConfig,
    opts: &TrainOptions,
    dataset: &LoadedDataset,
    mut log: impl FnMut(&StepLog),
) -> Result<ModelParams> {
    cfg.validate()?;
    if dataset.max_label >= cfg.n_classes {
        return Err(Error::contract(format!(
            "dataset labels reach {} but model has {} classes",
            dataset.max_label, cfg.n_classes
        )));
    }
    let with_pam = opts.mode.uses_ofa_finetune();
    let items: Vec<TrainItem> = dataset
        .samples
        .par_iter()
        .map(|s| prepare_item(s, cfg, with_pam))
        .collect::<Result<Vec<_>>>()?;

    let mut params = model::init_params(cfg, opts.seed)?;
    let mut step: u64 = 0;
    let reference = cfg.scale_set()?.reference_grid();

    if opts.mode.uses_mae_pretrain() {
        let mut opt = OptimizerState::new(&params, opts.lr, opts.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6d61655f70686173); // mae phase stream
        for epoch in 0..opts.mae_epochs {
            let order = epoch_order(&mut rng, items.len());
            for chunk in order.chunks(opts.batch_size) {
                let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
                let masks: Vec<grid::CellMask> = chunk
                    .iter()
                    .map(|_| grid::sample_cell_mask(&reference, cfg.mae_ratio, rng.gen()))
                    .collect::<Result<Vec<_>>>()?;
                let loss = mae_train_step(&mut params, &mut opt, &batch, &masks)?;
                step += 1;
                log(&StepLog { step, phase: "mae", epoch, task: loss, ofa_total: 0.0, total: loss });
            }
        }
    }

    // Fresh optimizer for the supervised phase.
    let use_ofa = opts.mode.uses_ofa_finetune();
    let mut opt = OptimizerState::new(&params, opts.lr, opts.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x636c735f70686173); // cls phase stream
    for epoch in 0..opts.epochs {
        let order = epoch_order(&mut rng, items.len());
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let bd: LossBreakdown = train_step(&mut params, &mut opt, &batch, use_ofa)?;
            step += 1;
            log(&StepLog {
                step,
                phase: "train",
                epoch,
                task: bd.task,
                ofa_total: bd.ofa_total,
                total: bd.total,
            });
        }
    }
    Ok(params)
}

/// Evaluation-time corruption, applied in memory before inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    None,
    /// Shuffle k of grid_n² blocks.
    Shuffle { k: usize, grid_n: usize },
    /// Replace the background with a fresh texture of this class.
    BgSwap { class: usize },
}

impl Corruption {
    /// Parses `shuffle:K` / `bg-swap:CLASS`.
    pub fn parse(s: &str, default_grid_n: usize) -> Result<Corruption> {
        if let Some(k) = s.strip_prefix("shuffle:") {
            let k = k
                .parse()
                .map_err(|_| Error::contract(format!("bad shuffle count in {s:?}")))?;
            return Ok(Corruption::Shuffle { k, grid_n: default_grid_n });
        }
        if let Some(c) = s.strip_prefix("bg-swap:") {
            let class =
                c.parse().map_err(|_| Error::contract(format!("bad background class in {s:?}")))?;
            return Ok(Corruption::BgSwap { class });
        }
        Err(Error::contract(format!(
            "unknown corruption {s:?}; expected shuffle:K or bg-swap:CLASS"
        )))
    }
}

/// Applies the corruption to one sample; deterministic per (seed, index).
pub fn corrupt_sample(
    sample: &LoadedSample,
    corruption: Corruption,
    seed: u64,
    index: usize,
) -> Result<LoadedSample> {
    match corruption {
        Corruption::None => Ok(sample.clone()),
        Corruption::Shuffle { k, grid_n } => {
            let perm = data::k_subset_permutation(grid_n * grid_n, k, seed ^ index as u64)?;
            Ok(LoadedSample {
                image: data::shuffle_patches(&sample.image, grid_n, &perm)?,
                region_map: data::shuffle_region_map(&sample.region_map, grid_n, &perm)?,
                labels: sample.labels.clone(),
            })
        }
        Corruption::BgSwap { class } => {
            let canvas = sample.image.width;
            let mut image = data::render_background(class, canvas, seed ^ index as u64);
            for y in 0..canvas {
                for x in 0..canvas {
                    if sample.region_map.label(x, y) > 0 {
                        image.set(x, y, sample.image.get(x, y));
                    }
                }
            }
            Ok(LoadedSample { image, region_map: sample.region_map.clone(), labels: sample.labels.clone() })
        }
    }
}

/// Per-sample class probabilities (sigmoid of the logits), in dataset order.
/// Inference consumes images only — no region maps.
pub fn predict_scores(params: &ModelParams, dataset: &LoadedDataset) -> Result<Vec<Vec<f64>>> {
    dataset
        .samples
        .par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let images = scale_images(&s.image, &params.cfg)?;
            let logits = model::forward_logits(params, &images)?;
            Ok(logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect())
        })
        .collect()
}

pub fn label_matrix(dataset: &LoadedDataset, n_classes: usize) -> Vec<Vec<bool>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let mut row = vec![false; n_classes];
            for &l in &s.labels {
                if l < n_classes {
                    row[l] = true;
                }
            }
            row
        })
        .collect()
}

/// Applies a corruption to the whole dataset (None is a no-op).
pub fn corrupt_dataset(
    dataset: &LoadedDataset,
    corruption: Corruption,
    seed: u64,
) -> Result<LoadedDataset> {
    let samples = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| corrupt_sample(s, corruption, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset { samples, max_label: dataset.max_label })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};
    use crate::ofa::OfaConfig;

    fn tiny_dataset(dir: &Path, n: usize) -> LoadedDataset {
        let _ = std::fs::remove_dir_all(dir);
        let spec = SyntheticSpec {
            canvas: 32,
            min_object_px: 8,
            max_object_px: 14,
            seed: 7,
            ..SyntheticSpec::default()
        };
        generate_dataset(&spec, n, dir).unwrap();
        load_dataset(dir, "manifest.jsonl").unwrap()
    }

    fn tiny_cfg() -> VitConfig {
        VitConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            patch_size: 8,
            scales: vec![32],
            n_classes: 8,
            mlp_ratio: 2,
            ofa: OfaConfig { alpha: 0.7, ofa_layers: vec![1, 2], decay: 0.9 },
            mae_ratio: 0.5,
        }
    }

    #[test]
    fn multiscale_incidence_counts_tokens_per_scale() {
        let cfg = VitConfig { scales: vec![32, 16], ..tiny_cfg() };
        let dir = std::env::temp_dir().join("ofa-train-inc");
        let ds = tiny_dataset(&dir, 2);
        let inc = multiscale_incidence(&ds.samples[0].region_map, &cfg).unwrap();
        // 32/8=4 → 16 tokens, plus 16/8=2 → 4 tokens.
        assert_eq!(inc.regions.len(), 20);
        let (rows, b) = pam_targets(&ds.samples[0].region_map, &cfg).unwrap();
        assert_eq!(rows.len(), 20);
        assert_eq!(b.shape(), &[20, 20]);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn training_is_deterministic_and_logs_steps() {
        let dir = std::env::temp_dir().join("ofa-train-det");
        let ds = tiny_dataset(&dir, 8);
        let cfg = tiny_cfg();
        let opts = TrainOptions {
            mode: TrainMode::Ofa,
            epochs: 2,
            mae_epochs: 0,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 11,
        };
        let run = || {
            let mut logs = Vec::new();
            let params = train(&cfg, &opts, &ds, |l| logs.push(l.total)).unwrap();
            let bits: Vec<u64> = params
                .params
                .iter()
                .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
                .collect();
            (bits, logs)
        };
        let (a_bits, a_logs) = run();
        let (b_bits, b_logs) = run();
        assert_eq!(a_bits, b_bits);
        assert_eq!(a_logs, b_logs);
        assert_eq!(a_logs.len(), 2 * 2); // 8 samples / batch 4 × 2 epochs
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn mae_mode_runs_both_phases() {
        let dir = std::env::temp_dir().join("ofa-train-mae");
        let ds = tiny_dataset(&dir, 4);
        let cfg = tiny_cfg();
        let opts = TrainOptions {
            mode: TrainMode::MaeOfa,
            epochs: 1,
            mae_epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 3,
        };
        let mut phases = Vec::new();
        train(&cfg, &opts, &ds, |l| phases.push(l.phase)).unwrap();
        assert!(phases.contains(&"mae"));
        assert!(phases.contains(&"train"));
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn eval_is_deterministic_and_corruptions_apply() {
        let dir = std::env::temp_dir().join("ofa-train-eval");
        let ds = tiny_dataset(&dir, 6);
        let cfg = tiny_cfg();
        let params = model::init_params(&cfg, 5).unwrap();
        let s1 = predict_scores(&params, &ds).unwrap();
        let s2 = predict_scores(&params, &ds).unwrap();
        assert_eq!(s1, s2);

        // shuffle:0 is the identity corruption.
        let c = Corruption::parse("shuffle:0", 8).unwrap();
        let same = corrupt_dataset(&ds, c, 1).unwrap();
        for (a, b) in ds.samples.iter().zip(&same.samples) {
            assert_eq!(a.image.pixels, b.image.pixels);
        }

        let c = Corruption::parse("bg-swap:2", 8).unwrap();
        let swapped = corrupt_dataset(&ds, c, 1).unwrap();
        for (a, b) in ds.samples.iter().zip(&swapped.samples) {
            assert_eq!(a.labels, b.labels);
            for y in 0..32 {
                for x in 0..32 {
                    if a.region_map.label(x, y) > 0 {
                        assert_eq!(a.image.get(x, y), b.image.get(x, y));
                    }
                }
            }
        }
        assert!(Corruption::parse("melt:1", 8).is_err());
        let _ = std::fs::remove_dir_all(&dir);
    }
}
