//! Deterministic synthetic multilabel dataset with exact segmentation masks,
//! plus the two corruption generators (patch shuffling and background
//! replacement).
//!
//! All rasterization is integer-only so generated datasets are byte-identical
//! across platforms. A shape class combines a geometric kind (circle, square,
//! triangle, bar) with a palette color; backgrounds are procedural textures
//! drawn from a muted palette so objects stay visually separable.

use crate::error::{Error, Result};
use crate::netpbm::{self, RgbImage};
use crate::pam::RegionMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const SHAPE_KIND_COUNT: usize = 4;
pub const BACKGROUND_KIND_COUNT: usize = 5;
pub const MAX_SHAPE_CLASSES: usize = 20;

/// Saturated object colors; class id = kind + 4 * palette index.
const PALETTE: [[u8; 3]; 5] = [
    [220, 45, 45],
    [45, 185, 70],
    [55, 95, 220],
    [235, 205, 50],
    [200, 60, 200],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl ShapeKind {
    pub fn of_class(class: usize) -> ShapeKind {
        match class % SHAPE_KIND_COUNT {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Bar,
        }
    }
}

pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[(class / SHAPE_KIND_COUNT) % PALETTE.len()]
}

/// Generation parameters for the synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub canvas: usize,
    pub n_shape_classes: usize,
    pub n_background_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_px: usize,
    pub max_object_px: usize,
    /// Probability that the background class is tied to the smallest object
    /// class present (mod background count), planting a background shortcut
    /// that background-swap evaluation later breaks.
    pub bg_correlation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            canvas: 64,
            n_shape_classes: 8,
            n_background_classes: 5,
            min_objects: 1,
            max_objects: 3,
            min_object_px: 12,
            max_object_px: 28,
            bg_correlation: 0.9,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(4..=MAX_SHAPE_CLASSES).contains(&self.n_shape_classes) {
            return Err(Error::contract(format!(
                "shape classes must be 4..={MAX_SHAPE_CLASSES}, got {}",
                self.n_shape_classes
            )));
        }
        if self.n_background_classes < BACKGROUND_KIND_COUNT {
            return Err(Error::contract(format!(
                "background classes must be >= {BACKGROUND_KIND_COUNT}, got {}",
                self.n_background_classes
            )));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(Error::contract("object count range must satisfy 1 <= min <= max"));
        }
        if self.min_object_px < 4
            || self.min_object_px > self.max_object_px
            || self.max_object_px >= self.canvas
        {
            return Err(Error::contract("object size range must fit the canvas"));
        }
        if !(0.0..=1.0).contains(&self.bg_correlation) {
            return Err(Error::contract("bg_correlation must be in [0,1]"));
        }
        Ok(())
    }
}

/// A rendered object with enough geometry to re-test pixel membership.
#[derive(Clone, Copy, Debug)]
pub struct PlacedShape {
    pub class: usize,
    pub region_id: u8,
    pub kind: ShapeKind,
    pub color: [u8; 3],
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

fn isqrt(v: i64) -> i64 {
    if v <= 0 {
        return 0;
    }
    let mut t = (v as f64).sqrt() as i64;
    while t * t > v {
        t -= 1;
    }
    while (t + 1) * (t + 1) <= v {
        t += 1;
    }
    t
}

impl PlacedShape {
    /// Analytic pixel membership; the independent check against the
    /// scanline renderer below.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || x >= self.x0 + self.w || y < self.y0 || y >= self.y0 + self.h {
            return false;
        }
        let (dx, dy) = ((x - self.x0) as i64, (y - self.y0) as i64);
        match self.kind {
            ShapeKind::Square | ShapeKind::Bar => true,
            ShapeKind::Circle => {
                let r = (self.w as i64 - 1) / 2;
                let cx = r;
                let cy = r;
                (dx - cx) * (dx - cx) + (dy - cy) * (dy - cy) <= r * r
            }
            ShapeKind::Triangle => {
                let halfw = ((dy + 1) * self.w as i64) / (2 * self.h as i64);
                let cx = self.w as i64 / 2;
                (dx - cx).abs() <= halfw
            }
        }
    }

    /// Paints the shape row by row into the image and region map.
    fn render(&self, image: &mut RgbImage, labels: &mut [u8], canvas: usize) {
        for dy in 0..self.h {
            let (xs, xe) = match self.kind {
                ShapeKind::Square | ShapeKind::Bar => (self.x0, self.x0 + self.w - 1),
                ShapeKind::Circle => {
                    let r = (self.w as i64 - 1) / 2;
                    let off = dy as i64 - r;
                    let halfw = isqrt(r * r - off * off);
                    if off.abs() > r {
                        continue;
                    }
                    (
                        (self.x0 as i64 + r - halfw) as usize,
                        (self.x0 as i64 + r + halfw) as usize,
                    )
                }
                ShapeKind::Triangle => {
                    let halfw = ((dy as i64 + 1) * self.w as i64) / (2 * self.h as i64);
                    let cx = (self.x0 + self.w / 2) as i64;
                    (
                        (cx - halfw).max(self.x0 as i64) as usize,
                        (cx + halfw).min((self.x0 + self.w - 1) as i64) as usize,
                    )
                }
            };
            let y = self.y0 + dy;
            for x in xs..=xe {
                image.set(x, y, self.color);
                labels[y * canvas + x] = self.region_id;
            }
        }
    }
}

/// One generated sample: image, pixel-exact region map, and its labels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: RgbImage,
    pub region_map: RegionMap,
    /// Sorted distinct class ids present.
    pub labels: Vec<usize>,
    /// Class of region id r at index r-1.
    pub region_classes: Vec<usize>,
    pub shapes: Vec<PlacedShape>,
    pub background_class: usize,
    pub background_texture_seed: u64,
    pub seed: u64,
}

fn muted_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let base: i32 = rng.gen_range(95..=170);
    let mut c = [0u8; 3];
    for ch in &mut c {
        let jitter: i32 = rng.gen_range(-25..=25);
        *ch = (base + jitter).clamp(0, 255) as u8;
    }
    c
}

/// Procedural background texture; deterministic in (class, canvas, seed).
pub fn render_background(class: usize, canvas: usize, texture_seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    let mut img = RgbImage::new(canvas, canvas);
    match class % BACKGROUND_KIND_COUNT {
        0 => {
            // flat
            let c = muted_color(&mut rng);
            for y in 0..canvas {
                for x in 0..canvas {
                    img.set(x, y, c);
                }
            }
        }
        1 => {
            // horizontal stripes
            let (c0, c1) = (muted_color(&mut rng), muted_color(&mut rng));
            let band = rng.gen_range(3..=6);
            for y in 0..canvas {
                let c = if (y / band) % 2 == 0 { c0 } else { c1 };
                for x in 0..canvas {
                    img.set(x, y, c);
                }
            }
        }
        2 => {
            // checkerboard
            let (c0, c1) = (muted_color(&mut rng), muted_color(&mut rng));
            let cell = rng.gen_range(4..=8);
            for y in 0..canvas {
                for x in 0..canvas {
                    let c = if (x / cell + y / cell) % 2 == 0 { c0 } else { c1 };
                    img.set(x, y, c);
                }
            }
        }
        3 => {
            // value noise: bilinear interpolation of a coarse lattice,
            // integer arithmetic only
            let step = 8usize;
            let cells = canvas / step + 2;
            let lattice: Vec<u32> =
                (0..cells * cells).map(|_| rng.gen_range(70..=190u32)).collect();
            let tint: [u32; 3] = [
                rng.gen_range(150..=255),
                rng.gen_range(150..=255),
                rng.gen_range(150..=255),
            ];
            for y in 0..canvas {
                for x in 0..canvas {
                    let (gx, gy) = (x / step, y / step);
                    let (fx, fy) = ((x % step) as u32, (y % step) as u32);
                    let s = step as u32;
                    let v00 = lattice[gy * cells + gx];
                    let v10 = lattice[gy * cells + gx + 1];
                    let v01 = lattice[(gy + 1) * cells + gx];
                    let v11 = lattice[(gy + 1) * cells + gx + 1];
                    let v = ((s - fx) * (s - fy) * v00
                        + fx * (s - fy) * v10
                        + (s - fx) * fy * v01
                        + fx * fy * v11)
                        / (s * s);
                    let mut c = [0u8; 3];
                    for i in 0..3 {
                        c[i] = (v * tint[i] / 255) as u8;
                    }
                    img.set(x, y, c);
                }
            }
        }
        _ => {
            // diagonal stripes
            let (c0, c1) = (muted_color(&mut rng), muted_color(&mut rng));
            let band = rng.gen_range(3..=6);
            for y in 0..canvas {
                for x in 0..canvas {
                    let c = if ((x + y) / band) % 2 == 0 { c0 } else { c1 };
                    img.set(x, y, c);
                }
            }
        }
    }
    img
}

fn bboxes_overlap(a: &PlacedShape, b: (usize, usize, usize, usize)) -> bool {
    let (bx, by, bw, bh) = b;
    a.x0 < bx + bw && bx < a.x0 + a.w && a.y0 < by + bh && by < a.y0 + a.h
}

/// Generates one sample; deterministic in (spec, seed).
pub fn generate_sample(spec: &SyntheticSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas = spec.canvas;

    let n_objects = rng.gen_range(spec.min_objects..=spec.max_objects);
    // Distinct classes via partial Fisher-Yates.
    let mut class_pool: Vec<usize> = (0..spec.n_shape_classes).collect();
    for i in 0..n_objects.min(class_pool.len() - 1) {
        let j = rng.gen_range(i..class_pool.len());
        class_pool.swap(i, j);
    }

    let mut shapes: Vec<PlacedShape> = Vec::new();
    for &class in class_pool.iter().take(n_objects) {
        let kind = ShapeKind::of_class(class);
        let size = rng.gen_range(spec.min_object_px..=spec.max_object_px);
        let (w, h) = match kind {
            ShapeKind::Circle => {
                let r = (size - 1) / 2;
                (2 * r + 1, 2 * r + 1)
            }
            ShapeKind::Square | ShapeKind::Triangle => (size, size),
            ShapeKind::Bar => {
                let thick = (size / 3).max(2);
                if rng.gen_bool(0.5) {
                    (size, thick)
                } else {
                    (thick, size)
                }
            }
        };
        let mut placed = false;
        for _attempt in 0..100 {
            let x0 = rng.gen_range(0..=canvas - w);
            let y0 = rng.gen_range(0..=canvas - h);
            let candidate = (x0, y0, w, h);
            if shapes.iter().any(|s| bboxes_overlap(s, candidate)) {
                continue;
            }
            shapes.push(PlacedShape {
                class,
                region_id: shapes.len() as u8 + 1,
                kind,
                color: class_color(class),
                x0,
                y0,
                w,
                h,
            });
            placed = true;
            break;
        }
        if !placed {
            // Crowded canvas: drop this object, reducing the count.
            continue;
        }
    }

    let region_classes: Vec<usize> = shapes.iter().map(|s| s.class).collect();
    let min_class = region_classes.iter().copied().min().unwrap_or(0);
    let background_class = if rng.gen_bool(spec.bg_correlation) {
        min_class % spec.n_background_classes
    } else {
        rng.gen_range(0..spec.n_background_classes)
    };
    let background_texture_seed: u64 = rng.gen();

    let mut image = render_background(background_class, canvas, background_texture_seed);
    let mut labels_px = vec![0u8; canvas * canvas];
    for shape in &shapes {
        shape.render(&mut image, &mut labels_px, canvas);
    }
    let region_map = RegionMap::new(canvas, canvas, labels_px)?;

    let mut labels = region_classes.clone();
    labels.sort_unstable();
    labels.dedup();

    Ok(Sample {
        image,
        region_map,
        labels,
        region_classes,
        shapes,
        background_class,
        background_texture_seed,
        seed,
    })
}

/// Replaces every background pixel with a freshly rendered texture; pixels
/// inside any region are left bit-identical.
pub fn swap_background(sample: &Sample, background_class: usize, texture_seed: u64) -> Sample {
    let canvas = sample.image.width;
    let mut image = render_background(background_class, canvas, texture_seed);
    for y in 0..canvas {
        for x in 0..canvas {
            if sample.region_map.label(x, y) > 0 {
                image.set(x, y, sample.image.get(x, y));
            }
        }
    }
    Sample {
        image,
        background_class,
        background_texture_seed: texture_seed,
        ..sample.clone()
    }
}

// ----- patch shuffling ---------------------------------------------------

/// Uniform random permutation of 0..n.
pub fn random_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Permutation that rearranges only k uniformly chosen blocks and fixes the
/// rest. k = n shuffles everything; k = 0 is the identity.
pub fn k_subset_permutation(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::contract(format!("cannot shuffle {k} of {n} blocks")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n.saturating_sub(1)) {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let chosen = &pool[..k];
    // Uniform permutation of the chosen slots' contents.
    let mut sigma: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.gen_range(0..=i);
        sigma.swap(i, j);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let sources: Vec<usize> = sigma.iter().map(|&s| chosen[s]).collect();
    for (&slot, &src) in chosen.iter().zip(&sources) {
        perm[slot] = src;
    }
    Ok(perm)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

fn shuffle_blocks(
    data: &[u8],
    width: usize,
    height: usize,
    channels: usize,
    grid_n: usize,
    perm: &[usize],
) -> Result<Vec<u8>> {
    if grid_n == 0 || width % grid_n != 0 || height % grid_n != 0 {
        return Err(Error::contract(format!(
            "grid {grid_n} must divide image {width}x{height}"
        )));
    }
    if perm.len() != grid_n * grid_n {
        return Err(Error::contract(format!(
            "permutation of length {} does not cover {} blocks",
            perm.len(),
            grid_n * grid_n
        )));
    }
    let (bw, bh) = (width / grid_n, height / grid_n);
    let mut out = vec![0u8; data.len()];
    for (dst, &src) in perm.iter().enumerate() {
        let (dr, dc) = (dst / grid_n, dst % grid_n);
        let (sr, sc) = (src / grid_n, src % grid_n);
        for row in 0..bh {
            let s = ((sr * bh + row) * width + sc * bw) * channels;
            let d = ((dr * bh + row) * width + dc * bw) * channels;
            out[d..d + bw * channels].copy_from_slice(&data[s..s + bw * channels]);
        }
    }
    Ok(out)
}

/// Cuts the image into grid_n × grid_n blocks and rearranges them by `perm`
/// (destination block i takes source block perm[i]).
pub fn shuffle_patches(image: &RgbImage, grid_n: usize, perm: &[usize]) -> Result<RgbImage> {
    let pixels = shuffle_blocks(&image.pixels, image.width, image.height, 3, grid_n, perm)?;
    Ok(RgbImage { width: image.width, height: image.height, pixels })
}

/// Applies the same block permutation to a region map so image and mask stay
/// aligned after shuffling.
pub fn shuffle_region_map(map: &RegionMap, grid_n: usize, perm: &[usize]) -> Result<RegionMap> {
    let labels = shuffle_blocks(map.labels(), map.width(), map.height(), 1, grid_n, perm)?;
    RegionMap::new(map.width(), map.height(), labels)
}

// ----- dataset files -----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub mask: String,
    pub labels: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            out.extend_from_slice(serde_json::to_string(r)?.as_bytes());
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(bytes: &[u8]) -> Result<Manifest> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::Parse { offset: e.valid_up_to(), msg: "manifest not UTF-8".into() })?;
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        Ok(Manifest { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        netpbm::atomic_write(path, &self.to_jsonl()?)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        Manifest::from_jsonl(&fs::read(path)?)
    }
}

pub fn sample_file_names(index: usize) -> (String, String) {
    (format!("images/{index:05}.ppm"), format!("masks/{index:05}.pgm"))
}

/// Writes n samples under `out_dir` (images/, masks/, manifest.jsonl).
/// Sample i uses seed `spec.seed ^ i` so streams are independent.
pub fn generate_dataset(spec: &SyntheticSpec, n: usize, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::contract("dataset size must be >= 1"));
    }
    spec.validate()?;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let mut manifest = Manifest::default();
    for i in 0..n {
        let sample_seed = spec.seed ^ i as u64;
        let sample = generate_sample(spec, sample_seed)?;
        let (image_name, mask_name) = sample_file_names(i);
        netpbm::write_ppm_file(&out_dir.join(&image_name), &sample.image)?;
        netpbm::write_pgm_file(
            &out_dir.join(&mask_name),
            sample.region_map.width(),
            sample.region_map.height(),
            sample.region_map.labels(),
        )?;
        manifest.records.push(ManifestRecord {
            image: image_name,
            mask: mask_name,
            labels: sample.labels.clone(),
            seed: sample_seed,
        });
    }
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Reads one sample's files back; paths are relative to the dataset root.
pub fn load_sample_files(dir: &Path, record: &ManifestRecord) -> Result<(RgbImage, RegionMap)> {
    let image = netpbm::read_ppm_file(&dir.join(&record.image))?;
    let gray = netpbm::read_pgm_file(&dir.join(&record.mask))?;
    let map = RegionMap::new(gray.width, gray.height, gray.pixels)?;
    Ok((image, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::pam::patch_region_incidence;

    fn spec() -> SyntheticSpec {
        SyntheticSpec { seed: 99, ..SyntheticSpec::default() }
    }

    #[test]
    fn sample_generation_is_deterministic() {
        let s1 = generate_sample(&spec(), 5).unwrap();
        let s2 = generate_sample(&spec(), 5).unwrap();
        assert_eq!(s1.image.pixels, s2.image.pixels);
        assert_eq!(s1.region_map.labels(), s2.region_map.labels());
        assert_eq!(s1.labels, s2.labels);
    }

    #[test]
    fn labels_match_region_map() {
        for seed in 0..50 {
            let s = generate_sample(&spec(), seed).unwrap();
            assert!(!s.shapes.is_empty());
            // Every region id present in the map has a class.
            let ids = s.region_map.region_ids();
            for id in &ids {
                assert!((*id as usize) <= s.region_classes.len());
            }
            // labels == sorted distinct region classes
            let mut expect: Vec<usize> = s.region_classes.clone();
            expect.sort_unstable();
            expect.dedup();
            assert_eq!(s.labels, expect);
        }
    }

    #[test]
    fn region_map_matches_analytic_geometry() {
        let grid = GridSpec::new(64, 64, 8).unwrap();
        for seed in 0..10 {
            let s = generate_sample(&spec(), seed).unwrap();
            // Pixel-level: map label u at (x,y) iff the shape with that
            // region id contains (x,y).
            for y in 0..64 {
                for x in 0..64 {
                    let label = s.region_map.label(x, y);
                    let analytic = s
                        .shapes
                        .iter()
                        .find(|sh| sh.contains(x, y))
                        .map_or(0, |sh| sh.region_id);
                    assert_eq!(label, analytic, "pixel ({x},{y}) seed {seed}");
                }
            }
            // Patch-level incidence agrees with direct containment testing.
            let inc = patch_region_incidence(&s.region_map, &grid).unwrap();
            for pr in 0..8 {
                for pc in 0..8 {
                    let mut expect: Vec<u8> = s
                        .shapes
                        .iter()
                        .filter(|sh| {
                            (0..8).any(|dy| {
                                (0..8).any(|dx| sh.contains(pc * 8 + dx, pr * 8 + dy))
                            })
                        })
                        .map(|sh| sh.region_id)
                        .collect();
                    expect.sort_unstable();
                    assert_eq!(inc.regions[pr * 8 + pc], expect);
                }
            }
        }
    }

    #[test]
    fn class_frequency_is_uniform() {
        let sp = spec();
        let n = 10_000;
        let mut counts = vec![0usize; sp.n_shape_classes];
        for i in 0..n {
            let s = generate_sample(&sp, sp.seed ^ i as u64).unwrap();
            for &c in &s.labels {
                counts[c] += 1;
            }
        }
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64 / n as f64;
        for (c, &count) in counts.iter().enumerate() {
            let freq = count as f64 / n as f64;
            assert!(
                (freq - mean).abs() <= 0.03,
                "class {c} frequency {freq} deviates from mean {mean}"
            );
        }
    }

    #[test]
    fn swap_background_never_touches_object_pixels() {
        for seed in 0..10 {
            let s = generate_sample(&spec(), seed).unwrap();
            for bg in 0..BACKGROUND_KIND_COUNT {
                let swapped = swap_background(&s, bg, seed.wrapping_add(1234));
                let mut object_diff = 0u64;
                for y in 0..64 {
                    for x in 0..64 {
                        if s.region_map.label(x, y) > 0 {
                            let a = s.image.get(x, y);
                            let b = swapped.image.get(x, y);
                            object_diff += (0..3).map(|i| (a[i] as i64 - b[i] as i64).unsigned_abs()).sum::<u64>();
                        }
                    }
                }
                assert_eq!(object_diff, 0);
                assert_eq!(swapped.region_map.labels(), s.region_map.labels());
                assert_eq!(swapped.labels, s.labels);
            }
        }
    }

    #[test]
    fn swap_to_same_class_and_seed_reproduces_image() {
        let s = generate_sample(&spec(), 3).unwrap();
        let swapped = swap_background(&s, s.background_class, s.background_texture_seed);
        assert_eq!(swapped.image.pixels, s.image.pixels);
    }

    #[test]
    fn swap_with_no_background_is_identity() {
        let mut s = generate_sample(&spec(), 1).unwrap();
        // Force every pixel into region 1.
        s.region_map = RegionMap::new(64, 64, vec![1; 64 * 64]).unwrap();
        let swapped = swap_background(&s, 2, 777);
        assert_eq!(swapped.image.pixels, s.image.pixels);
    }

    #[test]
    fn shuffle_identity_and_inverse() {
        let s = generate_sample(&spec(), 7).unwrap();
        let identity: Vec<usize> = (0..64).collect();
        let same = shuffle_patches(&s.image, 8, &identity).unwrap();
        assert_eq!(same.pixels, s.image.pixels);

        let perm = random_permutation(64, 42);
        let shuffled = shuffle_patches(&s.image, 8, &perm).unwrap();
        let restored = shuffle_patches(&shuffled, 8, &invert_permutation(&perm)).unwrap();
        assert_eq!(restored.pixels, s.image.pixels);

        // Multiset of bytes preserved per channel.
        let mut before = [vec![0u32; 256], vec![0u32; 256], vec![0u32; 256]];
        let mut after = before.clone();
        for (i, &b) in s.image.pixels.iter().enumerate() {
            before[i % 3][b as usize] += 1;
        }
        for (i, &b) in shuffled.pixels.iter().enumerate() {
            after[i % 3][b as usize] += 1;
        }
        assert_eq!(before, after);
    }

    #[test]
    fn k_subset_shuffle_leaves_other_blocks_alone() {
        let s = generate_sample(&spec(), 11).unwrap();
        for &k in &[0usize, 4, 16] {
            let perm = k_subset_permutation(64, k, 5).unwrap();
            let moved: Vec<usize> =
                perm.iter().enumerate().filter(|(d, &s)| *d != s).map(|(d, _)| d).collect();
            assert!(moved.len() <= k);
            let shuffled = shuffle_patches(&s.image, 8, &perm).unwrap();
            // Untouched blocks are bit-identical.
            for block in 0..64 {
                if perm[block] == block {
                    let (br, bc) = (block / 8, block % 8);
                    for row in 0..8 {
                        let off = ((br * 8 + row) * 64 + bc * 8) * 3;
                        assert_eq!(
                            &shuffled.pixels[off..off + 24],
                            &s.image.pixels[off..off + 24]
                        );
                    }
                }
            }
        }
        assert!(k_subset_permutation(64, 65, 0).is_err());
    }

    #[test]
    fn shuffle_rejects_bad_grid() {
        let s = generate_sample(&spec(), 0).unwrap();
        let perm: Vec<usize> = (0..49).collect();
        assert!(shuffle_patches(&s.image, 7, &perm).is_err());
    }

    #[test]
    fn dataset_directories_are_byte_identical() {
        let dir1 = std::env::temp_dir().join("ofa-data-det-1");
        let dir2 = std::env::temp_dir().join("ofa-data-det-2");
        for d in [&dir1, &dir2] {
            let _ = fs::remove_dir_all(d);
        }
        let sp = spec();
        let m1 = generate_dataset(&sp, 5, &dir1).unwrap();
        let m2 = generate_dataset(&sp, 5, &dir2).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(
            fs::read(dir1.join("manifest.jsonl")).unwrap(),
            fs::read(dir2.join("manifest.jsonl")).unwrap()
        );
        for r in &m1.records {
            assert_eq!(
                fs::read(dir1.join(&r.image)).unwrap(),
                fs::read(dir2.join(&r.image)).unwrap()
            );
            assert_eq!(
                fs::read(dir1.join(&r.mask)).unwrap(),
                fs::read(dir2.join(&r.mask)).unwrap()
            );
        }
        // Round trip through the files preserves labels.
        let loaded = Manifest::load(&dir1.join("manifest.jsonl")).unwrap();
        assert_eq!(loaded, m1);
        let (img, map) = load_sample_files(&dir1, &loaded.records[0]).unwrap();
        assert_eq!(img.width, sp.canvas);
        assert_eq!(map.width(), sp.canvas);
        for d in [&dir1, &dir2] {
            let _ = fs::remove_dir_all(d);
        }
    }
}
