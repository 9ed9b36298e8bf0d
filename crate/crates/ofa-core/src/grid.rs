//! Patch-grid geometry: patchify/unpatchify, the multiscale reference grid,
//! and cell-based masking carried across scales.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Pixel geometry of one image scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
}

impl GridSpec {
    pub fn new(image_height: usize, image_width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || image_height % patch_size != 0 || image_width % patch_size != 0 {
            return Err(Error::contract(format!(
                "patch size {patch_size} must divide image {image_height}x{image_width}"
            )));
        }
        Ok(GridSpec { image_height, image_width, patch_size })
    }

    pub fn rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.rows() * self.cols()
    }
}

/// Cell grid shared by all scales; one cell per full-scale patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceGrid {
    pub rows: usize,
    pub cols: usize,
}

impl ReferenceGrid {
    pub fn from_full_scale(spec: &GridSpec) -> Self {
        ReferenceGrid { rows: spec.rows(), cols: spec.cols() }
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Ordered image scales, full resolution first; all share one patch size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSet {
    specs: Vec<GridSpec>,
}

impl ScaleSet {
    /// Builds from square canvas side lengths. Every side must be divisible
    /// by the patch size, and downscaled sides must divide the full side (so
    /// downscaling is area pooling by an integer factor).
    pub fn from_sides(sides: &[usize], patch_size: usize) -> Result<Self> {
        if sides.is_empty() {
            return Err(Error::contract("scale set needs at least one scale"));
        }
        let full = sides[0];
        let mut specs = Vec::with_capacity(sides.len());
        for (i, &side) in sides.iter().enumerate() {
            if i > 0 {
                if side >= full || full % side != 0 {
                    return Err(Error::contract(format!(
                        "scale {side} must be an integer divisor of the full scale {full}"
                    )));
                }
            }
            specs.push(GridSpec::new(side, side, patch_size)?);
        }
        Ok(ScaleSet { specs })
    }

    pub fn specs(&self) -> &[GridSpec] {
        &self.specs
    }

    pub fn full(&self) -> &GridSpec {
        &self.specs[0]
    }

    pub fn reference_grid(&self) -> ReferenceGrid {
        ReferenceGrid::from_full_scale(self.full())
    }

    /// Total patch-token count over all scales.
    pub fn n_tokens(&self) -> usize {
        self.specs.iter().map(GridSpec::n_patches).sum()
    }
}

/// Grid position of one patch token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenCoord {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
}

/// Random subset of reference-grid cells.
#[derive(Clone, Debug)]
pub struct CellMask {
    pub masked: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

impl CellMask {
    pub fn n_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Cuts an image tensor [H, W, C] into row-major flattened patches.
/// Each token row holds the patch pixels in (y, x, channel) order.
pub fn patchify(image: &Tensor, spec: &GridSpec) -> Result<(Tensor, Vec<TokenCoord>)> {
    if image.rank() != 3
        || image.shape()[0] != spec.image_height
        || image.shape()[1] != spec.image_width
    {
        return Err(Error::contract(format!(
            "patchify: image shape {:?} does not match spec {}x{}",
            image.shape(),
            spec.image_height,
            spec.image_width
        )));
    }
    let (w, c) = (image.shape()[1], image.shape()[2]);
    let ps = spec.patch_size;
    let (rows, cols) = (spec.rows(), spec.cols());
    let patch_len = ps * ps * c;
    let mut data = Vec::with_capacity(rows * cols * patch_len);
    let mut coords = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            for py in 0..ps {
                let y = pr * ps + py;
                let x0 = pc * ps;
                let start = (y * w + x0) * c;
                data.extend_from_slice(&image.data()[start..start + ps * c]);
            }
            coords.push(TokenCoord { scale: 0, row: pr, col: pc });
        }
    }
    Ok((Tensor::new(vec![rows * cols, patch_len], data)?, coords))
}

/// Inverse of [`patchify`]; bit-exact.
pub fn unpatchify(tokens: &Tensor, spec: &GridSpec, channels: usize) -> Result<Tensor> {
    let ps = spec.patch_size;
    let (rows, cols) = (spec.rows(), spec.cols());
    let patch_len = ps * ps * channels;
    if tokens.rank() != 2 || tokens.rows() != rows * cols || tokens.cols() != patch_len {
        return Err(Error::contract(format!(
            "unpatchify: tokens shape {:?} does not match grid {}x{} patches of {}",
            tokens.shape(),
            rows,
            cols,
            patch_len
        )));
    }
    let (h, w) = (spec.image_height, spec.image_width);
    let mut data = vec![0.0; h * w * channels];
    for pr in 0..rows {
        for pc in 0..cols {
            let tok = &tokens.data()[(pr * cols + pc) * patch_len..(pr * cols + pc + 1) * patch_len];
            for py in 0..ps {
                let y = pr * ps + py;
                let x0 = pc * ps;
                let dst = (y * w + x0) * channels;
                data[dst..dst + ps * channels]
                    .copy_from_slice(&tok[py * ps * channels..(py + 1) * ps * channels]);
            }
        }
    }
    Tensor::new(vec![h, w, channels], data)
}

/// Flattened patch tokens of every scale, full scale first, with coordinates.
pub fn multiscale_tokens(images: &[Tensor], scales: &ScaleSet) -> Result<(Tensor, Vec<TokenCoord>)> {
    if images.len() != scales.specs().len() {
        return Err(Error::contract(format!(
            "expected {} scale images, got {}",
            scales.specs().len(),
            images.len()
        )));
    }
    let mut all_data = Vec::new();
    let mut all_coords = Vec::new();
    let mut patch_len = 0;
    let mut n_tokens = 0;
    for (si, (image, spec)) in images.iter().zip(scales.specs()).enumerate() {
        let (tokens, coords) = patchify(image, spec)?;
        patch_len = tokens.cols();
        n_tokens += tokens.rows();
        all_data.extend_from_slice(tokens.data());
        all_coords.extend(coords.into_iter().map(|c| TokenCoord { scale: si, ..c }));
    }
    Ok((Tensor::new(vec![n_tokens, patch_len], all_data)?, all_coords))
}

/// Maps a patch to the reference cell containing its normalized center,
/// clamped at the high boundary. At full scale this is the identity.
pub fn map_patch_to_cell(coord: TokenCoord, scale_spec: &GridSpec, reference: &ReferenceGrid) -> (usize, usize) {
    let ps = scale_spec.patch_size as f64;
    let cy = (coord.row as f64 + 0.5) * ps / scale_spec.image_height as f64;
    let cx = (coord.col as f64 + 0.5) * ps / scale_spec.image_width as f64;
    let cell_row = ((cy * reference.rows as f64).floor() as usize).min(reference.rows - 1);
    let cell_col = ((cx * reference.cols as f64).floor() as usize).min(reference.cols - 1);
    (cell_row, cell_col)
}

/// Flat reference-cell index of a token.
pub fn cell_index(coord: TokenCoord, scale_spec: &GridSpec, reference: &ReferenceGrid) -> usize {
    let (r, c) = map_patch_to_cell(coord, scale_spec, reference);
    r * reference.cols + c
}

/// Uniformly masks ⌊ratio · cells⌋ cells, deterministic per seed.
pub fn sample_cell_mask(reference: &ReferenceGrid, ratio: f64, seed: u64) -> Result<CellMask> {
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::contract(format!("masking ratio must be in (0,1), got {ratio}")));
    }
    let n = reference.n_cells();
    let k = (ratio * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first k entries are a uniform k-subset.
    for i in 0..k.min(n.saturating_sub(1)) {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut masked = vec![false; n];
    for &i in idx.iter().take(k) {
        masked[i] = true;
    }
    Ok(CellMask { masked, ratio, seed })
}

/// A token is masked iff its reference cell is masked.
pub fn apply_multiscale_mask(
    mask: &CellMask,
    coords: &[TokenCoord],
    scales: &ScaleSet,
    reference: &ReferenceGrid,
) -> Vec<bool> {
    coords
        .iter()
        .map(|&c| mask.masked[cell_index(c, &scales.specs()[c.scale], reference)])
        .collect()
}

/// Area-average downscaling by an integer factor, per channel.
pub fn downscale_area(image: &Tensor, factor: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::contract("downscale_area: image must be rank 3".to_string()));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(format!(
            "downscale factor {factor} must divide image {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut data = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += image.data()[((oy * factor + dy) * w + ox * factor + dx) * c + ch];
                    }
                }
                data[(oy * ow + ox) * c + ch] = acc * norm;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], data)
}
