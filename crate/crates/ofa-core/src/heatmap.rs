//! Attention-map export: turns attention rows into grayscale heatmaps.

use crate::error::{Error, Result};
use crate::netpbm::GrayImage;
use crate::tensor::Tensor;

/// Mean over heads of same-shape attention matrices.
pub fn head_mean(heads: &[Tensor]) -> Tensor {
    assert!(!heads.is_empty());
    let mut out = Tensor::zeros(heads[0].shape());
    let inv = 1.0 / heads.len() as f64;
    for h in heads {
        for (o, &v) in out.data_mut().iter_mut().zip(h.data()) {
            *o += v * inv;
        }
    }
    out
}

/// CLS-to-patch attention: row 0 of the token attention matrix, restricted
/// to the first `n_patches` patch columns (full-scale tokens).
pub fn cls_attention_row(attention: &Tensor, n_patches: usize) -> Vec<f64> {
    (0..n_patches).map(|j| attention.at2(0, 1 + j)).collect()
}

/// Mean attention received by each full-scale patch, averaged over all
/// patch rows (CLS row excluded).
pub fn mean_patch_attention(attention: &Tensor, n_patches: usize) -> Vec<f64> {
    let total_tokens = attention.rows() - 1;
    let inv = 1.0 / total_tokens as f64;
    (0..n_patches)
        .map(|j| (0..total_tokens).map(|i| attention.at2(1 + i, 1 + j)).sum::<f64>() * inv)
        .collect()
}

/// Rescales the values to [0,255] by their max (a uniform row becomes a
/// constant image) and upsamples the grid to the requested size by nearest
/// neighbor.
pub fn values_to_heatmap(
    values: &[f64],
    grid_rows: usize,
    grid_cols: usize,
    out_h: usize,
    out_w: usize,
) -> Result<GrayImage> {
    if values.len() != grid_rows * grid_cols {
        return Err(Error::contract(format!(
            "{} values do not fill a {grid_rows}x{grid_cols} grid",
            values.len()
        )));
    }
    let max = values.iter().fold(0.0_f64, |a, &b| a.max(b));
    let scaled: Vec<u8> = values
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect();
    let mut pixels = vec![0u8; out_h * out_w];
    for y in 0..out_h {
        let gy = y * grid_rows / out_h;
        for x in 0..out_w {
            let gx = x * grid_cols / out_w;
            pixels[y * out_w + x] = scaled[gy * grid_cols + gx];
        }
    }
    Ok(GrayImage { width: out_w, height: out_h, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_row_exports_constant_image() {
        let values = vec![0.25; 4];
        let img = values_to_heatmap(&values, 2, 2, 8, 8).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 255));
    }

    #[test]
    fn values_scale_by_row_max_and_upsample_nearest() {
        let values = vec![0.5, 0.25, 0.0, 0.125];
        let img = values_to_heatmap(&values, 2, 2, 4, 4).unwrap();
        // top-left block = 255, top-right 128, bottom-left 0, bottom-right 64
        assert_eq!(img.pixels[0], 255);
        assert_eq!(img.pixels[3], 128);
        assert_eq!(img.pixels[12], 0);
        assert_eq!(img.pixels[15], 64);
        // nearest-neighbor: each 2x2 block constant
        assert_eq!(img.pixels[0], img.pixels[5]);
    }

    #[test]
    fn cls_and_mean_rows() {
        // 3 tokens: CLS + 2 patches.
        let a = Tensor::from_rows(&[
            &[0.2, 0.5, 0.3],
            &[0.1, 0.6, 0.3],
            &[0.4, 0.4, 0.2],
        ]);
        assert_eq!(cls_attention_row(&a, 2), vec![0.5, 0.3]);
        let mean = mean_patch_attention(&a, 2);
        assert!((mean[0] - 0.5).abs() < 1e-15);
        assert!((mean[1] - 0.25).abs() < 1e-15);
    }
}
