//! Patch adjacency matrices derived from per-pixel region labels.
//!
//! A region map labels every pixel with 0 (background) or a region id 1..=r.
//! Patches that touch a common region are adjacent; the binary adjacency
//! matrix B is row-normalized into B′ (masked softmax, ones → 1/k) and then
//! background rows are zeroed to give B″, the target of the attention loss.

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::tape::row_softmax_values;
use crate::tensor::Tensor;
use serde::Serialize;

/// Per-pixel region labels; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl RegionMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::contract(format!(
                "region map {width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(RegionMap { width, height, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Region ids actually present (excluding background).
    pub fn region_ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=255).filter(|&i| seen[i as usize]).map(|i| i as u8).collect()
    }
}

/// Which regions each patch intersects, plus the object-patch flag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchRegionIncidence {
    /// Sorted region ids per patch.
    pub regions: Vec<Vec<u8>>,
}

impl PatchRegionIncidence {
    pub fn n_patches(&self) -> usize {
        self.regions.len()
    }

    /// A patch is an object patch iff it intersects at least one region.
    pub fn object_flags(&self) -> Vec<bool> {
        self.regions.iter().map(|r| !r.is_empty()).collect()
    }
}

/// The B / B′ / B″ triple plus the object-row indicator.
#[derive(Clone, Debug)]
pub struct PamMatrices {
    pub b: Tensor,
    pub b_prime: Tensor,
    pub b_dprime: Tensor,
    pub object_rows: Vec<bool>,
}

/// Directed counts include self-loops; the undirected pair counts are kept
/// alongside since both framings circulate.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AdjacencyStats {
    pub restricted_edges: u64,
    pub full_edges: u64,
    pub retained_fraction: f64,
    pub restricted_edges_undirected: u64,
    pub full_edges_undirected: u64,
}

/// Any-overlap rule: region j is incident to patch i iff at least one pixel
/// of the patch carries label j.
pub fn patch_region_incidence(map: &RegionMap, spec: &GridSpec) -> Result<PatchRegionIncidence> {
    if map.width() != spec.image_width || map.height() != spec.image_height {
        return Err(Error::ShapeMismatch {
            op: "patch_region_incidence",
            lhs: vec![map.height(), map.width()],
            rhs: vec![spec.image_height, spec.image_width],
        });
    }
    let ps = spec.patch_size;
    let mut regions = Vec::with_capacity(spec.n_patches());
    for pr in 0..spec.rows() {
        for pc in 0..spec.cols() {
            let mut seen = [false; 256];
            for py in 0..ps {
                for px in 0..ps {
                    let l = map.label(pc * ps + px, pr * ps + py);
                    if l > 0 {
                        seen[l as usize] = true;
                    }
                }
            }
            regions.push((1..=255u16).filter(|&i| seen[i as usize]).map(|i| i as u8).collect());
        }
    }
    Ok(PatchRegionIncidence { regions })
}

/// B_ik = 1 iff patches i and k intersect a common region. Background rows
/// and columns (including the diagonal) stay zero.
pub fn build_b(inc: &PatchRegionIncidence) -> Tensor {
    let n = inc.n_patches();
    let mut b = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for k in i..n {
            if shares_region(&inc.regions[i], &inc.regions[k]) {
                b.set2(i, k, 1.0);
                b.set2(k, i, 1.0);
            }
        }
    }
    b
}

fn shares_region(a: &[u8], b: &[u8]) -> bool {
    // Both sides are sorted; merge scan.
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Equal => return true,
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    false
}

/// Masked softmax of B with B itself as the mask: ones become 1/k, all-zero
/// rows stay all-zero.
pub fn build_b_prime(b: &Tensor) -> Tensor {
    let (r, c) = (b.rows(), b.cols());
    let data = row_softmax_values(b.data(), Some(b.data()), r, c);
    Tensor::new(vec![r, c], data).expect("b_prime shape")
}

/// Zeroes the rows of B′ that belong to background patches.
pub fn build_b_dprime(b_prime: &Tensor, object_rows: &[bool]) -> Result<Tensor> {
    if object_rows.len() != b_prime.rows() {
        return Err(Error::contract(format!(
            "object_rows length {} must match rows {}",
            object_rows.len(),
            b_prime.rows()
        )));
    }
    let c = b_prime.cols();
    let mut data = b_prime.data().to_vec();
    for (i, &obj) in object_rows.iter().enumerate() {
        if !obj {
            data[i * c..(i + 1) * c].fill(0.0);
        }
    }
    Tensor::new(vec![b_prime.rows(), c], data)
}

/// Runs the whole pipeline for one region map.
pub fn build_pam(map: &RegionMap, spec: &GridSpec) -> Result<PamMatrices> {
    let inc = patch_region_incidence(map, spec)?;
    let object_rows = inc.object_flags();
    let b = build_b(&inc);
    let b_prime = build_b_prime(&b);
    let b_dprime = build_b_dprime(&b_prime, &object_rows)?;
    Ok(PamMatrices { b, b_prime, b_dprime, object_rows })
}

/// Edge counts of the attention graph B against the complete graph.
pub fn adjacency_stats(b: &Tensor) -> AdjacencyStats {
    let n = b.rows() as u64;
    let mut directed = 0u64;
    let mut diagonal = 0u64;
    for i in 0..b.rows() {
        for k in 0..b.cols() {
            if b.at2(i, k) != 0.0 {
                directed += 1;
                if i == k {
                    diagonal += 1;
                }
            }
        }
    }
    let full = n * n;
    AdjacencyStats {
        restricted_edges: directed,
        full_edges: full,
        retained_fraction: if full == 0 { 0.0 } else { directed as f64 / full as f64 },
        restricted_edges_undirected: (directed + diagonal) / 2,
        full_edges_undirected: n * (n + 1) / 2,
    }
}
