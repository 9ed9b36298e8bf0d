//! Multilabel evaluation: per-class average precision and their mean.

use crate::error::{Error, Result};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct ClassAp {
    pub class: usize,
    pub ap: f64,
    pub n_positives: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MapReport {
    pub per_class: Vec<ClassAp>,
    /// Classes with no positive sample, excluded from the mean.
    pub excluded_classes: Vec<usize>,
    pub map: f64,
}

/// AP per class via the step rule AP = Σ_n (R_n − R_{n−1})·P_n over the
/// score-descending ranking (ties broken by ascending sample index), then
/// the mean over classes with at least one positive.
pub fn compute_map(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MapReport> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_map",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let n_classes = scores[0].len();
    for (s, l) in scores.iter().zip(labels) {
        if s.len() != n_classes || l.len() != n_classes {
            return Err(Error::ShapeMismatch {
                op: "compute_map",
                lhs: vec![n_classes],
                rhs: vec![s.len().min(l.len())],
            });
        }
    }

    let n = scores.len();
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for c in 0..n_classes {
        let n_positives = labels.iter().filter(|l| l[c]).count();
        if n_positives == 0 {
            excluded.push(c);
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[b][c].partial_cmp(&scores[a][c]).unwrap().then(a.cmp(&b))
        });
        let mut tp = 0usize;
        let mut ap = 0.0;
        for (rank, &idx) in order.iter().enumerate() {
            if labels[idx][c] {
                tp += 1;
                let precision = tp as f64 / (rank + 1) as f64;
                // Recall increases by 1/P exactly here.
                ap += precision / n_positives as f64;
            }
        }
        per_class.push(ClassAp { class: c, ap, n_positives });
    }
    if per_class.is_empty() {
        return Err(Error::contract("compute_map: no class has a positive sample"));
    }
    let map = per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok(MapReport { per_class, excluded_classes: excluded, map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_inverted_rankings() {
        let report =
            compute_map(&[vec![0.9], vec![0.1]], &[vec![true], vec![false]]).unwrap();
        assert_eq!(report.map, 1.0);

        let report =
            compute_map(&[vec![0.1], vec![0.9]], &[vec![true], vec![false]]).unwrap();
        assert_eq!(report.map, 0.5);
    }

    #[test]
    fn map_is_mean_of_class_aps() {
        // class 0 ranked perfectly (AP 1.0), class 1 inverted (AP 0.5)
        let scores = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let labels = vec![vec![true, true], vec![false, false]];
        let report = compute_map(&scores, &labels).unwrap();
        assert_eq!(report.per_class[0].ap, 1.0);
        assert_eq!(report.per_class[1].ap, 0.5);
        assert!((report.map - 0.75).abs() < 1e-15);
    }

    #[test]
    fn classes_without_positives_are_excluded_and_reported() {
        let scores = vec![vec![0.9, 0.5], vec![0.1, 0.4]];
        let labels = vec![vec![true, false], vec![false, false]];
        let report = compute_map(&scores, &labels).unwrap();
        assert_eq!(report.excluded_classes, vec![1]);
        assert_eq!(report.per_class.len(), 1);
        assert_eq!(report.map, 1.0);
    }

    /// Explicit precision/recall table enumeration: recounts true positives
    /// from scratch at every rank cut.
    fn ap_oracle(scores: &[Vec<f64>], labels: &[Vec<bool>], class: usize) -> f64 {
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[b][class].partial_cmp(&scores[a][class]).unwrap().then(a.cmp(&b))
        });
        let total_pos = labels.iter().filter(|l| l[class]).count();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for cut in 1..=n {
            let tp = order[..cut].iter().filter(|&&i| labels[i][class]).count();
            let precision = tp as f64 / cut as f64;
            let recall = tp as f64 / total_pos as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn agrees_with_pr_table_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.gen_range(1..=20);
            let c = 5;
            let scores: Vec<Vec<f64>> =
                (0..n).map(|_| (0..c).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            // Ties are common with quantized scores; exercise them too.
            let quantized: Vec<Vec<f64>> = scores
                .iter()
                .map(|row| row.iter().map(|v| (v * 4.0).round() / 4.0).collect())
                .collect();
            for table in [&scores, &quantized] {
                let labels: Vec<Vec<bool>> =
                    (0..n).map(|_| (0..c).map(|_| rng.gen_bool(0.4)).collect()).collect();
                if !(0..c).any(|cc| labels.iter().any(|l| l[cc])) {
                    continue;
                }
                let report = compute_map(table, &labels).unwrap();
                for entry in &report.per_class {
                    let oracle = ap_oracle(table, &labels, entry.class);
                    assert!(
                        (entry.ap - oracle).abs() < 1e-12,
                        "class {}: {} vs oracle {}",
                        entry.class,
                        entry.ap,
                        oracle
                    );
                }
                let mean = report.per_class.iter().map(|e| e.ap).sum::<f64>()
                    / report.per_class.len() as f64;
                assert!((report.map - mean).abs() < 1e-12);
            }
        }
    }
}
