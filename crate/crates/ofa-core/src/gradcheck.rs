//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Index of the parameter holding the worst coordinate.
    pub worst_param: usize,
    pub worst_coord: usize,
    pub n_coords: usize,
}

/// Compares backward() gradients against central finite differences, one
/// coordinate at a time. `loss_fn` must rebuild the same scalar loss from the
/// given leaves on any tape it is handed.
///
/// Relative error per coordinate is |a − n| / max(1e-8, |a| + |n|).
pub fn grad_check<F>(params: &[Tensor], eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if eps <= 0.0 {
        return Err(Error::contract(format!("grad_check: eps must be > 0, got {eps}")));
    }

    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = loss_fn(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| tape.grad(id)).collect();

    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = point.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = loss_fn(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::contract("grad_check: loss must be scalar".to_string()));
        }
        Ok(tape.value(loss).item())
    };

    let mut point: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: 0, worst_coord: 0, n_coords: 0 };
    for pi in 0..point.len() {
        for ci in 0..point[pi].numel() {
            let orig = point[pi].data()[ci];
            point[pi].data_mut()[ci] = orig + eps;
            let f_plus = eval(&point)?;
            point[pi].data_mut()[ci] = orig - eps;
            let f_minus = eval(&point)?;
            point[pi].data_mut()[ci] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            report.n_coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_coord = ci;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_loss_in_five_params() {
        // loss = Σ_i Σ x_i² built as frobenius² via sum of squares through matmul.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: Vec<Tensor> = (0..5).map(|_| rand_tensor(&mut rng, &[1, 3])).collect();
        let report = grad_check(&params, DEFAULT_EPS, |tape, ids| {
            let mut total = None;
            for &id in ids {
                let sq = tape.matmul_bt(id, id)?; // 1×1 = row · rowᵀ
                let s = tape.sum_all(sq);
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let params = vec![Tensor::from_vec(vec![1.0, 2.0])];
        let report = grad_check(&params, DEFAULT_EPS, |tape, _ids| {
            let c = tape.constant(Tensor::scalar(4.0));
            Ok(tape.scale(c, 1.0))
        })
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let params = vec![Tensor::scalar(1.0)];
        assert!(grad_check(&params, 0.0, |tape, ids| Ok(tape.scale(ids[0], 1.0))).is_err());
    }

    #[test]
    fn every_op_passes_gradcheck_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);

        // matmul + add_row_bias + gelu + sum
        let params = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 2]),
            rand_tensor(&mut rng, &[2]),
        ];
        let r = grad_check(&params, DEFAULT_EPS, |tape, ids| {
            let p = tape.matmul(ids[0], ids[1])?;
            let pb = tape.add_row_bias(p, ids[2])?;
            let g = tape.gelu(pb);
            Ok(tape.sum_all(g))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "matmul chain {}", r.max_rel_err);

        // matmul_bt + softmax (weighted so the gradient is non-trivial)
        let params = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])];
        let weights = Tensor::new(vec![3, 3], (0..9).map(|i| (i as f64) * 0.3 - 1.0).collect()).unwrap();
        let r = grad_check(&params, DEFAULT_EPS, move |tape, ids| {
            let s = tape.matmul_bt(ids[0], ids[1])?;
            let a = tape.row_softmax(s, None)?;
            let w = tape.constant(weights.clone());
            let d = tape.frobenius_distance(a, w)?;
            Ok(tape.scale(d, 2.0))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "softmax chain {}", r.max_rel_err);

        // masked softmax with a partially masked row
        let params = vec![rand_tensor(&mut rng, &[2, 4])];
        let mask = Tensor::new(vec![2, 4], vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let target = rand_tensor(&mut rng, &[2, 4]);
        let r = grad_check(&params, DEFAULT_EPS, move |tape, ids| {
            let a = tape.row_softmax(ids[0], Some(&mask))?;
            let t = tape.constant(target.clone());
            tape.frobenius_distance(a, t)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "masked softmax {}", r.max_rel_err);

        // layer_norm with learnable gain/bias
        let params = vec![
            rand_tensor(&mut rng, &[3, 5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
        ];
        let r = grad_check(&params, DEFAULT_EPS, |tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2])?;
            let g = tape.gelu(y);
            Ok(tape.sum_all(g))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "layer_norm {}", r.max_rel_err);

        // bce_with_logits
        let params = vec![rand_tensor(&mut rng, &[4])];
        let targets = Tensor::from_vec(vec![1.0, 0.0, 1.0, 1.0]);
        let r = grad_check(&params, DEFAULT_EPS, move |tape, ids| {
            tape.bce_with_logits(ids[0], &targets)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "bce {}", r.max_rel_err);

        // masked_mse
        let params = vec![rand_tensor(&mut rng, &[2, 3])];
        let target = rand_tensor(&mut rng, &[2, 3]);
        let mask = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let r = grad_check(&params, DEFAULT_EPS, move |tape, ids| {
            tape.masked_mse(ids[0], &target, &mask)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "masked_mse {}", r.max_rel_err);

        // structural ops: slice / concat / zero_rows / gather / broadcast / blend
        let params = vec![
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[5, 3]),
        ];
        let target = rand_tensor(&mut rng, &[6, 3]);
        let r = grad_check(&params, DEFAULT_EPS, move |tape, ids| {
            let top = tape.slice_rows(ids[0], 0, 2)?;
            let picked = tape.gather_rows(ids[2], &[4, 0, 2])?;
            let stacked = tape.concat_rows(&[top, picked, ids[1]])?;
            let blended = tape.row_blend(stacked, ids[1], &[false, true, false, false, false, false])?;
            let zeroed = tape.zero_rows(blended, &[false, false, true, false, false, false])?;
            let t = tape.constant(target.clone());
            tape.frobenius_distance(zeroed, t)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "structural ops {}", r.max_rel_err);

        // concat_cols / slice_cols / broadcast_row
        let params = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[2])];
        let target = rand_tensor(&mut rng, &[3, 4]);
        let r = grad_check(&params, DEFAULT_EPS, move |tape, ids| {
            let left = tape.slice_cols(ids[0], 0, 2)?;
            let b = tape.broadcast_row(ids[1], 3)?;
            let joined = tape.concat_cols(&[left, b])?;
            let t = tape.constant(target.clone());
            tape.frobenius_distance(joined, t)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "concat_cols {}", r.max_rel_err);
    }
}
