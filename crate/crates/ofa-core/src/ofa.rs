//! Attention layer with the object-focused auxiliary branch.
//!
//! The forward pass computes scaled dot-product attention per head and keeps
//! the pre-attention matrices on the tape. The auxiliary branch masks the
//! softmaxed attention down to object patch rows and penalizes its distance
//! to the region-derived target B″, so the loss is differentiable back into
//! the projections.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Knobs of the auxiliary loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfaConfig {
    /// Weight of the auxiliary loss in the total loss.
    pub alpha: f64,
    /// Ascending 1-based encoder layer indices that carry the branch.
    pub ofa_layers: Vec<usize>,
    /// Per-layer weight decay factor; later layers get more weight.
    pub decay: f64,
}

impl Default for OfaConfig {
    fn default() -> Self {
        OfaConfig { alpha: 0.7, ofa_layers: vec![1, 3, 6], decay: 0.9 }
    }
}

impl OfaConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::contract(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.decay) || self.decay == 0.0 {
            return Err(Error::contract(format!("decay must be in (0,1], got {}", self.decay)));
        }
        if self.ofa_layers.is_empty() {
            return Err(Error::contract("ofa_layers must not be empty"));
        }
        for w in self.ofa_layers.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::contract(format!("ofa_layers must be ascending: {:?}", self.ofa_layers)));
            }
        }
        let last = *self.ofa_layers.last().unwrap();
        let first = self.ofa_layers[0];
        if first < 1 || last > depth {
            return Err(Error::contract(format!(
                "ofa_layers {:?} out of range for depth {depth}",
                self.ofa_layers
            )));
        }
        Ok(())
    }
}

/// Tape slots of one layer's projection matrices (each d×d, heads split
/// along columns).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParamIds {
    pub wq: ValueId,
    pub wk: ValueId,
    pub wv: ValueId,
    pub heads: usize,
}

/// Tape slots of everything an attention layer produced. `s` is scaled
/// pre-attention, `a` its row softmax (serving as S′), both per head.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub s: Vec<ValueId>,
    pub a: Vec<ValueId>,
    /// Per-head masked patch attention, filled in by [`mask_s`].
    pub s_dprime: Option<Vec<ValueId>>,
    pub y: ValueId,
    pub n_tokens: usize,
}

/// Per head: Q = XW_Q, K = XW_K, V = XW_V, S = QKᵀ/√d_head, A = softmax(S),
/// Y = AV; heads are concatenated. No positional information is used here,
/// so the op is permutation-equivariant over token rows.
pub fn attention_forward(tape: &mut Tape, x: ValueId, params: AttentionParamIds) -> Result<AttentionTrace> {
    let d = tape.value(x).cols();
    let n_tokens = tape.value(x).rows();
    if tape.value(params.wq).shape() != [d, d]
        || tape.value(params.wk).shape() != [d, d]
        || tape.value(params.wv).shape() != [d, d]
    {
        return Err(Error::ShapeMismatch {
            op: "attention_forward",
            lhs: tape.value(x).shape().to_vec(),
            rhs: tape.value(params.wq).shape().to_vec(),
        });
    }
    if params.heads == 0 || d % params.heads != 0 {
        return Err(Error::contract(format!("heads {} must divide dim {d}", params.heads)));
    }
    let d_head = d / params.heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let q = tape.matmul(x, params.wq)?;
    let k = tape.matmul(x, params.wk)?;
    let v = tape.matmul(x, params.wv)?;

    let mut s_ids = Vec::with_capacity(params.heads);
    let mut a_ids = Vec::with_capacity(params.heads);
    let mut y_parts = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let s_raw = tape.matmul_bt(qh, kh)?;
        let s = tape.scale(s_raw, scale);
        let a = tape.row_softmax(s, None)?;
        let yh = tape.matmul(a, vh)?;
        s_ids.push(s);
        a_ids.push(a);
        y_parts.push(yh);
    }
    let y = tape.concat_cols(&y_parts)?;
    Ok(AttentionTrace { s: s_ids, a: a_ids, s_dprime: None, y, n_tokens })
}

/// Zeroes the background rows of each head's S′ over the patch-to-patch
/// submatrix. When the trace carries one token more than `object_rows`, the
/// leading token is a CLS token whose row and column are dropped first (its
/// softmax mass is left untouched — no renormalization).
pub fn mask_s(tape: &mut Tape, trace: &mut AttentionTrace, object_rows: &[bool]) -> Result<Vec<ValueId>> {
    let n = object_rows.len();
    let cls_offset = match trace.n_tokens.checked_sub(n) {
        Some(0) => 0,
        Some(1) => 1,
        _ => {
            return Err(Error::contract(format!(
                "mask_s: {} object flags cannot address {} tokens",
                n, trace.n_tokens
            )))
        }
    };
    let zeroed: Vec<bool> = object_rows.iter().map(|&o| !o).collect();
    let mut out = Vec::with_capacity(trace.a.len());
    for &a in &trace.a {
        let patch = if cls_offset == 0 {
            a
        } else {
            let rows = tape.slice_rows(a, 1, n)?;
            tape.slice_cols(rows, 1, n)?
        };
        out.push(tape.zero_rows(patch, &zeroed)?);
    }
    trace.s_dprime = Some(out.clone());
    Ok(out)
}

/// Mean over heads of the Frobenius distance between S″ and B″.
pub fn ofa_layer_loss(tape: &mut Tape, s_dprime: &[ValueId], b_dprime: ValueId) -> Result<ValueId> {
    assert!(!s_dprime.is_empty());
    let mut total: Option<ValueId> = None;
    for &s in s_dprime {
        let d = tape.frobenius_distance(s, b_dprime)?;
        total = Some(match total {
            None => d,
            Some(t) => tape.add(t, d)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / s_dprime.len() as f64))
}

/// Weighted mean over the configured layers: with layers l₁ < … < l_m the
/// j-th earliest gets weight decay^(m−j+1), so later layers weigh more.
pub fn combine_layer_losses(
    tape: &mut Tape,
    losses: &BTreeMap<usize, ValueId>,
    cfg: &OfaConfig,
) -> Result<ValueId> {
    let expected: Vec<usize> = cfg.ofa_layers.clone();
    let got: Vec<usize> = losses.keys().copied().collect();
    if got != expected {
        return Err(Error::contract(format!(
            "layer losses {got:?} do not match configured layers {expected:?}"
        )));
    }
    let m = expected.len();
    let mut total: Option<ValueId> = None;
    for (j, layer) in expected.iter().enumerate() {
        let weight = cfg.decay.powi((m - j) as i32);
        let w = tape.scale(losses[layer], weight);
        total = Some(match total {
            None => w,
            Some(t) => tape.add(t, w)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / m as f64))
}

/// task + α · ofa_total.
pub fn total_loss(tape: &mut Tape, task: ValueId, ofa_total: ValueId, alpha: f64) -> Result<ValueId> {
    let weighted = tape.scale(ofa_total, alpha);
    tape.add(task, weighted)
}
