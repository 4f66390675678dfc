//! Reference single-head scaled dot-product attention.
//!
//! [`attend_planned`] rotates queries and keys according to a
//! [`PositionPlan`], temperature included through the plan's magnitudes.
//! [`attend_explicit`] applies the temperature directly to each logit and is
//! the oracle the planned kernel is checked against.

use crate::error::{invalid, Result};
use crate::extension::PositionPlan;
use crate::matrix::{dot, softmax, Matrix};
use crate::rope::{rotate_with_angles, rotate_with_trig, FrequencyTable};

#[derive(Debug, Clone)]
pub struct AttentionBatch {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
    pub causal: bool,
}

impl AttentionBatch {
    pub fn new(queries: Matrix, keys: Matrix, values: Matrix, causal: bool) -> Result<Self> {
        let n = queries.rows();
        if keys.rows() != n || values.rows() != n {
            return Err(invalid(format!(
                "token counts differ: {} queries, {} keys, {} values",
                n,
                keys.rows(),
                values.rows()
            )));
        }
        if keys.cols() != queries.cols() {
            return Err(invalid("query and key widths differ"));
        }
        Ok(Self {
            queries,
            keys,
            values,
            causal,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.rows() == 0
    }

    fn check_table(&self, table: &FrequencyTable) -> Result<()> {
        if self.queries.cols() != table.head_dim() {
            return Err(invalid(format!(
                "head width {} does not match head_dim {}",
                self.queries.cols(),
                table.head_dim()
            )));
        }
        Ok(())
    }
}

/// Pre-softmax logits (masked entries are `-inf`), attention weights and the
/// weighted sum of values.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub logits: Matrix,
    pub weights: Matrix,
    pub output: Matrix,
}

/// `softmax(⟨R_m q_m, R_n k_n⟩ / (t(m, n)·√d)) V` with one position per token.
pub fn attend_explicit(
    batch: &AttentionBatch,
    positions: &[f64],
    temperatures: &Matrix,
    table: &FrequencyTable,
) -> Result<AttentionOutput> {
    batch.check_table(table)?;
    let n = batch.len();
    if positions.len() != n {
        return Err(invalid(format!(
            "{} positions for {} tokens",
            positions.len(),
            n
        )));
    }
    if temperatures.rows() != n || temperatures.cols() != n {
        return Err(invalid("temperature matrix must be tokens x tokens"));
    }
    let d = table.head_dim();
    let rotate_all = |m: &Matrix| {
        let mut out = Matrix::zeros(n, d);
        for j in 0..n {
            let angles: Vec<f64> = table.freqs().iter().map(|f| f * positions[j]).collect();
            rotate_with_angles(m.row(j), &angles, 1.0, out.row_mut(j));
        }
        out
    };
    let q = rotate_all(&batch.queries);
    let k = rotate_all(&batch.keys);
    let scale = (d as f64).sqrt();
    Ok(finish(batch, &q, &k, |i, j| {
        scale * temperatures.get(i, j)
    }))
}

/// `softmax(⟨R̃_m q_m, R̃_n k_n⟩ / √d) V` where `R̃` applies the plan's per-pair
/// angles and per-token magnitude.
pub fn attend_planned(
    batch: &AttentionBatch,
    plan: &PositionPlan,
    table: &FrequencyTable,
) -> Result<AttentionOutput> {
    batch.check_table(table)?;
    let n = batch.len();
    if plan.len() != n {
        return Err(invalid(format!(
            "plan covers {} tokens, batch has {}",
            plan.len(),
            n
        )));
    }
    let cache = plan.rotary_cache(table)?;
    let d = table.head_dim();
    let rotate_all = |m: &Matrix| {
        let mut out = Matrix::zeros(n, d);
        for j in 0..n {
            rotate_with_trig(m.row(j), cache.trig(j), cache.magnitude(j), out.row_mut(j));
        }
        out
    };
    let q = rotate_all(&batch.queries);
    let k = rotate_all(&batch.keys);
    let scale = (d as f64).sqrt();
    Ok(finish(batch, &q, &k, |_, _| scale))
}

/// Independent heads sharing one plan.
pub fn attend_planned_heads(
    heads: &[AttentionBatch],
    plan: &PositionPlan,
    table: &FrequencyTable,
) -> Result<Vec<AttentionOutput>> {
    heads.iter().map(|h| attend_planned(h, plan, table)).collect()
}

fn finish(
    batch: &AttentionBatch,
    q: &Matrix,
    k: &Matrix,
    divisor: impl Fn(usize, usize) -> f64,
) -> AttentionOutput {
    let n = batch.len();
    let dv = batch.values.cols();
    let mut logits = Matrix::filled(n, n, f64::NEG_INFINITY);
    let mut weights = Matrix::zeros(n, n);
    let mut output = Matrix::zeros(n, dv);
    for i in 0..n {
        let visible = if batch.causal { i + 1 } else { n };
        for j in 0..visible {
            logits.set(i, j, dot(q.row(i), k.row(j)) / divisor(i, j));
        }
        let w = softmax(logits.row(i));
        let out = output.row_mut(i);
        for (j, &wj) in w.iter().enumerate().take(visible) {
            for (o, v) in out.iter_mut().zip(batch.values.row(j)) {
                *o += wj * v;
            }
        }
        weights.row_mut(i).copy_from_slice(&w);
    }
    AttentionOutput {
        logits,
        weights,
        output,
    }
}
