//! Direct single-window evaluation of the attention equations with
//! materialized `N x N x D` relative encoding stacks. Slow, but a literal
//! transcription that the batched graph route is tested against.

use super::ModelParams;
use crate::error::{Error, Result};
use crate::relenc::RelativeIndexMatrices;
use crate::{Real, Tensor};

/// Key and value encoding stacks `[N, N, D]` per channel (app, POI, time).
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeStacks {
    pub key: [Tensor; 3],
    pub val: [Tensor; 3],
}

fn stack(index: &[u16], n: usize, table: &Tensor) -> Result<Tensor> {
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(n * n * d);
    for &ix in index {
        let ix = usize::from(ix);
        if ix >= rows {
            return Err(Error::Integrity(format!("relative index {ix} outside a table of {rows} rows")));
        }
        data.extend_from_slice(table.row(ix));
    }
    Tensor::new(vec![n, n, d], data)
}

/// Element `(i, j)` of each stack is the table row named by matrix entry `(i, j)`.
pub fn retrieve_relative(m: &RelativeIndexMatrices, params: &ModelParams) -> Result<RelativeStacks> {
    let mats = [&m.j, &m.k, &m.t];
    let mut key = Vec::with_capacity(3);
    let mut val = Vec::with_capacity(3);
    for c in 0..3 {
        key.push(stack(mats[c], m.n, &params.rel_key[c])?);
        val.push(stack(mats[c], m.n, &params.rel_val[c])?);
    }
    Ok(RelativeStacks {
        key: key.try_into().expect("three channels"),
        val: val.try_into().expect("three channels"),
    })
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unmasked `x_ij = q_i . (k_j + sum_c rel_c[i, j]) * scale`, where `keys`
/// already include any absolute key term.
pub fn attention_scores(queries: &Tensor, keys: &Tensor, rel_key: &[&Tensor], scale: Real) -> Tensor {
    let n = queries.shape()[0];
    let d = queries.last_dim();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let mut k = keys.row(j).to_vec();
            for r in rel_key {
                let base = (i * n + j) * d;
                k.iter_mut().zip(&r.data()[base..base + d]).for_each(|(a, b)| *a += b);
            }
            out.row_mut(i)[j] = dot(queries.row(i), &k) * scale;
        }
    }
    out
}

/// Causal, pad-aware softmax of a score matrix. Rows of pad queries are 0.
pub fn attention_weights(scores: &Tensor, real: &[bool]) -> Tensor {
    let n = real.len();
    let mut out = Tensor::zeros(&[n, n]);
    for i in (0..n).filter(|&i| real[i]) {
        let admissible: Vec<usize> = (0..=i).filter(|&j| real[j]).collect();
        let max = admissible.iter().map(|&j| scores.row(i)[j]).fold(Real::NEG_INFINITY, Real::max);
        let total: Real = admissible.iter().map(|&j| (scores.row(i)[j] - max).exp()).sum();
        for &j in &admissible {
            out.row_mut(i)[j] = (scores.row(i)[j] - max).exp() / total;
        }
    }
    out
}

/// `z_i = sum_j alpha_ij (v_j + sum_c rel_c[i, j])`, where `values` already
/// include the projected embedding, net category and absolute terms.
pub fn attention_output(alpha: &Tensor, values: &Tensor, rel_val: &[&Tensor]) -> Tensor {
    let n = alpha.shape()[0];
    let d = values.last_dim();
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..n {
            let a = alpha.row(i)[j];
            if a == 0.0 {
                continue;
            }
            let mut v = values.row(j).to_vec();
            for r in rel_val {
                let base = (i * n + j) * d;
                v.iter_mut().zip(&r.data()[base..base + d]).for_each(|(x, y)| *x += y);
            }
            out.row_mut(i).iter_mut().zip(&v).for_each(|(o, x)| *o += a * x);
        }
    }
    out
}
