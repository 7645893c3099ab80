use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Architecture, ModelParams, CHANNELS, LN_EPS};
use crate::data::{sample_distinct_excluding, sample_excluding, CheckIn, IdSet, Window};
use crate::error::{Error, Result};
use crate::numcore::Var;
use crate::relenc::RelativeIndexMatrices;
use crate::{AdamState, Graph, Real, Tensor};

/// A window together with its relative index matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedWindow {
    pub window: Window,
    pub rel: RelativeIndexMatrices,
}

/// A training window with the next check-in for every slot (`None` for pads).
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub input: PreparedWindow,
    pub targets: Vec<Option<CheckIn>>,
    /// POIs never drawn as negatives for this user.
    pub exclude: Arc<IdSet>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrHyper {
    pub dropout: f64,
    pub kappa: Real,
    pub lambda: Real,
}

impl Default for SrHyper {
    fn default() -> Self {
        Self {
            dropout: 0.2,
            kappa: 0.5,
            lambda: 0.002,
        }
    }
}

/// `[rows, cols]` matrix whose row `r` averages the one-hot rows of `sets[r]`.
fn averaging_matrix<'s>(sets: impl Iterator<Item = &'s [usize]>, rows: usize, cols: usize) -> Result<Tensor> {
    let mut m = Tensor::zeros(&[rows, cols]);
    for (r, set) in sets.enumerate() {
        if set.is_empty() {
            continue;
        }
        let w = 1.0 / set.len() as Real;
        let row = m.row_mut(r);
        for &id in set {
            if id >= cols {
                return Err(Error::OutOfRange {
                    what: "category",
                    id,
                    limit: cols,
                });
            }
            row[id] += w;
        }
    }
    Ok(m)
}

/// Flattened model inputs for `b` windows of length `n` (`b * n` rows).
#[derive(Clone, Debug)]
pub struct SrBatch {
    pub b: usize,
    pub n: usize,
    pois: Vec<usize>,
    positions: Vec<usize>,
    keep: Arc<[bool]>,
    attn_mask: Vec<bool>,
    rel_idx: [Arc<[usize]>; 3],
    mu_app_avg: Tensor,
    mu_poi_avg: Tensor,
}

impl SrBatch {
    pub fn new(windows: &[&PreparedWindow], arch: &Architecture) -> Result<Self> {
        let b = windows.len();
        let n = windows.first().map(|w| w.window.len()).ok_or_else(|| Error::Usage("empty batch".into()))?;
        if n > arch.max_len {
            return Err(Error::Usage(format!("window length {n} exceeds max_len {}", arch.max_len)));
        }
        let clips = [arch.relative.clip_app, arch.relative.clip_poi, arch.relative.clip_time];
        let mut pois = Vec::with_capacity(b * n);
        let mut keep = Vec::with_capacity(b * n);
        let mut attn_mask = Vec::with_capacity(b * n * n);
        let mut rel_idx: [Vec<usize>; 3] = Default::default();
        for pw in windows {
            let w = &pw.window;
            if w.len() != n || pw.rel.n != n {
                return Err(Error::Usage("all windows in a batch must share one length".into()));
            }
            for &p in &w.pois {
                if p > arch.pad_poi() {
                    return Err(Error::OutOfRange {
                        what: "poi",
                        id: p,
                        limit: arch.pad_poi() + 1,
                    });
                }
            }
            pois.extend_from_slice(&w.pois);
            keep.extend_from_slice(&w.pad_mask);
            for i in 0..n {
                for j in 0..n {
                    attn_mask.push(j <= i && w.pad_mask[i] && w.pad_mask[j]);
                }
            }
            for (c, m) in [&pw.rel.j, &pw.rel.k, &pw.rel.t].into_iter().enumerate() {
                if let Some(&bad) = m.iter().find(|&&v| v > clips[c]) {
                    return Err(Error::Integrity(format!(
                        "{} index {bad} exceeds clip {}",
                        CHANNELS[c], clips[c]
                    )));
                }
                rel_idx[c].extend(m.iter().map(|&v| usize::from(v)));
            }
        }
        let apps = windows.iter().flat_map(|w| w.window.app_categories.iter().map(Vec::as_slice));
        let mu_app_avg = averaging_matrix(apps, b * n, arch.num_app_categories)?;
        let cats = windows.iter().flat_map(|w| w.window.poi_categories.iter().map(Vec::as_slice));
        let mu_poi_avg = averaging_matrix(cats, b * n, arch.num_poi_categories)?;
        let [j, k, t] = rel_idx;
        Ok(Self {
            b,
            n,
            pois,
            positions: (0..b).flat_map(|_| 0..n).collect(),
            keep: keep.into(),
            attn_mask,
            rel_idx: [j.into(), k.into(), t.into()],
            mu_app_avg,
            mu_poi_avg,
        })
    }

    pub fn rows(&self) -> usize {
        self.b * self.n
    }
}

/// Per-position targets and sampled negatives for [`loss_sr`].
#[derive(Clone, Debug)]
pub struct TargetBatch {
    weights: Vec<Real>,
    pos: Vec<usize>,
    neg: Vec<usize>,
    tgt_app_avg: Tensor,
    neg_app_avg: Tensor,
    tgt_poi_avg: Tensor,
    neg_poi_avg: Tensor,
}

impl TargetBatch {
    pub fn num_targets(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }
}

/// Draws one negative POI outside the user's history per real position, and
/// for each target check-in an equally sized set of unused app (POI)
/// categories.
pub fn sample_targets(examples: &[&TrainExample], arch: &Architecture, rng: &mut impl Rng) -> Result<TargetBatch> {
    let rows: usize = examples.iter().map(|e| e.targets.len()).sum();
    let mut weights = Vec::with_capacity(rows);
    let mut pos = Vec::with_capacity(rows);
    let mut neg = Vec::with_capacity(rows);
    let mut tgt_app: Vec<Vec<usize>> = Vec::with_capacity(rows);
    let mut neg_app: Vec<Vec<usize>> = Vec::with_capacity(rows);
    let mut tgt_poi: Vec<Vec<usize>> = Vec::with_capacity(rows);
    let mut neg_poi: Vec<Vec<usize>> = Vec::with_capacity(rows);
    let draw_set = |universe: usize, used: &[usize], rng: &mut dyn rand::RngCore| -> Result<Vec<usize>> {
        let excluded = IdSet::new(used.iter().copied());
        let count = used.len().min(excluded.complement_len(universe));
        if count == 0 {
            return Err(Error::Sampling("a check-in uses every category".into()));
        }
        Ok(sample_distinct_excluding(universe, &excluded, count, rng))
    };
    for ex in examples {
        if ex.targets.len() != ex.input.window.len() {
            return Err(Error::Usage("one target slot per window slot is required".into()));
        }
        for t in &ex.targets {
            match t {
                Some(c) => {
                    if c.poi >= arch.num_pois {
                        return Err(Error::OutOfRange {
                            what: "poi",
                            id: c.poi,
                            limit: arch.num_pois,
                        });
                    }
                    weights.push(1.0);
                    pos.push(c.poi);
                    neg.push(sample_excluding(arch.num_pois, &ex.exclude, rng)?);
                    neg_app.push(draw_set(arch.num_app_categories, &c.app_categories, rng)?);
                    neg_poi.push(draw_set(arch.num_poi_categories, &c.poi_categories, rng)?);
                    tgt_app.push(c.app_categories.clone());
                    tgt_poi.push(c.poi_categories.clone());
                }
                None => {
                    weights.push(0.0);
                    pos.push(arch.pad_poi());
                    neg.push(arch.pad_poi());
                    for v in [&mut tgt_app, &mut neg_app, &mut tgt_poi, &mut neg_poi] {
                        v.push(Vec::new());
                    }
                }
            }
        }
    }
    let avg = |sets: &[Vec<usize>], cols| averaging_matrix(sets.iter().map(Vec::as_slice), rows, cols);
    Ok(TargetBatch {
        weights,
        pos,
        neg,
        tgt_app_avg: avg(&tgt_app, arch.num_app_categories)?,
        neg_app_avg: avg(&neg_app, arch.num_app_categories)?,
        tgt_poi_avg: avg(&tgt_poi, arch.num_poi_categories)?,
        neg_poi_avg: avg(&neg_poi, arch.num_poi_categories)?,
    })
}

#[derive(Clone, Copy, Debug)]
struct BlockVars {
    ln1_scale: Var,
    ln1_shift: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    ln2_scale: Var,
    ln2_shift: Var,
    ffn_w1: Var,
    ffn_b1: Var,
    ffn_w2: Var,
    ffn_b2: Var,
}

/// Graph handles for a [`ModelParams`]. Inactive tensors are not registered;
/// frozen ones are constants.
#[derive(Clone, Debug)]
pub struct ParamVars {
    poi: Var,
    pos_key: Option<Var>,
    pos_val: Option<Var>,
    rel: [Option<(Var, Var)>; 3],
    blocks: Vec<BlockVars>,
    pub cat_app: Var,
    pub cat_poi: Var,
    trainable: Vec<Var>,
    penalized: Vec<Var>,
}

impl ParamVars {
    pub fn register<'a>(params: &'a ModelParams, g: &mut Graph<'a>) -> Self {
        Self::register_with(params, g, |_, _| None)
    }

    /// Like [`register`](Self::register), but `substitute(name, graph)` may
    /// supply the node for any tensor.
    pub fn register_with<'a>(
        params: &'a ModelParams,
        g: &mut Graph<'a>,
        mut substitute: impl FnMut(&str, &mut Graph<'a>) -> Option<Var>,
    ) -> Self {
        let mut vars: HashMap<String, Var> = HashMap::new();
        let mut trainable = Vec::new();
        let mut penalized = Vec::new();
        for (name, t) in params.named() {
            if !params.is_active(&name) {
                continue;
            }
            let train = params.is_trainable(&name);
            let v = match substitute(&name, g) {
                Some(v) => v,
                None if train => g.param(t),
                None => g.constant_ref(t),
            };
            if train {
                trainable.push(v);
                if !ModelParams::is_layer_norm(&name) {
                    penalized.push(v);
                }
            }
            vars.insert(name, v);
        }
        let cats = &params.categories;
        let mut cat = |name: &str, t: &'a Tensor, g: &mut Graph<'a>| match substitute(name, g) {
            Some(v) => v,
            None if cats.is_frozen() => g.constant_ref(t),
            None => g.param(t),
        };
        let cat_app = cat("ei.app", &cats.app, g);
        let cat_poi = cat("ei.poi", &cats.poi, g);
        let get = |n: &str| vars.get(n).copied();
        let rel = CHANNELS.map(|c| get(&format!("rel_{c}_key")).zip(get(&format!("rel_{c}_val"))));
        let blocks = (0..params.arch.blocks)
            .map(|r| {
                let b = |f: &str| vars[&format!("block{r}.{f}")];
                BlockVars {
                    ln1_scale: b("ln1_scale"),
                    ln1_shift: b("ln1_shift"),
                    w_q: b("w_q"),
                    w_k: b("w_k"),
                    w_v: b("w_v"),
                    ln2_scale: b("ln2_scale"),
                    ln2_shift: b("ln2_shift"),
                    ffn_w1: b("ffn_w1"),
                    ffn_b1: b("ffn_b1"),
                    ffn_w2: b("ffn_w2"),
                    ffn_b2: b("ffn_b2"),
                }
            })
            .collect();
        Self {
            poi: vars["poi"],
            pos_key: get("pos_key"),
            pos_val: get("pos_val"),
            rel,
            blocks,
            cat_app,
            cat_poi,
            trainable,
            penalized,
        }
    }

    /// Trainable leaves in [`ModelParams::trainable_names`] order.
    pub fn trainable(&self) -> &[Var] {
        &self.trainable
    }
}

pub(super) fn layer_norm(g: &mut Graph<'_>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let h = g.layer_norm_core(x, LN_EPS)?;
    let h = g.mul_row(h, scale)?;
    g.add_row(h, shift)
}

fn head_slice(g: &mut Graph<'_>, x: Var, heads: usize, h: usize, dh: usize) -> Result<Var> {
    if heads == 1 {
        Ok(x)
    } else {
        g.slice_cols(x, h * dh, dh)
    }
}

/// Runs every block and returns the final states `[b * n, D]`.
pub fn forward<'a>(
    g: &mut Graph<'a>,
    vars: &ParamVars,
    params: &'a ModelParams,
    batch: &'a SrBatch,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<Var> {
    forward_capturing(g, vars, params, batch, dropout, rng, None)
}

fn forward_capturing<'a>(
    g: &mut Graph<'a>,
    vars: &ParamVars,
    params: &'a ModelParams,
    batch: &'a SrBatch,
    dropout: f64,
    rng: &mut impl Rng,
    mut capture: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let arch = &params.arch;
    let (b, n, heads, dh) = (batch.b, batch.n, arch.heads, arch.head_dim());
    let rows = batch.rows();
    let inv_sqrt = 1.0 / (dh as Real).sqrt();
    let clips = [arch.relative.clip_app, arch.relative.clip_poi, arch.relative.clip_time];

    let e = g.gather(vars.poi, &batch.pois)?;
    let mut z = g.mask_rows(e, batch.keep.clone())?;

    let avg_app = g.constant_ref(&batch.mu_app_avg);
    let avg_poi = g.constant_ref(&batch.mu_poi_avg);
    let mu_a = g.matmul(avg_app, vars.cat_app)?;
    let mu_l = g.matmul(avg_poi, vars.cat_poi)?;
    let mu_bar = g.add(mu_a, mu_l)?;

    let pos_key = vars.pos_key.map(|p| g.gather(p, &batch.positions)).transpose()?;
    let pos_val = vars.pos_val.map(|p| g.gather(p, &batch.positions)).transpose()?;

    for bv in &vars.blocks {
        let h = layer_norm(g, z, bv.ln1_scale, bv.ln1_shift)?;
        let q = g.matmul(h, bv.w_q)?;
        let mut k = g.matmul(h, bv.w_k)?;
        if let Some(p) = pos_key {
            k = g.add(k, p)?;
        }
        let v0 = g.matmul(h, bv.w_v)?;
        let mut v = g.add(v0, mu_bar)?;
        if let Some(p) = pos_val {
            v = g.add(v, p)?;
        }

        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = head_slice(g, q, heads, hd, dh)?;
            let kh = head_slice(g, k, heads, hd, dh)?;
            let vh = head_slice(g, v, heads, hd, dh)?;
            let q3 = g.reshape(qh, vec![b, n, dh])?;
            let k3 = g.reshape(kh, vec![b, n, dh])?;
            let k3t = g.transpose(k3)?;
            let s3 = g.bmm(q3, k3t)?;
            let mut s = g.reshape(s3, vec![rows, n])?;
            for (c, tables) in vars.rel.iter().enumerate() {
                if let Some((tk, _)) = *tables {
                    let tkh = head_slice(g, tk, heads, hd, dh)?;
                    let tkt = g.transpose(tkh)?;
                    let per_index = g.matmul(qh, tkt)?;
                    let r = g.gather_cols(per_index, batch.rel_idx[c].clone(), n)?;
                    s = g.add(s, r)?;
                }
            }
            let s = g.scale(s, inv_sqrt)?;
            let alpha = g.softmax_masked(s, Some(&batch.attn_mask))?;
            if let Some(c) = capture.as_deref_mut() {
                c.push(alpha);
            }
            let a3 = g.reshape(alpha, vec![b, n, n])?;
            let v3 = g.reshape(vh, vec![b, n, dh])?;
            let o3 = g.bmm(a3, v3)?;
            let mut o = g.reshape(o3, vec![rows, dh])?;
            for (c, tables) in vars.rel.iter().enumerate() {
                if let Some((_, tv)) = *tables {
                    let tvh = head_slice(g, tv, heads, hd, dh)?;
                    let binned = g.scatter_cols(alpha, batch.rel_idx[c].clone(), usize::from(clips[c]) + 1)?;
                    let r = g.matmul(binned, tvh)?;
                    o = g.add(o, r)?;
                }
            }
            outs.push(o);
        }
        let attn = if heads == 1 { outs[0] } else { g.concat(&outs)? };
        let attn = g.dropout(attn, dropout, rng)?;
        let z1 = g.add(z, attn)?;
        z = g.mask_rows(z1, batch.keep.clone())?;

        let h2 = layer_norm(g, z, bv.ln2_scale, bv.ln2_shift)?;
        let f = g.matmul(h2, bv.ffn_w1)?;
        let f = g.add_row(f, bv.ffn_b1)?;
        let f = g.relu(f)?;
        let f = g.matmul(f, bv.ffn_w2)?;
        let f = g.add_row(f, bv.ffn_b2)?;
        let f = g.dropout(f, dropout, rng)?;
        let z2 = g.add(z, f)?;
        z = g.mask_rows(z2, batch.keep.clone())?;
    }
    Ok(z)
}

/// `-sum w [log s(q+) + log(1 - s(q-))]` for row-wise scores of `z` against
/// positive and negative target rows.
fn bce_pair(g: &mut Graph<'_>, z: Var, pos: Var, neg: Var, weights: &[Real]) -> Result<Var> {
    let sp = g.row_dot(z, pos)?;
    let sn = g.row_dot(z, neg)?;
    let lp = g.log_sigmoid(sp)?;
    let nsn = g.scale(sn, -1.0)?;
    let ln = g.log_sigmoid(nsn)?;
    let a = g.weighted_sum(lp, weights.to_vec())?;
    let c = g.weighted_sum(ln, weights.to_vec())?;
    let total = g.add(a, c)?;
    g.scale(total, -1.0)
}

/// `L_Rec + kappa (L_App + L_POI)`, with `L_Rec` carrying the
/// `lambda * |theta|^2` penalty over trainable non-layer-norm tensors.
pub fn loss_sr<'a>(
    g: &mut Graph<'a>,
    vars: &ParamVars,
    z: Var,
    targets: &'a TargetBatch,
    hyper: &SrHyper,
) -> Result<Var> {
    if targets.weights.len() != g.shape(z)[0] {
        return Err(Error::Dimension {
            op: "loss_sr",
            detail: format!("{} targets for {:?} states", targets.weights.len(), g.shape(z)),
        });
    }
    let pos = g.gather(vars.poi, &targets.pos)?;
    let neg = g.gather(vars.poi, &targets.neg)?;
    let mut loss = bce_pair(g, z, pos, neg, &targets.weights)?;

    if hyper.lambda != 0.0 {
        let mut l2 = None;
        for &p in &vars.penalized {
            let s = g.sum_squares(p)?;
            l2 = Some(match l2 {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        if let Some(l2) = l2 {
            let pen = g.scale(l2, hyper.lambda)?;
            loss = g.add(loss, pen)?;
        }
    }

    if hyper.kappa != 0.0 {
        let cat_term = |g: &mut Graph<'a>, tgt: &'a Tensor, negs: &'a Tensor, table: Var| -> Result<Var> {
            let t = g.constant_ref(tgt);
            let nn = g.constant_ref(negs);
            let mp = g.matmul(t, table)?;
            let mn = g.matmul(nn, table)?;
            bce_pair(g, z, mp, mn, &targets.weights)
        };
        let l_app = cat_term(g, &targets.tgt_app_avg, &targets.neg_app_avg, vars.cat_app)?;
        let l_poi = cat_term(g, &targets.tgt_poi_avg, &targets.neg_poi_avg, vars.cat_poi)?;
        let cats = g.add(l_app, l_poi)?;
        let cats = g.scale(cats, hyper.kappa)?;
        loss = g.add(loss, cats)?;
    }
    Ok(loss)
}

/// Dot products of a query state with candidate POI embedding rows.
pub fn predict_scores(z: &[Real], candidates: &[usize], params: &ModelParams) -> Result<Vec<Real>> {
    if z.len() != params.arch.dim {
        return Err(Error::Dimension {
            op: "predict_scores",
            detail: format!("state of width {} for dim {}", z.len(), params.arch.dim),
        });
    }
    candidates
        .iter()
        .map(|&c| {
            if c == params.arch.pad_poi() {
                return Err(Error::Usage("the pad POI is not a candidate".into()));
            }
            if c > params.arch.pad_poi() {
                return Err(Error::OutOfRange {
                    what: "poi",
                    id: c,
                    limit: params.arch.num_pois,
                });
            }
            Ok(z.iter().zip(params.poi.row(c)).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Inference-mode states for every slot, `[b * n, D]`, plus the attention
/// weights `[b * n, n]` of every block and head in order.
pub fn encode(params: &ModelParams, windows: &[&PreparedWindow]) -> Result<(Tensor, Vec<Tensor>)> {
    let batch = SrBatch::new(windows, &params.arch)?;
    let mut g = Graph::new();
    let vars = ParamVars::register(params, &mut g);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut alphas = Vec::new();
    let z = forward_capturing(&mut g, &vars, params, &batch, 0.0, &mut unused, Some(&mut alphas))?;
    let alphas = alphas.into_iter().map(|a| g.value(a).clone()).collect();
    Ok((g.value(z).clone(), alphas))
}

/// Inference-mode final state at the last slot of each window.
pub fn final_states(params: &ModelParams, windows: &[&PreparedWindow]) -> Result<Vec<Vec<Real>>> {
    let (z, _) = encode(params, windows)?;
    let n = windows.first().map_or(0, |w| w.window.len());
    Ok((0..windows.len()).map(|i| z.row(i * n + n - 1).to_vec()).collect())
}

/// One optimizer step on `examples` in training mode; returns the loss.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    examples: &[&TrainExample],
    hyper: &SrHyper,
    rng: &mut impl Rng,
) -> Result<Real> {
    let windows: Vec<&PreparedWindow> = examples.iter().map(|e| &e.input).collect();
    let batch = SrBatch::new(&windows, &params.arch)?;
    let targets = sample_targets(examples, &params.arch, rng)?;
    let (loss, grads) = {
        let mut g = Graph::new();
        g.set_training(true);
        let vars = ParamVars::register(params, &mut g);
        let z = forward(&mut g, &vars, params, &batch, hyper.dropout, rng)?;
        let loss = loss_sr(&mut g, &vars, z, &targets, hyper)?;
        let value = g.value(loss).item()?;
        let ids = vars.trainable().to_vec();
        let mut grads = g.backward(loss)?;
        (value, ids.into_iter().map(|v| grads.take(v)).collect::<Vec<_>>())
    };
    let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
    adam.step(&mut params.trainable_mut(), &refs)?;
    Ok(loss)
}
