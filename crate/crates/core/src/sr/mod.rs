//! Sequential Recommender: causal self-attention over POI embeddings with
//! absolute positional tables and three relative channels (app-category,
//! POI-category and time) on both the key and value paths.

mod checkpoint;
pub mod explicit;
mod model;

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use model::{
    encode, final_states, forward, loss_sr, predict_scores, sample_targets, train_step, ParamVars, PreparedWindow, SrBatch,
    SrHyper, TargetBatch, TrainExample,
};

use crate::ei::CategoryEmbeddings;
use crate::error::{Error, Result};
use crate::relenc::{RelativeConfig, TimeMode};
use crate::{Real, Tensor};

/// Layer-norm smoothing constant.
pub const LN_EPS: Real = 1e-8;

/// Shape-determining configuration, stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub dim: usize,
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
    pub num_pois: usize,
    pub num_app_categories: usize,
    pub num_poi_categories: usize,
    pub relative: RelativeConfig,
    pub use_abs: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("at least one attention block is required".into()));
        }
        if self.dim == 0 || self.max_len == 0 || self.heads == 0 {
            return Err(Error::Config("dim, max_len and heads must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.num_pois == 0 || self.num_app_categories == 0 || self.num_poi_categories == 0 {
            return Err(Error::Config("cardinalities must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Row index of the pad embedding in the POI table.
    pub fn pad_poi(&self) -> usize {
        self.num_pois
    }

    pub fn time_mode(&self) -> TimeMode {
        self.relative.time_mode
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_scale: Tensor,
    pub ln1_shift: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_shift: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

/// Relative channel: 0 = app categories (J), 1 = POI categories (K), 2 = time (T).
pub const CHANNELS: [&str; 3] = ["app", "poi", "time"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    /// `[|L| + 1, D]`, last row is the pad embedding.
    pub poi: Tensor,
    pub pos_key: Tensor,
    pub pos_val: Tensor,
    /// Per channel: `[clip + 1, D]` key and value tables.
    pub rel_key: [Tensor; 3],
    pub rel_val: [Tensor; 3],
    pub blocks: Vec<BlockParams>,
    pub categories: CategoryEmbeddings,
    frozen: BTreeSet<String>,
}

fn normal(shape: &[usize], std: Real, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<Real> = (0..n)
        .map(|_| {
            let z: Real = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("matching numel")
}

impl ModelParams {
    /// Every table is drawn in a fixed order whatever the ablation flags, so
    /// variants sharing a seed share all common initial values.
    pub fn init(arch: Architecture, categories: CategoryEmbeddings, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        if !categories.is_frozen() {
            return Err(Error::Usage("the recommender needs a frozen category table".into()));
        }
        if categories.dim() != arch.dim
            || categories.num_app() != arch.num_app_categories
            || categories.num_poi() != arch.num_poi_categories
        {
            return Err(Error::Dimension {
                op: "ModelParams::init",
                detail: format!(
                    "category table {}x{} / {}x{} vs architecture {:?}",
                    categories.num_app(),
                    categories.dim(),
                    categories.num_poi(),
                    categories.dim(),
                    arch
                ),
            });
        }
        let d = arch.dim;
        let std = 1.0 / (d as Real).sqrt();
        let mut poi = normal(&[arch.num_pois + 1, d], std, rng);
        poi.row_mut(arch.pad_poi()).fill(0.0);
        let pos_key = normal(&[arch.max_len, d], std, rng);
        let pos_val = normal(&[arch.max_len, d], std, rng);
        let clips = [arch.relative.clip_app, arch.relative.clip_poi, arch.relative.clip_time];
        let mut rel_key = Vec::with_capacity(3);
        let mut rel_val = Vec::with_capacity(3);
        for c in clips {
            let rows = usize::from(c) + 1;
            rel_key.push(normal(&[rows, d], std, rng));
            rel_val.push(normal(&[rows, d], std, rng));
        }
        let blocks = (0..arch.blocks)
            .map(|_| BlockParams {
                ln1_scale: Tensor::full(&[d], 1.0),
                ln1_shift: Tensor::zeros(&[d]),
                w_q: normal(&[d, d], std, rng),
                w_k: normal(&[d, d], std, rng),
                w_v: normal(&[d, d], std, rng),
                ln2_scale: Tensor::full(&[d], 1.0),
                ln2_shift: Tensor::zeros(&[d]),
                ffn_w1: normal(&[d, d], std, rng),
                ffn_b1: Tensor::zeros(&[d]),
                ffn_w2: normal(&[d, d], std, rng),
                ffn_b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            arch,
            poi,
            pos_key,
            pos_val,
            rel_key: rel_key.try_into().expect("three channels"),
            rel_val: rel_val.try_into().expect("three channels"),
            blocks,
            categories,
            frozen: BTreeSet::new(),
        })
    }

    pub(crate) fn from_parts(
        arch: Architecture,
        categories: CategoryEmbeddings,
        mut tensors: std::collections::BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks tensor {name:?}")))
        };
        let poi = take("poi")?;
        let pos_key = take("pos_key")?;
        let pos_val = take("pos_val")?;
        let rel_key = [take("rel_app_key")?, take("rel_poi_key")?, take("rel_time_key")?];
        let rel_val = [take("rel_app_val")?, take("rel_poi_val")?, take("rel_time_val")?];
        let mut blocks = Vec::with_capacity(arch.blocks);
        for r in 0..arch.blocks {
            let mut b = |f: &str| take(&format!("block{r}.{f}"));
            blocks.push(BlockParams {
                ln1_scale: b("ln1_scale")?,
                ln1_shift: b("ln1_shift")?,
                w_q: b("w_q")?,
                w_k: b("w_k")?,
                w_v: b("w_v")?,
                ln2_scale: b("ln2_scale")?,
                ln2_shift: b("ln2_shift")?,
                ffn_w1: b("ffn_w1")?,
                ffn_b1: b("ffn_b1")?,
                ffn_w2: b("ffn_w2")?,
                ffn_b2: b("ffn_b2")?,
            });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Integrity(format!("unexpected tensor {extra:?}")));
        }
        let params = Self {
            arch,
            poi,
            pos_key,
            pos_val,
            rel_key,
            rel_val,
            blocks,
            categories,
            frozen: BTreeSet::new(),
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let a = &self.arch;
        let d = a.dim;
        let clips = [a.relative.clip_app, a.relative.clip_poi, a.relative.clip_time];
        let mut out = vec![
            ("poi".to_string(), vec![a.num_pois + 1, d]),
            ("pos_key".to_string(), vec![a.max_len, d]),
            ("pos_val".to_string(), vec![a.max_len, d]),
        ];
        for (c, name) in CHANNELS.iter().enumerate() {
            let rows = usize::from(clips[c]) + 1;
            out.push((format!("rel_{name}_key"), vec![rows, d]));
            out.push((format!("rel_{name}_val"), vec![rows, d]));
        }
        for r in 0..a.blocks {
            for (f, shape) in [
                ("ln1_scale", vec![d]),
                ("ln1_shift", vec![d]),
                ("w_q", vec![d, d]),
                ("w_k", vec![d, d]),
                ("w_v", vec![d, d]),
                ("ln2_scale", vec![d]),
                ("ln2_shift", vec![d]),
                ("ffn_w1", vec![d, d]),
                ("ffn_b1", vec![d]),
                ("ffn_w2", vec![d, d]),
                ("ffn_b2", vec![d]),
            ] {
                out.push((format!("block{r}.{f}"), shape));
            }
        }
        out
    }

    fn check_shapes(&self) -> Result<()> {
        for ((name, shape), (_, t)) in self.expected_shapes().iter().zip(self.named()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Integrity(format!("tensor {name:?} is not finite")));
            }
        }
        Ok(())
    }

    /// All recommender tensors in canonical order (category tables excluded).
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("poi".into(), &self.poi),
            ("pos_key".into(), &self.pos_key),
            ("pos_val".into(), &self.pos_val),
        ];
        for (c, name) in CHANNELS.iter().enumerate() {
            out.push((format!("rel_{name}_key"), &self.rel_key[c]));
            out.push((format!("rel_{name}_val"), &self.rel_val[c]));
        }
        for (r, b) in self.blocks.iter().enumerate() {
            for (f, t) in [
                ("ln1_scale", &b.ln1_scale),
                ("ln1_shift", &b.ln1_shift),
                ("w_q", &b.w_q),
                ("w_k", &b.w_k),
                ("w_v", &b.w_v),
                ("ln2_scale", &b.ln2_scale),
                ("ln2_shift", &b.ln2_shift),
                ("ffn_w1", &b.ffn_w1),
                ("ffn_b1", &b.ffn_b1),
                ("ffn_w2", &b.ffn_w2),
                ("ffn_b2", &b.ffn_b2),
            ] {
                out.push((format!("block{r}.{f}"), t));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("poi".into(), &mut self.poi),
            ("pos_key".into(), &mut self.pos_key),
            ("pos_val".into(), &mut self.pos_val),
        ];
        for ((name, k), v) in CHANNELS.iter().zip(&mut self.rel_key).zip(&mut self.rel_val) {
            out.push((format!("rel_{name}_key"), k));
            out.push((format!("rel_{name}_val"), v));
        }
        for (r, b) in self.blocks.iter_mut().enumerate() {
            for (f, t) in [
                ("ln1_scale", &mut b.ln1_scale),
                ("ln1_shift", &mut b.ln1_shift),
                ("w_q", &mut b.w_q),
                ("w_k", &mut b.w_k),
                ("w_v", &mut b.w_v),
                ("ln2_scale", &mut b.ln2_scale),
                ("ln2_shift", &mut b.ln2_shift),
                ("ffn_w1", &mut b.ffn_w1),
                ("ffn_b1", &mut b.ffn_b1),
                ("ffn_w2", &mut b.ffn_w2),
                ("ffn_b2", &mut b.ffn_b2),
            ] {
                out.push((format!("block{r}.{f}"), t));
            }
        }
        out
    }

    /// Whether the tensor takes part in the forward pass under the current
    /// ablation flags.
    pub fn is_active(&self, name: &str) -> bool {
        let rel = &self.arch.relative;
        if name.starts_with("pos_") {
            self.arch.use_abs
        } else if name.starts_with("rel_app_") {
            rel.use_app
        } else if name.starts_with("rel_poi_") {
            rel.use_poi
        } else if name.starts_with("rel_time_") {
            rel.use_time
        } else {
            true
        }
    }

    pub fn is_layer_norm(name: &str) -> bool {
        name.contains(".ln")
    }

    /// Excludes a tensor from training and from the L2 penalty.
    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.named().iter().any(|(n, _)| n == name) {
            return Err(Error::Usage(format!("no tensor named {name:?}")));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.is_active(name) && !self.frozen.contains(name)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.named()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| self.is_trainable(n))
            .collect()
    }

    /// Mutable references to the trainable tensors, in
    /// [`trainable_names`](Self::trainable_names) order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let keep: Vec<bool> = self.named().iter().map(|(n, _)| self.is_trainable(n)).collect();
        self.named_mut()
            .into_iter()
            .zip(keep)
            .filter_map(|((_, t), k)| k.then_some(t))
            .collect()
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        self.named()
            .into_iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, t)| t)
            .collect()
    }
}

#[cfg(test)]
mod tests;
