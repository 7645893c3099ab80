//! Embedding Initiator: learns the app-category and POI-category tables from
//! app/POI co-occurrence (a small MF head) and from alignment to fixed
//! external semantic vectors projected down to the model dimension.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::binio;
use crate::data::{sample_excluding, Cardinalities, CheckIn, IdSet};
use crate::error::{Error, Result};
use crate::numcore::{AdamConfig, Var};
use crate::{AdamState, Graph, Real, Tensor};

/// Default width of the external semantic vectors.
pub const DEFAULT_PRETRAINED_DIM: usize = 768;

const EI_MAGIC: &[u8; 4] = b"RVEI";
const EI_VERSION: u32 = 1;

pub fn app_category_name(id: usize) -> String {
    format!("app:{id}")
}

pub fn poi_category_name(id: usize) -> String {
    format!("poi:{id}")
}

/// Learned app-category (`app`, |A| x D) and POI-category (`poi`, |S| x D)
/// embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryEmbeddings {
    pub app: Tensor,
    pub poi: Tensor,
    frozen: bool,
}

impl CategoryEmbeddings {
    pub fn new(app: Tensor, poi: Tensor) -> Result<Self> {
        if app.rank() != 2 || poi.rank() != 2 || app.shape()[1] != poi.shape()[1] {
            return Err(Error::Dimension {
                op: "category_embeddings",
                detail: format!("app {:?}, poi {:?}", app.shape(), poi.shape()),
            });
        }
        if !app.is_finite() || !poi.is_finite() {
            return Err(Error::Numeric { op: "category_embeddings" });
        }
        Ok(Self {
            app,
            poi,
            frozen: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.app.shape()[1]
    }

    pub fn num_app(&self) -> usize {
        self.app.shape()[0]
    }

    pub fn num_poi(&self) -> usize {
        self.poi.shape()[0]
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Binary layout: `RVEI`, version, |A|, |S|, D (u32 LE), then A and S as
    /// row-major f64 LE.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(EI_MAGIC)?;
        binio::write_u32(w, EI_VERSION)?;
        binio::write_u32(w, binio::to_u32(self.num_app(), "|A|")?)?;
        binio::write_u32(w, binio::to_u32(self.num_poi(), "|S|")?)?;
        binio::write_u32(w, binio::to_u32(self.dim(), "D")?)?;
        binio::write_f64s(w, self.app.data())?;
        binio::write_f64s(w, self.poi.data())?;
        Ok(())
    }

    /// Reads a table written by [`write_to`](Self::write_to); it comes back frozen.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::expect_magic(r, EI_MAGIC, "category embedding")?;
        let version = binio::read_u32(r)?;
        if version != EI_VERSION {
            return Err(Error::Integrity(format!("unsupported EI version {version}")));
        }
        let na = binio::read_u32(r)? as usize;
        let ns = binio::read_u32(r)? as usize;
        let d = binio::read_u32(r)? as usize;
        let app = binio::read_matrix(r, na, d)?;
        let poi = binio::read_matrix(r, ns, d)?;
        Ok(Self::new(app, poi)?.freeze())
    }
}

/// Fixed external vectors keyed by category name, with a deterministic
/// hash-seeded fallback for names the file does not cover.
#[derive(Clone, Debug)]
pub struct PretrainedVectors {
    dim: usize,
    vectors: BTreeMap<String, Vec<Real>>,
    fallback_seed: Option<u64>,
}

impl PretrainedVectors {
    /// No file: every lookup uses the fallback.
    pub fn fallback_only(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
            fallback_seed: Some(seed),
        }
    }

    /// Parses `name<TAB>v1 v2 ...` lines. All vectors must share one width.
    pub fn parse(text: impl BufRead, fallback_seed: Option<u64>) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (name, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected name<TAB>values".into(),
            })?;
            let vals: Vec<Real> = rest
                .split_whitespace()
                .map(|t| t.parse::<Real>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("vector width {} differs from {d}", vals.len()),
                    })
                }
                _ => {}
            }
            vectors.insert(name.to_string(), vals);
        }
        Ok(Self {
            dim: dim.unwrap_or(DEFAULT_PRETRAINED_DIM),
            vectors,
            fallback_seed,
        })
    }

    pub fn load(path: &Path, fallback_seed: Option<u64>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::parse(std::io::BufReader::new(file), fallback_seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lookup(&self, name: &str) -> Result<Vec<Real>> {
        if let Some(v) = self.vectors.get(name) {
            return Ok(v.clone());
        }
        match self.fallback_seed {
            Some(seed) => Ok(fallback_vector(name, self.dim, seed)),
            None => Err(Error::Lookup(format!("no pretrained vector for {name:?}"))),
        }
    }

    /// Rows for `names`, stacked into a `[names.len(), dim]` matrix.
    pub fn matrix(&self, names: impl IntoIterator<Item = String>) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        for n in names {
            data.extend(self.lookup(&n)?);
            rows += 1;
        }
        Tensor::new(vec![rows, self.dim], data)
    }
}

/// Unit-norm pseudo-vector seeded by a hash of `(seed, name)`.
pub fn fallback_vector(name: &str, dim: usize, seed: u64) -> Vec<Real> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut v: Vec<Real> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Output activation of the MF head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MfActivation {
    /// `ReLU(w (a||s) + b)`, then a sigmoid inside the loss.
    #[default]
    Relu,
    Identity,
}

impl std::str::FromStr for MfActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown mf_activation {other:?}"))),
        }
    }
}

impl std::fmt::Display for MfActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Identity => "identity",
        })
    }
}

/// Trainable weights of the MF head and the two projections.
#[derive(Clone, Debug, PartialEq)]
pub struct EiParams {
    /// `[2D, 1]`
    pub w_v: Tensor,
    /// `[1]`
    pub b_v: Tensor,
    /// `[D_ext, D]`
    pub w_app: Tensor,
    pub b_app: Tensor,
    pub w_poi: Tensor,
    pub b_poi: Tensor,
}

/// Full EI state: the two category tables plus head/projection weights and
/// the external vectors for every category.
#[derive(Clone, Debug)]
pub struct EiModel {
    pub table: CategoryEmbeddings,
    pub params: EiParams,
    pub pretrained_app: Tensor,
    pub pretrained_poi: Tensor,
    pub activation: MfActivation,
}

fn normal(shape: &[usize], std: Real, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<Real> = (0..n)
        .map(|_| { let z: Real = StandardNormal.sample(rng); std * z })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("matching numel")
}

impl EiModel {
    pub fn init(
        cardinalities: Cardinalities,
        dim: usize,
        pretrained: &PretrainedVectors,
        activation: MfActivation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (na, ns) = (cardinalities.num_app_categories, cardinalities.num_poi_categories);
        let d_ext = pretrained.dim();
        let emb_std = 1.0 / (dim as Real).sqrt();
        let app = normal(&[na, dim], emb_std, rng);
        let poi = normal(&[ns, dim], emb_std, rng);
        let params = EiParams {
            w_v: normal(&[2 * dim, 1], 1.0 / (2.0 * dim as Real).sqrt(), rng),
            b_v: Tensor::zeros(&[1]),
            w_app: normal(&[d_ext, dim], 1.0 / (d_ext as Real).sqrt(), rng),
            b_app: Tensor::zeros(&[dim]),
            w_poi: normal(&[d_ext, dim], 1.0 / (d_ext as Real).sqrt(), rng),
            b_poi: Tensor::zeros(&[dim]),
        };
        Ok(Self {
            table: CategoryEmbeddings::new(app, poi)?,
            params,
            pretrained_app: pretrained.matrix((0..na).map(app_category_name))?,
            pretrained_poi: pretrained.matrix((0..ns).map(poi_category_name))?,
            activation,
        })
    }

    fn tensors(&self) -> [&Tensor; 8] {
        let p = &self.params;
        [
            &self.table.app,
            &self.table.poi,
            &p.w_v,
            &p.b_v,
            &p.w_app,
            &p.b_app,
            &p.w_poi,
            &p.b_poi,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        let p = &mut self.params;
        [
            &mut self.table.app,
            &mut self.table.poi,
            &mut p.w_v,
            &mut p.b_v,
            &mut p.w_app,
            &mut p.b_app,
            &mut p.w_poi,
            &mut p.b_poi,
        ]
    }

    /// Registers every EI tensor as a trainable leaf.
    pub fn register<'a>(&'a self, g: &mut Graph<'a>) -> EiVars {
        let [app, poi, w_v, b_v, w_app, b_app, w_poi, b_poi] = self.tensors().map(|t| g.param(t));
        EiVars {
            app,
            poi,
            w_v,
            b_v,
            w_app,
            b_app,
            w_poi,
            b_poi,
            pretrained_app: g.constant_ref(&self.pretrained_app),
            pretrained_poi: g.constant_ref(&self.pretrained_poi),
            activation: self.activation,
        }
    }

    /// MF head output for one (app category, POI category) pair.
    pub fn mf_logit(&self, app: usize, poi: usize) -> Result<Real> {
        check_range("app category", app, self.table.num_app())?;
        check_range("poi category", poi, self.table.num_poi())?;
        let d = self.table.dim();
        let w = self.params.w_v.data();
        let z: Real = self.table.app.row(app).iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<Real>()
            + self.table.poi.row(poi).iter().zip(&w[d..]).map(|(a, b)| a * b).sum::<Real>()
            + self.params.b_v.data()[0];
        Ok(match self.activation {
            MfActivation::Relu => z.max(0.0),
            MfActivation::Identity => z,
        })
    }

    /// Value of the co-occurrence loss on `batch` with freshly drawn negatives.
    pub fn loss_mf(&self, batch: &[&CheckIn], rng: &mut impl Rng) -> Result<Real> {
        let pairs = sample_mf_pairs(batch, self.table.num_app(), self.table.num_poi(), rng)?;
        let mut g = Graph::new();
        let v = self.register(&mut g);
        let loss = v.mf_loss(&mut g, &pairs)?;
        g.value(loss).item()
    }

    pub fn loss_bert(&self, batch: &[&CheckIn]) -> Result<Real> {
        let mut g = Graph::new();
        let v = self.register(&mut g);
        let loss = v.bert_loss(&mut g, batch)?;
        g.value(loss).item()
    }

    /// Projected external vectors `(Phi_app, Phi_poi)` for every category.
    pub fn projected(&self) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let v = self.register(&mut g);
        let (pa, ps) = v.projections(&mut g)?;
        Ok((g.value(pa).clone(), g.value(ps).clone()))
    }
}

fn check_range(what: &'static str, id: usize, limit: usize) -> Result<()> {
    if id >= limit {
        return Err(Error::OutOfRange { what, id, limit });
    }
    Ok(())
}

/// One true (app, POI) category pair with its sampled negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MfPair {
    pub app: usize,
    pub poi: usize,
    pub neg_app: usize,
    pub neg_poi: usize,
}

/// Every true pair of every check-in, with one negative app category outside
/// the check-in's app set and one negative POI category outside its POI set.
pub fn sample_mf_pairs(
    batch: &[&CheckIn],
    num_app: usize,
    num_poi: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MfPair>> {
    let mut pairs = Vec::new();
    for e in batch {
        let apps = IdSet::new(e.app_categories.iter().copied());
        let pois = IdSet::new(e.poi_categories.iter().copied());
        for &a in &e.app_categories {
            for &s in &e.poi_categories {
                let neg_app = sample_excluding(num_app, &apps, rng)
                    .map_err(|_| Error::Sampling("check-in uses every app category".into()))?;
                let neg_poi = sample_excluding(num_poi, &pois, rng)
                    .map_err(|_| Error::Sampling("check-in carries every POI category".into()))?;
                pairs.push(MfPair {
                    app: a,
                    poi: s,
                    neg_app,
                    neg_poi,
                });
            }
        }
    }
    Ok(pairs)
}

/// Graph handles for an [`EiModel`].
#[derive(Clone, Copy, Debug)]
pub struct EiVars {
    pub app: Var,
    pub poi: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_app: Var,
    pub b_app: Var,
    pub w_poi: Var,
    pub b_poi: Var,
    pub pretrained_app: Var,
    pub pretrained_poi: Var,
    pub activation: MfActivation,
}

impl EiVars {
    /// MF head over index lists: returns `[n, 1]` logits.
    fn head(&self, g: &mut Graph<'_>, apps: &[usize], pois: &[usize]) -> Result<Var> {
        let a = g.gather(self.app, apps)?;
        let s = g.gather(self.poi, pois)?;
        let cat = g.concat(&[a, s])?;
        let lin = g.matmul(cat, self.w_v)?;
        let z = g.add_row(lin, self.b_v)?;
        match self.activation {
            MfActivation::Relu => g.relu(z),
            MfActivation::Identity => Ok(z),
        }
    }

    /// `-sum [log s(v(a,s)) + log(1 - s(v(a,s'))) + log(1 - s(v(a',s)))]`
    pub fn mf_loss(&self, g: &mut Graph<'_>, pairs: &[MfPair]) -> Result<Var> {
        if pairs.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let apps: Vec<usize> = pairs.iter().map(|p| p.app).collect();
        let pois: Vec<usize> = pairs.iter().map(|p| p.poi).collect();
        let neg_apps: Vec<usize> = pairs.iter().map(|p| p.neg_app).collect();
        let neg_pois: Vec<usize> = pairs.iter().map(|p| p.neg_poi).collect();

        let pos = self.head(g, &apps, &pois)?;
        let neg_s = self.head(g, &apps, &neg_pois)?;
        let neg_a = self.head(g, &neg_apps, &pois)?;

        let lp = g.log_sigmoid(pos)?;
        let ns = g.scale(neg_s, -1.0)?;
        let ls = g.log_sigmoid(ns)?;
        let na = g.scale(neg_a, -1.0)?;
        let la = g.log_sigmoid(na)?;
        let s1 = g.sum(lp)?;
        let s2 = g.sum(ls)?;
        let s3 = g.sum(la)?;
        let t = g.add(s1, s2)?;
        let total = g.add(t, s3)?;
        g.scale(total, -1.0)
    }

    /// `Phi(x) = ReLU(B(x) w + b)` for every app and POI category.
    pub fn projections(&self, g: &mut Graph<'_>) -> Result<(Var, Var)> {
        let pa = g.matmul(self.pretrained_app, self.w_app)?;
        let pa = g.add_row(pa, self.b_app)?;
        let pa = g.relu(pa)?;
        let ps = g.matmul(self.pretrained_poi, self.w_poi)?;
        let ps = g.add_row(ps, self.b_poi)?;
        let ps = g.relu(ps)?;
        Ok((pa, ps))
    }

    /// `(1/|E|) sum_k sum_{a in A_k, s in S_k} [|a - Phi1(a)|^2 + |s - Phi2(s)|^2]`
    pub fn bert_loss(&self, g: &mut Graph<'_>, batch: &[&CheckIn]) -> Result<Var> {
        let mut apps = Vec::new();
        let mut pois = Vec::new();
        for e in batch {
            for &a in &e.app_categories {
                for &s in &e.poi_categories {
                    apps.push(a);
                    pois.push(s);
                }
            }
        }
        if apps.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let (pa, ps) = self.projections(g)?;
        let a = g.gather(self.app, &apps)?;
        let pa = g.gather(pa, &apps)?;
        let s = g.gather(self.poi, &pois)?;
        let ps = g.gather(ps, &pois)?;
        let ea = g.squared_error(a, pa)?;
        let es = g.squared_error(s, ps)?;
        let total = g.add(ea, es)?;
        g.scale(total, 1.0 / batch.len() as Real)
    }

    /// `gamma * L_MF + (1 - gamma) * L_Bert`
    pub fn joint_loss(&self, g: &mut Graph<'_>, batch: &[&CheckIn], pairs: &[MfPair], gamma: Real) -> Result<Var> {
        let mf = self.mf_loss(g, pairs)?;
        let bert = self.bert_loss(g, batch)?;
        let a = g.scale(mf, gamma)?;
        let b = g.scale(bert, 1.0 - gamma)?;
        g.add(a, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EiConfig {
    pub dim: usize,
    pub gamma: Real,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub activation: MfActivation,
    /// Stop once an epoch improves the loss by less than this fraction.
    /// `None` always runs every epoch.
    pub early_stop: Option<f64>,
}

impl Default for EiConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            gamma: 0.5,
            epochs: 50,
            lr: 0.01,
            batch_size: 256,
            seed: 0,
            activation: MfActivation::Relu,
            early_stop: Some(1e-5),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EiOutcome {
    pub table: CategoryEmbeddings,
    pub model: EiModel,
    pub epoch_losses: Vec<Real>,
}

/// Trains the category tables on `checkins` and returns them frozen.
pub fn train_ei(
    checkins: &[&CheckIn],
    cardinalities: Cardinalities,
    pretrained: &PretrainedVectors,
    config: &EiConfig,
) -> Result<EiOutcome> {
    if !(0.0..=1.0).contains(&config.gamma) {
        return Err(Error::Config(format!("gamma {} outside [0, 1]", config.gamma)));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = EiModel::init(cardinalities, config.dim, pretrained, config.activation, &mut rng)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), model.tensors());
    let mut order: Vec<usize> = (0..checkins.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&CheckIn> = chunk.iter().map(|&i| checkins[i]).collect();
            let pairs = sample_mf_pairs(&batch, cardinalities.num_app_categories, cardinalities.num_poi_categories, &mut rng)?;
            let wrap = |e: Error| Error::Diverged {
                epoch,
                batch: b,
                source: Box::new(e),
            };
            let grads = {
                let mut g = Graph::new();
                let vars = model.register(&mut g);
                let loss = vars.joint_loss(&mut g, &batch, &pairs, config.gamma).map_err(wrap)?;
                epoch_loss += g.value(loss).item()?;
                let ids = [vars.app, vars.poi, vars.w_v, vars.b_v, vars.w_app, vars.b_app, vars.w_poi, vars.b_poi];
                let mut grads = g.backward(loss)?;
                ids.map(|id| grads.take(id))
            };
            let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
            adam.step(&mut model.tensors_mut(), &refs)?;
        }
        info!("ei epoch {epoch}: loss {epoch_loss:.6}");
        let prev = epoch_losses.last().copied();
        epoch_losses.push(epoch_loss);
        if let (Some(tol), Some(prev)) = (config.early_stop, prev) {
            let improvement = (prev - epoch_loss) / prev.abs().max(Real::MIN_POSITIVE);
            if improvement < tol {
                break;
            }
        }
    }

    let table = model.table.clone().freeze();
    Ok(EiOutcome {
        table,
        model,
        epoch_losses,
    })
}
