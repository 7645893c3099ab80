use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RunConfig;
use super::metrics::{evaluate, rms_distance, EvalCase, EvalReport, Scorer, CUTOFFS};
use crate::data::{window, Cardinalities, CheckIn, Corpus, IdSet};
use crate::ei::{train_ei, CategoryEmbeddings, EiOutcome, PretrainedVectors};
use crate::error::{Error, Result};
use crate::numcore::AdamConfig;
use crate::relenc::{build_relative, net_embedding};
use crate::sr::{final_states, predict_scores, train_step, Architecture, ModelParams, PreparedWindow, TrainExample};
use crate::{AdamState, Real};

/// One user's leave-one-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub user_id: u64,
    pub train: Vec<CheckIn>,
    pub val: CheckIn,
    pub test: CheckIn,
}

impl UserSplit {
    /// Every POI in the user's full sequence.
    pub fn history(&self) -> IdSet {
        IdSet::new(self.train.iter().chain([&self.val, &self.test]).map(|e| e.poi))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitCorpus {
    pub users: Vec<UserSplit>,
    pub cardinalities: Cardinalities,
}

/// Holds out each user's last check-in for test and the one before for validation.
pub fn split(corpus: &Corpus) -> Result<SplitCorpus> {
    let users = corpus
        .users
        .iter()
        .map(|u| {
            let n = u.checkins.len();
            if n < 3 {
                return Err(Error::Split(format!(
                    "user {} has {n} check-ins, at least 3 are needed",
                    u.user_id
                )));
            }
            Ok(UserSplit {
                user_id: u.user_id,
                train: u.checkins[..n - 2].to_vec(),
                val: u.checkins[n - 2].clone(),
                test: u.checkins[n - 1].clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SplitCorpus {
        users,
        cardinalities: corpus.cardinalities,
    })
}

/// Windows and relative matrices for one user, built once.
#[derive(Clone, Debug)]
pub struct PreparedUser {
    /// Absent when the train prefix is a single check-in.
    pub train: Option<TrainExample>,
    pub val_input: PreparedWindow,
    pub test_input: PreparedWindow,
    pub val: EvalCase,
    pub test: EvalCase,
    pub next: CheckIn,
}

fn prepared(seq: &[CheckIn], arch: &Architecture, table: &CategoryEmbeddings) -> Result<PreparedWindow> {
    let w = window(seq, arch.max_len, arch.pad_poi())?;
    let (_, rel) = build_relative(&w, table, &arch.relative)?;
    Ok(PreparedWindow { window: w, rel })
}

pub fn prepare_user(u: &UserSplit, arch: &Architecture, table: &CategoryEmbeddings) -> Result<PreparedUser> {
    let exclude = Arc::new(u.history());
    let n = arch.max_len;
    let train = if u.train.len() >= 2 {
        let input = &u.train[..u.train.len() - 1];
        let real = input.len().min(n);
        let mut targets = vec![None; n - real];
        targets.extend(u.train[u.train.len() - real..].iter().cloned().map(Some));
        Some(TrainExample {
            input: prepared(input, arch, table)?,
            targets,
            exclude: Arc::clone(&exclude),
        })
    } else {
        None
    };
    let mut seen = u.train.clone();
    let val_input = prepared(&seen, arch, table)?;
    seen.push(u.val.clone());
    let test_input = prepared(&seen, arch, table)?;
    let case = |target: usize| EvalCase {
        user_id: u.user_id,
        target,
        exclude: Arc::clone(&exclude),
    };
    Ok(PreparedUser {
        train,
        val_input,
        test_input,
        val: case(u.val.poi),
        test: case(u.test.poi),
        next: u.test.clone(),
    })
}

pub fn prepare_split(split: &SplitCorpus, arch: &Architecture, table: &CategoryEmbeddings) -> Result<Vec<PreparedUser>> {
    split.users.par_iter().map(|u| prepare_user(u, arch, table)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Validation,
    Test,
}

struct StateScorer<'a> {
    params: &'a ModelParams,
    states: Vec<Vec<Real>>,
}

impl Scorer for StateScorer<'_> {
    fn scores(&self, case: usize, candidates: &[usize]) -> Result<Vec<Real>> {
        predict_scores(&self.states[case], candidates, self.params)
    }
}

const ENCODE_CHUNK: usize = 32;

fn states_for(params: &ModelParams, windows: &[&PreparedWindow]) -> Result<Vec<Vec<Real>>> {
    let chunks = windows
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| final_states(params, chunk))
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Stream-separated seeds for the phases of a run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const TAG_INIT: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_VAL: u64 = 3;
const TAG_TEST: u64 = 4;

pub fn evaluate_users(
    params: &ModelParams,
    users: &[PreparedUser],
    phase: Phase,
    negatives: usize,
    seed: u64,
) -> Result<EvalReport> {
    let (windows, cases): (Vec<&PreparedWindow>, Vec<EvalCase>) = users
        .iter()
        .map(|u| match phase {
            Phase::Validation => (&u.val_input, u.val.clone()),
            Phase::Test => (&u.test_input, u.test.clone()),
        })
        .unzip();
    let scorer = StateScorer {
        params,
        states: states_for(params, &windows)?,
    };
    let tag = match phase {
        Phase::Validation => TAG_VAL,
        Phase::Test => TAG_TEST,
    };
    evaluate(&scorer, &cases, params.arch.num_pois, negatives, &CUTOFFS, derive_seed(seed, tag))
}

/// RMS distance between each user's final state and the net app and POI
/// category embeddings of their held-out test check-in.
pub fn category_rms_probe(params: &ModelParams, users: &[PreparedUser]) -> Result<(Real, Real)> {
    let windows: Vec<&PreparedWindow> = users.iter().map(|u| &u.test_input).collect();
    let states = states_for(params, &windows)?;
    let mut app = Vec::with_capacity(users.len());
    let mut poi = Vec::with_capacity(users.len());
    for u in users {
        app.push(net_embedding(&u.next.app_categories, &params.categories.app)?);
        poi.push(net_embedding(&u.next.poi_categories, &params.categories.poi)?);
    }
    let pairs = |mu: &[Vec<Real>]| rms_distance(states.iter().zip(mu).map(|(z, m)| (z.as_slice(), m.as_slice())));
    Ok((pairs(&app), pairs(&poi)))
}

pub fn pretrained_vectors(config: &RunConfig) -> Result<PretrainedVectors> {
    match &config.pretrained {
        Some(path) => PretrainedVectors::load(path, Some(config.seed)),
        None => Ok(PretrainedVectors::fallback_only(config.pretrained_dim, config.seed)),
    }
}

/// Phase one: category tables from every train-prefix check-in.
pub fn train_ei_phase(split: &SplitCorpus, config: &RunConfig) -> Result<EiOutcome> {
    let checkins: Vec<&CheckIn> = split.users.iter().flat_map(|u| &u.train).collect();
    train_ei(&checkins, split.cardinalities, &pretrained_vectors(config)?, &config.ei())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Summed training loss; `None` for the untrained epoch 0.
    pub loss: Option<Real>,
    pub val: EvalReport,
}

#[derive(Clone, Debug)]
pub struct SrOutcome {
    /// Parameters from the epoch with the best validation NDCG@10.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub test: EvalReport,
    pub probe: (Real, Real),
}

fn warn_reduced(report: &EvalReport) {
    let fewest = report.min_negatives();
    if fewest < report.negatives_requested {
        warn!(
            "some users have only {fewest} eligible negatives; {} were requested",
            report.negatives_requested
        );
    }
}

fn val_ndcg(r: &EvalReport) -> Real {
    r.ndcg(10).expect("cutoff 10 is always evaluated")
}

/// Phase two: trains the recommender on frozen category tables, keeping the
/// parameters of the strictly best validation epoch (epoch 0 is the
/// untrained model).
pub fn train_sr_phase(split: &SplitCorpus, table: &CategoryEmbeddings, config: &RunConfig) -> Result<SrOutcome> {
    config.validate()?;
    let arch = config.architecture(split.cardinalities);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_INIT));
    let mut params = ModelParams::init(arch, table.clone(), &mut init_rng)?;
    let users = prepare_split(split, &arch, table)?;
    let examples: Vec<&TrainExample> = users.iter().filter_map(|u| u.train.as_ref()).collect();

    let mut adam = AdamState::new(AdamConfig::with_lr(config.sr_lr), params.trainable());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_TRAIN));
    let hyper = config.hyper();
    let negatives = config.eval_negatives;

    let val = evaluate_users(&params, &users, Phase::Validation, negatives, config.seed)?;
    warn_reduced(&val);
    let mut best = (val_ndcg(&val), params.clone(), 0);
    let mut history = vec![EpochRecord {
        epoch: 0,
        loss: None,
        val,
    }];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.sr_epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| examples[i]).collect();
            let step = train_step(&mut params, &mut adam, &batch, &hyper, &mut rng).map_err(|e| Error::Diverged {
                epoch,
                batch: b,
                source: Box::new(e),
            })?;
            loss += step;
        }
        let val = evaluate_users(&params, &users, Phase::Validation, negatives, config.seed)?;
        let score = val_ndcg(&val);
        info!("sr epoch {epoch}: loss {loss:.6}, val ndcg@10 {score:.4}");
        if score > best.0 {
            best = (score, params.clone(), epoch);
        }
        history.push(EpochRecord {
            epoch,
            loss: Some(loss),
            val,
        });
    }

    let (_, params, best_epoch) = best;
    let test = evaluate_users(&params, &users, Phase::Test, negatives, config.seed)?;
    let probe = category_rms_probe(&params, &users)?;
    Ok(SrOutcome {
        params,
        best_epoch,
        history,
        test,
        probe,
    })
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub ei_losses: Vec<Real>,
    pub sr: SrOutcome,
    pub wall_clock: Duration,
}

/// Filters and splits the corpus, trains EI to completion, then the
/// recommender, and reports test metrics of the best validation checkpoint.
pub fn train_pipeline(corpus: &Corpus, config: &RunConfig) -> Result<PipelineOutcome> {
    let start = Instant::now();
    config.validate()?;
    let corpus = corpus.clone().filter_min_checkins(config.min_checkins);
    if corpus.users.is_empty() {
        return Err(Error::Usage("no users left after filtering".into()));
    }
    let split = split(&corpus)?;
    let ei = train_ei_phase(&split, config)?;
    let sr = train_sr_phase(&split, &ei.table, config)?;
    Ok(PipelineOutcome {
        ei_losses: ei.epoch_losses,
        sr,
        wall_clock: start.elapsed(),
    })
}

/// Test metrics of a stored model on a corpus with matching cardinalities.
pub fn evaluate_checkpoint(params: &ModelParams, corpus: &Corpus, config: &RunConfig) -> Result<EvalReport> {
    let a = &params.arch;
    let want = Cardinalities {
        num_pois: a.num_pois,
        num_app_categories: a.num_app_categories,
        num_poi_categories: a.num_poi_categories,
    };
    if corpus.cardinalities != want {
        return Err(Error::Usage(format!(
            "corpus cardinalities {:?} do not match the checkpoint {want:?}",
            corpus.cardinalities
        )));
    }
    let corpus = corpus.clone().filter_min_checkins(config.min_checkins);
    let split = split(&corpus)?;
    let users = prepare_split(&split, a, &params.categories)?;
    let report = evaluate_users(params, &users, Phase::Test, config.eval_negatives, config.seed)?;
    warn_reduced(&report);
    Ok(report)
}
