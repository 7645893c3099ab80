use std::sync::Arc;

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{sample_distinct_excluding, IdSet};
use crate::error::{Error, Result};
use crate::Real;

/// Cutoffs reported for Hits@k and NDCG@k.
pub const CUTOFFS: [usize; 3] = [1, 5, 10];

/// How tied scores are ordered against the true item.
pub const TIE_RULE: &str = "pessimistic: the true item ranks below every equal-scoring negative";

/// One held-out prediction: the true POI and the POIs no negative may hit.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub user_id: u64,
    pub target: usize,
    pub exclude: Arc<IdSet>,
}

/// Scores candidate POIs for the `case`-th evaluation case.
pub trait Scorer: Sync {
    fn scores(&self, case: usize, candidates: &[usize]) -> Result<Vec<Real>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserResult {
    pub user_id: u64,
    /// 1-based rank of the true item among itself and its negatives.
    pub rank: usize,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(k, Hits@k, NDCG@k)` for each requested cutoff.
    pub at_k: Vec<(usize, Real, Real)>,
    pub mrr: Real,
    pub users: Vec<UserResult>,
    pub negatives_requested: usize,
    pub tie_rule: &'static str,
}

impl EvalReport {
    pub fn from_users(users: Vec<UserResult>, ks: &[usize], negatives_requested: usize) -> Self {
        let n = users.len().max(1) as Real;
        let at_k = ks
            .iter()
            .map(|&k| {
                let hits: Real = users.iter().map(|u| hit_at(u.rank, k)).sum::<Real>() / n;
                let ndcg: Real = users.iter().map(|u| ndcg_at(u.rank, k)).sum::<Real>() / n;
                (k, hits, ndcg)
            })
            .collect();
        let mrr = users.iter().map(|u| 1.0 / u.rank as Real).sum::<Real>() / n;
        Self {
            at_k,
            mrr,
            users,
            negatives_requested,
            tie_rule: TIE_RULE,
        }
    }

    pub fn hits(&self, k: usize) -> Option<Real> {
        self.at_k.iter().find(|e| e.0 == k).map(|e| e.1)
    }

    pub fn ndcg(&self, k: usize) -> Option<Real> {
        self.at_k.iter().find(|e| e.0 == k).map(|e| e.2)
    }

    /// Fewest negatives any user was ranked against.
    pub fn min_negatives(&self) -> usize {
        self.users.iter().map(|u| u.negatives).min().unwrap_or(0)
    }
}

pub fn hit_at(rank: usize, k: usize) -> Real {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, k: usize) -> Real {
    if rank <= k {
        1.0 / ((rank + 1) as Real).log2()
    } else {
        0.0
    }
}

/// Rank of `target_score` when every negative scoring at least as high goes first.
pub fn pessimistic_rank(target_score: Real, negative_scores: &[Real]) -> usize {
    1 + negative_scores.iter().filter(|&&s| s >= target_score).count()
}

/// Candidates for one case: the target followed by its sampled negatives.
/// Each case draws from its own stream of the evaluation seed.
pub fn eval_candidates(case: &EvalCase, index: usize, num_pois: usize, negatives: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut out = vec![case.target];
    out.extend(sample_distinct_excluding(num_pois, &case.exclude, negatives, &mut rng));
    out
}

/// Ranks every case's target against `negatives` sampled POIs.
pub fn evaluate(
    scorer: &impl Scorer,
    cases: &[EvalCase],
    num_pois: usize,
    negatives: usize,
    ks: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Usage("nothing to evaluate".into()));
    }
    let users = cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let candidates = eval_candidates(case, i, num_pois, negatives, seed);
            let scores = scorer.scores(i, &candidates)?;
            Ok(UserResult {
                user_id: case.user_id,
                rank: pessimistic_rank(scores[0], &scores[1..]),
                negatives: candidates.len() - 1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_users(users, ks, negatives);
    let fewest = report.min_negatives();
    if fewest < negatives {
        debug!("only {fewest} eligible negatives for some users ({negatives} requested)");
    }
    Ok(report)
}

/// Root mean square of the Euclidean distances between paired vectors.
pub fn rms_distance<'a>(pairs: impl IntoIterator<Item = (&'a [Real], &'a [Real])>) -> Real {
    let (mut total, mut n) = (0.0, 0usize);
    for (a, b) in pairs {
        total += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<Real>();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (total / n as Real).sqrt()
    }
}
