use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Cardinalities, CheckIn, Corpus, UserSequence, MIN_CHECKINS};
use crate::error::{Error, Result};

/// Parameters for the seeded synthetic corpus.
///
/// POIs are partitioned into cyclic routes of `route_len` stops; each user
/// walks one route from a random start, occasionally jumping to a uniform
/// POI. Each POI has one or two POI categories. The app category drawn for
/// a POI category is its fixed preferred app category with probability
/// `correlation`, otherwise uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_pois: usize,
    pub num_app_categories: usize,
    pub num_poi_categories: usize,
    pub seq_len: usize,
    pub correlation: f64,
    pub route_len: usize,
    pub jump_prob: f64,
    /// Probability that a POI carries a second POI category.
    pub multi_category_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_users: 20,
            num_pois: 10,
            num_app_categories: 5,
            num_poi_categories: 4,
            seq_len: 20,
            correlation: 1.0,
            route_len: 4,
            jump_prob: 0.0,
            multi_category_prob: 0.25,
        }
    }
}

/// Mean and jitter of the gap between consecutive check-ins, in seconds.
const BASE_GAP: u64 = 1800;
const GAP_JITTER: u64 = 3600;

pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    if spec.num_pois == 0 || spec.num_app_categories == 0 || spec.num_poi_categories == 0 {
        return Err(Error::Config("synthetic cardinalities must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.correlation) || !(0.0..=1.0).contains(&spec.jump_prob) {
        return Err(Error::Config("correlation and jump_prob must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let poi_cats: Vec<Vec<usize>> = (0..spec.num_pois)
        .map(|_| {
            let first = rng.random_range(0..spec.num_poi_categories);
            let mut cats = vec![first];
            if spec.num_poi_categories > 1 && rng.random::<f64>() < spec.multi_category_prob {
                let mut second = rng.random_range(0..spec.num_poi_categories - 1);
                if second >= first {
                    second += 1;
                }
                cats.push(second);
            }
            cats
        })
        .collect();
    let preferred_app: Vec<usize> = (0..spec.num_poi_categories)
        .map(|_| rng.random_range(0..spec.num_app_categories))
        .collect();

    let mut order: Vec<usize> = (0..spec.num_pois).collect();
    order.shuffle(&mut rng);
    let mut routes: Vec<Vec<usize>> = order
        .chunks(spec.route_len.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if routes.len() > 1 && routes.last().is_some_and(|r| r.len() == 1) {
        let tail = routes.pop().unwrap();
        routes.last_mut().unwrap().extend(tail);
    }

    let mut users = Vec::with_capacity(spec.num_users);
    for user_id in 0..spec.num_users {
        let route = &routes[rng.random_range(0..routes.len())];
        let mut pos = rng.random_range(0..route.len());
        let mut t: u64 = rng.random_range(0..86_400);
        let mut checkins = Vec::with_capacity(spec.seq_len);
        for _ in 0..spec.seq_len {
            let poi = if rng.random::<f64>() < spec.jump_prob {
                rng.random_range(0..spec.num_pois)
            } else {
                route[pos]
            };
            pos = (pos + 1) % route.len();
            let apps = poi_cats[poi]
                .iter()
                .map(|&s| {
                    if rng.random::<f64>() < spec.correlation {
                        preferred_app[s]
                    } else {
                        rng.random_range(0..spec.num_app_categories)
                    }
                })
                .collect();
            checkins.push(CheckIn::new(poi, t, apps, poi_cats[poi].clone()));
            t += BASE_GAP + rng.random_range(0..GAP_JITTER);
        }
        users.push(UserSequence {
            user_id: user_id as u64,
            checkins,
        });
    }

    let cardinalities = Cardinalities {
        num_pois: spec.num_pois,
        num_app_categories: spec.num_app_categories,
        num_poi_categories: spec.num_poi_categories,
    };
    Ok(Corpus::new(users, cardinalities)?.filter_min_checkins(MIN_CHECKINS))
}
