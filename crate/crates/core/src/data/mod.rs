//! Check-in records, corpus ingestion and filtering, windowing, negative
//! sampling, and the synthetic corpus generator.

mod io;
mod sampling;
mod synth;
mod window;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use io::{load_corpus, parse_corpus, write_corpus, CorpusFormat};
pub use sampling::{sample_distinct_excluding, sample_excluding, sample_negative, IdSet};
pub use synth::{synth_corpus, SynthSpec};
pub use window::{window, Window};

/// Users and POIs with fewer check-ins than this are dropped on load.
pub const MIN_CHECKINS: usize = 5;

/// One timestamped event: a POI visit with the app and POI categories active
/// at that moment. Category sets are sorted and deduplicated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckIn {
    pub poi: usize,
    pub timestamp: u64,
    pub app_categories: Vec<usize>,
    pub poi_categories: Vec<usize>,
}

impl CheckIn {
    pub fn new(poi: usize, timestamp: u64, mut app: Vec<usize>, mut poi_cats: Vec<usize>) -> Self {
        app.sort_unstable();
        app.dedup();
        poi_cats.sort_unstable();
        poi_cats.dedup();
        Self {
            poi,
            timestamp,
            app_categories: app,
            poi_categories: poi_cats,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cardinalities {
    pub num_pois: usize,
    pub num_app_categories: usize,
    pub num_poi_categories: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: u64,
    pub checkins: Vec<CheckIn>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub users: Vec<UserSequence>,
    pub cardinalities: Cardinalities,
}

impl Corpus {
    /// Validates ids, category sets and per-user time order.
    pub fn new(users: Vec<UserSequence>, cardinalities: Cardinalities) -> Result<Self> {
        let c = cardinalities;
        for user in &users {
            let mut last = 0u64;
            for (k, e) in user.checkins.iter().enumerate() {
                check_id("poi", e.poi, c.num_pois)?;
                if e.app_categories.is_empty() || e.poi_categories.is_empty() {
                    return Err(Error::Usage(format!(
                        "user {} check-in {k} has an empty category set",
                        user.user_id
                    )));
                }
                for &a in &e.app_categories {
                    check_id("app category", a, c.num_app_categories)?;
                }
                for &s in &e.poi_categories {
                    check_id("poi category", s, c.num_poi_categories)?;
                }
                if k > 0 && e.timestamp < last {
                    return Err(Error::Usage(format!(
                        "user {} timestamps decrease at check-in {k}",
                        user.user_id
                    )));
                }
                last = e.timestamp;
            }
        }
        Ok(Self { users, cardinalities })
    }

    pub fn num_pois(&self) -> usize {
        self.cardinalities.num_pois
    }

    pub fn num_app_categories(&self) -> usize {
        self.cardinalities.num_app_categories
    }

    pub fn num_poi_categories(&self) -> usize {
        self.cardinalities.num_poi_categories
    }

    pub fn num_checkins(&self) -> usize {
        self.users.iter().map(|u| u.checkins.len()).sum()
    }

    /// Repeatedly drops check-ins at POIs seen fewer than `min` times in the
    /// whole corpus and users left with fewer than `min` check-ins, until
    /// neither rule removes anything.
    pub fn filter_min_checkins(mut self, min: usize) -> Self {
        loop {
            let mut poi_counts: BTreeMap<usize, usize> = BTreeMap::new();
            for e in self.users.iter().flat_map(|u| &u.checkins) {
                *poi_counts.entry(e.poi).or_default() += 1;
            }
            let before = self.num_checkins() + self.users.len();
            for user in &mut self.users {
                user.checkins.retain(|e| poi_counts[&e.poi] >= min);
            }
            self.users.retain(|u| u.checkins.len() >= min);
            if self.num_checkins() + self.users.len() == before {
                return self;
            }
        }
    }
}

fn check_id(what: &'static str, id: usize, limit: usize) -> Result<()> {
    if id >= limit {
        return Err(Error::OutOfRange { what, id, limit });
    }
    Ok(())
}
