use rand::Rng;

use super::Corpus;
use crate::error::{Error, Result};

/// Sorted set of ids used as an exclusion list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdSet(Vec<usize>);

impl IdSet {
    pub fn new(ids: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = ids.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    pub fn contains(&self, id: usize) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Number of ids in `0..universe` outside the set.
    pub fn complement_len(&self, universe: usize) -> usize {
        universe - self.0.iter().filter(|&&i| i < universe).count()
    }

    fn complement(&self, universe: usize) -> Vec<usize> {
        (0..universe).filter(|&i| !self.contains(i)).collect()
    }
}

/// Uniform draw from `0..universe` minus `excluded`.
pub fn sample_excluding<R: Rng + ?Sized>(universe: usize, excluded: &IdSet, rng: &mut R) -> Result<usize> {
    let free = excluded.complement_len(universe);
    if free == 0 {
        return Err(Error::Sampling(format!(
            "all {universe} ids are excluded"
        )));
    }
    if free * 4 >= universe {
        loop {
            let c = rng.random_range(0..universe);
            if !excluded.contains(c) {
                return Ok(c);
            }
        }
    }
    let pool = excluded.complement(universe);
    Ok(pool[rng.random_range(0..pool.len())])
}

/// Up to `count` distinct uniform draws from `0..universe` minus `excluded`;
/// fewer when not enough ids are eligible.
pub fn sample_distinct_excluding<R: Rng + ?Sized>(
    universe: usize,
    excluded: &IdSet,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let free = excluded.complement_len(universe);
    if free <= count.saturating_mul(4) {
        let mut pool = excluded.complement(universe);
        let take = count.min(pool.len());
        for i in 0..take {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(take);
        return pool;
    }
    let mut out = Vec::with_capacity(count);
    let mut seen = excluded.clone();
    while out.len() < count {
        let c = rng.random_range(0..universe);
        if !seen.contains(c) {
            out.push(c);
            let pos = seen.0.binary_search(&c).unwrap_err();
            seen.0.insert(pos, c);
        }
    }
    out
}

/// Uniform POI the user never visited anywhere in their sequence.
pub fn sample_negative<R: Rng + ?Sized>(corpus: &Corpus, user: usize, rng: &mut R) -> Result<usize> {
    let seq = corpus
        .users
        .get(user)
        .ok_or_else(|| Error::Usage(format!("no user at index {user}")))?;
    let visited = IdSet::new(seq.checkins.iter().map(|e| e.poi));
    sample_excluding(corpus.num_pois(), &visited, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{Cardinalities, CheckIn, UserSequence};

    fn corpus_with(visited: &[usize], pois: usize) -> Corpus {
        let checkins = visited
            .iter()
            .enumerate()
            .map(|(t, &p)| CheckIn::new(p, t as u64, vec![0], vec![0]))
            .collect();
        Corpus::new(
            vec![UserSequence { user_id: 0, checkins }],
            Cardinalities {
                num_pois: pois,
                num_app_categories: 1,
                num_poi_categories: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn forced_choice() {
        let c = corpus_with(&[0, 1, 0], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_negative(&c, 0, &mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn exhausted_user_is_sampling_error() {
        let c = corpus_with(&[0, 1, 2], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_negative(&c, 0, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn uniform_over_complement() {
        let c = corpus_with(&[0], 10);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_negative(&c, 0, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        for &n in &counts[1..] {
            let freq = n as f64 / draws as f64;
            assert!((freq - 1.0 / 9.0).abs() < 0.02, "freq {freq}");
        }
        // Pearson chi-square with 8 dof; 26.12 is the 0.999 quantile.
        let expected = draws as f64 / 9.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&n| (n as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 26.12, "chi2 {chi2}");
    }

    #[test]
    fn deterministic_for_seed() {
        let c = corpus_with(&[3, 4], 50);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_negative(&c, 0, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn never_collides_with_history() {
        let visited: Vec<usize> = (0..40).map(|i| (i * 7) % 50).collect();
        let c = corpus_with(&visited, 50);
        let set = IdSet::new(visited.iter().copied());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let n = sample_negative(&c, 0, &mut rng).unwrap();
            assert!(!set.contains(n));
        }
    }

    #[test]
    fn distinct_draws() {
        let excluded = IdSet::new([1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let many = sample_distinct_excluding(1000, &excluded, 100, &mut rng);
        assert_eq!(IdSet::new(many.iter().copied()).len(), 100);
        assert!(many.iter().all(|&m| !excluded.contains(m)));
        let few = sample_distinct_excluding(10, &excluded, 100, &mut rng);
        assert_eq!(IdSet::new(few.iter().copied()).as_slice(), &[0, 4, 5, 6, 7, 8, 9]);
    }
}
