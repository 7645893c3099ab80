//! Per-window net category embeddings and the discretized relative index
//! matrices J (app categories), K (POI categories) and T (time gaps).

use std::io::{Read, Write};

use crate::binio;
use crate::data::Window;
use crate::ei::CategoryEmbeddings;
use crate::error::{Error, Result};
use crate::{Real, Tensor};

const CACHE_MAGIC: &[u8; 4] = b"RVRL";
const CACHE_VERSION: u32 = 1;

/// Cosine distances below this are rounding noise and count as 0.
const COSINE_EPS: Real = 1e-12;

/// How absolute time gaps are mapped to indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TimeMode {
    /// `min(floor(|dt| / t_min), I_t)`
    #[default]
    ClippedQuotient,
    /// `min(floor(|dt| / t_min * I_t), I_t)`
    Literal,
}

impl std::str::FromStr for TimeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clipped_quotient" => Ok(Self::ClippedQuotient),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Config(format!("unknown time mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TimeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ClippedQuotient => "clipped_quotient",
            Self::Literal => "literal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelativeConfig {
    pub clip_app: u16,
    pub clip_poi: u16,
    pub clip_time: u16,
    pub time_mode: TimeMode,
    pub use_app: bool,
    pub use_poi: bool,
    pub use_time: bool,
}

impl Default for RelativeConfig {
    fn default() -> Self {
        Self {
            clip_app: 64,
            clip_poi: 64,
            clip_time: 64,
            time_mode: TimeMode::ClippedQuotient,
            use_app: true,
            use_poi: true,
            use_time: true,
        }
    }
}

/// Mean app-category (`mu_app`) and POI-category (`mu_poi`) embedding per
/// window slot, both `[N, D]`; pad rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NetCategoryEmbeddings {
    pub mu_app: Tensor,
    pub mu_poi: Tensor,
}

/// Row-major `N x N` index matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelativeIndexMatrices {
    pub n: usize,
    pub j: Vec<u16>,
    pub k: Vec<u16>,
    pub t: Vec<u16>,
}

impl RelativeIndexMatrices {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            j: vec![0; n * n],
            k: vec![0; n * n],
            t: vec![0; n * n],
        }
    }
}

/// Arithmetic mean of the rows of `table` selected by `ids`.
pub fn net_embedding(ids: &[usize], table: &Tensor) -> Result<Vec<Real>> {
    if ids.is_empty() {
        return Err(Error::Usage("net embedding of an empty category set".into()));
    }
    let rows = table.shape()[0];
    let mut out = vec![0.0; table.last_dim()];
    for &id in ids {
        if id >= rows {
            return Err(Error::OutOfRange {
                what: "category",
                id,
                limit: rows,
            });
        }
        out.iter_mut().zip(table.row(id)).for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / ids.len() as Real;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

pub fn net_embeddings(window: &Window, table: &CategoryEmbeddings) -> Result<NetCategoryEmbeddings> {
    let (n, d) = (window.len(), table.dim());
    let mut mu_app = Tensor::zeros(&[n, d]);
    let mut mu_poi = Tensor::zeros(&[n, d]);
    for i in (0..n).filter(|&i| window.pad_mask[i]) {
        mu_app.row_mut(i).copy_from_slice(&net_embedding(&window.app_categories[i], &table.app)?);
        mu_poi.row_mut(i).copy_from_slice(&net_embedding(&window.poi_categories[i], &table.poi)?);
    }
    Ok(NetCategoryEmbeddings { mu_app, mu_poi })
}

fn cosine_distance(x: &[Real], y: &[Real]) -> Real {
    let dot: Real = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<Real>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<Real>().sqrt();
    let sim = if nx > 0.0 && ny > 0.0 { dot / (nx * ny) } else { 0.0 };
    let f = (1.0 - sim).clamp(0.0, 2.0);
    if f < COSINE_EPS {
        0.0
    } else {
        f
    }
}

/// `floor(f_cos(i, j) / max f_cos * clip)` over real slots, where the
/// minimum distance is the self-distance 0. Pad rows and columns are 0.
pub fn cosine_variance_matrix(mu: &Tensor, clip: u16, real: &[bool]) -> Result<Vec<u16>> {
    let n = mu.shape()[0];
    if real.len() != n || mu.rank() != 2 {
        return Err(Error::Dimension {
            op: "cosine_variance_matrix",
            detail: format!("mu {:?}, {} mask flags", mu.shape(), real.len()),
        });
    }
    let mut dist = vec![0.0; n * n];
    let mut max_f: Real = 0.0;
    for i in (0..n).filter(|&i| real[i]) {
        for j in (i + 1..n).filter(|&j| real[j]) {
            let f = cosine_distance(mu.row(i), mu.row(j));
            dist[i * n + j] = f;
            dist[j * n + i] = f;
            max_f = max_f.max(f);
        }
    }
    if max_f <= 0.0 {
        return Ok(vec![0; n * n]);
    }
    let scale = Real::from(clip);
    Ok(dist
        .iter()
        .map(|&f| ((f / max_f * scale).floor() as u16).min(clip))
        .collect())
}

/// Relative time-gap indices. `t_min` is the smallest positive gap between
/// consecutive real check-ins; with no positive gap the matrix is 0.
pub fn time_variance_matrix(timestamps: &[u64], clip: u16, real: &[bool], mode: TimeMode) -> Vec<u16> {
    let n = timestamps.len();
    let reals: Vec<usize> = (0..n).filter(|&i| real[i]).collect();
    let t_min = reals
        .windows(2)
        .map(|w| timestamps[w[1]].abs_diff(timestamps[w[0]]))
        .filter(|&g| g > 0)
        .min();
    let mut out = vec![0u16; n * n];
    let Some(t_min) = t_min else {
        return out;
    };
    for (a, &i) in reals.iter().enumerate() {
        for &j in &reals[a + 1..] {
            let gap = timestamps[i].abs_diff(timestamps[j]);
            let v = match mode {
                TimeMode::ClippedQuotient => gap / t_min,
                TimeMode::Literal => {
                    let q = u128::from(gap) * u128::from(clip) / u128::from(t_min);
                    u64::try_from(q).unwrap_or(u64::MAX)
                }
            };
            let v = v.min(u64::from(clip)) as u16;
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

/// Net embeddings and J/K/T for one window. Disabled channels get all-zero
/// indices.
pub fn build_relative(
    window: &Window,
    table: &CategoryEmbeddings,
    config: &RelativeConfig,
) -> Result<(NetCategoryEmbeddings, RelativeIndexMatrices)> {
    if !table.is_frozen() {
        return Err(Error::Usage("relative encodings need a frozen category table".into()));
    }
    let n = window.len();
    let mu = net_embeddings(window, table)?;
    let real = &window.pad_mask;
    let mut m = RelativeIndexMatrices::zeros(n);
    if config.use_app {
        m.j = cosine_variance_matrix(&mu.mu_app, config.clip_app, real)?;
    }
    if config.use_poi {
        m.k = cosine_variance_matrix(&mu.mu_poi, config.clip_poi, real)?;
    }
    if config.use_time {
        m.t = time_variance_matrix(&window.timestamps, config.clip_time, real, config.time_mode);
    }
    Ok((mu, m))
}

/// Writes `RVRL`, version, count, N (u32 LE), then J, K, T of every entry
/// as row-major u16 LE.
pub fn write_relative_cache(entries: &[RelativeIndexMatrices], w: &mut impl Write) -> Result<()> {
    let n = entries.first().map_or(0, |e| e.n);
    if entries.iter().any(|e| e.n != n) {
        return Err(Error::Usage("cached matrices must share one window length".into()));
    }
    w.write_all(CACHE_MAGIC)?;
    binio::write_u32(w, CACHE_VERSION)?;
    binio::write_u32(w, binio::to_u32(entries.len(), "entry count")?)?;
    binio::write_u32(w, binio::to_u32(n, "N")?)?;
    for e in entries {
        for v in e.j.iter().chain(&e.k).chain(&e.t) {
            binio::write_u16(w, *v)?;
        }
    }
    Ok(())
}

pub fn read_relative_cache(r: &mut impl Read) -> Result<Vec<RelativeIndexMatrices>> {
    binio::expect_magic(r, CACHE_MAGIC, "relative matrix cache")?;
    let version = binio::read_u32(r)?;
    if version != CACHE_VERSION {
        return Err(Error::Integrity(format!("unsupported cache version {version}")));
    }
    let count = binio::read_u32(r)? as usize;
    let n = binio::read_u32(r)? as usize;
    let read_mat = |r: &mut dyn Read| -> Result<Vec<u16>> {
        let mut buf = vec![0u8; n * n * 2];
        r.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    };
    (0..count)
        .map(|_| {
            Ok(RelativeIndexMatrices {
                n,
                j: read_mat(r)?,
                k: read_mat(r)?,
                t: read_mat(r)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{window, CheckIn};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn table() -> CategoryEmbeddings {
        CategoryEmbeddings::new(
            t(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]),
            t(&[&[2.0, 0.0], &[0.0, -1.0]]),
        )
        .unwrap()
        .freeze()
    }

    #[test]
    fn net_embedding_examples() {
        let tab = t(&[&[1.0, 0.0], &[0.0, 1.0], &[3.0, 3.0]]);
        assert_eq!(net_embedding(&[2], &tab).unwrap(), vec![3.0, 3.0]);
        assert_eq!(net_embedding(&[0, 1], &tab).unwrap(), vec![0.5, 0.5]);
        assert_eq!(net_embedding(&[1, 0], &tab).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(net_embedding(&[], &tab), Err(Error::Usage(_))));
        assert!(matches!(net_embedding(&[3], &tab), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn identical_mu_gives_zero_matrix() {
        let mu = t(&[&[1.0, 2.0], &[1.0, 2.0], &[2.0, 4.0]]);
        assert_eq!(cosine_variance_matrix(&mu, 64, &[true; 3]).unwrap(), vec![0; 9]);
    }

    #[test]
    fn orthogonal_pair_saturates() {
        let mu = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(cosine_variance_matrix(&mu, 64, &[true; 2]).unwrap(), vec![0, 64, 64, 0]);
    }

    #[test]
    fn pad_rows_are_zero_and_excluded_from_max() {
        let mu = t(&[&[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], &[0.0, 1.0]]);
        let m = cosine_variance_matrix(&mu, 8, &[false, true, true, true]).unwrap();
        assert!(m[..4].iter().all(|&v| v == 0));
        assert!((0..4).all(|i| m[i * 4] == 0));
        // cos distances: (1,2) and (2,3) = 1 - 1/sqrt2, (1,3) = 1 = max
        let expect = ((1.0 - 0.5f64.sqrt()) * 8.0).floor() as u16;
        assert_eq!(m[4 + 2], expect);
        assert_eq!(m[4 + 3], 8);
        assert_eq!(m[2 * 4 + 3], expect);
    }

    #[test]
    fn time_examples() {
        let ts = [0, 10, 20];
        let real = [true; 3];
        let q = time_variance_matrix(&ts, 4, &real, TimeMode::ClippedQuotient);
        assert_eq!(q, vec![0, 1, 2, 1, 0, 1, 2, 1, 0]);
        let l = time_variance_matrix(&ts, 4, &real, TimeMode::Literal);
        assert_eq!(l, vec![0, 4, 4, 4, 0, 4, 4, 4, 0]);
        assert_eq!(time_variance_matrix(&[5, 5, 5], 4, &real, TimeMode::Literal), vec![0; 9]);
    }

    #[test]
    fn time_gap_uses_real_slots_only() {
        let ts = [0, 100, 130, 190];
        let q = time_variance_matrix(&ts, 64, &[false, true, true, true], TimeMode::ClippedQuotient);
        assert_eq!(q[0..4], [0, 0, 0, 0]);
        assert_eq!(q[4 + 2], 1);
        assert_eq!(q[4 + 3], 3);
        assert_eq!(q[2 * 4 + 3], 2);
    }

    fn checkins() -> Vec<CheckIn> {
        vec![
            CheckIn::new(0, 0, vec![0], vec![0]),
            CheckIn::new(1, 60, vec![1], vec![1]),
            CheckIn::new(2, 90, vec![0, 1], vec![0, 1]),
        ]
    }

    #[test]
    fn build_relative_end_to_end() {
        let w = window(&checkins(), 4, 9).unwrap();
        let cfg = RelativeConfig::default();
        let (mu, m) = build_relative(&w, &table(), &cfg).unwrap();
        assert_eq!(mu.mu_app.row(0), &[0.0, 0.0]);
        assert_eq!(mu.mu_app.row(3), &[0.5, 0.5]);
        assert_eq!(mu.mu_poi.row(3), &[1.0, -0.5]);
        assert_eq!(m.j[4 + 2], 64);
        assert_eq!(m.t[4 + 3], 3);

        let (_, again) = build_relative(&w, &table(), &cfg).unwrap();
        assert_eq!(m, again);

        let no_app = RelativeConfig {
            use_app: false,
            ..cfg
        };
        let (_, m2) = build_relative(&w, &table(), &no_app).unwrap();
        assert!(m2.j.iter().all(|&v| v == 0));
        assert_eq!(m2.k, m.k);
        assert_eq!(m2.t, m.t);
    }

    #[test]
    fn single_real_checkin_gives_zero_matrices() {
        let w = window(&checkins()[..1], 3, 9).unwrap();
        let (_, m) = build_relative(&w, &table(), &RelativeConfig::default()).unwrap();
        assert_eq!(m, RelativeIndexMatrices::zeros(3));
    }

    #[test]
    fn unfrozen_table_is_rejected() {
        let w = window(&checkins(), 3, 9).unwrap();
        let tab = CategoryEmbeddings::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(build_relative(&w, &tab, &RelativeConfig::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn cache_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let entries: Vec<RelativeIndexMatrices> = (0..3)
            .map(|_| RelativeIndexMatrices {
                n: 4,
                j: (0..16).map(|_| rng.random_range(0..65)).collect(),
                k: (0..16).map(|_| rng.random_range(0..65)).collect(),
                t: (0..16).map(|_| rng.random_range(0..65)).collect(),
            })
            .collect();
        let mut buf = Vec::new();
        write_relative_cache(&entries, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 3 * 3 * 16 * 2);
        assert_eq!(read_relative_cache(&mut buf.as_slice()).unwrap(), entries);
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_relative_cache(&mut buf.as_slice()), Err(Error::Io(_))));
    }

    fn check_shape(m: &[u16], n: usize, clip: u16, real: &[bool]) -> std::result::Result<(), TestCaseError> {
        for i in 0..n {
            prop_assert_eq!(m[i * n + i], 0);
            for j in 0..n {
                prop_assert!(m[i * n + j] <= clip);
                prop_assert_eq!(m[i * n + j], m[j * n + i]);
                if !real[i] || !real[j] {
                    prop_assert_eq!(m[i * n + j], 0);
                }
            }
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn cosine_matrix_bounded_symmetric_scale_invariant(
            vals in prop::collection::vec(-3.0f64..3.0, 18),
            pads in 0usize..3,
            clip in 1u16..80,
            c in 0.01f64..100.0,
        ) {
            let n = 6;
            let real: Vec<bool> = (0..n).map(|i| i >= pads).collect();
            let mu = Tensor::new(vec![n, 3], vals).unwrap();
            let m = cosine_variance_matrix(&mu, clip, &real).unwrap();
            check_shape(&m, n, clip, &real)?;
            let scaled = cosine_variance_matrix(&mu.map(|v| v * c), clip, &real).unwrap();
            prop_assert_eq!(m, scaled);
        }

        #[test]
        fn time_matrix_bounded_and_rescale_invariant(
            gaps in prop::collection::vec(0u64..5000, 7),
            start in 0u64..1_000_000,
            pads in 0usize..3,
            clip in 1u16..80,
            c in 1u64..1000,
            shift in 0u64..1_000_000,
        ) {
            let n = gaps.len() + 1;
            let real: Vec<bool> = (0..n).map(|i| i >= pads).collect();
            let mut ts = vec![start];
            for g in &gaps {
                ts.push(ts.last().unwrap() + g);
            }
            for mode in [TimeMode::ClippedQuotient, TimeMode::Literal] {
                let m = time_variance_matrix(&ts, clip, &real, mode);
                check_shape(&m, n, clip, &real)?;
            }
            let m = time_variance_matrix(&ts, clip, &real, TimeMode::ClippedQuotient);
            let rescaled: Vec<u64> = ts.iter().map(|t| c * t + shift).collect();
            prop_assert_eq!(m, time_variance_matrix(&rescaled, clip, &real, TimeMode::ClippedQuotient));
        }
    }
}
