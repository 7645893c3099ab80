use super::CheckIn;
use crate::error::{Error, Result};

/// The `len` most recent check-ins of a sequence, left-padded.
///
/// Pad slots carry `pad_poi` (one past the last real POI id), timestamp 0
/// and empty category sets; `pad_mask[i]` is true for real check-ins.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub pois: Vec<usize>,
    pub timestamps: Vec<u64>,
    pub app_categories: Vec<Vec<usize>>,
    pub poi_categories: Vec<Vec<usize>>,
    pub pad_mask: Vec<bool>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn num_real(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    /// Index of the first real slot.
    pub fn first_real(&self) -> usize {
        self.len() - self.num_real()
    }
}

pub fn window(seq: &[CheckIn], len: usize, pad_poi: usize) -> Result<Window> {
    if len == 0 {
        return Err(Error::Usage("window length must be at least 1".into()));
    }
    if seq.is_empty() {
        return Err(Error::Usage("cannot window an empty sequence".into()));
    }
    let take = seq.len().min(len);
    let pad = len - take;
    let recent = &seq[seq.len() - take..];

    let mut w = Window {
        pois: vec![pad_poi; pad],
        timestamps: vec![0; pad],
        app_categories: vec![Vec::new(); pad],
        poi_categories: vec![Vec::new(); pad],
        pad_mask: vec![false; pad],
    };
    for e in recent {
        w.pois.push(e.poi);
        w.timestamps.push(e.timestamp);
        w.app_categories.push(e.app_categories.clone());
        w.poi_categories.push(e.poi_categories.clone());
        w.pad_mask.push(true);
    }
    Ok(w)
}
