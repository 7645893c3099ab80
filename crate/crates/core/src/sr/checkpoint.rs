use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use super::{Architecture, ModelParams};
use crate::binio;
use crate::ei::CategoryEmbeddings;
use crate::error::{Error, Result};
use crate::relenc::{RelativeConfig, TimeMode};
use crate::Tensor;

const MAGIC: &[u8; 4] = b"RVSR";
const VERSION: u32 = 1;

const FLAG_APP: u16 = 1;
const FLAG_POI: u16 = 2;
const FLAG_TIME: u16 = 4;
const FLAG_ABS: u16 = 8;
const FLAG_LITERAL_TIME: u16 = 16;

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let bytes = name.as_bytes();
    binio::write_u16(w, u16::try_from(bytes.len()).map_err(|_| Error::Integrity("tensor name too long".into()))?)?;
    w.write_all(bytes)?;
    binio::write_u32(w, binio::to_u32(t.rank(), "rank")?)?;
    for &d in t.shape() {
        binio::write_u32(w, binio::to_u32(d, "dimension")?)?;
    }
    binio::write_f64s(w, t.data())
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let len = usize::from(read_u16(r)?);
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name = read_name(r)?;
    let rank = binio::read_u32(r)? as usize;
    if rank > 4 {
        return Err(Error::Integrity(format!("tensor {name:?} has rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| binio::read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel = shape.iter().product();
    let data = binio::read_f64s(r, numel)?;
    Ok((name, Tensor::new(shape, data)?))
}

/// Header (`RVSR`, version, D, N, blocks, heads, |L|, |A|, |S| as u32, the
/// three clips and a flag word as u16), then named tensors: recommender
/// tensors, the two category tables, and finally the frozen-name list.
pub fn write_checkpoint(params: &ModelParams, w: &mut impl Write) -> Result<()> {
    let a = &params.arch;
    w.write_all(MAGIC)?;
    binio::write_u32(w, VERSION)?;
    for (v, what) in [
        (a.dim, "D"),
        (a.max_len, "N"),
        (a.blocks, "blocks"),
        (a.heads, "heads"),
        (a.num_pois, "|L|"),
        (a.num_app_categories, "|A|"),
        (a.num_poi_categories, "|S|"),
    ] {
        binio::write_u32(w, binio::to_u32(v, what)?)?;
    }
    let rel = &a.relative;
    for c in [rel.clip_app, rel.clip_poi, rel.clip_time] {
        binio::write_u16(w, c)?;
    }
    let mut flags = 0;
    for (on, bit) in [
        (rel.use_app, FLAG_APP),
        (rel.use_poi, FLAG_POI),
        (rel.use_time, FLAG_TIME),
        (a.use_abs, FLAG_ABS),
        (rel.time_mode == TimeMode::Literal, FLAG_LITERAL_TIME),
    ] {
        if on {
            flags |= bit;
        }
    }
    binio::write_u16(w, flags)?;

    let named = params.named();
    binio::write_u32(w, binio::to_u32(named.len() + 2, "tensor count")?)?;
    for (name, t) in &named {
        write_tensor(w, name, t)?;
    }
    write_tensor(w, "ei.app", &params.categories.app)?;
    write_tensor(w, "ei.poi", &params.categories.poi)?;

    binio::write_u32(w, binio::to_u32(params.frozen().len(), "frozen count")?)?;
    for name in params.frozen() {
        let bytes = name.as_bytes();
        binio::write_u16(w, bytes.len() as u16)?;
        w.write_all(bytes)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams> {
    binio::expect_magic(r, MAGIC, "model checkpoint")?;
    let version = binio::read_u32(r)?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = binio::read_u32(r)? as usize;
    }
    let [dim, max_len, blocks, heads, num_pois, num_app_categories, num_poi_categories] = dims;
    let (clip_app, clip_poi, clip_time) = (read_u16(r)?, read_u16(r)?, read_u16(r)?);
    let flags = read_u16(r)?;
    let arch = Architecture {
        dim,
        max_len,
        blocks,
        heads,
        num_pois,
        num_app_categories,
        num_poi_categories,
        relative: RelativeConfig {
            clip_app,
            clip_poi,
            clip_time,
            time_mode: if flags & FLAG_LITERAL_TIME != 0 {
                TimeMode::Literal
            } else {
                TimeMode::ClippedQuotient
            },
            use_app: flags & FLAG_APP != 0,
            use_poi: flags & FLAG_POI != 0,
            use_time: flags & FLAG_TIME != 0,
        },
        use_abs: flags & FLAG_ABS != 0,
    };
    arch.validate()
        .map_err(|e| Error::Integrity(format!("checkpoint header: {e}")))?;

    let count = binio::read_u32(r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Integrity(format!("duplicate tensor {name:?}")));
        }
    }
    let app = tensors
        .remove("ei.app")
        .ok_or_else(|| Error::Integrity("checkpoint lacks the app-category table".into()))?;
    let poi = tensors
        .remove("ei.poi")
        .ok_or_else(|| Error::Integrity("checkpoint lacks the POI-category table".into()))?;
    if app.shape() != [num_app_categories, dim] || poi.shape() != [num_poi_categories, dim] {
        return Err(Error::Integrity(format!(
            "category tables {:?} / {:?} do not match the header",
            app.shape(),
            poi.shape()
        )));
    }
    let categories = CategoryEmbeddings::new(app, poi)?.freeze();

    let frozen_count = binio::read_u32(r)? as usize;
    let frozen = (0..frozen_count).map(|_| read_name(r)).collect::<Result<BTreeSet<_>>>()?;
    let mut params = ModelParams::from_parts(arch, categories, tensors)?;
    for name in &frozen {
        params
            .freeze(name)
            .map_err(|_| Error::Integrity(format!("frozen name {name:?} is not a tensor")))?;
    }
    Ok(params)
}
