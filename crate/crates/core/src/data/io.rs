use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Cardinalities, CheckIn, Corpus, UserSequence, MIN_CHECKINS};
use crate::error::{Error, Result};

/// On-disk corpus layouts.
///
/// CSV: `user_id,poi_id,timestamp,app_cats,poi_cats` with `|`-separated
/// category lists, an optional header row, and an optional leading
/// `# num_pois=.. num_app_categories=.. num_poi_categories=..` line that
/// declares cardinalities (otherwise they are inferred as max id + 1).
///
/// JSONL: one object per line with the same field names (category lists as
/// arrays), optionally preceded by a cardinality object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Csv,
    Jsonl,
}

impl CorpusFormat {
    /// `.jsonl`/`.json` means JSONL, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Self::Jsonl,
            _ => Self::Csv,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

impl std::fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Jsonl => "jsonl",
        })
    }
}

const CSV_HEADER: &str = "user_id,poi_id,timestamp,app_cats,poi_cats";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    user_id: u64,
    poi_id: usize,
    timestamp: u64,
    app_cats: Vec<usize>,
    poi_cats: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonLine {
    Header(Cardinalities),
    Record(JsonRecord),
}

/// Reads a corpus file and applies the minimum-check-in filter.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text, format)
}

pub fn parse_corpus(text: &str, format: CorpusFormat) -> Result<Corpus> {
    let mut declared = None;
    let mut rows: Vec<(u64, CheckIn)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match format {
            CorpusFormat::Csv => {
                if let Some(rest) = line.strip_prefix('#') {
                    if declared.is_none() && rest.contains('=') {
                        declared = Some(parse_declaration(rest, line_no)?);
                    }
                    continue;
                }
                if line.starts_with("user_id") {
                    continue;
                }
                rows.push(parse_csv_row(line, line_no)?);
            }
            CorpusFormat::Jsonl => {
                let parsed: JsonLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?;
                match parsed {
                    JsonLine::Header(c) => declared = Some(c),
                    JsonLine::Record(r) => rows.push((
                        r.user_id,
                        CheckIn::new(r.poi_id, r.timestamp, r.app_cats, r.poi_cats),
                    )),
                }
            }
        }
    }

    let cardinalities = declared.unwrap_or_else(|| infer_cardinalities(rows.iter().map(|(_, e)| e)));
    let mut by_user: BTreeMap<u64, Vec<CheckIn>> = BTreeMap::new();
    for (user, e) in rows {
        by_user.entry(user).or_default().push(e);
    }
    let users = by_user
        .into_iter()
        .map(|(user_id, mut checkins)| {
            checkins.sort_by_key(|e| e.timestamp);
            UserSequence { user_id, checkins }
        })
        .collect();
    Ok(Corpus::new(users, cardinalities)?.filter_min_checkins(MIN_CHECKINS))
}

fn infer_cardinalities<'a>(rows: impl Iterator<Item = &'a CheckIn>) -> Cardinalities {
    let mut c = Cardinalities::default();
    for e in rows {
        c.num_pois = c.num_pois.max(e.poi + 1);
        for &a in &e.app_categories {
            c.num_app_categories = c.num_app_categories.max(a + 1);
        }
        for &s in &e.poi_categories {
            c.num_poi_categories = c.num_poi_categories.max(s + 1);
        }
    }
    c
}

fn parse_declaration(rest: &str, line: usize) -> Result<Cardinalities> {
    let mut c = Cardinalities::default();
    for tok in rest.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("bad declaration token {tok:?}"),
        })?;
        let v: usize = v.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad value in {tok:?}"),
        })?;
        match k {
            "num_pois" => c.num_pois = v,
            "num_app_categories" => c.num_app_categories = v,
            "num_poi_categories" => c.num_poi_categories = v,
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown declaration key {k:?}"),
                })
            }
        }
    }
    Ok(c)
}

fn parse_csv_row(line: &str, line_no: usize) -> Result<(u64, CheckIn)> {
    let err = |msg: String| Error::Parse { line: line_no, msg };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 5 {
        return Err(err(format!("expected 5 fields, got {}", fields.len())));
    }
    let user: u64 = fields[0]
        .parse()
        .map_err(|_| err(format!("bad user id {:?}", fields[0])))?;
    let poi: usize = fields[1]
        .parse()
        .map_err(|_| err(format!("bad poi id {:?}", fields[1])))?;
    let ts: u64 = fields[2]
        .parse()
        .map_err(|_| err(format!("bad timestamp {:?}", fields[2])))?;
    let cats = |s: &str| -> Result<Vec<usize>> {
        s.split('|')
            .filter(|t| !t.is_empty())
            .map(|t| t.trim().parse().map_err(|_| err(format!("bad category id {t:?}"))))
            .collect()
    };
    Ok((user, CheckIn::new(poi, ts, cats(fields[3])?, cats(fields[4])?)))
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join("|")
}

/// Serializes a corpus, cardinalities first. Loading the output yields the
/// same corpus.
pub fn write_corpus(corpus: &Corpus, format: CorpusFormat) -> String {
    let c = corpus.cardinalities;
    let mut out = String::new();
    match format {
        CorpusFormat::Csv => {
            let _ = writeln!(
                out,
                "# num_pois={} num_app_categories={} num_poi_categories={}",
                c.num_pois, c.num_app_categories, c.num_poi_categories
            );
            let _ = writeln!(out, "{CSV_HEADER}");
            for u in &corpus.users {
                for e in &u.checkins {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        u.user_id,
                        e.poi,
                        e.timestamp,
                        join(&e.app_categories),
                        join(&e.poi_categories)
                    );
                }
            }
        }
        CorpusFormat::Jsonl => {
            let _ = writeln!(out, "{}", serde_json::to_string(&c).expect("plain struct"));
            for u in &corpus.users {
                for e in &u.checkins {
                    let rec = JsonRecord {
                        user_id: u.user_id,
                        poi_id: e.poi,
                        timestamp: e.timestamp,
                        app_cats: e.app_categories.clone(),
                        poi_cats: e.poi_categories.clone(),
                    };
                    let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("plain struct"));
                }
            }
        }
    }
    out
}
