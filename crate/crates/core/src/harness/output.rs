use std::fmt::Write as _;

use super::config::RunConfig;
use super::metrics::EvalReport;
use super::pipeline::{split, train_ei_phase, train_sr_phase, PipelineOutcome};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::Real;

pub const METRICS_HEADER: &str = "variant,epoch,split,metric,k,value,seed";

/// One fact of a run; `k` is empty for metrics without a cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub variant: String,
    pub epoch: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub k: Option<usize>,
    pub value: Real,
    pub seed: u64,
}

fn report_rows(variant: &str, epoch: usize, split: &'static str, r: &EvalReport, seed: u64) -> Vec<MetricRow> {
    let row = |metric, k, value| MetricRow {
        variant: variant.to_string(),
        epoch,
        split,
        metric,
        k,
        value,
        seed,
    };
    let mut rows = Vec::new();
    for &(k, hits, ndcg) in &r.at_k {
        rows.push(row("hits", Some(k), hits));
        rows.push(row("ndcg", Some(k), ndcg));
    }
    rows.push(row("mrr", None, r.mrr));
    rows
}

impl PipelineOutcome {
    pub fn metric_rows(&self, variant: &str, seed: u64) -> Vec<MetricRow> {
        let row = |epoch, split, metric, value| MetricRow {
            variant: variant.to_string(),
            epoch,
            split,
            metric,
            k: None,
            value,
            seed,
        };
        let mut rows: Vec<MetricRow> = self
            .ei_losses
            .iter()
            .enumerate()
            .map(|(e, &l)| row(e + 1, "ei", "loss", l))
            .collect();
        for rec in &self.sr.history {
            if let Some(l) = rec.loss {
                rows.push(row(rec.epoch, "train", "loss", l));
            }
            rows.extend(report_rows(variant, rec.epoch, "val", &rec.val, seed));
        }
        let best = self.sr.best_epoch;
        rows.extend(report_rows(variant, best, "test", &self.sr.test, seed));
        rows.push(row(best, "test", "rms_app", self.sr.probe.0));
        rows.push(row(best, "test", "rms_poi", self.sr.probe.1));
        rows
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{},{},{}", r.variant, r.epoch, r.split, r.metric, k, r.value, r.seed)
            .expect("writing to a String cannot fail");
    }
    out
}

/// The ablation grid: all channels, each channel alone, and none.
pub fn ablation_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    [
        ("full", true, true, true),
        ("-t", false, false, true),
        ("-a", true, false, false),
        ("-l", false, true, false),
        ("none", false, false, false),
    ]
    .into_iter()
    .map(|(name, app, poi, time)| {
        let mut c = base.clone();
        c.use_app = app;
        c.use_poi = poi;
        c.use_time = time;
        (name, c)
    })
    .collect()
}

/// Seed of the `run`-th repetition.
pub fn run_seed(base: u64, run: usize) -> u64 {
    base.wrapping_add(run as u64)
}

/// Names of the summarized test metrics, in column order.
pub const SUMMARY_METRICS: [&str; 7] = ["hits@1", "hits@5", "hits@10", "ndcg@1", "ndcg@5", "ndcg@10", "mrr"];

fn summary_values(r: &EvalReport) -> [Real; 7] {
    let h = |k| r.hits(k).unwrap_or(0.0);
    let n = |k| r.ndcg(k).unwrap_or(0.0);
    [h(1), h(5), h(10), n(1), n(5), n(10), r.mrr]
}

/// Test metrics of one variant across repeated runs.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: &'static str,
    /// One entry per run, columns as in [`SUMMARY_METRICS`].
    pub runs: Vec<[Real; 7]>,
}

impl VariantSummary {
    pub fn mean(&self) -> [Real; 7] {
        let n = self.runs.len() as Real;
        std::array::from_fn(|m| self.runs.iter().map(|r| r[m]).sum::<Real>() / n)
    }

    /// Sample standard deviation; zero for a single run.
    pub fn std(&self) -> [Real; 7] {
        let mean = self.mean();
        let n = self.runs.len();
        std::array::from_fn(|m| {
            if n < 2 {
                return 0.0;
            }
            let ss: Real = self.runs.iter().map(|r| (r[m] - mean[m]).powi(2)).sum();
            (ss / (n - 1) as Real).sqrt()
        })
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub summaries: Vec<VariantSummary>,
    pub rows: Vec<MetricRow>,
}

/// Runs `variants` for `runs` seeds. Each seed trains one EI phase that every
/// variant shares.
pub fn run_ablation(
    corpus: &Corpus,
    variants: &[(&'static str, RunConfig)],
    runs: usize,
) -> Result<AblationOutcome> {
    let Some((_, base)) = variants.first() else {
        return Err(Error::Usage("no ablation variants".into()));
    };
    if runs == 0 {
        return Err(Error::Usage("at least one run is required".into()));
    }
    let filtered = corpus.clone().filter_min_checkins(base.min_checkins);
    let split = split(&filtered)?;
    let mut summaries: Vec<VariantSummary> = variants
        .iter()
        .map(|(name, _)| VariantSummary {
            variant: name,
            runs: Vec::new(),
        })
        .collect();
    let mut rows = Vec::new();
    for run in 0..runs {
        let mut ei_cfg = base.clone();
        ei_cfg.seed = run_seed(base.seed, run);
        let ei = train_ei_phase(&split, &ei_cfg)?;
        for ((name, cfg), summary) in variants.iter().zip(&mut summaries) {
            let mut cfg = cfg.clone();
            cfg.seed = ei_cfg.seed;
            let start = std::time::Instant::now();
            let sr = train_sr_phase(&split, &ei.table, &cfg)?;
            let outcome = PipelineOutcome {
                ei_losses: ei.epoch_losses.clone(),
                sr,
                wall_clock: start.elapsed(),
            };
            summary.runs.push(summary_values(&outcome.sr.test));
            rows.extend(outcome.metric_rows(name, cfg.seed));
        }
    }
    Ok(AblationOutcome { summaries, rows })
}

/// One row per variant with mean and sample standard deviation of each metric.
pub fn ablation_csv(summaries: &[VariantSummary]) -> String {
    let mut out = String::from("variant,runs");
    for m in SUMMARY_METRICS {
        write!(out, ",{m}_mean,{m}_std").expect("writing to a String cannot fail");
    }
    out.push('\n');
    for s in summaries {
        write!(out, "{},{}", s.variant, s.runs.len()).expect("writing to a String cannot fail");
        for (mean, std) in s.mean().iter().zip(s.std()) {
            write!(out, ",{mean},{std}").expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    out
}
