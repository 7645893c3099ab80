use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::RunConfig;
use super::output::{ablation_csv, ablation_variants, metrics_csv, run_ablation, run_seed, MetricRow};
use super::pipeline::{evaluate_checkpoint, train_pipeline};
use super::SUMMARY_METRICS;
use crate::data::{load_corpus, synth_corpus, write_corpus, CorpusFormat, SynthSpec};
use crate::error::{Error, Result};
use crate::sr::{read_checkpoint, write_checkpoint};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "revamp", version, about = "Sequential POI recommendation from category-level check-in logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Corpus file (CSV, or JSONL by extension).
    #[arg(long)]
    data: PathBuf,
    /// Overrides the format implied by the extension.
    #[arg(long)]
    format: Option<CorpusFormat>,
}

impl DataArgs {
    fn load(&self) -> Result<crate::data::Corpus> {
        load_corpus(&self.data, self.format.unwrap_or_else(|| CorpusFormat::from_path(&self.data)))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train EI and the recommender, writing a checkpoint and metrics CSV.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// `key = value` run configuration; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Repetitions with derived seeds; each lands in `run<r>/`.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Re-evaluate a checkpoint on the test split of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        negatives: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the {full, -t, -a, -l, none} variants and compare them.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
    /// Write a seeded synthetic corpus.
    Synth {
        #[arg(long)]
        users: usize,
        #[arg(long)]
        pois: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        app_categories: usize,
        #[arg(long, default_value_t = 4)]
        poi_categories: usize,
        #[arg(long, default_value_t = 20)]
        len: usize,
        #[arg(long, default_value_t = 1.0)]
        correlation: f64,
        #[arg(long, default_value_t = 4)]
        route_len: usize,
        #[arg(long, default_value_t = 0.0)]
        jump: f64,
        #[arg(long, default_value_t = CorpusFormat::Csv)]
        format: CorpusFormat,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's header and per-tensor norms.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed_override: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.override_seed(seed_override)?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn train(data: &DataArgs, cfg: &RunConfig, out_dir: &Path, runs: usize, out: &mut dyn Write) -> Result<()> {
    let corpus = data.load()?;
    if runs == 0 {
        return Err(Error::Usage("--runs must be at least 1".into()));
    }
    for r in 0..runs {
        let mut cfg = cfg.clone();
        cfg.seed = run_seed(cfg.seed, r);
        let dir = if runs == 1 { out_dir.to_path_buf() } else { out_dir.join(format!("run{r}")) };
        let outcome = train_pipeline(&corpus, &cfg)?;
        let mut ckpt = Vec::new();
        write_checkpoint(&outcome.sr.params, &mut ckpt)?;
        write_file(&dir.join(CHECKPOINT_FILE), &ckpt)?;
        write_file(&dir.join(METRICS_FILE), metrics_csv(&outcome.metric_rows("full", cfg.seed)).as_bytes())?;
        write_file(&dir.join(CONFIG_FILE), cfg.to_string().as_bytes())?;
        let t = &outcome.sr.test;
        writeln!(
            out,
            "seed {}: best epoch {}, test hits@10 {:.4}, ndcg@10 {:.4}, mrr {:.4} ({:.1}s)",
            cfg.seed,
            outcome.sr.best_epoch,
            t.hits(10).unwrap_or(0.0),
            t.ndcg(10).unwrap_or(0.0),
            t.mrr,
            outcome.wall_clock.as_secs_f64()
        )?;
    }
    Ok(())
}

fn inspect(path: &Path, out: &mut dyn Write) -> Result<()> {
    let params = read_checkpoint(&mut std::io::BufReader::new(fs::File::open(path)?))?;
    let a = &params.arch;
    writeln!(out, "dim {} max_len {} blocks {} heads {}", a.dim, a.max_len, a.blocks, a.heads)?;
    writeln!(
        out,
        "pois {} app_categories {} poi_categories {}",
        a.num_pois, a.num_app_categories, a.num_poi_categories
    )?;
    let r = &a.relative;
    writeln!(
        out,
        "clips app {} poi {} time {}; channels app {} poi {} time {}; absolute {}; time mode {}",
        r.clip_app, r.clip_poi, r.clip_time, r.use_app, r.use_poi, r.use_time, a.use_abs, r.time_mode
    )?;
    let norm = |t: &crate::Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut entries: Vec<(String, f64, &str)> = params
        .named()
        .into_iter()
        .map(|(name, t)| {
            let state = if !params.is_active(&name) {
                "inactive"
            } else if params.is_trainable(&name) {
                "trainable"
            } else {
                "frozen"
            };
            (name.clone(), norm(t), state)
        })
        .collect();
    entries.push(("ei.app".into(), norm(&params.categories.app), "frozen"));
    entries.push(("ei.poi".into(), norm(&params.categories.poi), "frozen"));
    for (name, n, state) in entries {
        writeln!(out, "{name}\t{n:.6}\t{state}")?;
    }
    Ok(())
}

fn execute(cli: Cli, seed_override: Option<&str>, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { data, config, out: dir, runs } => {
            let cfg = load_config(config.as_deref(), seed_override)?;
            train(&data, &cfg, &dir, runs, out)
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            negatives,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref(), seed_override)?;
            if let Some(n) = negatives {
                cfg.eval_negatives = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let params = read_checkpoint(&mut std::io::BufReader::new(fs::File::open(&checkpoint)?))?;
            let report = evaluate_checkpoint(&params, &data.load()?, &cfg)?;
            let mut rows: Vec<MetricRow> = Vec::new();
            for &(k, hits, ndcg) in &report.at_k {
                for (metric, value) in [("hits", hits), ("ndcg", ndcg)] {
                    rows.push(MetricRow {
                        variant: "eval".into(),
                        epoch: 0,
                        split: "test",
                        metric,
                        k: Some(k),
                        value,
                        seed: cfg.seed,
                    });
                }
            }
            rows.push(MetricRow {
                variant: "eval".into(),
                epoch: 0,
                split: "test",
                metric: "mrr",
                k: None,
                value: report.mrr,
                seed: cfg.seed,
            });
            out.write_all(metrics_csv(&rows).as_bytes())?;
            Ok(())
        }
        Command::Ablate {
            data,
            config,
            out: dir,
            runs,
        } => {
            let cfg = load_config(config.as_deref(), seed_override)?;
            let outcome = run_ablation(&data.load()?, &ablation_variants(&cfg), runs)?;
            let table = ablation_csv(&outcome.summaries);
            write_file(&dir.join(ABLATION_FILE), table.as_bytes())?;
            write_file(&dir.join(METRICS_FILE), metrics_csv(&outcome.rows).as_bytes())?;
            let ndcg10 = SUMMARY_METRICS.iter().position(|&m| m == "ndcg@10").expect("ndcg@10 is summarized");
            for s in &outcome.summaries {
                writeln!(
                    out,
                    "{:>5}: ndcg@10 {:.4} ± {:.4} over {} runs",
                    s.variant,
                    s.mean()[ndcg10],
                    s.std()[ndcg10],
                    s.runs.len()
                )?;
            }
            Ok(())
        }
        Command::Synth {
            users,
            pois,
            seed,
            app_categories,
            poi_categories,
            len,
            correlation,
            route_len,
            jump,
            format,
            out: path,
        } => {
            let spec = SynthSpec {
                num_users: users,
                num_pois: pois,
                num_app_categories: app_categories,
                num_poi_categories: poi_categories,
                seq_len: len,
                correlation,
                route_len,
                jump_prob: jump,
                ..SynthSpec::default()
            };
            let text = write_corpus(&synth_corpus(&spec, seed)?, format);
            match path {
                Some(p) => write_file(&p, text.as_bytes()),
                None => Ok(out.write_all(text.as_bytes())?),
            }
        }
        Command::Inspect { checkpoint } => inspect(&checkpoint, out),
    }
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for usage or configuration errors, 1 for any other failure.
pub fn run<I, T>(argv: I, seed_override: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli, seed_override, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
