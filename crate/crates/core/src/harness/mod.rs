//! Two-phase training, leave-one-out evaluation, ablations and the command
//! line front end.

pub mod cli;
mod config;
mod metrics;
mod output;
mod pipeline;

pub use config::{Profile, RunConfig, SEED_ENV};
pub use metrics::{
    eval_candidates, evaluate, hit_at, ndcg_at, pessimistic_rank, rms_distance, EvalCase, EvalReport, Scorer,
    UserResult, CUTOFFS, TIE_RULE,
};
pub use output::{
    ablation_csv, ablation_variants, metrics_csv, run_ablation, run_seed, AblationOutcome, MetricRow, VariantSummary,
    METRICS_HEADER, SUMMARY_METRICS,
};
pub use pipeline::{
    category_rms_probe, derive_seed, evaluate_checkpoint, evaluate_users, prepare_split, prepare_user,
    pretrained_vectors, split, train_ei_phase, train_pipeline, train_sr_phase, EpochRecord, Phase, PipelineOutcome,
    PreparedUser, SplitCorpus, SrOutcome, UserSplit,
};
