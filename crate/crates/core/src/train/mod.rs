//! Training loops, evaluation, gradient checking and the layer sweep.

mod config;
mod gradcheck;
mod loops;
pub mod metrics;
mod report;
mod sweep;

pub use config::TrainConfig;
pub use gradcheck::{grad_check, grad_check_report, CheckBatch, GradCheckConfig, GradGroup, GradReport};
pub use loops::{
    adapt, batch_mlm_loss, encode_corpus, eval_mlm_loss, evaluate_classifier, finetune_classify, predict_all,
    pretrain_mlm, AdaptMode, EncodedTask, MlmPath, EVAL_SEED,
};
pub use report::{EvalReport, SeedSummary};
pub use sweep::{
    chunk_pairs, hooked_layers, layer_sweep, quarter_layers, sweep_candidates, SweepFamily, SweepRow, SweepTable,
};
