//! Paired data, training loop, metrics and evaluation.

pub mod eval;
pub mod metrics;
pub mod pairs;
pub mod smoke;
pub mod train;

pub use eval::{evaluate, score_pair, tensor_images, EvalRecord, EvalReport, EVAL_HEADER};
pub use metrics::{psnr, ssim, PerceptualMetric, PSNR_CAP_DB};
pub use pairs::{load_pairs, make_pairs, save_pairs, Pair, Task};
pub use smoke::{run_toy, ToyOutcome, ToySetup};
pub use train::{split_validation, LogRow, Trainer, TrainingConfig, LOG_HEADER};

#[cfg(test)]
mod tests;
