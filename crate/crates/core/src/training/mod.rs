//! Query matching, losses, optimizer and the training loop.

mod losses;
mod matcher;
mod optim;
mod trainer;

pub use losses::{focal_loss, focal_loss_rows, smooth_l1, total_loss, LossParts, LOG_FLOOR};
pub use matcher::{hungarian, match_cost, match_queries, MatchResult};
pub use optim::{learning_rate, AdamW, AdamWConfig, Schedule};
pub use trainer::{evaluate, load_model, log_file_name, write_atomic, EpochLog, Trainer, CHECKPOINT_FILE, MODEL_FILE};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_cls: 1.0, lambda_reg: 1.5, gamma: 2.0, alpha: 0.25 }
    }
}
