//! Optimizer, schedule, loss, metrics and the epoch loop.

mod loss;
mod metrics;
mod optim;
mod trainer;

pub use loss::{batch_loss, class_weights, softmax_probs, weighted_ce};
pub use metrics::{auc, score, Confusion, Scores};
pub use optim::{epoch_lr, lr_at, optimizer_step, AdamState, TrainConfig};
pub use trainer::{
    evaluate, extract_features, load_batch, max_edge, predict, run_ablation, train_epoch,
    train_loop, AblationRow, EpochContext, EpochStats, LoadedBatch, MetricsRecord, TrainOutcome,
    ABLATION_FILE, ABLATION_HEADER, METRICS_FILE, METRICS_HEADER,
};
