//! Misclassification stack, accuracy gate, gain metrics and the
//! offline/online retraining procedure.

mod algorithm;
mod metrics;
mod stack;

pub use algorithm::{
    check_disjoint, execute, online_round, retrain_from_stack, run_rounds, train_offline,
    PhaseSummary, RefeedConfig, RefeedOutcome, Retrained, RoundOutcome, DEFAULT_MAX_ROUNDS,
    ONLINE_LEARNING_RATE,
};
pub use metrics::{
    gain, gain_factor, qoe_satisfied, qoe_satisfied_per_image, relationship_residual, GainMetrics,
    MetricsReport, QoeConfig, DEFAULT_Q,
};
pub use stack::{ReFeedStack, StackEntry, StackLine, TransferReport};
