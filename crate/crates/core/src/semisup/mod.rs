//! Training a pointwise classifier from sparse pseudo-labels.
//!
//! Stage 1 fits the pseudo-labeled points with cross-entropy plus
//! Lovász-softmax. Stage 2 adds a teacher whose weights are an exponential
//! moving average of the student's and distills its tempered predictions on
//! every point, labeled or not.

pub mod losses;
pub mod model;
pub mod train;

pub use losses::{
    combined_loss, cross_entropy, ema_update, kl_distill, kl_distill_grad, lovasz_softmax,
    lovasz_softmax_grad, softmax_rows, softmax_t, supervised_loss, LossGrad, LossWeights,
};
pub use model::{load_model, save_model, ModelSpec, PointwiseClassifier};
pub use train::{
    distill_step, supervised_step, trace_csv, train_two_stage, EpochStats, SemiSupConfig,
    StepStats, TrainOutcome, TrainSet,
};
