//! Loss, confusion counting, metrics, the training loop and evaluation.

mod eval;
mod fit;
mod loss;
mod metrics;

pub use eval::{argmax_classes, evaluate, percent, predict_logits, Evaluation, ONH_CLASS};
pub use fit::{prepare, train, EvalRecord, LossRecord, TrainEvent, TrainLog, TrainOutcome, TrainState};
pub use loss::cross_entropy;
pub use metrics::{fsc_from_iou, metrics, update_confusion, ClassMetrics, ConfusionCounts};
