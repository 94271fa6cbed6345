//! Loss, gradients, optimisers and the online training loop.

pub mod grad;
pub mod hidden;
pub mod loss;
pub mod optim;
pub mod sparce;
pub mod train;

pub use hidden::{hidden_layer_param_count, HiddenLayerLearner, HiddenSnapshot};
pub use loss::{loss_and_output_grad, LossKind, LossSpec};
pub use optim::{OptimizerKind, ParamGroup};
pub use sparce::{ForceTrace, RateConfig, SparceLearner, TrainState};
pub use train::{
    evaluate, train_epochs, Batch, BatchMetrics, EpochConfig, EvalMetrics, FeatureMatrix, Learner, MetricRow,
    MetricTrace, SampleSource, EVAL_PASS_BASE, METRIC_TRACE_HEADER,
};
