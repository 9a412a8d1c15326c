//! Small convolutional classifier: tensors, forward/backward passes,
//! weighted loss, Adam, data splitting, training, metrics and model files.

pub mod adam;
pub mod container;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod split;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use container::{load_model, model_id, save_model};
pub use loss::{class_weights, softmax, weighted_ce, ClassWeights};
pub use metrics::{evaluate_predictions, ClassMetrics, MetricsReport};
pub use model::{argmax, backward, forward, forward_cached, Architecture, ForwardCache, Gradients, ModelParams, PARAM_NAMES};
pub use split::split_train_test;
pub use tensor::Tensor;
pub use train::{
    evaluate, load_set, predict, predict_one, predict_probs, prepare_input, train, train_from, EpochStats, LabeledSet,
    TrainConfig, TrainOutcome,
};
