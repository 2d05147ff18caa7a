//! The dual-head network: a shared ResNet-style trunk feeding a detection
//! head (triplet and cross-entropy losses) and a recommendation head
//! (triplet loss only), with the triplet samplers and training loop.

mod input;
mod loss;
mod model;
mod sampler;
mod train;

pub use input::{compose_input_stack, AblationMode, InputStack};
pub use loss::{
    cross_entropy, cross_entropy_with_grad, element_loss, euclidean_distance, l2_normalize, l2_normalize_backward,
    softmax, triplet_loss, triplet_loss_with_grad, ClassifierView, ElementGrads, LossBreakdown, LossWeights,
    DETECTION_TARGETS,
};
pub use model::{
    build_ducn, resnet18_conv_params, DetectionOutput, DuCNConfig, DuCNModel, Head, HeadKind, Init, Prediction, Trunk,
};
pub use sampler::{Regime, SliceMeta, TripletSample, TripletSampler};
pub use train::{
    batch_gradients, batch_loss, load_checkpoint, save_checkpoint, total_loss, train_ducn, train_step, CheckpointMeta,
    EpochLog, TrainingSet,
};
