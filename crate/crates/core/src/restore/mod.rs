//! Occupancy restoration model, losses and training.

pub mod checkpoint;
pub mod features;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use features::{FeatureExtractor, PyramidProjection};
pub use loss::{bce, loss_det_proxy, loss_mse, loss_pcp, loss_self, PerceptualLoss};
pub use model::{
    layer_map, Evaluation, Gradients, Group, Latent, LayerEntry, LossTerms, Mode, NormStats,
    Objective, Perceptual, RestorationModel, Trainable,
};
pub use optim::{one_cycle, Adam};
pub use train::{
    foreground_mask, train_two_stage, train_two_stage_observed, EpochRecord, Stage, TrainConfig,
    TrainReport, TrainSample,
};
