//! The toy ε-predicting denoiser: architecture, forward and reverse-mode
//! passes, training, distillation and checkpoints.

mod attention;
pub mod checkpoint;
mod descriptor;
mod layers;
mod network;
mod optim;
mod train;

pub use attention::Attention;
pub use descriptor::{ArchitectureDescriptor, AttentionDescriptor, BlockKind};
pub use layers::{LayerNorm, Linear};
pub use network::{
    mse, mse_grad, time_features, CondInput, DenoiserNetwork, ForwardOutput, ModelRole, ResBlock, Tape,
    TimeEmbedding, Weights, COND_EMBED,
};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use train::{
    distill, distill_gradient, distill_losses, sample_batch, task_gradient, task_loss, train_task, DistillConfig,
    DistillLog, DistillLosses, LabeledPoints, LossRecord, TrainConfig, TrainingBatch, TrainingLog,
};
