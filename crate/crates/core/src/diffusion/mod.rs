//! Noise schedule, denoiser network, training and checkpoints.

pub mod checkpoint;
pub mod denoiser;
pub mod objective;
pub mod ops;
pub mod optim;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use checkpoint::{CheckpointHeader, EpsilonModel, Model, ModelCheckpoint};
pub use denoiser::{ArchSpec, Conditioning, Denoiser};
pub use schedule::{cosine_schedule, forward_diffuse, DiffusionStep, NoiseSchedule};
pub use tensor::Tensor;
pub use train::{train, write_loss_curve, CurvePoint, TrainOutcome, TrainStatus, TrainingConfig};
