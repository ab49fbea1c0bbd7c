//! Conditional diffusion action segmentation: cosine noising of one-hot
//! label sequences, a clean-label-predicting denoiser conditioned on
//! per-frame features, and deterministic step-skipping inference.

pub mod checkpoint;
pub mod infer;
pub mod loss;
pub mod model;
pub mod schedule;
pub mod train;

pub use infer::{frame_accuracy, infer, infer_probs, StepPlan};
pub use loss::{loss, LossConfig, LossParts};
pub use model::{denoise, DenoiserConfig, DenoiserParams};
pub use schedule::{q_sample, LabelSequence, LabelSpace, NoiseSchedule};
pub use train::{train, TrainHyper, TrainOutcome};
