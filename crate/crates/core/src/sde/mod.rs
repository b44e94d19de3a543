//! Score-based generative model: forward diffusion, denoising score
//! matching, reverse-time sampling, and FID-gated early stopping.

mod loss;
mod sampler;
mod schedule;
mod score;
mod train;

pub use loss::{dsm_loss, dsm_objective, dsm_objective_grad, perturb, perturb_with, DsmDraw};
pub use sampler::{langevin_correct, reverse_step, sample, sample_images, sample_unclamped, SamplerConfig};
pub use schedule::{DiffusionSchedule, ForwardSde, ScheduleKind};
pub use score::{AffineScore, MlpScore, ScoreModel, ScoreNetConfig, ZeroScore};
pub use train::{
    checkpoint_id, load_checkpoint, save_checkpoint, select_checkpoint, train_generator, CheckpointHeader,
    CheckpointRecord, FidBand, GenerationRun, GeneratorTrainConfig, Selection,
};
