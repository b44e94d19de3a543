//! Near-distribution novelty detection.
//!
//! A score-based diffusion model is trained on the normal class and stopped
//! early, once its samples reach a target FID band. Those samples serve as
//! near-distribution outliers. A feature extractor is fine-tuned to separate
//! them from the real normals, and test inputs are scored by the summed
//! squared distance to their `k` nearest normal embeddings.
//!
//! Module map:
//!
//! * [`data`]: image batches, labeled datasets, evaluation splits
//! * [`sde`]: diffusion schedules, score networks, training and sampling
//! * [`fid`]: Fréchet distance between embedding Gaussians
//! * [`encoder`]: backbone, embedding, binary fine-tuning
//! * [`memory`]: memory bank and k-NN novelty score
//! * [`benchmark`]: closeness scores, bottom-i, synthetic-anomaly test sets
//! * [`eval`]: AUROC, detector reports, rank correlation
//! * [`pipeline`]: config-driven stages behind the `nearnd` CLI

pub mod benchmark;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fid;
pub mod io;
pub mod memory;
pub mod nn;
pub mod pipeline;
pub mod sde;
pub mod synthetic;

pub use error::{Error, Result};
