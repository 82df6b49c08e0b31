//! Modular image-to-video adapters over a small latent video diffusion model.
//!
//! A frozen [`BaseModel`] denoises latent videos with spatial, cross and
//! temporal attention. A [`Miva`] adds cross-frame attention, an implicit
//! prompt and temporal LoRAs; masked adapters also generate a subject-mask
//! stream that biases attention. Adapters are trained one motion at a time
//! and composed at inference with per-adapter weights.

pub mod adapter;
pub mod attention;
pub mod autograd;
pub mod compose;
pub mod config;
pub mod container;
pub mod dct;
pub mod error;
pub mod gradcheck;
pub mod masked;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vae;

pub use adapter::{attach, detach, parameter_ratio, AdaptedModel, Miva, MivaCheckpoint, MivaMeta};
pub use compose::CompositionWeights;
pub use config::Config;
pub use error::{MivaError, Result};
pub use masked::{MaskSequence, MaskStepSet, UnifiedMask};
pub use metrics::{MetricReport, Track};
pub use model::{AdapterUse, Attachment, BaseModel, Conditioning, ModelConfig, Ranks, SlotKind};
pub use pipeline::{animate, Animation, GenerationConfig, PreprocessConfig};
pub use schedule::NoiseSchedule;
pub use synth::{MotionPattern, MotionPatternDataset, PatternKind, Region};
pub use tensor::{LatentVideo, Mat};
pub use train::{pretrain_base, train_miva, train_mmiva, LossWeighting, TrainConfig};
pub use vae::PatchAutoencoder;
