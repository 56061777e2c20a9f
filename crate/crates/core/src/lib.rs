//! Learnable binary weight masks for a small conditional diffusion
//! denoiser on 2D mixture data.
//!
//! The crate bundles a reverse-mode autodiff tape ([`Tape`], [`Tensor`]),
//! the forward/reverse diffusion machinery, a residual MLP denoiser, per-layer
//! mask generators, a training-free mask optimizer, and evaluation metrics.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod freeopt;
pub mod graph;
pub mod mask;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use analysis::{MaskSnapshot, MaskStudy, MetricRow, SampleSet};
pub use checkpoint::{ArmKind, Checkpoint};
pub use config::ExperimentConfig;
pub use data::{Dataset, Mixture, MixtureSpec};
pub use denoiser::{DenoiserConfig, DenoiserModel};
pub use diffusion::{NoiseSchedule, SamplerConfig};
pub use error::{Error, Result};
pub use freeopt::{FreeOptConfig, MaskState, RewardKind, RewardSpec};
pub use graph::{Tape, Var};
pub use mask::{GeneratorSet, MaskGenerator, MaskGeneratorConfig, MaskTensor};
pub use params::ParamStore;
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainLog};
