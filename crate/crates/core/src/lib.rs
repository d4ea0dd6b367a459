//! Siamese verification person re-identification, desk scale.
//!
//! The crate hand-builds the whole pipeline on a small dense-tensor engine
//! with reverse-mode differentiation: an MBConv backbone with compound
//! scaling extracts one descriptor per image, twin descriptors are compared
//! by a square layer and a two-logit verification head, training uses
//! RMSprop over balanced cross-camera pair batches, and retrieval quality is
//! reported as a CMC curve under the single-shot camera-A-query /
//! camera-B-gallery protocol.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod trainer;

pub use backbone::{
    build_model, forward_features, scale_config, BackboneConfig, ModelParams, StageSpec,
};
pub use data::sampler::{PairBatch, SamplerConfig};
pub use data::{Camera, IdentityDataset};
pub use error::{Error, Result};
pub use eval::{compute_cmc, evaluate_cmc, rank_table, CmcCurve, ScoreMatrix};
pub use head::{pair_score, PairLabel, VerificationHead};
pub use tensor::tape::{Mode, Tape};
pub use tensor::{Element, Tensor};
pub use trainer::{train, TrainConfig, TrainLog};
