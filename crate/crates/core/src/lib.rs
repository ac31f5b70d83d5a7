//! One-class prompt learning for few-shot industrial anomaly detection.
//!
//! A frozen contrastive vision-language encoder is run as two streams: the
//! original stream yields a global CLS embedding, while a parallel V-V
//! attention stream yields local patch features. Learnable normal prompts
//! are contrasted against anomaly prompts built by appending manual or
//! learnable suffixes to the same prefixes. Prompt-guided scores are fused
//! with a nearest-neighbour memory of normal patches.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod memory;
pub mod pipeline;
pub mod prompts;
pub mod scalar;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision instantiations used by the command-line tool.
pub type ClipModelF32 = backbone::ClipModel<f32>;
pub type BackboneF32 = backbone::Backbone<f32>;
pub type PromptBankF32 = prompts::PromptBank<f32>;
pub type TrainedModelF32 = training::TrainedModel<f32>;
pub type FeatureMemoryF32 = memory::FeatureMemory<f32>;
pub type ScoreBundleF32 = scoring::ScoreBundle<f32>;
pub type BundleF32 = pipeline::Bundle<f32>;
pub type PipelineF32 = pipeline::Pipeline<f32>;

/// Double-precision instantiations, used for gradient checks.
pub type ClipModelF64 = backbone::ClipModel<f64>;
pub type BackboneF64 = backbone::Backbone<f64>;
pub type PromptBankF64 = prompts::PromptBank<f64>;
pub type TrainedModelF64 = training::TrainedModel<f64>;
pub type FeatureMemoryF64 = memory::FeatureMemory<f64>;
