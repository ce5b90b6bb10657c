//! Negation-aware image-text matching on top of frozen contrastive encoders.
//!
//! A frozen dual encoder embeds "a photo of a cat" and "a photo with no cat"
//! almost identically, so both captions match cat images. This crate adds two
//! small trainable modules around such an encoder without touching its
//! weights:
//!
//! * [`lens`] extracts the negated-concept feature from layered text states
//!   via a dual-stream hierarchical attention with residual gating.
//! * [`frame`] predicts a context-dependent repulsion weight from the fused
//!   text-image context and the negation feature.
//!
//! [`scoring`] combines them: the usual temperature-scaled cosine is reduced
//! by a gated repulsion term whenever a lightweight classifier decides the
//! caption is negated. [`training`] provides the three-stage regimen (lens
//! supervision, frame contrastive training, joint fine-tuning) plus the
//! standalone gate fit, with hand-derived analytic gradients throughout.
//! [`eval`] holds the metrics and ablation harness; [`toy`] is a
//! deterministic desk-scale backbone that reproduces the bag-of-words
//! failure; [`container`] reads and writes the CGT1 tensor format used for
//! checkpoints and precomputed-embedding imports.

pub mod bundle;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod frame;
pub mod gradcheck;
pub mod lens;
pub mod nn;
pub mod pipeline;
pub mod prep;
pub mod rng;
pub mod scoring;
pub mod toy;
pub mod training;

pub use bundle::EmbeddingBundle;
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use frame::FrameParams;
pub use lens::LensParams;
pub use pipeline::{AblationSetting, Pipeline};
pub use scoring::{GateParams, ScoreConfig};
pub use toy::{ToyWorld, ToyWorldConfig};
pub use training::{NegativesMode, Stage, TrainConfig};
