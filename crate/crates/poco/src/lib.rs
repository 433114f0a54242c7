//! Polar-transformation contrastive pretraining for annular images.
//!
//! Everything runs on the CPU with no external tensor or ML dependencies:
//! a small reverse-mode autodiff graph, a convolutional backbone, the
//! three-stage contrastive objective with progressive hard-negative
//! mining, the polar warp preprocessing step, and the synthetic-data,
//! metrics, and training pipelines that tie them together.

pub mod augment;
pub mod contrastive;
pub mod error;
pub mod gradcheck;
pub mod imagebuf;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod polar;
pub mod optim;
pub mod scalar;
pub mod selfcheck;
pub mod synth;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use graph::{BatchStats, Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::Tensor;
