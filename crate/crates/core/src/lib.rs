//! Hypergraph self-attention for skeleton-based action recognition.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense arrays, a reverse-mode tape and gradient checking
//! - [`skeleton`]: skeleton graphs, hop distances and input modalities
//! - [`hypergraph`]: incidence matrices, hyperedge features, partition learning
//! - [`hypersa`]: the hypergraph self-attention layer
//! - [`temporal`]: plain and multi-scale temporal convolution
//! - [`model`]: the stacked classifier, ablation variants and checkpoints
//! - [`training`]: synthetic data, optimization, evaluation and stream fusion
//! - [`container`]: the binary tensor container used for scores and samples
//! - [`checks`]: runnable gradient/oracle/invariant suites
//!
//! Skeleton batches are handed to the public API as `[N, C, T, V]` arrays and
//! converted once to the channels-last `[N, T, V, C]` layout used internally.

pub mod checks;
pub mod container;
pub mod error;
pub mod hypergraph;
pub mod hypersa;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod skeleton;
pub mod temporal;
pub mod training;

pub use error::{Error, Result};
