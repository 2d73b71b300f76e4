//! Unsupervised detection of the bias subspace of contextualized embeddings.
//!
//! A graph auto-encoder over a homophilous community graph learns an
//! orthogonal rotation `R` of the embedding space together with a row-sparse
//! first-layer weight matrix. The rows that survive training select the
//! rotated dimensions that predict community structure. The crate also
//! carries the probes used to inspect the resulting subspace and a planted
//! benchmark with known ground truth.

pub mod embedding;
pub mod error;
pub mod exec;
pub mod graph;
pub mod io;
pub mod knee;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod special;
pub mod subspace;
pub mod svg;
pub mod synth;
pub mod train;

pub use embedding::EmbeddingTable;
pub use error::{Error, Result};
pub use graph::{EdgeSplit, Graph};
pub use linalg::Matrix;
pub use model::{ModelConfig, RotationGAE};
pub use subspace::SubspaceProjector;
pub use train::{Dataset, TrainConfig, TrialResult};
