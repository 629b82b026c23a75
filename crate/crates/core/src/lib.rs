//! Orthogonal structural probes over token embeddings.
//!
//! A probe maps embeddings through a shared rotation `V` followed by a
//! per-objective scaling vector, so that squared distances and squared norms
//! of the mapped vectors approximate tree distances and depths. The crate
//! covers data ingestion, training, evaluation and the dimension and subspace
//! analyses built on top of the learned scaling vectors.

pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod embeddings;
pub mod evaluation;
pub mod error;
pub mod math;
pub mod matrix;
pub mod objective;
pub mod synthetic;
pub mod probe;
pub mod trainer;
pub mod treebank;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use objective::{ObjectiveId, Structure, Target};
