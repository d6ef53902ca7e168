//! # scr-core
//!
//! Library for SCR: semantic conditional message passing over knowledge
//! graphs, with task-specific KG construction that reduces node- and
//! graph-classification to link prediction.
//!
//! Module map:
//! - [`kg`] — triple parsing, augmentation (inverse + identity relations),
//!   adjacency queries, synthetic feature generators
//! - [`features`] — dense feature matrices and their file formats
//! - [`semantics`] — truncated-SVD feature unifier and semantic-neighbor
//!   extraction
//! - [`relgraph`] — relation graph over head/tail co-occurrence
//!   interactions, with semantic augmentation
//! - [`tensor`] — dense matrices plus reverse-mode differentiation for the
//!   fixed op set the model needs
//! - [`model`] — conditional message passing (CMP) and its
//!   semantic extension (SCMP): initialization, propagation, relation
//!   representations, fusion, scoring
//! - [`train`] — negative sampling, BCE objective, Adam loop,
//!   feature-type cycling, checkpoints
//! - [`eval`] — filtered ranking metrics and classification metrics
//! - [`task`] — node/graph classification datasets reduced to task KGs
//! - [`synth`] — synthetic dataset generators used by self-tests

pub mod eval;
pub mod features;
pub mod kg;
pub mod model;
pub mod relgraph;
pub mod semantics;
pub mod synth;
pub mod task;
pub mod tensor;
pub mod train;
