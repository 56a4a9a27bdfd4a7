//! Link prediction for sparse commonsense knowledge graphs.
//!
//! A relational, neighbour-attentive GCN encoder produces graph embeddings
//! that are optionally concatenated with externally produced node text
//! embeddings and scored by a ConvTransE decoder. The crate also covers graph
//! densification from text-embedding similarity, progressive masking of the
//! text features, uniform edge subgraph sampling, DistMult/ComplEx baselines
//! and filtered ranking evaluation.

pub mod decoder;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kg;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
