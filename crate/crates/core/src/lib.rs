//! Re-ranking engine for image retrieval over a k-nearest-neighbor similarity graph.
//!
//! The pipeline runs in cumulative stages:
//!
//! 1. [`knn::blend`] concatenates two global descriptor spaces and renormalizes.
//! 2. [`knn::knn_build`] builds the exact inner-product neighbor graph.
//! 3. [`qe::qe_sv_pass`] expands query and index descriptors with their
//!    spatially verified neighbors ([`sv`]) and rebuilds the graph.
//! 4. [`egt::egt_traverse`] walks trusted paths from each query.
//! 5. [`egt::semisup_egt`] does the same on a graph augmented with labeled
//!    training images, each label contributing a star sub-graph.
//!
//! [`eval`] holds the mAP@K metric and the seeded synthetic dataset used for
//! desk-scale verification. [`pipeline`] wires the stages together for the CLI.

pub mod egt;
pub mod error;
pub mod eval;
pub mod graph;
pub mod knn;
pub mod pipeline;
pub mod qe;
pub mod seed;
pub mod store;
pub mod sv;

pub use error::{Error, Result};
pub use graph::{Edge, Role, VertexId, WeightedGraph};
pub use store::{DescriptorSet, GroundTruth, ImageId, Label, LabelTable, LocalFeatureSet};
