//! Topological and morphological analysis of airway-like tubular trees.
//!
//! The pipeline runs binary voxel mask → distance transform → minimum
//! path-cost skeleton → branch graph, then feeds the graph into per-branch
//! features, anatomical label assignment, evaluation metrics, branching
//! pattern classification, morphological signatures and cohort statistics.
//!
//! Data-parallel kernels run on rayon when the `parallel` feature is on and
//! fall back to plain iterators otherwise; results are identical either way.

pub mod edt;
pub mod features;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod par;
pub mod patterns;
pub mod phantom;
pub mod pipeline;
pub mod signatures;
pub mod skeleton;
pub mod stats;
pub mod taxonomy;
pub mod union_find;
pub mod volume;

pub use edt::{distance_transform, DistanceField};
pub use graph::{AirwayGraph, BranchNode, Topology};
pub use skeleton::{extract_skeleton, select_root, SkelParams, SkeletonTree};
pub use taxonomy::{LabelClass, LabeledGraph, Lobe, Segment};
pub use volume::{Field, Grid, Volume, VolumeKind};

/// Version tag embedded in every JSON document the crate writes.
pub const SCHEMA_VERSION: &str = "1";
