//! Shortest-path analysis of orchard LiDAR point clouds: ground removal,
//! voxel graphs, trunk detection, instance segmentation and wood/leaf
//! classification.

// `!(x > 0.0)` is used on purpose so NaN parameters are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod cloud;
pub mod enrich;
pub mod error;
pub mod eval;
pub mod graph;
mod index;
pub mod io;
pub mod pipeline;
pub mod preprocess;
pub mod segment;
pub mod synth;
pub mod trunks;

pub use cloud::{MatterClass, PointCloud, PointRecord, GROUND_ID, UNKNOWN_ID};
pub use error::{Error, Result};
pub use graph::{TreeGraph, TrunkPoint, Weighting};
pub use index::SpatialIndex;
