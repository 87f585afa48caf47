//! Individual tree segmentation by cheapest path to a trunk.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, GROUND_ID, UNKNOWN_ID};
use crate::error::{Error, Result};
use crate::graph::{aggregate_paths, build_graph, GraphParams, PathAggregate, Targets, TreeGraph, TrunkPoint};
use crate::preprocess::{propagate_to_points, remove_ground, voxelize, GroundParams, GroundPartition, VoxelGrid};

/// Parameters of the fine voxel graph shared by segmentation and
/// classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub ground: GroundParams,
    pub voxel_size: f64,
    pub graph: GraphParams,
    /// Trunks snap to the nearest node within this distance (m).
    pub anchor_radius: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            ground: GroundParams::default(),
            voxel_size: 0.1,
            graph: GraphParams::default(),
            anchor_radius: 1.0,
        }
    }
}

/// Canopy graph with shortest paths aggregated from every trunk.
#[derive(Debug, Clone)]
pub struct PathModel {
    pub partition: GroundPartition,
    pub grid: VoxelGrid,
    pub graph: TreeGraph,
    /// Trunks in ascending id order; source index `i` is `trunks[i]`.
    pub trunks: Vec<TrunkPoint>,
    pub anchors: Vec<usize>,
    pub aggregate: PathAggregate,
}

pub fn build_path_model(cloud: &PointCloud, trunks: &[TrunkPoint], params: &ModelParams) -> Result<PathModel> {
    let partition = remove_ground(cloud, params.ground)?;
    build_path_model_with(cloud, partition, trunks, params)
}

/// As [`build_path_model`] with a precomputed ground partition.
pub fn build_path_model_with(
    cloud: &PointCloud,
    partition: GroundPartition,
    trunks: &[TrunkPoint],
    params: &ModelParams,
) -> Result<PathModel> {
    if trunks.is_empty() {
        return Err(Error::InvalidInput("at least one trunk is required".into()));
    }
    let mut trunks = trunks.to_vec();
    trunks.sort_by_key(|t| t.tree_id);
    if let Some(t) = trunks.iter().find(|t| t.tree_id == GROUND_ID || t.tree_id == UNKNOWN_ID) {
        return Err(Error::InvalidInput(format!("trunk id {} is reserved", t.tree_id)));
    }
    if trunks.windows(2).any(|w| w[0].tree_id == w[1].tree_id) {
        return Err(Error::InvalidInput("trunk ids must be unique".into()));
    }
    if partition.nonground_ids.is_empty() {
        return Err(Error::InvalidInput("cloud has no points above the ground".into()));
    }
    let grid = voxelize(cloud, &partition.nonground_ids, params.voxel_size)?;
    let graph = build_graph(cloud, &grid, &params.graph)?;
    let anchors = graph.anchor_trunks(&trunks, params.anchor_radius)?;
    let aggregate = aggregate_paths(&graph, &anchors, Targets::All)?;
    Ok(PathModel {
        partition,
        grid,
        graph,
        trunks,
        anchors,
        aggregate,
    })
}

/// Index of the nearest trunk; equal distances go to the smaller tree id.
fn nearest_trunk(trunks: &[TrunkPoint], p: &nalgebra::Point3<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, t) in trunks.iter().enumerate() {
        let d = (t.position - p).norm_squared();
        if d < best_d || (d == best_d && t.tree_id < trunks[best].tree_id) {
            best = i;
            best_d = d;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Per-point tree id: 0 ground, -1 unknown, otherwise a trunk id.
    pub labels: Vec<i32>,
    /// Canopy nodes no trunk could reach.
    pub unreachable_nodes: usize,
}

/// Labels each node with the trunk of its cheapest path. Unreached nodes
/// take the straight-line nearest trunk when `fallback` is set.
pub fn segment_trees(cloud: &PointCloud, model: &PathModel, fallback: bool) -> Result<Segmentation> {
    let agg = &model.aggregate;
    let node_labels: Vec<Option<i32>> = (0..model.grid.len())
        .map(|n| match agg.best_source[n] {
            Some(s) => Some(model.trunks[s as usize].tree_id),
            None if fallback => Some(model.trunks[nearest_trunk(&model.trunks, &model.grid.position(n))].tree_id),
            None => None,
        })
        .collect();
    let unreachable_nodes = agg.best_source.iter().filter(|s| s.is_none()).count();
    if unreachable_nodes > 0 {
        log::info!("{unreachable_nodes} canopy nodes unreachable from any trunk");
    }
    let per_point = propagate_to_points(&model.grid, &node_labels)?;
    let labels = (0..cloud.len())
        .map(|i| {
            if model.partition.is_ground(i) {
                GROUND_ID
            } else {
                per_point[i].unwrap_or(UNKNOWN_ID)
            }
        })
        .collect();
    Ok(Segmentation {
        labels,
        unreachable_nodes,
    })
}

/// Nearest trunk by straight-line distance for every point; ground points
/// get 0 when a partition is given.
pub fn closest_trunk_baseline(
    cloud: &PointCloud,
    trunks: &[TrunkPoint],
    ground: Option<&GroundPartition>,
) -> Result<Vec<i32>> {
    if trunks.is_empty() {
        return Err(Error::InvalidInput("at least one trunk is required".into()));
    }
    Ok(cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if ground.is_some_and(|g| g.is_ground(i)) {
                GROUND_ID
            } else {
                trunks[nearest_trunk(trunks, &p.position())].tree_id
            }
        })
        .collect())
}
