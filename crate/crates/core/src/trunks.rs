//! Prior-free trunk detection on a coarse voxel graph.
//!
//! Ground nodes are scored by the cheapest path cost from any of a spread
//! of canopy source nodes. Paths from the canopy reach the ground through
//! the trunks, so trunk bases show up as local minima of that score.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::graph::{aggregate_paths, GraphParams, Targets, TreeGraph, TrunkPoint, Weighting};
use crate::preprocess::{remove_ground, voxelize, GroundParams, GroundPartition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrunkDetectionConfig {
    /// Coarse voxel size (m).
    pub voxel_size: f64,
    /// Edge radius of the coarse graph, in voxels.
    pub edge_radius_factor: f64,
    /// Minimum spacing between search sources (m).
    pub source_spacing: f64,
    /// Sources must be at least this far above the local ground (m).
    pub min_source_height: f64,
    /// Lateral radius within which a trunk must be a score minimum (m).
    pub minimum_radius: f64,
    /// Minima closer than this are merged (m).
    pub merge_distance: f64,
}

impl Default for TrunkDetectionConfig {
    fn default() -> Self {
        TrunkDetectionConfig {
            voxel_size: 0.4,
            edge_radius_factor: 1.5,
            source_spacing: 2.0,
            min_source_height: 1.0,
            minimum_radius: 1.0,
            merge_distance: 1.0,
        }
    }
}

impl TrunkDetectionConfig {
    fn validate(&self) -> Result<()> {
        let all = [
            self.voxel_size,
            self.edge_radius_factor,
            self.source_spacing,
            self.minimum_radius,
            self.merge_distance,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) && self.min_source_height.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid trunk detection config: {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrunkDetection {
    pub trunks: Vec<TrunkPoint>,
    pub sources: usize,
    pub ground_nodes: usize,
    /// Score of each emitted trunk, in output order.
    pub scores: Vec<f64>,
}

pub fn detect_trunks(cloud: &PointCloud, ground: GroundParams, cfg: &TrunkDetectionConfig) -> Result<TrunkDetection> {
    let partition = remove_ground(cloud, ground)?;
    detect_trunks_with(cloud, &partition, cfg)
}

/// Detection with an existing ground partition.
pub fn detect_trunks_with(
    cloud: &PointCloud,
    partition: &GroundPartition,
    cfg: &TrunkDetectionConfig,
) -> Result<TrunkDetection> {
    cfg.validate()?;
    let empty = TrunkDetection {
        trunks: Vec::new(),
        sources: 0,
        ground_nodes: 0,
        scores: Vec::new(),
    };
    if cloud.is_empty() {
        return Ok(empty);
    }
    let ids: Vec<usize> = (0..cloud.len()).collect();
    let grid = voxelize(cloud, &ids, cfg.voxel_size)?;
    let params = GraphParams {
        edge_radius: cfg.edge_radius_factor * cfg.voxel_size,
        weighting: Weighting::None,
        ..GraphParams::default()
    };
    let graph = crate::graph::build_graph(cloud, &grid, &params)?;

    let is_ground: Vec<bool> = (0..grid.len())
        .map(|c| grid.members(c).iter().any(|&p| partition.is_ground(p)))
        .collect();
    let ground_nodes: Vec<usize> = (0..grid.len()).filter(|&c| is_ground[c]).collect();
    if ground_nodes.is_empty() {
        log::warn!("trunk detection: no ground nodes");
        return Ok(empty);
    }

    let sources = pick_sources(&graph, &is_ground, partition, cfg);
    if sources.is_empty() {
        log::warn!("trunk detection: no canopy nodes above {} m", cfg.min_source_height);
        return Ok(TrunkDetection {
            ground_nodes: ground_nodes.len(),
            ..empty
        });
    }
    let agg = aggregate_paths(&graph, &sources, Targets::Mask(&is_ground))?;
    let score = |n: usize| agg.min_cost[n];
    let reached: Vec<usize> = ground_nodes.iter().copied().filter(|&n| score(n).is_finite()).collect();
    if reached.is_empty() {
        log::warn!("trunk detection: no ground node is reachable from any source");
        return Ok(TrunkDetection {
            sources: sources.len(),
            ground_nodes: ground_nodes.len(),
            ..empty
        });
    }

    let lateral = |a: usize, b: usize| (graph.position(a).xy() - graph.position(b).xy()).norm();
    let before = |a: usize, b: usize| score(a) < score(b) || (score(a) == score(b) && a < b);
    let minima: Vec<usize> = reached
        .iter()
        .copied()
        .filter(|&g| {
            reached
                .iter()
                .all(|&o| o == g || lateral(g, o) > cfg.minimum_radius || before(g, o))
        })
        .collect();

    // Keep the lowest-scoring representative of each close group.
    let mut by_score = minima;
    by_score.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for g in by_score {
        let p = graph.position(g);
        if kept.iter().all(|&k| (graph.position(k) - p).norm() > cfg.merge_distance) {
            kept.push(g);
        }
    }
    kept.sort_unstable();
    Ok(TrunkDetection {
        scores: kept.iter().map(|&g| score(g)).collect(),
        trunks: kept
            .iter()
            .enumerate()
            .map(|(i, &g)| TrunkPoint {
                position: graph.position(g),
                tree_id: i as i32 + 1,
            })
            .collect(),
        sources: sources.len(),
        ground_nodes: ground_nodes.len(),
    })
}

/// Greedy, id-ordered selection of canopy nodes at least `source_spacing`
/// apart.
fn pick_sources(
    graph: &TreeGraph,
    is_ground: &[bool],
    partition: &GroundPartition,
    cfg: &TrunkDetectionConfig,
) -> Vec<usize> {
    let mut picked: Vec<Point3<f64>> = Vec::new();
    let mut out = Vec::new();
    let spacing2 = cfg.source_spacing * cfg.source_spacing;
    let index_cell = cfg.source_spacing;
    let mut occupied: rustc_hash::FxHashMap<[i64; 3], Vec<usize>> = Default::default();
    for n in 0..graph.len() {
        if is_ground[n] {
            continue;
        }
        let p = graph.position(n);
        let Some(h) = partition.ground_height(p.x, p.y) else {
            continue;
        };
        if p.z - h < cfg.min_source_height {
            continue;
        }
        let key = crate::index::cell_key(&p, index_cell);
        let mut clear = true;
        'scan: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = occupied.get(&[key[0] + dx, key[1] + dy, key[2] + dz]) {
                        if list.iter().any(|&i| (picked[i] - p).norm_squared() < spacing2) {
                            clear = false;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if clear {
            occupied.entry(key).or_default().push(picked.len());
            picked.push(p);
            out.push(n);
        }
    }
    out
}
