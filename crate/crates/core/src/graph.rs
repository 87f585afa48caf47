//! Radius graph over voxel nodes and aggregated shortest-path search.
//!
//! Ties between equal-cost paths are resolved canonically: the predecessor
//! of a node is the smallest-id neighbour `u` with `dist(u) < dist(v)` and
//! `dist(u) + cost(u, v) == dist(v)`. Equivalently, among all optimal paths
//! the one whose node sequence read from the target back to the source is
//! lexicographically smallest is chosen. Both the single-pair A* query and
//! the single-source aggregation use this rule, so they agree exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::enrich::{compute_features, cosine_similarity, density_weight, FeatureMask, FeatureVector, Normalizer};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::preprocess::VoxelGrid;

/// Heuristic deflation keeping A* consistent under rounding.
const HEURISTIC_SCALE: f64 = 1.0 - 1e-9;
/// Sources merged per batch in [`aggregate_paths`].
const SOURCE_BATCH: usize = 16;

/// Ground-level position anchoring one tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrunkPoint {
    pub position: Point3<f64>,
    pub tree_id: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    None,
    Density,
    Cosine,
}

impl std::str::FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Weighting::None),
            "density" => Ok(Weighting::Density),
            "cosine" => Ok(Weighting::Cosine),
            other => Err(Error::Config(format!("unknown weighting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    /// Nodes closer than this are connected (m).
    pub edge_radius: f64,
    pub weighting: Weighting,
    /// Support radius for enrichment features (m).
    pub neighborhood_radius: f64,
    pub feature_mask: FeatureMask,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            edge_radius: 0.15,
            weighting: Weighting::None,
            neighborhood_radius: 0.3,
            feature_mask: FeatureMask::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub edges: usize,
    /// Cosine-weighted edges where one endpoint normalized to a zero vector.
    pub zero_norm_edges: usize,
}

/// Immutable weighted graph in compressed adjacency form. Neighbour lists
/// are sorted by node id and symmetric.
#[derive(Debug, Clone)]
pub struct TreeGraph {
    positions: Vec<Point3<f64>>,
    features: Option<Vec<FeatureVector>>,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    costs: Vec<f64>,
    edge_radius: f64,
    stats: BuildStats,
}

/// Connects every pair of grid nodes within `edge_radius`. Edge cost is the
/// Euclidean length scaled by `1 + weight`.
pub fn build_graph(cloud: &PointCloud, grid: &VoxelGrid, params: &GraphParams) -> Result<TreeGraph> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("cannot build a graph from an empty grid".into()));
    }
    if !(params.edge_radius > 0.0) {
        return Err(Error::InvalidInput(format!(
            "edge radius must be positive, got {}",
            params.edge_radius
        )));
    }
    if params.edge_radius < grid.cell_size() {
        log::warn!(
            "edge radius {} is below the voxel size {}; the graph will be sparse",
            params.edge_radius,
            grid.cell_size()
        );
    }
    let features = match params.weighting {
        Weighting::None => None,
        _ => Some(compute_features(cloud, grid, params.neighborhood_radius)?),
    };
    TreeGraph::connect(grid.positions().to_vec(), features, params)
}

impl TreeGraph {
    fn connect(
        positions: Vec<Point3<f64>>,
        features: Option<Vec<FeatureVector>>,
        params: &GraphParams,
    ) -> Result<TreeGraph> {
        let r = params.edge_radius;
        let index = SpatialIndex::new(positions.clone(), r);
        let normalized: Option<Vec<_>> = match (params.weighting, &features) {
            (Weighting::Cosine, Some(f)) => {
                let norm = Normalizer::fit(f, params.feature_mask);
                Some(f.par_iter().map(|v| norm.normalize(v)).collect())
            }
            _ => None,
        };
        let m_max = features
            .as_ref()
            .map(|f| f.iter().map(|v| v.point_count).max().unwrap_or(0))
            .unwrap_or(0);

        let rows: Vec<(Vec<u32>, Vec<f64>, usize)> = (0..positions.len())
            .into_par_iter()
            .map(|a| -> Result<_> {
                let mut ids = Vec::new();
                let mut costs = Vec::new();
                let mut zero_norm = 0;
                for b in index.radius_neighbors(&positions[a], r) {
                    if b == a {
                        continue;
                    }
                    let len = (positions[a] - positions[b]).norm();
                    let w = match params.weighting {
                        Weighting::None => 0.0,
                        Weighting::Density => {
                            let f = features.as_ref().expect("features computed");
                            density_weight(&f[a], &f[b], m_max)?
                        }
                        Weighting::Cosine => {
                            let n = normalized.as_ref().expect("features normalized");
                            match cosine_similarity(&n[a], &n[b]) {
                                Some(s) => (1.0 - s).max(0.0),
                                None => {
                                    zero_norm += 1;
                                    1.0
                                }
                            }
                        }
                    };
                    ids.push(b as u32);
                    costs.push(len * (1.0 + w));
                }
                Ok((ids, costs, zero_norm))
            })
            .collect::<Result<_>>()?;

        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let total: usize = rows.iter().map(|r| r.0.len()).sum();
        let mut neighbors = Vec::with_capacity(total);
        let mut costs = Vec::with_capacity(total);
        let mut zero_norm_edges = 0;
        for (ids, c, z) in rows {
            neighbors.extend(ids);
            costs.extend(c);
            zero_norm_edges += z;
            offsets.push(neighbors.len());
        }
        if zero_norm_edges > 0 {
            log::warn!("{} edge endpoints had zero-norm feature vectors; used neutral weight", zero_norm_edges);
        }
        Ok(TreeGraph {
            positions,
            features,
            offsets,
            neighbors,
            costs,
            edge_radius: r,
            stats: BuildStats {
                edges: total / 2,
                zero_norm_edges: zero_norm_edges / 2,
            },
        })
    }

    /// Builds a graph from explicit undirected edges. Each cost must be
    /// positive and at least the Euclidean distance between its endpoints.
    pub fn from_edges(positions: Vec<Point3<f64>>, edges: &[(usize, usize, f64)]) -> Result<TreeGraph> {
        let n = positions.len();
        let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        let mut max_len: f64 = 0.0;
        for &(a, b, c) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidInput(format!("bad edge ({a}, {b})")));
            }
            let len = (positions[a] - positions[b]).norm();
            if !(c > 0.0) || !c.is_finite() || c < len * (1.0 - 1e-12) {
                return Err(Error::InvalidInput(format!(
                    "edge ({a}, {b}) cost {c} is not >= its length {len}"
                )));
            }
            max_len = max_len.max(len);
            adj[a].push((b as u32, c));
            adj[b].push((a as u32, c));
        }
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        let mut costs = Vec::new();
        for (a, mut row) in adj.into_iter().enumerate() {
            row.sort_by_key(|e| e.0);
            if row.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidInput(format!("duplicate edge at node {a}")));
            }
            for (b, c) in row {
                neighbors.push(b);
                costs.push(c);
            }
            offsets.push(neighbors.len());
        }
        Ok(TreeGraph {
            positions,
            features: None,
            offsets,
            edge_radius: max_len,
            stats: BuildStats {
                edges: neighbors.len() / 2,
                zero_norm_edges: 0,
            },
            neighbors,
            costs,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn edge_radius(&self) -> f64 {
        self.edge_radius
    }

    pub fn stats(&self) -> BuildStats {
        self.stats
    }

    pub fn position(&self, node: usize) -> Point3<f64> {
        self.positions[node]
    }

    pub fn positions(&self) -> &[Point3<f64>] {
        &self.positions
    }

    pub fn features(&self) -> Option<&[FeatureVector]> {
        self.features.as_deref()
    }

    /// `(neighbour, cost)` pairs, ascending neighbour id.
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[node]..self.offsets[node + 1];
        self.neighbors[r.clone()]
            .iter()
            .zip(&self.costs[r])
            .map(|(&b, &c)| (b as usize, c))
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    fn canonical_pred(&self, v: usize, dist: &[f64], usable: impl Fn(usize) -> bool) -> Option<usize> {
        self.neighbors(v)
            .find(|&(u, c)| usable(u) && dist[u] < dist[v] && dist[u] + c == dist[v])
            .map(|(u, _)| u)
    }

    /// Nearest node to each trunk within `radius`; fails naming the first
    /// trunk with no node in range.
    pub fn anchor_trunks(&self, trunks: &[TrunkPoint], radius: f64) -> Result<Vec<usize>> {
        let index = SpatialIndex::new(self.positions.clone(), radius.max(1e-3));
        trunks
            .iter()
            .map(|t| {
                index
                    .nearest_within(&t.position, radius)
                    .map(|(id, _)| id)
                    .ok_or(Error::UnanchoredTrunk {
                        tree_id: t.tree_id,
                        x: t.position.x,
                        y: t.position.y,
                        z: t.position.z,
                        radius,
                    })
            })
            .collect()
    }

    /// Writes `a,b,cost` for every undirected edge with `a < b`.
    pub fn write_edges(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "a,b,cost").map_err(io)?;
        for a in 0..self.len() {
            for (b, c) in self.neighbors(a).filter(|&(b, _)| b > a) {
                writeln!(w, "{a},{b},{c}").map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    key: f64,
    g: f64,
    node: u32,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed for a min-heap on (key, node).
        other
            .key
            .total_cmp(&self.key)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path tree from one source under the canonical tie-break.
#[derive(Debug, Clone)]
pub struct SearchTree {
    pub source: usize,
    /// Path cost from the source; `INFINITY` when unreachable.
    pub dist: Vec<f64>,
    /// Canonical predecessor; `None` for the source and unreachable nodes.
    pub pred: Vec<Option<usize>>,
    /// Reachable nodes in nondecreasing `dist` order (source first).
    pub order: Vec<usize>,
}

impl SearchTree {
    pub fn path_to(&self, target: usize) -> Option<Vec<usize>> {
        if !self.dist[target].is_finite() {
            return None;
        }
        let mut path = vec![target];
        let mut v = target;
        while let Some(u) = self.pred[v] {
            path.push(u);
            v = u;
        }
        path.reverse();
        Some(path)
    }
}

/// Uniform-cost expansion from `source` to every reachable node.
pub fn single_source(graph: &TreeGraph, source: usize) -> SearchTree {
    let n = graph.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut order = Vec::new();
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry {
        key: 0.0,
        g: 0.0,
        node: source as u32,
    });
    while let Some(HeapEntry { g, node, .. }) = heap.pop() {
        let u = node as usize;
        if done[u] || g != dist[u] {
            continue;
        }
        done[u] = true;
        order.push(u);
        for (v, c) in graph.neighbors(u) {
            let nd = g + c;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapEntry {
                    key: nd,
                    g: nd,
                    node: v as u32,
                });
            }
        }
    }
    let mut pred = vec![None; n];
    for &v in &order[1.min(order.len())..] {
        pred[v] = graph.canonical_pred(v, &dist, |_| true);
        debug_assert!(pred[v].is_some(), "reached node {v} has no predecessor");
    }
    SearchTree {
        source,
        dist,
        pred,
        order,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphPath {
    pub nodes: Vec<usize>,
    pub cost: f64,
}

/// A* query with the Euclidean heuristic. Returns `None` when `target` is
/// unreachable.
pub fn shortest_path(graph: &TreeGraph, source: usize, target: usize) -> Option<GraphPath> {
    let n = graph.len();
    assert!(source < n && target < n, "node id out of range");
    if source == target {
        return Some(GraphPath {
            nodes: vec![source],
            cost: 0.0,
        });
    }
    let goal = graph.position(target);
    let h = |v: usize| (graph.position(v) - goal).norm() * HEURISTIC_SCALE;
    let mut g = vec![f64::INFINITY; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    g[source] = 0.0;
    heap.push(HeapEntry {
        key: h(source),
        g: 0.0,
        node: source as u32,
    });
    let mut best = f64::INFINITY;
    while let Some(HeapEntry { key, g: gu, node }) = heap.pop() {
        let u = node as usize;
        if closed[u] || gu != g[u] {
            continue;
        }
        // Settle everything with f <= C* so every optimal predecessor of
        // the target path has an exact distance.
        if key > best {
            break;
        }
        closed[u] = true;
        if u == target {
            best = g[u];
            continue;
        }
        for (v, c) in graph.neighbors(u) {
            let nd = gu + c;
            if nd < g[v] {
                g[v] = nd;
                closed[v] = false;
                heap.push(HeapEntry {
                    key: nd + h(v),
                    g: nd,
                    node: v as u32,
                });
            }
        }
    }
    if !best.is_finite() {
        return None;
    }
    let mut nodes = vec![target];
    let mut v = target;
    while v != source {
        v = graph
            .canonical_pred(v, &g, |u| closed[u])
            .expect("optimal predecessor settled before the target");
        nodes.push(v);
    }
    nodes.reverse();
    Some(GraphPath { nodes, cost: best })
}

/// Which nodes terminate counted paths.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    All,
    Mask(&'a [bool]),
}

impl Targets<'_> {
    fn contains(&self, v: usize) -> bool {
        match self {
            Targets::All => true,
            Targets::Mask(m) => m[v],
        }
    }
}

/// Per-node statistics over the shortest-path trees of several sources.
#[derive(Debug, Clone, PartialEq)]
pub struct PathAggregate {
    /// Cheapest path cost from any source; `INFINITY` if unreachable.
    pub min_cost: Vec<f64>,
    /// Index into the source list achieving `min_cost` (smaller index on ties).
    pub best_source: Vec<Option<u32>>,
    /// Target-terminated paths through the node, summed over sources.
    pub count_sum: Vec<u64>,
    /// Largest per-source path count at the node.
    pub count_max: Vec<u32>,
    /// Maximum of `count_max` over the graph.
    pub max_count: u32,
}

impl PathAggregate {
    pub fn is_reached(&self, node: usize) -> bool {
        self.best_source[node].is_some()
    }
}

/// Number of targets whose canonical path passes through each node
/// (the node's own path included).
pub fn subtree_counts(tree: &SearchTree, targets: Targets) -> Vec<u32> {
    let mut counts = vec![0u32; tree.dist.len()];
    for &v in tree.order.iter().rev() {
        if targets.contains(v) {
            counts[v] += 1;
        }
        if let Some(u) = tree.pred[v] {
            counts[u] += counts[v];
        }
    }
    counts
}

/// Runs one search per source and merges them: minimum cost with smallest
/// source index on ties, summed and maximum path counts.
pub fn aggregate_paths(graph: &TreeGraph, sources: &[usize], targets: Targets) -> Result<PathAggregate> {
    if sources.is_empty() {
        return Err(Error::InvalidInput("aggregation needs at least one source".into()));
    }
    if let Some(&s) = sources.iter().find(|&&s| s >= graph.len()) {
        return Err(Error::InvalidInput(format!("source node {s} out of range")));
    }
    if let Targets::Mask(m) = targets {
        if m.len() != graph.len() {
            return Err(Error::InvalidInput("target mask length differs from graph size".into()));
        }
    }
    let n = graph.len();
    let mut agg = PathAggregate {
        min_cost: vec![f64::INFINITY; n],
        best_source: vec![None; n],
        count_sum: vec![0; n],
        count_max: vec![0; n],
        max_count: 0,
    };
    for (batch_no, batch) in sources.chunks(SOURCE_BATCH).enumerate() {
        let results: Vec<(Vec<f64>, Vec<u32>)> = batch
            .par_iter()
            .map(|&s| {
                let tree = single_source(graph, s);
                let counts = subtree_counts(&tree, targets);
                (tree.dist, counts)
            })
            .collect();
        for (k, (dist, counts)) in results.into_iter().enumerate() {
            let idx = (batch_no * SOURCE_BATCH + k) as u32;
            for v in 0..n {
                if dist[v] < agg.min_cost[v] {
                    agg.min_cost[v] = dist[v];
                    agg.best_source[v] = Some(idx);
                }
                agg.count_sum[v] += counts[v] as u64;
                agg.count_max[v] = agg.count_max[v].max(counts[v]);
            }
        }
    }
    agg.max_count = agg.count_max.iter().copied().max().unwrap_or(0);
    Ok(agg)
}
