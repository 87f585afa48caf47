//! Ground extraction and voxelization.
//!
//! A point is ground when it lies within `tolerance` of the lowest point in
//! the vertical cylinder of radius `radius` around it. Non-ground points are
//! grouped into cubic voxels whose member means become graph nodes.

use nalgebra::Point3;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::cloud::{Aabb, PointCloud};
use crate::error::{Error, Result};
use crate::index::{cell_key, CellKey};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundParams {
    /// Lateral search radius for the local minimum (m).
    pub radius: f64,
    /// Height above the local minimum still counted as ground (m).
    pub tolerance: f64,
}

impl Default for GroundParams {
    fn default() -> Self {
        GroundParams {
            radius: 1.0,
            tolerance: 0.15,
        }
    }
}

/// 2D grid over XY with each cell's points sorted by ascending z, so
/// "is there a point lower than h within lateral radius r" stops early.
#[derive(Debug, Clone)]
struct LateralIndex {
    cell: f64,
    xy: Vec<[f64; 2]>,
    z: Vec<f64>,
    cells: FxHashMap<[i64; 2], (u32, u32)>,
}

impl LateralIndex {
    fn new(cloud: &PointCloud, cell: f64) -> Self {
        let key = |x: f64, y: f64| [(x / cell).floor() as i64, (y / cell).floor() as i64];
        let mut keyed: Vec<([i64; 2], f64, u32)> = cloud
            .points()
            .par_iter()
            .enumerate()
            .map(|(i, p)| (key(p.x, p.y), p.z, i as u32))
            .collect();
        keyed.par_sort_unstable_by(|a, b| {
            a.0.cmp(&b.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let pts = cloud.points();
        let xy = keyed
            .iter()
            .map(|&(_, _, i)| [pts[i as usize].x, pts[i as usize].y])
            .collect();
        let z = keyed.iter().map(|&(_, z, _)| z).collect();
        let mut cells = FxHashMap::default();
        let mut start = 0;
        while start < keyed.len() {
            let mut end = start + 1;
            while end < keyed.len() && keyed[end].0 == keyed[start].0 {
                end += 1;
            }
            cells.insert(keyed[start].0, (start as u32, end as u32));
            start = end;
        }
        LateralIndex { cell, xy, z, cells }
    }

    /// Visits candidate cells around (x, y); `inside` is true when the whole
    /// cell is certainly within the lateral radius.
    fn for_cells(&self, x: f64, y: f64, r: f64, mut f: impl FnMut(u32, u32, bool) -> bool) {
        let c = self.cell;
        let (i0, i1) = (((x - r) / c).floor() as i64, ((x + r) / c).floor() as i64);
        let (j0, j1) = (((y - r) / c).floor() as i64, ((y + r) / c).floor() as i64);
        let safe_r2 = (r * (1.0 - 1e-9)).powi(2);
        for i in i0..=i1 {
            for j in j0..=j1 {
                let Some(&(s, e)) = self.cells.get(&[i, j]) else {
                    continue;
                };
                let dx = (x - i as f64 * c).abs().max((x - (i + 1) as f64 * c).abs());
                let dy = (y - j as f64 * c).abs().max((y - (j + 1) as f64 * c).abs());
                if !f(s, e, dx * dx + dy * dy <= safe_r2) {
                    return;
                }
            }
        }
    }

    #[inline]
    fn lateral_d2(&self, k: usize, x: f64, y: f64) -> f64 {
        let [qx, qy] = self.xy[k];
        (qx - x) * (qx - x) + (qy - y) * (qy - y)
    }

    /// True if some point within lateral `r` of (x, y) has `h - z > tol`.
    fn has_lower(&self, x: f64, y: f64, h: f64, r: f64, tol: f64) -> bool {
        let r2 = r * r;
        let mut found = false;
        self.for_cells(x, y, r, |s, e, inside| {
            let (s, e) = (s as usize, e as usize);
            if !(h - self.z[s] > tol) {
                return true;
            }
            if inside {
                found = true;
                return false;
            }
            for k in s..e {
                if !(h - self.z[k] > tol) {
                    break;
                }
                if self.lateral_d2(k, x, y) <= r2 {
                    found = true;
                    return false;
                }
            }
            true
        });
        found
    }

    fn min_z(&self, x: f64, y: f64, r: f64) -> Option<f64> {
        let r2 = r * r;
        let mut best = f64::INFINITY;
        self.for_cells(x, y, r, |s, e, inside| {
            let (s, e) = (s as usize, e as usize);
            if self.z[s] >= best {
                return true;
            }
            if inside {
                best = self.z[s];
                return true;
            }
            for k in s..e {
                if self.z[k] >= best {
                    break;
                }
                if self.lateral_d2(k, x, y) <= r2 {
                    best = self.z[k];
                    break;
                }
            }
            true
        });
        best.is_finite().then_some(best)
    }
}

/// Split of a cloud into terrain and canopy points.
#[derive(Debug, Clone)]
pub struct GroundPartition {
    pub params: GroundParams,
    pub ground_ids: Vec<usize>,
    pub nonground_ids: Vec<usize>,
    is_ground: Vec<bool>,
    index: LateralIndex,
}

impl GroundPartition {
    pub fn is_ground(&self, id: usize) -> bool {
        self.is_ground[id]
    }

    pub fn ground_mask(&self) -> &[bool] {
        &self.is_ground
    }

    /// Lowest z of any cloud point within the lateral radius of (x, y).
    pub fn ground_height(&self, x: f64, y: f64) -> Option<f64> {
        self.index.min_z(x, y, self.params.radius)
    }
}

/// Marks point `p` as ground iff `p.z − min{q.z : |q − p|_xy ≤ R} ≤ tolerance`.
pub fn remove_ground(cloud: &PointCloud, params: GroundParams) -> Result<GroundPartition> {
    if !(params.radius > 0.0) || !(params.tolerance >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "ground radius must be > 0 and tolerance >= 0 (got {}, {})",
            params.radius, params.tolerance
        )));
    }
    let index = LateralIndex::new(cloud, params.radius / 4.0);
    let is_ground: Vec<bool> = cloud
        .points()
        .par_iter()
        .map(|p| !index.has_lower(p.x, p.y, p.z, params.radius, params.tolerance))
        .collect();
    let (ground_ids, nonground_ids) = (0..cloud.len()).partition(|&i| is_ground[i]);
    Ok(GroundPartition {
        params,
        ground_ids,
        nonground_ids,
        is_ground,
        index,
    })
}

/// Cubic-cell partition of a subset of a cloud. Cells are stored in
/// lexicographic (i, j, k) order and each cell's index doubles as its graph
/// node id.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    cell_size: f64,
    cloud_len: usize,
    keys: Vec<CellKey>,
    offsets: Vec<usize>,
    members: Vec<usize>,
    positions: Vec<Point3<f64>>,
    lookup: FxHashMap<CellKey, usize>,
}

impl VoxelGrid {
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Number of points in the cloud the grid was built from.
    pub fn cloud_len(&self) -> usize {
        self.cloud_len
    }

    pub fn keys(&self) -> &[CellKey] {
        &self.keys
    }

    pub fn key(&self, cell: usize) -> CellKey {
        self.keys[cell]
    }

    /// Member point ids of a cell, ascending.
    pub fn members(&self, cell: usize) -> &[usize] {
        &self.members[self.offsets[cell]..self.offsets[cell + 1]]
    }

    pub fn position(&self, cell: usize) -> Point3<f64> {
        self.positions[cell]
    }

    pub fn positions(&self) -> &[Point3<f64>] {
        &self.positions
    }

    pub fn find(&self, key: CellKey) -> Option<usize> {
        self.lookup.get(&key).copied()
    }

    pub fn cell_box(&self, cell: usize) -> Aabb {
        let [i, j, k] = self.keys[cell];
        let s = self.cell_size;
        Aabb {
            min: Point3::new(i as f64 * s, j as f64 * s, k as f64 * s),
            max: Point3::new((i + 1) as f64 * s, (j + 1) as f64 * s, (k + 1) as f64 * s),
        }
    }

    /// Cell index of every member point; `None` for points outside the grid.
    pub fn point_cells(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.cloud_len];
        for cell in 0..self.len() {
            for &id in self.members(cell) {
                out[id] = Some(cell);
            }
        }
        out
    }
}

/// Groups `ids` into cells `⌊p / cell_size⌋` and places one node at each
/// cell's member mean.
pub fn voxelize(cloud: &PointCloud, ids: &[usize], cell_size: f64) -> Result<VoxelGrid> {
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(Error::InvalidInput(format!(
            "voxel size must be positive, got {cell_size}"
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cloud.len()) {
        return Err(Error::InvalidInput(format!("point id {bad} out of range")));
    }
    let mut keyed: Vec<(CellKey, usize)> = ids
        .par_iter()
        .map(|&i| (cell_key(&cloud.position(i), cell_size), i))
        .collect();
    keyed.par_sort_unstable();
    keyed.dedup();

    let mut keys = Vec::new();
    let mut offsets = vec![0];
    for (n, &(key, _)) in keyed.iter().enumerate() {
        if keys.last() != Some(&key) {
            if n > 0 {
                offsets.push(n);
            }
            keys.push(key);
        }
    }
    offsets.push(keyed.len());
    let members: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();

    let positions = (0..keys.len())
        .into_par_iter()
        .map(|c| {
            let m = &members[offsets[c]..offsets[c + 1]];
            let sum = m
                .iter()
                .fold(nalgebra::Vector3::zeros(), |acc, &i| acc + cloud.position(i).coords);
            Point3::from(sum / m.len() as f64)
        })
        .collect();
    let lookup = keys.iter().enumerate().map(|(c, k)| (*k, c)).collect();
    Ok(VoxelGrid {
        cell_size,
        cloud_len: cloud.len(),
        keys,
        offsets,
        members,
        positions,
        lookup,
    })
}

/// Copies each cell's label to its member points. Points outside the grid
/// and members of unlabeled cells get `None`.
pub fn propagate_to_points<T: Copy + Send + Sync>(
    grid: &VoxelGrid,
    node_labels: &[Option<T>],
) -> Result<Vec<Option<T>>> {
    if node_labels.len() != grid.len() {
        return Err(Error::InvalidInput(format!(
            "{} node labels for a grid of {} cells",
            node_labels.len(),
            grid.len()
        )));
    }
    let mut out = vec![None; grid.cloud_len];
    for (cell, label) in node_labels.iter().enumerate() {
        if label.is_some() {
            for &id in grid.members(cell) {
                out[id] = *label;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointRecord;
    use proptest::prelude::*;

    fn cloud(pts: &[(f64, f64, f64)]) -> PointCloud {
        PointCloud::new(pts.iter().map(|&(x, y, z)| PointRecord::new(x, y, z)).collect()).unwrap()
    }

    fn brute_ground(c: &PointCloud, r: f64, tol: f64) -> Vec<bool> {
        let pts = c.points();
        pts.iter()
            .map(|p| {
                let min = pts
                    .iter()
                    .filter(|q| (q.x - p.x).powi(2) + (q.y - p.y).powi(2) <= r * r)
                    .map(|q| q.z)
                    .fold(f64::INFINITY, f64::min);
                !(p.z - min > tol)
            })
            .collect()
    }

    #[test]
    fn plane_with_apex() {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                pts.push((i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        pts.push((1.0, 1.0, 2.0));
        let c = cloud(&pts);
        let g = remove_ground(&c, GroundParams::default()).unwrap();
        assert_eq!(g.nonground_ids, vec![400]);
        assert_eq!(g.ground_ids.len(), 400);
    }

    #[test]
    fn single_minimum_is_the_only_ground() {
        let c = cloud(&[(0.0, 0.0, 0.0), (0.2, 0.0, 2.0), (0.0, 0.3, 2.5), (-0.4, 0.1, 3.0)]);
        let g = remove_ground(&c, GroundParams::default()).unwrap();
        assert_eq!(g.ground_ids, vec![0]);
        assert_eq!(g.ground_height(0.1, 0.1), Some(0.0));
    }

    #[test]
    fn global_plane_marks_points_within_tolerance() {
        // Dense plane at z = 0 plus points at assorted heights above it.
        let mut pts = Vec::new();
        for i in -15..=15 {
            for j in -15..=15 {
                pts.push((i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        let heights = [0.05, 0.1, 0.149, 0.151, 0.2, 1.0];
        for (n, &h) in heights.iter().enumerate() {
            pts.push((0.13 * n as f64 - 0.3, 0.07 * n as f64, h));
        }
        let c = cloud(&pts);
        let g = remove_ground(&c, GroundParams::default()).unwrap();
        for (n, &h) in heights.iter().enumerate() {
            assert_eq!(g.is_ground(961 + n), h <= 0.15, "height {h}");
        }
    }

    #[test]
    fn rejects_bad_params() {
        let c = cloud(&[(0.0, 0.0, 0.0)]);
        assert!(remove_ground(&c, GroundParams { radius: 0.0, tolerance: 0.1 }).is_err());
        assert!(voxelize(&c, &[0], 0.0).is_err());
        assert!(voxelize(&c, &[3], 0.1).is_err());
    }

    #[test]
    fn one_cube_one_cell() {
        let pts: Vec<_> = (0..8)
            .map(|i| {
                (
                    0.01 + 0.08 * (i & 1) as f64,
                    0.01 + 0.08 * ((i >> 1) & 1) as f64,
                    0.01 + 0.08 * ((i >> 2) & 1) as f64,
                )
            })
            .collect();
        let c = cloud(&pts);
        let ids: Vec<_> = (0..8).collect();
        let g = voxelize(&c, &ids, 0.1).unwrap();
        assert_eq!(g.len(), 1);
        approx::assert_relative_eq!(g.position(0), Point3::new(0.05, 0.05, 0.05), epsilon = 1e-12);
    }

    #[test]
    fn boundary_split() {
        let c = cloud(&[(0.05, 0.0, 0.0), (0.15, 0.0, 0.0)]);
        let g = voxelize(&c, &[0, 1], 0.1).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.keys(), &[[0, 0, 0], [1, 0, 0]]);
    }

    #[test]
    fn propagation_examples() {
        let c = cloud(&[(0.05, 0.0, 0.0), (0.06, 0.0, 0.0), (0.5, 0.0, 0.0)]);
        let g = voxelize(&c, &[0, 1, 2], 0.1).unwrap();
        let labels = propagate_to_points(&g, &[Some(1), None]).unwrap();
        assert_eq!(labels, vec![Some(1), Some(1), None]);
        let none: Vec<Option<i32>> = propagate_to_points(&g, &[None, None]).unwrap();
        assert!(none.iter().all(Option::is_none));
        assert!(propagate_to_points(&g, &[Some(1)]).is_err());
    }

    fn arb_cloud(max: usize) -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
        prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -0.5f64..2.0), 1..max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn ground_matches_direct_formula(pts in arb_cloud(400), r in 0.2f64..2.0, tol in 0.0f64..0.5) {
            let c = cloud(&pts);
            let g = remove_ground(&c, GroundParams { radius: r, tolerance: tol }).unwrap();
            prop_assert_eq!(g.ground_mask(), &brute_ground(&c, r, tol)[..]);
            prop_assert_eq!(g.ground_ids.len() + g.nonground_ids.len(), c.len());
        }

        #[test]
        fn ground_is_order_and_translation_invariant(
            pts in arb_cloud(300),
            shift in (-50i32..50, -50i32..50),
        ) {
            let params = GroundParams::default();
            // Coordinates on a 1/1024 grid make the shifted sums exact.
            let q = |v: f64| (v * 1024.0).round() / 1024.0;
            let pts: Vec<_> = pts.iter().map(|&(x, y, z)| (q(x), q(y), z)).collect();
            let c = cloud(&pts);
            let base = remove_ground(&c, params).unwrap();

            let rev: Vec<_> = pts.iter().rev().copied().collect();
            let g_rev = remove_ground(&cloud(&rev), params).unwrap();
            let n = pts.len();
            for i in 0..n {
                prop_assert_eq!(base.is_ground(i), g_rev.is_ground(n - 1 - i));
            }

            let (dx, dy) = (shift.0 as f64 * 0.125, shift.1 as f64 * 0.125);
            let moved: Vec<_> = pts.iter().map(|&(x, y, z)| (x + dx, y + dy, z)).collect();
            let g_moved = remove_ground(&cloud(&moved), params).unwrap();
            prop_assert_eq!(base.ground_mask(), g_moved.ground_mask());
        }

        #[test]
        fn voxelization_partitions_ids(pts in arb_cloud(500), size in 0.05f64..1.0) {
            let c = cloud(&pts);
            let ids: Vec<usize> = (0..c.len()).filter(|i| i % 3 != 0).collect();
            let g = voxelize(&c, &ids, size).unwrap();
            let total: usize = (0..g.len()).map(|k| g.members(k).len()).sum();
            prop_assert_eq!(total, ids.len());
            let mut seen = vec![0u8; c.len()];
            for k in 0..g.len() {
                let b = g.cell_box(k);
                let pos = g.position(k);
                for i in 0..3 {
                    prop_assert!(pos[i] >= b.min[i] - 1e-9 && pos[i] <= b.max[i] + 1e-9);
                }
                for &id in g.members(k) {
                    seen[id] += 1;
                    prop_assert_eq!(cell_key(&c.position(id), size), g.key(k));
                }
            }
            for (i, &s) in seen.iter().enumerate() {
                prop_assert_eq!(s, if i % 3 != 0 { 1 } else { 0 });
            }
            prop_assert!(g.keys().windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn propagation_counts(pts in arb_cloud(300), seed in 0u64..1000) {
            let c = cloud(&pts);
            let ids: Vec<usize> = (0..c.len()).collect();
            let g = voxelize(&c, &ids, 0.5).unwrap();
            let labels: Vec<Option<u64>> = (0..g.len())
                .map(|k| ((k as u64 * 31 + seed) % 4).checked_sub(1))
                .collect();
            let per_point = propagate_to_points(&g, &labels).unwrap();
            for label in [None, Some(0), Some(1), Some(2)] {
                let expected: usize = (0..g.len())
                    .filter(|&k| labels[k] == label)
                    .map(|k| g.members(k).len())
                    .sum();
                prop_assert_eq!(per_point.iter().filter(|&&l| l == label).count(), expected);
            }
        }
    }
}
