//! Uniform-grid spatial index for exact Euclidean radius queries.

use nalgebra::Point3;
use rustc_hash::FxHashMap;

pub(crate) type CellKey = [i64; 3];

#[inline]
pub(crate) fn cell_key(p: &Point3<f64>, cell: f64) -> CellKey {
    [
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    ]
}

/// Immutable index over a fixed point set. Element ids are positions in the
/// slice the index was built from.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point3<f64>>,
    cell: f64,
    /// Element ids grouped by cell, ascending id within a cell.
    order: Vec<u32>,
    cells: FxHashMap<CellKey, (u32, u32)>,
}

impl SpatialIndex {
    /// `cell_size` should be on the order of the typical query radius.
    pub fn new(points: Vec<Point3<f64>>, cell_size: f64) -> Self {
        assert!(cell_size > 0.0 && cell_size.is_finite(), "cell size must be positive");
        assert!(points.len() < u32::MAX as usize, "too many points for index");
        let mut keyed: Vec<(CellKey, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (cell_key(p, cell_size), i as u32))
            .collect();
        keyed.sort_unstable();
        let mut cells = FxHashMap::default();
        let mut start = 0usize;
        while start < keyed.len() {
            let key = keyed[start].0;
            let mut end = start + 1;
            while end < keyed.len() && keyed[end].0 == key {
                end += 1;
            }
            cells.insert(key, (start as u32, end as u32));
            start = end;
        }
        let order = keyed.into_iter().map(|(_, i)| i).collect();
        SpatialIndex {
            points,
            cell: cell_size,
            order,
            cells,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    /// Calls `f(id, squared_distance)` for every element with
    /// `‖p − q‖² ≤ r²`, in unspecified order.
    pub fn for_each_within(&self, q: &Point3<f64>, r: f64, mut f: impl FnMut(usize, f64)) {
        let r2 = r * r;
        let lo = cell_key(&(q - nalgebra::Vector3::repeat(r)), self.cell);
        let hi = cell_key(&(q + nalgebra::Vector3::repeat(r)), self.cell);
        let span = (0..3).fold(1u128, |acc, i| acc * (hi[i] - lo[i] + 1) as u128);
        let mut visit = |start: u32, end: u32| {
            for &id in &self.order[start as usize..end as usize] {
                let d2 = (self.points[id as usize] - q).norm_squared();
                if d2 <= r2 {
                    f(id as usize, d2);
                }
            }
        };
        if span > self.cells.len() as u128 {
            for (key, &(s, e)) in &self.cells {
                if (0..3).all(|i| key[i] >= lo[i] && key[i] <= hi[i]) {
                    visit(s, e);
                }
            }
            return;
        }
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    if let Some(&(s, e)) = self.cells.get(&[i, j, k]) {
                        visit(s, e);
                    }
                }
            }
        }
    }

    /// Ids of all elements within distance `r` of `q`, ascending.
    pub fn radius_neighbors(&self, q: &Point3<f64>, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(q, r, |id, _| out.push(id));
        out.sort_unstable();
        out
    }

    /// Closest element within `r`; equal distances resolve to the smaller id.
    pub fn nearest_within(&self, q: &Point3<f64>, r: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.for_each_within(q, r, |id, d2| match best {
            Some((bid, bd2)) if bd2 < d2 || (bd2 == d2 && bid < id) => {}
            _ => best = Some((id, d2)),
        });
        best.map(|(id, d2)| (id, d2.sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn brute_force(points: &[Point3<f64>], q: &Point3<f64>, r: f64) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| (points[i] - q).norm_squared() <= r * r)
            .collect()
    }

    #[test]
    fn two_point_examples() {
        let idx = SpatialIndex::new(
            vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.1, 0.0, 0.0)],
            0.1,
        );
        let q = Point3::origin();
        assert_eq!(idx.radius_neighbors(&q, 0.15), vec![0, 1]);
        assert_eq!(idx.radius_neighbors(&q, 0.05), vec![0]);
    }

    #[test]
    fn thousand_points_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<_> = (0..1000)
            .map(|_| {
                Point3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(0.0..3.0),
                )
            })
            .collect();
        let idx = SpatialIndex::new(pts.clone(), 0.5);
        for _ in 0..200 {
            let q = Point3::new(
                rng.random_range(-6.0..6.0),
                rng.random_range(-6.0..6.0),
                rng.random_range(-1.0..4.0),
            );
            let r = rng.random_range(0.01..3.0);
            assert_eq!(idx.radius_neighbors(&q, r), brute_force(&pts, &q, r));
        }
    }

    #[test]
    fn nearest_prefers_smaller_id_on_ties() {
        let idx = SpatialIndex::new(
            vec![Point3::new(1.0, 0.0, 0.0), Point3::new(-1.0, 0.0, 0.0)],
            1.0,
        );
        assert_eq!(idx.nearest_within(&Point3::origin(), 2.0), Some((0, 1.0)));
        assert_eq!(idx.nearest_within(&Point3::origin(), 0.5), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn radius_query_equals_linear_scan(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 0..2000),
            q in (-12.0f64..12.0, -12.0f64..12.0, -12.0f64..12.0),
            r in 0.001f64..25.0,
            cell in 0.05f64..4.0,
        ) {
            let pts: Vec<_> = pts.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect();
            let q = Point3::new(q.0, q.1, q.2);
            let idx = SpatialIndex::new(pts.clone(), cell);
            prop_assert_eq!(idx.radius_neighbors(&q, r), brute_force(&pts, &q, r));
        }
    }
}
