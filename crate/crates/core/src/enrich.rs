//! Per-voxel descriptors and the edge weights derived from them.
//!
//! Eigen descriptors come from the covariance of all voxelized points within
//! a support radius of the node; geometric descriptors from the cell's own
//! members; connectivity from the occupied 26-neighbourhood of the cell.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::preprocess::VoxelGrid;

/// Number of scalar components in [`FeatureVector::components`].
pub const FEATURE_LEN: usize = 33;

pub const FEATURE_NAMES: [&str; FEATURE_LEN] = [
    "lambda1", "lambda2", "lambda3", "v1x", "v1y", "v1z", "v2x", "v2y", "v2z", "v3x", "v3y",
    "v3z", "anisotropy", "eigen_entropy", "linearity", "omnivariance", "planarity",
    "sphericity", "surface_variation", "mean_x", "mean_y", "mean_z", "var_x", "var_y", "var_z",
    "area_normal", "area_vertical", "point_count", "occupied_volume", "density",
    "conn_horizontal", "conn_vertical", "conn_diagonal",
];

const EIGEN_RANGE: std::ops::Range<usize> = 0..19;
const GEOMETRIC_RANGE: std::ops::Range<usize> = 19..30;
const CONNECTIVITY_RANGE: std::ops::Range<usize> = 30..33;

/// Covariance-derived shape descriptors of a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenFeatures {
    /// λ1 ≥ λ2 ≥ λ3 ≥ 0 (m²).
    pub eigenvalues: [f64; 3],
    /// Unit eigenvectors matching `eigenvalues`; the last is the normal.
    pub eigenvectors: [Vector3<f64>; 3],
    pub anisotropy: f64,
    pub eigen_entropy: f64,
    pub linearity: f64,
    pub omnivariance: f64,
    pub planarity: f64,
    pub sphericity: f64,
    pub surface_variation: f64,
    /// Set when fewer than 3 points or a vanishing λ1 forced the neutral values.
    pub degenerate: bool,
}

impl EigenFeatures {
    fn neutral(eigenvalues: [f64; 3]) -> Self {
        EigenFeatures {
            eigenvalues,
            eigenvectors: [Vector3::x(), Vector3::y(), Vector3::z()],
            anisotropy: 0.0,
            eigen_entropy: 3f64.ln(),
            linearity: 0.0,
            omnivariance: 1.0 / 3.0,
            planarity: 0.0,
            sphericity: 1.0,
            surface_variation: 1.0 / 3.0,
            degenerate: true,
        }
    }
}

/// Flips `v` so its largest-magnitude component is positive.
fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let k = v.iamax();
    if v[k] < 0.0 {
        -v
    } else {
        v
    }
}

pub fn eigen_features(points: &[Point3<f64>]) -> EigenFeatures {
    if points.len() < 3 {
        return EigenFeatures::neutral([0.0; 3]);
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p.coords - mean;
        a + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l = order.map(|i| eig.eigenvalues[i].max(0.0));
    if l[0] < 1e-12 {
        return EigenFeatures::neutral(l);
    }
    // Round-off below this floor would otherwise leak into the cube root
    // of the omnivariance and make rank-deficient sets frame-dependent.
    let floor = l[0] * 1e-12;
    let l = l.map(|v| if v < floor { 0.0 } else { v });
    let vecs = order.map(|i| canonical_sign(eig.eigenvectors.column(i).into_owned()));
    let sum = l[0] + l[1] + l[2];
    let e = l.map(|v| v / sum);
    let entropy = -e
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>();
    EigenFeatures {
        eigenvalues: l,
        eigenvectors: vecs,
        anisotropy: (l[0] - l[2]) / l[0],
        eigen_entropy: entropy,
        linearity: (l[0] - l[1]) / l[0],
        omnivariance: (l[0] * l[1] * l[2]).cbrt() / sum,
        planarity: (l[1] - l[2]) / l[0],
        sphericity: l[2] / l[0],
        surface_variation: l[2] / sum,
        degenerate: false,
    }
}

/// Occupied neighbour counts in the 26-neighbourhood of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Connectivity {
    /// Face neighbours in the XY plane (≤ 4).
    pub horizontal: u8,
    /// Cells directly above and below (≤ 2).
    pub vertical: u8,
    /// The remaining 20 neighbours.
    pub diagonal: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub eigen: EigenFeatures,
    pub mean: [f64; 3],
    pub variance: [f64; 3],
    /// Bounding-box area of members projected along the normal (m²).
    pub area_normal: f64,
    /// Bounding-box area of members projected along z (m²).
    pub area_vertical: f64,
    pub point_count: usize,
    /// Occupied quarter-cell count × quarter-cell volume (m³).
    pub occupied_volume: f64,
    /// Points per m³ of cell volume.
    pub density: f64,
    pub connectivity: Connectivity,
}

impl FeatureVector {
    pub fn components(&self) -> [f64; FEATURE_LEN] {
        let e = &self.eigen;
        let [v1, v2, v3] = e.eigenvectors;
        let c = self.connectivity;
        [
            e.eigenvalues[0],
            e.eigenvalues[1],
            e.eigenvalues[2],
            v1.x,
            v1.y,
            v1.z,
            v2.x,
            v2.y,
            v2.z,
            v3.x,
            v3.y,
            v3.z,
            e.anisotropy,
            e.eigen_entropy,
            e.linearity,
            e.omnivariance,
            e.planarity,
            e.sphericity,
            e.surface_variation,
            self.mean[0],
            self.mean[1],
            self.mean[2],
            self.variance[0],
            self.variance[1],
            self.variance[2],
            self.area_normal,
            self.area_vertical,
            self.point_count as f64,
            self.occupied_volume,
            self.density,
            c.horizontal as f64,
            c.vertical as f64,
            c.diagonal as f64,
        ]
    }
}

/// Feature groups that take part in the cosine weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureMask {
    pub eigen: bool,
    pub geometric: bool,
    pub connectivity: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask {
            eigen: true,
            geometric: true,
            connectivity: true,
        }
    }
}

impl FeatureMask {
    fn enabled(&self, k: usize) -> bool {
        (self.eigen && EIGEN_RANGE.contains(&k))
            || (self.geometric && GEOMETRIC_RANGE.contains(&k))
            || (self.connectivity && CONNECTIVITY_RANGE.contains(&k))
    }
}

fn connectivity(grid: &VoxelGrid, cell: usize) -> Connectivity {
    let [i, j, k] = grid.key(cell);
    let mut c = Connectivity::default();
    for di in -1..=1i64 {
        for dj in -1..=1i64 {
            for dk in -1..=1i64 {
                if (di, dj, dk) == (0, 0, 0) || grid.find([i + di, j + dj, k + dk]).is_none() {
                    continue;
                }
                match (di.abs() + dj.abs(), dk.abs()) {
                    (1, 0) => c.horizontal += 1,
                    (0, 1) => c.vertical += 1,
                    _ => c.diagonal += 1,
                }
            }
        }
    }
    c
}

fn bbox_area(points: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for (a, b) in points {
        lo = (lo.0.min(a), lo.1.min(b));
        hi = (hi.0.max(a), hi.1.max(b));
    }
    if lo.0 > hi.0 {
        0.0
    } else {
        (hi.0 - lo.0) * (hi.1 - lo.1)
    }
}

/// One feature vector per grid cell, in cell order.
pub fn compute_features(
    cloud: &PointCloud,
    grid: &VoxelGrid,
    neighborhood_r: f64,
) -> Result<Vec<FeatureVector>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("cannot enrich an empty grid".into()));
    }
    if !(neighborhood_r > 0.0) {
        return Err(Error::InvalidInput(format!(
            "neighbourhood radius must be positive, got {neighborhood_r}"
        )));
    }
    let support: Vec<Point3<f64>> = (0..grid.len())
        .flat_map(|c| grid.members(c).iter().map(|&i| cloud.position(i)))
        .collect();
    let index = SpatialIndex::new(support, neighborhood_r);
    let vs = grid.cell_size();
    let sub = vs / 4.0;

    Ok((0..grid.len())
        .into_par_iter()
        .map(|cell| {
            let mut near: Vec<(usize, Point3<f64>)> = Vec::new();
            index.for_each_within(&grid.position(cell), neighborhood_r, |id, _| {
                near.push((id, index.points()[id]))
            });
            near.sort_unstable_by_key(|&(id, _)| id);
            let near: Vec<Point3<f64>> = near.into_iter().map(|(_, p)| p).collect();
            let eigen = eigen_features(&near);

            let members: Vec<Point3<f64>> =
                grid.members(cell).iter().map(|&i| cloud.position(i)).collect();
            let m = members.len() as f64;
            let mean = members.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / m;
            let var = members
                .iter()
                .fold(Vector3::zeros(), |a, p| a + (p.coords - mean).component_mul(&(p.coords - mean)))
                / m;
            let [v1, v2, _] = eigen.eigenvectors;
            let area_normal = bbox_area(members.iter().map(|p| (p.coords.dot(&v1), p.coords.dot(&v2))));
            let area_vertical = bbox_area(members.iter().map(|p| (p.x, p.y)));
            let mut subcells: Vec<[i64; 3]> = members
                .iter()
                .map(|p| crate::index::cell_key(p, sub))
                .collect();
            subcells.sort_unstable();
            subcells.dedup();

            FeatureVector {
                eigen,
                mean: mean.into(),
                variance: var.into(),
                area_normal,
                area_vertical,
                point_count: members.len(),
                occupied_volume: subcells.len() as f64 * sub.powi(3),
                density: m / vs.powi(3),
                connectivity: connectivity(grid, cell),
            }
        })
        .collect())
}

/// Per-component min–max scaling to [0, 1] over a whole graph.
#[derive(Debug, Clone)]
pub struct Normalizer {
    min: [f64; FEATURE_LEN],
    max: [f64; FEATURE_LEN],
    mask: FeatureMask,
}

impl Normalizer {
    pub fn fit(features: &[FeatureVector], mask: FeatureMask) -> Self {
        let mut min = [f64::INFINITY; FEATURE_LEN];
        let mut max = [f64::NEG_INFINITY; FEATURE_LEN];
        for f in features {
            for (k, v) in f.components().into_iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        Normalizer { min, max, mask }
    }

    /// Scaled components; constant and masked-out components map to 0.
    pub fn normalize(&self, f: &FeatureVector) -> [f64; FEATURE_LEN] {
        let mut out = f.components();
        for (k, v) in out.iter_mut().enumerate() {
            let span = self.max[k] - self.min[k];
            *v = if self.mask.enabled(k) && span > 0.0 {
                ((*v - self.min[k]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        out
    }
}

/// `a·b / (‖a‖‖b‖)`, or `None` if either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "feature vectors differ in length");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !(na.is_finite() && nb.is_finite()) {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Edge weight `1 − S_C` on already-normalized vectors; a zero-norm side
/// gives the neutral weight 1.
pub fn cosine_weight_normalized(a: &[f64], b: &[f64]) -> f64 {
    cosine_similarity(a, b).map_or(1.0, |s| 1.0 - s)
}

pub fn cosine_weight(fa: &FeatureVector, fb: &FeatureVector, normalizer: &Normalizer) -> f64 {
    cosine_weight_normalized(&normalizer.normalize(fa), &normalizer.normalize(fb))
}

/// `|m_a − m_b| / m_max`, penalising moves between dense and sparse voxels.
pub fn density_weight(fa: &FeatureVector, fb: &FeatureVector, m_max: usize) -> Result<f64> {
    if m_max == 0 {
        return Err(Error::InvalidInput("density weight needs m_max > 0".into()));
    }
    let diff = fa.point_count.abs_diff(fb.point_count);
    Ok((diff as f64 / m_max as f64).min(1.0))
}

/// Writes one CSV row per cell: `i,j,k,<feature columns>`.
pub fn write_features(
    grid: &VoxelGrid,
    features: &[FeatureVector],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    write!(w, "i,j,k").map_err(io)?;
    for name in FEATURE_NAMES {
        write!(w, ",{name}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for (cell, f) in features.iter().enumerate() {
        let [i, j, k] = grid.key(cell);
        write!(w, "{i},{j},{k}").map_err(io)?;
        for v in f.components() {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointRecord;
    use crate::preprocess::voxelize;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;

    fn fv_with_count(m: usize) -> FeatureVector {
        FeatureVector {
            eigen: EigenFeatures::neutral([0.0; 3]),
            mean: [0.0; 3],
            variance: [0.0; 3],
            area_normal: 0.0,
            area_vertical: 0.0,
            point_count: m,
            occupied_volume: 0.0,
            density: 0.0,
            connectivity: Connectivity::default(),
        }
    }

    #[test]
    fn line_segment_is_linear() {
        let pts: Vec<_> = (0..50)
            .map(|i| Point3::new(0.3, -0.2, 1.0) + Vector3::new(1.0, 2.0, -0.5) * (i as f64 * 0.004))
            .collect();
        let e = eigen_features(&pts);
        assert_abs_diff_eq!(e.linearity, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e.planarity, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e.sphericity, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn plane_patch_is_planar_with_normal() {
        let n = Vector3::new(1.0, 1.0, 1.0).normalize();
        let a = Vector3::new(1.0, -1.0, 0.0).normalize();
        let b = n.cross(&a);
        let pts: Vec<_> = (0..50)
            .map(|i| {
                let (u, v) = ((i % 7) as f64 * 0.01, (i / 7) as f64 * 0.013);
                Point3::new(2.0, 1.0, 0.5) + a * u + b * v
            })
            .collect();
        let e = eigen_features(&pts);
        assert!(e.planarity > 0.3, "planarity {}", e.planarity);
        assert_abs_diff_eq!(e.sphericity, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e.linearity + e.planarity + e.sphericity, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.eigenvectors[2].dot(&n).abs(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn square_plane_has_unit_planarity() {
        let pts: Vec<_> = (0..49)
            .map(|i| Point3::new((i % 7) as f64 * 0.01, (i / 7) as f64 * 0.01, 0.2))
            .collect();
        let e = eigen_features(&pts);
        assert_abs_diff_eq!(e.planarity, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e.sphericity, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_inputs_are_neutral() {
        let e = eigen_features(&[Point3::origin(), Point3::new(1.0, 0.0, 0.0)]);
        assert!(e.degenerate);
        assert_eq!((e.linearity, e.planarity, e.sphericity), (0.0, 0.0, 1.0));
        let same = vec![Point3::new(1.0, 2.0, 3.0); 5];
        assert!(eigen_features(&same).degenerate);
    }

    #[test]
    fn isolated_cell_has_no_connectivity() {
        let pts = vec![
            PointRecord::new(0.01, 0.01, 0.01),
            PointRecord::new(0.02, 0.05, 0.03),
            PointRecord::new(5.0, 5.0, 5.0),
        ];
        let cloud = PointCloud::new(pts).unwrap();
        let grid = voxelize(&cloud, &[0, 1, 2], 0.1).unwrap();
        let f = compute_features(&cloud, &grid, 0.3).unwrap();
        assert_eq!(f[0].connectivity, Connectivity::default());
        assert_eq!(f[0].point_count, 2);
        assert_abs_diff_eq!(f[0].density, 2.0 / 0.001, epsilon = 1e-6);
    }

    #[test]
    fn connectivity_counts_full_block() {
        let mut pts = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    pts.push(PointRecord::new(
                        i as f64 * 0.1 + 0.05,
                        j as f64 * 0.1 + 0.05,
                        k as f64 * 0.1 + 0.05,
                    ));
                }
            }
        }
        let cloud = PointCloud::new(pts).unwrap();
        let ids: Vec<_> = (0..27).collect();
        let grid = voxelize(&cloud, &ids, 0.1).unwrap();
        let centre = grid.find([1, 1, 1]).unwrap();
        let f = compute_features(&cloud, &grid, 0.15).unwrap();
        assert_eq!(
            f[centre].connectivity,
            Connectivity {
                horizontal: 4,
                vertical: 2,
                diagonal: 20
            }
        );
        for fv in &f {
            let c = fv.connectivity;
            assert!(c.horizontal <= 4 && c.vertical <= 2 && c.diagonal <= 20);
        }
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_weight_normalized(&[0.3, 0.7], &[0.3, 0.7]), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_weight_normalized(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        let s = 0.5f64.sqrt();
        let w = cosine_weight_normalized(&[1.0, 0.0], &[s, s]);
        assert_abs_diff_eq!(w, 1.0 - 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(w, 0.29289, epsilon = 1e-5);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert_eq!(cosine_weight_normalized(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn density_examples() {
        assert_eq!(density_weight(&fv_with_count(7), &fv_with_count(7), 10).unwrap(), 0.0);
        assert_eq!(density_weight(&fv_with_count(0), &fv_with_count(10), 10).unwrap(), 1.0);
        assert_abs_diff_eq!(
            density_weight(&fv_with_count(10), &fv_with_count(40), 100).unwrap(),
            0.3,
            epsilon = 1e-15
        );
        assert!(density_weight(&fv_with_count(0), &fv_with_count(0), 0).is_err());
    }

    fn arb_points() -> impl Strategy<Value = Vec<Point3<f64>>> {
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 4..60)
            .prop_map(|v| v.into_iter().map(|(x, y, z)| Point3::new(x, y * 0.5, z * 0.2)).collect())
    }

    proptest! {
        #[test]
        fn eigen_descriptors_are_rotation_invariant(
            pts in arb_points(),
            axis in (-1.0f64..1.0, -1.0f64..1.0, 0.1f64..1.0),
            angle in -3.1f64..3.1,
            shift in (-50.0f64..50.0, -50.0f64..50.0, -5.0f64..5.0),
        ) {
            let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(axis.0, axis.1, axis.2)), angle);
            let t = Vector3::new(shift.0, shift.1, shift.2);
            let moved: Vec<_> = pts.iter().map(|p| rot * p + t).collect();
            let a = eigen_features(&pts);
            let b = eigen_features(&moved);
            let scalars = |e: &EigenFeatures| [
                e.eigenvalues[0], e.eigenvalues[1], e.eigenvalues[2], e.anisotropy, e.eigen_entropy,
                e.linearity, e.omnivariance, e.planarity, e.sphericity, e.surface_variation,
            ];
            for (x, y) in scalars(&a).iter().zip(scalars(&b)) {
                prop_assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
            prop_assert!((a.linearity + a.planarity + a.sphericity - 1.0).abs() <= 1e-12);
            let v = a.eigenvectors;
            for i in 0..3 {
                prop_assert!((v[i].norm() - 1.0).abs() < 1e-9);
                for j in i + 1..3 {
                    prop_assert!(v[i].dot(&v[j]).abs() < 1e-9);
                }
            }
            prop_assert!(a.eigenvalues[0] >= a.eigenvalues[1] && a.eigenvalues[1] >= a.eigenvalues[2] && a.eigenvalues[2] >= 0.0);
        }

        #[test]
        fn cosine_is_symmetric_and_scale_invariant(
            a in prop::collection::vec(0.0f64..1.0, 6),
            b in prop::collection::vec(0.0f64..1.0, 6),
            sa in 0.01f64..100.0,
            sb in 0.01f64..100.0,
        ) {
            let wab = cosine_weight_normalized(&a, &b);
            prop_assert_eq!(wab, cosine_weight_normalized(&b, &a));
            prop_assert!((0.0..=2.0).contains(&wab));
            let a2: Vec<_> = a.iter().map(|v| v * sa).collect();
            let b2: Vec<_> = b.iter().map(|v| v * sb).collect();
            if let (Some(s1), Some(s2)) = (cosine_similarity(&a, &b), cosine_similarity(&a2, &b2)) {
                prop_assert!((s1 - s2).abs() < 1e-12);
            }
        }
    }
}
