//! Procedural orchard stands with exact per-point labels.
//!
//! Each tree is a recursive branching skeleton of cylinders (woody points on
//! the cylinder surfaces) with Gaussian leaf clusters at the terminal twigs.
//! Output is deterministic for a given spec, independent of thread count.

use nalgebra::{Point3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{MatterClass, PointCloud, PointRecord, GROUND_ID};
use crate::error::{Error, Result};
use crate::graph::TrunkPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeShape {
    /// Height of the unbranched trunk (m).
    pub trunk_height: [f64; 2],
    pub trunk_radius: [f64; 2],
    /// Length of the first-order limbs (m).
    pub limb_length: [f64; 2],
    /// Child/parent length ratio.
    pub length_ratio: [f64; 2],
    pub radius_ratio: f64,
    /// Branching levels above the trunk.
    pub depth: [u32; 2],
    pub limbs: [u32; 2],
    pub children: [u32; 2],
    /// Angle between a child and its parent direction (degrees).
    pub branch_angle: [f64; 2],
    /// Weight of the vertical direction mixed into each child direction.
    pub upward_bias: f64,
    /// Lateral extent of the canopy is scaled down to at most this (m).
    pub canopy_radius: f64,
    /// Leaf points per tree, split evenly across leaf clusters.
    pub leaf_points: usize,
    /// Leaf clusters per terminal twig, spread from `leaf_start` to its tip.
    pub clusters_per_twig: usize,
    /// Fraction of the twig length where foliage begins.
    pub leaf_start: f64,
    /// Standard deviation of a leaf cluster (m), truncated at 2σ.
    pub leaf_sigma: f64,
    /// Leaf points below this height are resampled.
    pub skirt_height: f64,
    /// Woody surface sampling density (points/m²).
    pub bark_density: f64,
    /// Minimum woody points per metre of branch.
    pub min_linear_density: f64,
    /// Fraction of points dropped at the top of the tree, linear in height.
    pub density_falloff: f64,
}

impl Default for TreeShape {
    fn default() -> Self {
        TreeShape {
            trunk_height: [0.9, 1.2],
            trunk_radius: [0.12, 0.18],
            limb_length: [1.0, 1.4],
            length_ratio: [0.6, 0.75],
            radius_ratio: 0.6,
            depth: [3, 4],
            limbs: [3, 4],
            children: [2, 3],
            branch_angle: [25.0, 50.0],
            upward_bias: 0.35,
            canopy_radius: 2.5,
            leaf_points: 25_000,
            clusters_per_twig: 6,
            leaf_start: 0.25,
            leaf_sigma: 0.15,
            skirt_height: 1.0,
            bark_density: 400.0,
            min_linear_density: 40.0,
            density_falloff: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchardSpec {
    pub rows: usize,
    pub per_row: usize,
    /// Distance between rows, along y (m).
    pub row_spacing: f64,
    /// Distance between trees within a row, along x (m).
    pub tree_spacing: f64,
    /// Standard deviation of per-axis Gaussian noise (m).
    pub noise: f64,
    pub seed: u64,
    /// Ground points per m².
    pub ground_density: f64,
    /// Multiplier on every point count.
    pub density_scale: f64,
    pub shape: TreeShape,
}

impl Default for OrchardSpec {
    fn default() -> Self {
        OrchardSpec {
            rows: 2,
            per_row: 4,
            row_spacing: 8.0,
            tree_spacing: 6.0,
            noise: 0.0,
            seed: 0,
            ground_density: 40.0,
            density_scale: 1.0,
            shape: TreeShape::default(),
        }
    }
}

impl OrchardSpec {
    fn validate(&self) -> Result<()> {
        let s = &self.shape;
        let ok = self.row_spacing > 0.0
            && self.tree_spacing > 0.0
            && self.noise >= 0.0
            && self.noise.is_finite()
            && self.ground_density >= 0.0
            && self.density_scale > 0.0
            && s.radius_ratio > 0.0
            && s.canopy_radius > 0.0
            && s.leaf_sigma >= 0.0
            && s.clusters_per_twig >= 1
            && (0.0..=1.0).contains(&s.leaf_start)
            && (0.0..1.0).contains(&s.density_falloff)
            && s.depth[0] <= s.depth[1]
            && s.limbs[0] >= 1
            && s.children[0] >= 1
            && [s.trunk_height, s.trunk_radius, s.limb_length, s.length_ratio, s.branch_angle]
                .iter()
                .all(|r| r[0] > 0.0 && r[0] <= r[1])
            && s.limbs[0] <= s.limbs[1]
            && s.children[0] <= s.children[1];
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid orchard spec: {self:?}")))
        }
    }

    /// Trunk base positions, row-major, tree ids from 1.
    pub fn trunk_positions(&self) -> Vec<TrunkPoint> {
        let mut out = Vec::with_capacity(self.rows * self.per_row);
        for r in 0..self.rows {
            for i in 0..self.per_row {
                out.push(TrunkPoint {
                    position: Point3::new(i as f64 * self.tree_spacing, r as f64 * self.row_spacing, 0.0),
                    tree_id: out.len() as i32 + 1,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Orchard {
    pub cloud: PointCloud,
    pub trunks: Vec<TrunkPoint>,
    /// Skeleton segments of each tree, in trunk order.
    pub skeletons: Vec<Vec<Segment>>,
}

/// One cylinder of a tree skeleton.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: Point3<f64>,
    pub end: Point3<f64>,
    pub radius: f64,
}

impl Segment {
    pub fn distance_to_axis(&self, p: &Point3<f64>) -> f64 {
        let d = self.end - self.start;
        let t = ((p - self.start).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        (p - (self.start + d * t)).norm()
    }
}

pub fn generate_orchard(spec: &OrchardSpec) -> Result<Orchard> {
    spec.validate()?;
    let trunks = spec.trunk_positions();
    let trees: Vec<(Vec<Segment>, Vec<PointRecord>)> = trunks
        .par_iter()
        .enumerate()
        .map(|(k, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64 + 1);
            let skeleton = grow_skeleton(&spec.shape, t.position, &mut rng);
            let mut points = sample_tree(spec, &skeleton, t.tree_id, &mut rng);
            add_noise(&mut points, spec.noise, &mut rng);
            (skeleton.segments, points)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let mut points = sample_ground(spec, &mut rng);
    add_noise(&mut points, spec.noise, &mut rng);
    let mut skeletons = Vec::with_capacity(trees.len());
    for (segments, tree_points) in trees {
        points.extend(tree_points);
        skeletons.push(segments);
    }
    Ok(Orchard {
        cloud: PointCloud::new(points)?,
        trunks,
        skeletons,
    })
}

struct Skeleton {
    segments: Vec<Segment>,
    /// Indices of terminal segments.
    twigs: Vec<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn grow_skeleton(shape: &TreeShape, base: Point3<f64>, rng: &mut ChaCha8Rng) -> Skeleton {
    let mut sk = Skeleton {
        segments: Vec::new(),
        twigs: Vec::new(),
    };
    let trunk_r = uniform(rng, shape.trunk_radius);
    let top = base + Vector3::z() * uniform(rng, shape.trunk_height);
    sk.segments.push(Segment {
        start: base,
        end: top,
        radius: trunk_r,
    });
    let depth = rng.random_range(shape.depth[0]..=shape.depth[1]);
    let limbs = rng.random_range(shape.limbs[0]..=shape.limbs[1]);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for i in 0..limbs {
        let azimuth = phase + std::f64::consts::TAU * i as f64 / limbs as f64 + rng.random_range(-0.3..0.3);
        let tilt = uniform(rng, shape.branch_angle).to_radians();
        let dir = Vector3::new(tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), tilt.cos());
        let len = uniform(rng, shape.limb_length);
        grow(shape, &mut sk, top, dir, len, trunk_r * shape.radius_ratio, depth - 1, rng);
    }

    // Bound the canopy's lateral extent about the trunk axis.
    let reach = sk
        .segments
        .iter()
        .flat_map(|s| [s.start, s.end])
        .map(|p| (p.xy() - base.xy()).norm())
        .fold(0.0, f64::max)
        + 2.0 * shape.leaf_sigma;
    if reach > shape.canopy_radius {
        let f = (shape.canopy_radius - 2.0 * shape.leaf_sigma).max(0.0) / (reach - 2.0 * shape.leaf_sigma);
        let squash = |p: Point3<f64>| Point3::new(base.x + (p.x - base.x) * f, base.y + (p.y - base.y) * f, p.z);
        for s in &mut sk.segments {
            s.start = squash(s.start);
            s.end = squash(s.end);
        }
    }
    sk
}

#[allow(clippy::too_many_arguments)]
fn grow(
    shape: &TreeShape,
    sk: &mut Skeleton,
    start: Point3<f64>,
    dir: Vector3<f64>,
    len: f64,
    radius: f64,
    levels_left: u32,
    rng: &mut ChaCha8Rng,
) {
    let end = start + dir * len;
    sk.segments.push(Segment { start, end, radius });
    if levels_left == 0 {
        sk.twigs.push(sk.segments.len() - 1);
        return;
    }
    let n = rng.random_range(shape.children[0]..=shape.children[1]);
    for _ in 0..n {
        let child = deflect(dir, uniform(rng, shape.branch_angle).to_radians(), rng);
        let child = (child + Vector3::z() * shape.upward_bias).normalize();
        let child_len = len * uniform(rng, shape.length_ratio);
        grow(shape, sk, end, child, child_len, radius * shape.radius_ratio, levels_left - 1, rng);
    }
}

/// Rotates `dir` by `angle` towards a uniformly random perpendicular.
fn deflect(dir: Vector3<f64>, angle: f64, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let (u, v) = perpendicular_basis(&dir);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let axis = Unit::new_normalize(u * phi.cos() + v * phi.sin());
    UnitQuaternion::from_axis_angle(&axis, angle) * dir
}

fn perpendicular_basis(d: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let d = d.normalize();
    let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = d.cross(&helper).normalize();
    (u, d.cross(&u))
}

fn keep(spec: &OrchardSpec, z: f64, top: f64, rng: &mut ChaCha8Rng) -> bool {
    let f = spec.shape.density_falloff;
    f == 0.0 || rng.random::<f64>() >= f * (z / top).clamp(0.0, 1.0)
}

fn sample_tree(spec: &OrchardSpec, sk: &Skeleton, tree_id: i32, rng: &mut ChaCha8Rng) -> Vec<PointRecord> {
    let shape = &spec.shape;
    let top = sk
        .segments
        .iter()
        .map(|s| s.end.z)
        .fold(f64::MIN, f64::max)
        + 2.0 * shape.leaf_sigma;
    let mut out = Vec::new();
    for s in &sk.segments {
        let axis = s.end - s.start;
        let len = axis.norm();
        let (u, v) = perpendicular_basis(&axis);
        let n = (shape.bark_density * std::f64::consts::TAU * s.radius * len)
            .max(shape.min_linear_density * len)
            * spec.density_scale;
        for _ in 0..n.round() as usize {
            let t = rng.random::<f64>();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let p = s.start + axis * t + (u * phi.cos() + v * phi.sin()) * s.radius;
            if keep(spec, p.z, top, rng) {
                out.push(PointRecord::labeled(p.x, p.y, p.z, tree_id, MatterClass::Woody));
            }
        }
    }
    let n_clusters = sk.twigs.len() * shape.clusters_per_twig;
    if n_clusters == 0 {
        return out;
    }
    let per_cluster = ((shape.leaf_points as f64 * spec.density_scale) / n_clusters as f64).round() as usize;
    let centres = sk.twigs.iter().flat_map(|&i| {
        let s = sk.segments[i];
        let k = shape.clusters_per_twig;
        (0..k).map(move |j| {
            let t = if k == 1 {
                1.0
            } else {
                shape.leaf_start + (1.0 - shape.leaf_start) * j as f64 / (k - 1) as f64
            };
            s.start + (s.end - s.start) * t
        })
    });
    for tip in centres {
        for _ in 0..per_cluster {
            let p = loop {
                let o: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
                let o = Vector3::from(o);
                if o.norm() > 2.0 {
                    continue;
                }
                let p = tip + o * shape.leaf_sigma;
                if p.z >= shape.skirt_height || tip.z < shape.skirt_height {
                    break p;
                }
            };
            if keep(spec, p.z, top, rng) {
                out.push(PointRecord::labeled(p.x, p.y, p.z, tree_id, MatterClass::Leafy));
            }
        }
    }
    out
}

fn sample_ground(spec: &OrchardSpec, rng: &mut ChaCha8Rng) -> Vec<PointRecord> {
    if spec.rows == 0 || spec.per_row == 0 {
        return Vec::new();
    }
    let margin = spec.shape.canopy_radius + 1.0;
    let x1 = (spec.per_row - 1) as f64 * spec.tree_spacing + margin;
    let y1 = (spec.rows - 1) as f64 * spec.row_spacing + margin;
    let area = (x1 + margin) * (y1 + margin);
    let n = (area * spec.ground_density * spec.density_scale).round() as usize;
    (0..n)
        .map(|_| {
            let x = rng.random_range(-margin..x1);
            let y = rng.random_range(-margin..y1);
            PointRecord::labeled(x, y, 0.0, GROUND_ID, MatterClass::Ground)
        })
        .collect()
}

fn add_noise(points: &mut [PointRecord], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for p in points {
        p.x += normal.sample(rng);
        p.y += normal.sample(rng);
        p.z += normal.sample(rng);
    }
}
