//! Point and cloud data model.
//!
//! Point order is significant everywhere: every pipeline stage writes its
//! labels back by position, so element ids are indices into `points`.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tree id reserved for terrain points.
pub const GROUND_ID: i32 = 0;
/// Tree id for points the pipeline could not attribute to any tree.
pub const UNKNOWN_ID: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatterClass {
    Ground,
    Leafy,
    Woody,
    Unknown,
}

impl MatterClass {
    pub fn code(self) -> u8 {
        match self {
            MatterClass::Ground => 0,
            MatterClass::Leafy => 1,
            MatterClass::Woody => 2,
            MatterClass::Unknown => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MatterClass::Ground),
            1 => Some(MatterClass::Leafy),
            2 => Some(MatterClass::Woody),
            255 => Some(MatterClass::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub tree_id: Option<i32>,
    pub matter_class: Option<MatterClass>,
    pub source_id: Option<i32>,
}

impl PointRecord {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        PointRecord {
            x,
            y,
            z,
            tree_id: None,
            matter_class: None,
            source_id: None,
        }
    }

    pub fn labeled(x: f64, y: f64, z: f64, tree_id: i32, class: MatterClass) -> Self {
        PointRecord {
            tree_id: Some(tree_id),
            matter_class: Some(class),
            ..PointRecord::new(x, y, z)
        }
    }

    #[inline]
    pub fn position(&self) -> Point3<f64> {
        Point3::new(self.x, self.y, self.z)
    }

    pub(crate) fn check(&self) -> std::result::Result<(), String> {
        if !(self.x.is_finite() && self.y.is_finite() && self.z.is_finite()) {
            return Err(format!(
                "non-finite coordinate ({}, {}, {})",
                self.x, self.y, self.z
            ));
        }
        if let (Some(id), Some(class)) = (self.tree_id, self.matter_class) {
            if (id == GROUND_ID) != (class == MatterClass::Ground) {
                return Err(format!(
                    "tree_id {id} is inconsistent with class {class:?} (id 0 is reserved for ground)"
                ));
            }
        }
        Ok(())
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    fn grow(&mut self, p: &Point3<f64>) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(p[i]);
            self.max[i] = self.max[i].max(p[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<PointRecord>,
    bounds: Option<Aabb>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates and labels that
    /// contradict the ground convention.
    pub fn new(points: Vec<PointRecord>) -> Result<Self> {
        let mut bounds: Option<Aabb> = None;
        for (i, p) in points.iter().enumerate() {
            p.check()
                .map_err(|m| Error::InvalidInput(format!("point {i}: {m}")))?;
            let q = p.position();
            match bounds.as_mut() {
                Some(b) => b.grow(&q),
                None => bounds = Some(Aabb { min: q, max: q }),
            }
        }
        Ok(PointCloud { points, bounds })
    }

    pub fn from_positions(positions: impl IntoIterator<Item = Point3<f64>>) -> Result<Self> {
        Self::new(
            positions
                .into_iter()
                .map(|p| PointRecord::new(p.x, p.y, p.z))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[PointRecord] {
        &self.points
    }

    pub fn into_points(self) -> Vec<PointRecord> {
        self.points
    }

    pub fn bounds(&self) -> Option<Aabb> {
        self.bounds
    }

    pub fn position(&self, id: usize) -> Point3<f64> {
        self.points[id].position()
    }

    pub fn positions(&self) -> Vec<Point3<f64>> {
        self.points.iter().map(PointRecord::position).collect()
    }

    pub fn tree_ids(&self) -> Vec<Option<i32>> {
        self.points.iter().map(|p| p.tree_id).collect()
    }

    pub fn classes(&self) -> Vec<Option<MatterClass>> {
        self.points.iter().map(|p| p.matter_class).collect()
    }

    /// Returns a copy with per-point labels replaced positionally.
    pub fn relabeled(
        &self,
        tree_ids: &[Option<i32>],
        classes: &[Option<MatterClass>],
    ) -> Result<PointCloud> {
        if tree_ids.len() != self.len() || classes.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "label vectors ({}, {}) do not match cloud size {}",
                tree_ids.len(),
                classes.len(),
                self.len()
            )));
        }
        let points = self
            .points
            .iter()
            .zip(tree_ids.iter().zip(classes))
            .map(|(p, (&tree_id, &matter_class))| PointRecord {
                tree_id,
                matter_class,
                ..*p
            })
            .collect();
        PointCloud::new(points)
    }
}
