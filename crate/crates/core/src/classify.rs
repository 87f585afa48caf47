//! Woody/leafy matter classification from path participation.
//!
//! A node's score is `ln(p_x) / ln(p_M)`, where `p_x` is the largest number
//! of trunk paths passing through it for any single trunk and `p_M` the
//! maximum over the graph. Point scores average the scores of nearby points
//! (or nodes) and are thresholded.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{MatterClass, PointCloud};
use crate::error::{Error, Result};
use crate::graph::PathAggregate;
use crate::index::SpatialIndex;
use crate::segment::PathModel;

pub const DEFAULT_THRESHOLD: f64 = 0.216;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyParams {
    pub threshold: f64,
    pub smoothing_radius: f64,
    /// Weight each node by its point count when averaging, so the average
    /// runs over neighbouring points rather than neighbouring nodes.
    pub point_weighted: bool,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        ClassifyParams {
            threshold: DEFAULT_THRESHOLD,
            smoothing_radius: 0.3,
            point_weighted: true,
        }
    }
}

/// Per-node score in [0, 1]. Unreached nodes score 0; when no node has
/// more than one path every score is 0.
pub fn score_matter(agg: &PathAggregate) -> Vec<f64> {
    if agg.max_count <= 1 {
        log::warn!("path counts never exceed 1; all matter scores are 0");
        return vec![0.0; agg.count_max.len()];
    }
    let denom = (agg.max_count as f64).ln();
    agg.count_max
        .iter()
        .map(|&p| if p == 0 { 0.0 } else { (p as f64).ln() / denom })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatterLabels {
    pub classes: Vec<MatterClass>,
    /// Neighbourhood-averaged score; `None` for ground and isolated points.
    pub scores: Vec<Option<f64>>,
}

/// Mean node score within `radius` of each canopy point, optionally
/// weighted by node point counts.
pub fn smooth_scores(
    cloud: &PointCloud,
    model: &PathModel,
    node_scores: &[f64],
    radius: f64,
    point_weighted: bool,
) -> Result<Vec<Option<f64>>> {
    if node_scores.len() != model.grid.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} nodes",
            node_scores.len(),
            model.grid.len()
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidInput(format!("smoothing radius must be positive, got {radius}")));
    }
    let index = SpatialIndex::new(model.grid.positions().to_vec(), radius);
    Ok(cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if model.partition.is_ground(i) {
                return None;
            }
            let (mut sum, mut n) = (0.0, 0usize);
            index.for_each_within(&p.position(), radius, |id, _| {
                let w = if point_weighted { model.grid.members(id).len() } else { 1 };
                sum += node_scores[id] * w as f64;
                n += w;
            });
            (n > 0).then(|| sum / n as f64)
        })
        .collect())
}

pub fn classify_matter(
    cloud: &PointCloud,
    model: &PathModel,
    node_scores: &[f64],
    params: &ClassifyParams,
) -> Result<MatterLabels> {
    let scores = smooth_scores(cloud, model, node_scores, params.smoothing_radius, params.point_weighted)?;
    let classes = (0..cloud.len())
        .map(|i| {
            if model.partition.is_ground(i) {
                MatterClass::Ground
            } else {
                threshold_class(scores[i], params.threshold)
            }
        })
        .collect();
    Ok(MatterLabels { classes, scores })
}

pub fn threshold_class(score: Option<f64>, threshold: f64) -> MatterClass {
    match score {
        Some(s) if s >= threshold => MatterClass::Woody,
        Some(_) => MatterClass::Leafy,
        None => MatterClass::Unknown,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub count: usize,
    pub mean: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub woody: ClassStats,
    pub leafy: ClassStats,
    /// Midpoint of the two class means.
    pub midpoint_threshold: f64,
    /// Threshold maximising woody F1 on the calibration data.
    pub best_f1_threshold: f64,
    pub best_f1: f64,
}

fn stats(values: &[f64]) -> ClassStats {
    let n = values.len();
    if n == 0 {
        return ClassStats {
            count: 0,
            mean: f64::NAN,
            std_dev: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    ClassStats {
        count: n,
        mean,
        std_dev: var.sqrt(),
    }
}

/// Per-class score statistics and suggested thresholds from point scores
/// with known woody/leafy labels. Other labels and missing scores are ignored.
pub fn calibrate(scores: &[Option<f64>], truth: &[Option<MatterClass>]) -> Result<Calibration> {
    if scores.len() != truth.len() {
        return Err(Error::InvalidInput("scores and labels differ in length".into()));
    }
    let mut samples: Vec<(f64, bool)> = scores
        .iter()
        .zip(truth)
        .filter_map(|(s, t)| match (s, t) {
            (Some(s), Some(MatterClass::Woody)) => Some((*s, true)),
            (Some(s), Some(MatterClass::Leafy)) => Some((*s, false)),
            _ => None,
        })
        .collect();
    let woody: Vec<f64> = samples.iter().filter(|s| s.1).map(|s| s.0).collect();
    let leafy: Vec<f64> = samples.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if woody.is_empty() || leafy.is_empty() {
        return Err(Error::InvalidInput("calibration needs both woody and leafy points".into()));
    }
    let (w, l) = (stats(&woody), stats(&leafy));

    // Sweep thresholds at each distinct score from high to low: everything
    // at or above the current score is predicted woody.
    samples.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_woody = woody.len();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut best_f1, mut best_t) = (-1.0, samples[0].0);
    let mut i = 0;
    while i < samples.len() {
        let s = samples[i].0;
        while i < samples.len() && samples[i].0 == s {
            if samples[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (tp + fp + total_woody) as f64;
        if f1 > best_f1 {
            best_f1 = f1;
            best_t = s;
        }
    }
    Ok(Calibration {
        woody: w,
        leafy: l,
        midpoint_threshold: 0.5 * (w.mean + l.mean),
        best_f1_threshold: best_t,
        best_f1,
    })
}
