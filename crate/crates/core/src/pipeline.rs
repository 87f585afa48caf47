//! End-to-end analysis and synthetic parameter sweeps.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{classify_matter, score_matter, ClassifyParams};
use crate::cloud::{MatterClass, PointCloud};
use crate::error::{Error, Result};
use crate::eval::{binary_f1, match_trunks, segmentation_score, BinaryScore, TrunkMatch, VMeasure};
use crate::graph::TrunkPoint;
use crate::preprocess::remove_ground;
use crate::segment::{build_path_model_with, segment_trees, ModelParams};
use crate::synth::{generate_orchard, OrchardSpec};
use crate::trunks::{detect_trunks_with, TrunkDetectionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub model: ModelParams,
    pub detection: TrunkDetectionConfig,
    /// Detect trunks when none are supplied.
    pub detect: bool,
    /// Assign unreachable nodes to the nearest trunk.
    pub fallback: bool,
    pub classify: ClassifyParams,
    /// Matching distance for trunk evaluation (m).
    pub match_distance: f64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            model: ModelParams::default(),
            detection: TrunkDetectionConfig::default(),
            detect: true,
            fallback: true,
            classify: ClassifyParams::default(),
            match_distance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub segmentation: Option<VMeasure>,
    pub classification: Option<BinaryScore>,
    pub trunks: Option<TrunkMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: AnalyzeConfig,
    pub points: usize,
    pub ground_points: usize,
    pub graph_nodes: usize,
    pub graph_edges: usize,
    pub trunks_detected: bool,
    pub trunk_count: usize,
    pub unreachable_nodes: usize,
    pub max_path_count: u32,
    pub metrics: Metrics,
    pub timings: Vec<StageTiming>,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    /// Input positions with predicted tree ids and classes.
    pub labeled: PointCloud,
    pub trunks: Vec<TrunkPoint>,
    pub manifest: Manifest,
}

struct Timer(Vec<StageTiming>);

impl Timer {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("{stage}: {seconds:.3} s");
        self.0.push(StageTiming {
            stage: stage.to_string(),
            seconds,
        });
        Ok(out)
    }
}

/// Runs ground removal, trunk detection (unless trunks are given),
/// segmentation and classification. Metrics are computed against the input
/// cloud's own labels and `truth_trunks` when present.
pub fn analyze(
    cloud: &PointCloud,
    trunks: Option<&[TrunkPoint]>,
    truth_trunks: Option<&[TrunkPoint]>,
    cfg: &AnalyzeConfig,
) -> Result<Analysis> {
    let mut timer = Timer(Vec::new());
    let partition = timer.run("preprocess", || remove_ground(cloud, cfg.model.ground))?;
    let ground_points = partition.ground_ids.len();

    let (trunks, detected) = match trunks {
        Some(t) => (t.to_vec(), false),
        None if cfg.detect => {
            let d = timer.run("find-trunks", || detect_trunks_with(cloud, &partition, &cfg.detection))?;
            if d.trunks.is_empty() {
                return Err(Error::InvalidInput("no trunks detected".into()).in_stage("find-trunks"));
            }
            (d.trunks, true)
        }
        None => {
            return Err(Error::Config("no trunks supplied and detection is disabled".into()));
        }
    };

    let model = timer.run("graph", || build_path_model_with(cloud, partition, &trunks, &cfg.model))?;
    let seg = timer.run("segment", || segment_trees(cloud, &model, cfg.fallback))?;
    let matter = timer.run("classify", || {
        let scores = score_matter(&model.aggregate);
        classify_matter(cloud, &model, &scores, &cfg.classify)
    })?;

    let metrics = timer.run("eval", || {
        let truth_ids = cloud.tree_ids();
        let truth_classes = cloud.classes();
        let pred_ids: Vec<_> = seg.labels.iter().map(|&l| Some(l)).collect();
        let pred_classes: Vec<_> = matter.classes.iter().map(|&c| Some(c)).collect();
        let segmentation = if truth_ids.iter().any(|t| t.is_some_and(|v| v > 0)) {
            segmentation_score(&pred_ids, &truth_ids).ok()
        } else {
            None
        };
        let has_matter = truth_classes
            .iter()
            .any(|c| matches!(c, Some(MatterClass::Woody | MatterClass::Leafy)));
        let classification = if has_matter {
            Some(binary_f1(&pred_classes, &truth_classes)?)
        } else {
            None
        };
        let trunks = match truth_trunks {
            Some(t) => Some(match_trunks(&model.trunks, t, cfg.match_distance)?),
            None => None,
        };
        Ok(Metrics {
            segmentation,
            classification,
            trunks,
        })
    })?;

    let labeled = cloud.relabeled(
        &seg.labels.iter().map(|&l| Some(l)).collect::<Vec<_>>(),
        &matter.classes.iter().map(|&c| Some(c)).collect::<Vec<_>>(),
    )?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: *cfg,
        points: cloud.len(),
        ground_points,
        graph_nodes: model.graph.len(),
        graph_edges: model.graph.stats().edges,
        trunks_detected: detected,
        trunk_count: model.trunks.len(),
        unreachable_nodes: seg.unreachable_nodes,
        max_path_count: model.aggregate.max_count,
        metrics,
        timings: timer.0,
    };
    Ok(Analysis {
        labeled,
        trunks: model.trunks,
        manifest,
    })
}

/// Grid of synthetic stands to analyze. Missing lists default to the base
/// spec's single value; an explicitly empty list yields no cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub base: OrchardSpec,
    pub noise: Option<Vec<f64>>,
    /// Sets both row and tree spacing.
    pub spacing: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    /// Segment from generator trunks instead of detected ones.
    pub truth_trunks: bool,
    pub analyze: AnalyzeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub noise: f64,
    pub row_spacing: f64,
    pub tree_spacing: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub noise: f64,
    pub row_spacing: f64,
    pub tree_spacing: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub runtime_s: f64,
}

impl SweepSpec {
    pub fn cells(&self) -> Vec<SweepCell> {
        let noise = self.noise.clone().unwrap_or_else(|| vec![self.base.noise]);
        let spacing: Vec<(f64, f64)> = match &self.spacing {
            Some(s) => s.iter().map(|&s| (s, s)).collect(),
            None => vec![(self.base.row_spacing, self.base.tree_spacing)],
        };
        let seeds = self.seeds.clone().unwrap_or_else(|| vec![self.base.seed]);
        let mut out = Vec::new();
        for &n in &noise {
            for &(r, t) in &spacing {
                for &seed in &seeds {
                    out.push(SweepCell {
                        noise: n,
                        row_spacing: r,
                        tree_spacing: t,
                        seed,
                    });
                }
            }
        }
        out
    }
}

fn run_cell(spec: &SweepSpec, cell: &SweepCell) -> Result<Vec<(&'static str, f64)>> {
    let orchard = generate_orchard(&OrchardSpec {
        noise: cell.noise,
        row_spacing: cell.row_spacing,
        tree_spacing: cell.tree_spacing,
        seed: cell.seed,
        ..spec.base.clone()
    })?;
    let given = spec.truth_trunks.then_some(orchard.trunks.as_slice());
    let a = analyze(&orchard.cloud, given, Some(&orchard.trunks), &spec.analyze)?;
    let m = a.manifest.metrics;
    let mut out = Vec::new();
    if let Some(v) = m.segmentation {
        out.extend([
            ("v_measure", v.v),
            ("homogeneity", v.homogeneity),
            ("completeness", v.completeness),
        ]);
    }
    if let Some(c) = m.classification {
        out.push(("matter_f1", c.f1));
    }
    if let (Some(t), false) = (m.trunks, spec.truth_trunks) {
        out.extend([
            ("trunk_precision", t.precision),
            ("trunk_recall", t.recall),
            ("trunk_f1", t.f1),
            ("trunk_tp_distance", t.mean_tp_distance),
        ]);
    }
    Ok(out)
}

/// Runs every cell; a failing cell contributes one `error` row and the
/// sweep continues.
pub fn sweep(spec: &SweepSpec) -> Vec<SweepRow> {
    let cells = spec.cells();
    type CellResult<'a> = (SweepCell, Result<Vec<(&'a str, f64)>>, f64);
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|cell| {
            let start = Instant::now();
            let r = run_cell(spec, cell);
            (*cell, r, start.elapsed().as_secs_f64())
        })
        .collect();
    let mut rows = Vec::new();
    for (cell, result, runtime_s) in results {
        let row = |metric: &str, value: f64| SweepRow {
            noise: cell.noise,
            row_spacing: cell.row_spacing,
            tree_spacing: cell.tree_spacing,
            seed: cell.seed,
            metric: metric.to_string(),
            value,
            runtime_s,
        };
        match result {
            Ok(metrics) => rows.extend(metrics.into_iter().map(|(m, v)| row(m, v))),
            Err(e) => {
                log::error!("sweep cell {cell:?} failed: {e}");
                rows.push(row("error", f64::NAN));
            }
        }
    }
    rows
}

pub fn write_sweep(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(["noise", "row_spacing", "tree_spacing", "seed", "metric", "value", "runtime_s"])
        .map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let spec = SweepSpec {
            noise: Some(vec![0.0, 0.05, 0.1]),
            seeds: Some((0..8).collect()),
            ..SweepSpec::default()
        };
        assert_eq!(spec.cells().len(), 24);
        let empty = SweepSpec {
            spacing: Some(vec![]),
            ..SweepSpec::default()
        };
        assert!(empty.cells().is_empty());
        assert!(sweep(&empty).is_empty());
    }

    #[test]
    fn empty_sweep_writes_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_sweep(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), "noise,row_spacing,tree_spacing,seed,metric,value,runtime_s");
    }

    #[test]
    fn missing_trunks_without_detection_is_a_config_error() {
        let o = generate_orchard(&OrchardSpec {
            rows: 1,
            per_row: 1,
            ..OrchardSpec::default()
        })
        .unwrap();
        let cfg = AnalyzeConfig {
            detect: false,
            ..AnalyzeConfig::default()
        };
        assert!(matches!(analyze(&o.cloud, None, None, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn analysis_reports_metrics_and_is_repeatable() {
        let o = generate_orchard(&OrchardSpec {
            rows: 1,
            per_row: 2,
            seed: 4,
            noise: 0.02,
            ..OrchardSpec::default()
        })
        .unwrap();
        let cfg = AnalyzeConfig::default();
        let a = analyze(&o.cloud, None, Some(&o.trunks), &cfg).unwrap();
        let b = analyze(&o.cloud, None, Some(&o.trunks), &cfg).unwrap();
        let m = &a.manifest.metrics;
        assert!(m.segmentation.is_some() && m.classification.is_some() && m.trunks.is_some());
        assert_eq!(a.labeled, b.labeled);
        let strip = |mut m: Manifest| {
            m.timings.iter_mut().for_each(|t| t.seconds = 0.0);
            m
        };
        assert_eq!(strip(a.manifest), strip(b.manifest));
    }
}
