//! Scoring: trunk matching, v-measure and woody/leafy F1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cloud::{MatterClass, GROUND_ID, UNKNOWN_ID};
use crate::error::{Error, Result};
use crate::graph::TrunkPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrunkMatch {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Mean detected-to-truth distance over true positives; 0 without any.
    pub mean_tp_distance: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// One-to-one greedy matching in ascending order of distance.
pub fn match_trunks(detected: &[TrunkPoint], truth: &[TrunkPoint], max_dist: f64) -> Result<TrunkMatch> {
    if !(max_dist > 0.0) {
        return Err(Error::InvalidInput(format!("max_dist must be positive, got {max_dist}")));
    }
    let key = |p: &TrunkPoint| [p.position.x, p.position.y, p.position.z];
    let mut pairs = Vec::new();
    for (i, d) in detected.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let dist = (d.position - t.position).norm();
            if dist <= max_dist {
                pairs.push((dist, i, j));
            }
        }
    }
    // Ties are resolved by coordinates so the result does not depend on
    // input order.
    pairs.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| cmp3(key(&detected[a.1]), key(&detected[b.1])))
            .then_with(|| cmp3(key(&truth[a.2]), key(&truth[b.2])))
    });
    let mut used_d = vec![false; detected.len()];
    let mut used_t = vec![false; truth.len()];
    let (mut tp, mut dist_sum) = (0, 0.0);
    for (dist, i, j) in pairs {
        if !used_d[i] && !used_t[j] {
            used_d[i] = true;
            used_t[j] = true;
            tp += 1;
            dist_sum += dist;
        }
    }
    let fp = detected.len() - tp;
    let fn_ = truth.len() - tp;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(TrunkMatch {
        tp,
        fp,
        fn_,
        mean_tp_distance: if tp == 0 { 0.0 } else { dist_sum / tp as f64 },
        precision,
        recall,
        f1: f1_of(precision, recall),
    })
}

fn cmp3(a: [f64; 3], b: [f64; 3]) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VMeasure {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v: f64,
}

fn entropy<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity, completeness and their harmonic mean for two labelings of
/// the same points.
pub fn v_measure(pred: &[i32], truth: &[i32]) -> Result<VMeasure> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "label lengths differ: {} predicted, {} truth",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("v-measure of an empty labeling".into()));
    }
    let n = pred.len() as f64;
    let mut joint: BTreeMap<(i32, i32), usize> = BTreeMap::new();
    let mut cp: BTreeMap<i32, usize> = BTreeMap::new();
    let mut ct: BTreeMap<i32, usize> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *joint.entry((p, t)).or_default() += 1;
        *cp.entry(p).or_default() += 1;
        *ct.entry(t).or_default() += 1;
    }
    let h_truth = entropy(ct.values(), n);
    let h_pred = entropy(cp.values(), n);
    // H(truth | pred) and H(pred | truth) from the joint table.
    let mut h_t_given_p = 0.0;
    let mut h_p_given_t = 0.0;
    for (&(p, t), &c) in &joint {
        let c = c as f64;
        h_t_given_p -= c / n * (c / cp[&p] as f64).ln();
        h_p_given_t -= c / n * (c / ct[&t] as f64).ln();
    }
    let homogeneity = if h_truth == 0.0 { 1.0 } else { 1.0 - h_t_given_p / h_truth };
    let completeness = if h_pred == 0.0 { 1.0 } else { 1.0 - h_p_given_t / h_pred };
    let v = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(VMeasure {
        homogeneity,
        completeness,
        v,
    })
}

/// v-measure over points that are neither ground nor unknown in either
/// labeling. Absent labels count as unknown.
pub fn segmentation_score(pred: &[Option<i32>], truth: &[Option<i32>]) -> Result<VMeasure> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidInput("label lengths differ".into()));
    }
    let tree = |l: Option<i32>| l.filter(|&v| v != GROUND_ID && v != UNKNOWN_ID);
    let (p, t): (Vec<i32>, Vec<i32>) = pred
        .iter()
        .zip(truth)
        .filter_map(|(&p, &t)| Some((tree(p)?, tree(t)?)))
        .unzip();
    v_measure(&p, &t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScore {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub f1: f64,
}

/// F1 of the woody class over points labeled woody or leafy on both sides.
pub fn binary_f1(pred: &[Option<MatterClass>], truth: &[Option<MatterClass>]) -> Result<BinaryScore> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidInput("class lengths differ".into()));
    }
    let matter = |c: Option<MatterClass>| matches!(c, Some(MatterClass::Woody | MatterClass::Leafy));
    let mut s = BinaryScore {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
        f1: 0.0,
    };
    for (&p, &t) in pred.iter().zip(truth) {
        if !matter(p) || !matter(t) {
            continue;
        }
        match (p == Some(MatterClass::Woody), t == Some(MatterClass::Woody)) {
            (true, true) => s.tp += 1,
            (true, false) => s.fp += 1,
            (false, true) => s.fn_ += 1,
            (false, false) => s.tn += 1,
        }
    }
    s.f1 = if s.tp + s.fp + s.fn_ == 0 {
        log::warn!("no woody points in prediction or truth; F1 defined as 1");
        1.0
    } else {
        2.0 * s.tp as f64 / (2 * s.tp + s.fp + s.fn_) as f64
    };
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;
    use proptest::prelude::*;

    fn tp(x: f64, y: f64, id: i32) -> TrunkPoint {
        TrunkPoint {
            position: Point3::new(x, y, 0.0),
            tree_id: id,
        }
    }

    #[test]
    fn exact_detections() {
        let t = [tp(0.0, 0.0, 1), tp(5.0, 0.0, 2)];
        let m = match_trunks(&t, &t, 1.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
        assert_eq!((m.precision, m.recall, m.f1, m.mean_tp_distance), (1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn detection_beyond_threshold() {
        let m = match_trunks(&[tp(1.5, 0.0, 1)], &[tp(0.0, 0.0, 1)], 1.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.f1), (0, 1, 1, 0.0));
    }

    #[test]
    fn three_offsets() {
        let truth = [tp(0.0, 0.0, 1), tp(10.0, 0.0, 2), tp(20.0, 0.0, 3)];
        let det = [tp(0.2, 0.0, 1), tp(10.0, 0.4, 2), tp(20.9, 0.0, 3)];
        let m = match_trunks(&det, &truth, 1.0).unwrap();
        assert_eq!(m.tp, 3);
        approx::assert_abs_diff_eq!(m.mean_tp_distance, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn v_measure_examples() {
        assert_eq!(v_measure(&[1, 1, 2, 2], &[1, 1, 2, 2]).unwrap().v, 1.0);
        approx::assert_abs_diff_eq!(v_measure(&[7, 7, 3, 3], &[1, 1, 2, 2]).unwrap().v, 1.0, epsilon = 1e-12);
        let m = v_measure(&[1, 1, 1, 1], &[1, 1, 2, 2]).unwrap();
        assert_eq!((m.homogeneity, m.completeness, m.v), (0.0, 1.0, 0.0));
        assert!(v_measure(&[], &[]).is_err());
    }

    #[test]
    fn segmentation_score_drops_ground_and_unknown() {
        let pred = [Some(1), Some(0), Some(2), Some(-1), None];
        let truth = [Some(1), Some(1), Some(2), Some(2), Some(1)];
        assert_eq!(segmentation_score(&pred, &truth).unwrap().v, 1.0);
    }

    #[test]
    fn f1_examples() {
        use MatterClass::*;
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (p, t, n) in [(Woody, Woody, 30), (Woody, Leafy, 10), (Leafy, Woody, 30), (Leafy, Leafy, 5)] {
            pred.extend(std::iter::repeat_n(Some(p), n));
            truth.extend(std::iter::repeat_n(Some(t), n));
        }
        approx::assert_abs_diff_eq!(binary_f1(&pred, &truth).unwrap().f1, 0.6, epsilon = 1e-12);
        assert_eq!(binary_f1(&truth, &truth).unwrap().f1, 1.0);
        let flipped: Vec<_> = truth
            .iter()
            .map(|t| Some(if *t == Some(Woody) { Leafy } else { Woody }))
            .collect();
        assert_eq!(binary_f1(&flipped, &truth).unwrap().f1, 0.0);
        let leaves = vec![Some(Leafy); 4];
        assert_eq!(binary_f1(&leaves, &leaves).unwrap().f1, 1.0);
    }

    proptest! {
        #[test]
        fn matching_ignores_input_order(
            det in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 0..12),
            truth in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 0..12),
            rot in 0usize..12,
        ) {
            let det: Vec<_> = det.iter().map(|&(x, y)| tp(x, y, 1)).collect();
            let truth: Vec<_> = truth.iter().map(|&(x, y)| tp(x, y, 1)).collect();
            let a = match_trunks(&det, &truth, 1.0).unwrap();
            let mut d2 = det.clone();
            d2.reverse();
            let mut t2 = truth.clone();
            if !t2.is_empty() {
                let k = rot % t2.len();
                t2.rotate_left(k);
            }
            let b = match_trunks(&d2, &t2, 1.0).unwrap();
            prop_assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fp, b.fn_));
            prop_assert!((a.mean_tp_distance - b.mean_tp_distance).abs() < 1e-12);
            for v in [a.precision, a.recall, a.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn v_measure_swaps_roles(
            labels in prop::collection::vec((0i32..4, 0i32..4), 1..50),
        ) {
            let (p, t): (Vec<i32>, Vec<i32>) = labels.into_iter().unzip();
            let a = v_measure(&p, &t).unwrap();
            let b = v_measure(&t, &p).unwrap();
            prop_assert!((a.homogeneity - b.completeness).abs() < 1e-12);
            prop_assert!((a.v - b.v).abs() < 1e-12);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a.v));
        }
    }
}
