//! Center-distance matching, average precision, true-positive errors and the
//! NDS* aggregate `(3 mAP + Σ (1 - min(1, mTP))) / 6` over mATE, mASE, mAOE.
//!
//! AP follows the nuScenes recipe in simplified form: greedy matching per
//! distance threshold, precision envelope sampled at 101 recall points, no
//! minimum-recall or minimum-precision cropping.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::Box3D;

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Distance threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;
const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: Box3D, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::param("score", format!("must lie in [0, 1], got {score}")));
        }
        Ok(Self { bbox, score })
    }
}

/// Outcome of greedy matching at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Detection indices in the order they were processed (descending score).
    pub order: Vec<usize>,
    /// For each processed detection, the matched ground-truth index.
    pub matched: Vec<Option<usize>>,
    pub num_gt: usize,
}

impl Matching {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.order
            .iter()
            .zip(&self.matched)
            .filter_map(|(&d, m)| m.map(|g| (d, g)))
    }

    pub fn true_positives(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

/// Detections sorted by descending score; equal scores keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Each detection, highest score first, takes the nearest unmatched
/// ground truth of its class within `threshold` meters in the ground plane.
pub fn match_detections(dets: &[Detection], gts: &[Box3D], threshold: f64) -> Matching {
    let order = score_order(dets);
    let mut taken = vec![false; gts.len()];
    let matched = order
        .iter()
        .map(|&d| {
            let det = &dets[d].bbox;
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.class_id != det.class_id {
                    continue;
                }
                let dist = det.center.bev_distance(&gt.center);
                if dist <= threshold && best.is_none_or(|(b, _)| dist < b) {
                    best = Some((dist, g));
                }
            }
            best.map(|(_, g)| {
                taken[g] = true;
                g
            })
        })
        .collect();
    Matching {
        order,
        matched,
        num_gt: gts.len(),
    }
}

/// Area under the interpolated precision/recall curve sampled at 101 recall
/// levels. Zero when there are no ground truths or no detections.
pub fn average_precision(m: &Matching) -> f64 {
    if m.num_gt == 0 || m.order.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(m.matched.len());
    for (i, hit) in m.matched.iter().enumerate() {
        if hit.is_some() {
            tp += 1;
        }
        curve.push((tp as f64 / m.num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // precision envelope: best precision at any recall >= r
    let mut envelope = vec![0.0; curve.len()];
    let mut best = 0.0f64;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].1);
        envelope[i] = best;
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while j < curve.len() && curve[j].0 < r - 1e-12 {
            j += 1;
        }
        if j == curve.len() {
            break;
        }
        sum += envelope[j];
    }
    sum / RECALL_POINTS as f64
}

/// Axis-aligned IoU of two boxes moved to a common center and heading.
pub fn size_aligned_iou(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let va: f64 = a.iter().product();
    let vb: f64 = b.iter().product();
    inter / (va + vb - inter)
}

/// Absolute heading difference wrapped to `[0, π]`.
pub fn yaw_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        2.0 * PI - d
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    /// Mean ground-plane center distance, meters.
    pub mate: f64,
    /// Mean `1 - IoU` after aligning centers and headings.
    pub mase: f64,
    /// Mean wrapped heading error divided by π.
    pub maoe: f64,
}

impl TpErrors {
    pub const NONE_MATCHED: Self = Self {
        mate: 1.0,
        mase: 1.0,
        maoe: 1.0,
    };
}

pub fn tp_errors(m: &Matching, dets: &[Detection], gts: &[Box3D]) -> TpErrors {
    let mut n = 0usize;
    let (mut te, mut se, mut oe) = (0.0, 0.0, 0.0);
    for (d, g) in m.pairs() {
        let (a, b) = (&dets[d].bbox, &gts[g]);
        te += a.center.bev_distance(&b.center);
        se += 1.0 - size_aligned_iou(&a.size, &b.size);
        oe += yaw_difference(a.yaw, b.yaw) / PI;
        n += 1;
    }
    if n == 0 {
        return TpErrors::NONE_MATCHED;
    }
    let n = n as f64;
    TpErrors {
        mate: te / n,
        mase: se / n,
        maoe: oe / n,
    }
}

/// `(3 mAP + Σ (1 - min(1, mTP))) / 6` over exactly three error terms.
pub fn nds_star(map: f64, mtps: &[f64]) -> Result<f64> {
    if mtps.len() != 3 {
        return Err(Error::Arity {
            expected: 3,
            got: mtps.len(),
        });
    }
    if !(0.0..=1.0).contains(&map) {
        return Err(Error::param("mAP", format!("must lie in [0, 1], got {map}")));
    }
    let tp: f64 = mtps.iter().map(|e| 1.0 - e.min(1.0)).sum();
    Ok((3.0 * map + tp) / 6.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub class_id: usize,
    pub threshold: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mATE")]
    pub mate: f64,
    #[serde(rename = "mASE")]
    pub mase: f64,
    #[serde(rename = "mAOE")]
    pub maoe: f64,
    pub nds_star: f64,
    pub ap_table: Vec<ThresholdAp>,
}

/// Full evaluation over `classes`: AP per class and threshold, TP errors at
/// [`TP_THRESHOLD`], each averaged over classes.
pub fn evaluate(dets: &[Detection], gts: &[Box3D], classes: &[usize], thresholds: &[f64]) -> Result<MetricsReport> {
    if classes.is_empty() || thresholds.is_empty() {
        return Err(Error::param("evaluate", "need at least one class and one threshold"));
    }
    if thresholds.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::param("thresholds", "must be positive"));
    }
    let mut ap_table = Vec::new();
    let mut map = 0.0;
    let mut errs = [0.0; 3];
    for &c in classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.bbox.class_id == c).copied().collect();
        let cg: Vec<Box3D> = gts.iter().filter(|g| g.class_id == c).copied().collect();
        let mut class_ap = 0.0;
        for &t in thresholds {
            let ap = average_precision(&match_detections(&cd, &cg, t));
            ap_table.push(ThresholdAp {
                class_id: c,
                threshold: t,
                ap,
            });
            class_ap += ap;
        }
        map += class_ap / thresholds.len() as f64;
        let e = tp_errors(&match_detections(&cd, &cg, TP_THRESHOLD), &cd, &cg);
        errs[0] += e.mate;
        errs[1] += e.mase;
        errs[2] += e.maoe;
    }
    let k = classes.len() as f64;
    let map = map / k;
    let [mate, mase, maoe] = errs.map(|e| e / k);
    Ok(MetricsReport {
        map,
        mate,
        mase,
        maoe,
        nds_star: nds_star(map, &[mate, mase, maoe])?,
        ap_table,
    })
}
