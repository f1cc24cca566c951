//! Keypoint evaluation: OKS, COCO-style AP/AR per body part, and MPJPE.
//!
//! Matching and accumulation follow the reference COCO keypoint evaluator step by step
//! (stable score ordering, ignore handling, monotone precision envelope, 101-point recall
//! grid), so results agree with it to rounding.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depth::RootRule;
use crate::dataset::CocoFile;
use crate::error::{read_json, Error, Result};
use crate::types::{BBox, KeypointSchema, Pose};

/// `numpy.spacing(1)`.
const EPS: f64 = f64::EPSILON;
pub const MAX_DETS: usize = 20;
pub const PART_ORDER: [&str; 5] = ["whole", "body", "foot", "face", "hand"];

/// The OKS threshold grid 0.50:0.05:0.95.
pub fn oks_thresholds() -> Vec<f64> {
    linspace(0.5, 0.95, 10)
}

/// The recall grid 0:0.01:1.
pub fn recall_thresholds() -> Vec<f64> {
    linspace(0.0, 1.0, 101)
}

/// Same arithmetic as `numpy.linspace` (so grid points compare identically).
fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    let step = (stop - start) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * step + start).collect();
    v[n - 1] = stop;
    v
}

/// Object keypoint similarity over `slice`, averaged over keypoints labeled in `gt`.
/// `None` when no gt keypoint in the slice is labeled.
pub fn oks(pred: &Pose, gt: &Pose, gt_area: f64, sigmas: &[f64], slice: Range<usize>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in slice {
        if !gt.is_labeled(i) {
            continue;
        }
        let var = (2.0 * sigmas[i]).powi(2);
        let [px, py] = pred.coords[i];
        let [gx, gy] = gt.coords[i];
        let d2 = (px - gx).powi(2) + (py - gy).powi(2);
        sum += (-(d2 / var / (gt_area + EPS) / 2.0)).exp();
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Positive and unique.
    pub id: u64,
    pub image_id: u64,
    pub pose: Pose,
    pub area: f64,
    pub bbox: BBox,
    pub iscrowd: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub pose: Pose,
    pub score: f64,
}

/// Instance score as the mean keypoint confidence over labeled keypoints.
pub fn instance_score(pose: &Pose) -> f64 {
    let Some(s) = &pose.scores else { return 0.0 };
    let (sum, n) = (0..pose.len())
        .filter(|&i| pose.is_labeled(i))
        .fold((0.0, 0usize), |(a, n), i| (a + s[i], n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// OKS of one detection against one gt, with the reference evaluator's fallback for
/// gts with no labeled keypoints (distance to a box three times the gt box).
fn oks_ref(pred: &Pose, gt: &GroundTruth, sigmas: &[f64], slice: &Range<usize>) -> f64 {
    let labeled = slice.clone().filter(|&i| gt.pose.visibility[i] > 0).count();
    let b = &gt.bbox;
    let (x0, x1, y0, y1) = (b.x - b.w, b.x + b.w * 2.0, b.y - b.h, b.y + b.h * 2.0);
    let mut sum = 0.0;
    for i in slice.clone() {
        let var = (2.0 * sigmas[i]).powi(2);
        let [px, py] = pred.coords[i];
        let (dx, dy) = if labeled > 0 {
            if gt.pose.visibility[i] == 0 {
                continue;
            }
            (px - gt.pose.coords[i][0], py - gt.pose.coords[i][1])
        } else {
            (
                (x0 - px).max(0.0) + (px - x1).max(0.0),
                (y0 - py).max(0.0) + (py - y1).max(0.0),
            )
        };
        let e = (dx * dx + dy * dy) / var / (gt.area + EPS) / 2.0;
        sum += (-e).exp();
    }
    let n = if labeled > 0 { labeled } else { slice.len() };
    sum / n as f64
}

/// Stable descending order by score.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

struct ImageEval {
    dt_scores: Vec<f64>,
    /// `[threshold][det]`: matched (to a gt).
    dt_matched: Vec<Vec<bool>>,
    dt_ignore: Vec<Vec<bool>>,
    gt_ignore: Vec<bool>,
}

/// Greedy matching of one image's detections, per threshold.
fn evaluate_image(
    gts: &[&GroundTruth],
    dts: &[&Prediction],
    sigmas: &[f64],
    slice: &Range<usize>,
    thresholds: &[f64],
) -> Option<ImageEval> {
    if gts.is_empty() && dts.is_empty() {
        return None;
    }
    let area_max = 1e5f64.powi(2);
    let gt_ignore_raw: Vec<bool> = gts
        .iter()
        .map(|g| {
            let num_kp = slice.clone().filter(|&i| g.pose.visibility[i] > 0).count();
            g.iscrowd || num_kp == 0 || g.area < 0.0 || g.area > area_max
        })
        .collect();
    // non-ignored gts first, stable
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&i| gt_ignore_raw[i]);
    let gts: Vec<&GroundTruth> = gt_order.iter().map(|&i| gts[i]).collect();
    let gt_ignore: Vec<bool> = gt_order.iter().map(|&i| gt_ignore_raw[i]).collect();

    let order = score_order(&dts.iter().map(|d| d.score).collect::<Vec<_>>());
    let dts: Vec<&Prediction> = order.iter().take(MAX_DETS).map(|&i| dts[i]).collect();
    let ious: Vec<Vec<f64>> = dts
        .iter()
        .map(|d| gts.iter().map(|g| oks_ref(&d.pose, g, sigmas, slice)).collect())
        .collect();

    let (t, g, d) = (thresholds.len(), gts.len(), dts.len());
    let mut gt_matched = vec![vec![false; g]; t];
    let mut dt_matched = vec![vec![false; d]; t];
    let mut dt_ignore = vec![vec![false; d]; t];
    if g > 0 && d > 0 {
        for (ti, &thr) in thresholds.iter().enumerate() {
            for di in 0..d {
                let mut iou = thr.min(1.0 - 1e-10);
                let mut m: Option<usize> = None;
                for gi in 0..g {
                    if gt_matched[ti][gi] && !gts[gi].iscrowd {
                        continue;
                    }
                    if let Some(mi) = m {
                        if !gt_ignore[mi] && gt_ignore[gi] {
                            break;
                        }
                    }
                    if ious[di][gi] < iou {
                        continue;
                    }
                    iou = ious[di][gi];
                    m = Some(gi);
                }
                if let Some(mi) = m {
                    dt_ignore[ti][di] = gt_ignore[mi];
                    dt_matched[ti][di] = true;
                    gt_matched[ti][mi] = true;
                }
            }
        }
    }
    // unmatched detections outside the area range are ignored
    for (di, det) in dts.iter().enumerate() {
        let area = keypoint_extent_area(&det.pose, slice);
        if area < 0.0 || area > area_max {
            for ti in 0..t {
                if !dt_matched[ti][di] {
                    dt_ignore[ti][di] = true;
                }
            }
        }
    }
    Some(ImageEval {
        dt_scores: dts.iter().map(|d| d.score).collect(),
        dt_matched,
        dt_ignore,
        gt_ignore,
    })
}

fn keypoint_extent_area(pose: &Pose, slice: &Range<usize>) -> f64 {
    let pts = &pose.coords[slice.clone()];
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for [x, y] in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    (x1 - x0) * (y1 - y0)
}

/// AP and AR of one keypoint slice. Values are -1 when undefined (no non-ignored gt).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApAr {
    pub ap: f64,
    pub ar: f64,
}

impl ApAr {
    pub fn is_defined(&self) -> bool {
        self.ap >= 0.0 && self.ar >= 0.0
    }
}

/// COCO-style AP/AR over the OKS threshold grid. Images are evaluated in ascending id
/// order; `image_ids` adds images that have no gt (their detections are false positives).
pub fn ap_ar(
    preds: &[Prediction],
    gts: &[GroundTruth],
    image_ids: &[u64],
    sigmas: &[f64],
    slice: Range<usize>,
) -> Result<ApAr> {
    let n = sigmas.len();
    if slice.is_empty() || slice.end > n {
        return Err(Error::invalid(format!("slice {slice:?} for {n} keypoints")));
    }
    for p in preds.iter().map(|p| &p.pose).chain(gts.iter().map(|g| &g.pose)) {
        if p.len() != n {
            return Err(Error::shape(format!("pose with {} keypoints, sigmas for {n}", p.len())));
        }
    }
    let mut images: BTreeMap<u64, (Vec<&GroundTruth>, Vec<&Prediction>)> = BTreeMap::new();
    for id in image_ids {
        images.entry(*id).or_default();
    }
    for g in gts {
        images.entry(g.image_id).or_default().0.push(g);
    }
    for p in preds {
        match images.get_mut(&p.image_id) {
            Some(e) => e.1.push(p),
            None => {
                return Err(Error::invalid(format!(
                    "prediction for image {} which has no ground truth entry",
                    p.image_id
                )))
            }
        }
    }
    let thresholds = oks_thresholds();
    let evals: Vec<ImageEval> = images
        .values()
        .filter_map(|(g, d)| evaluate_image(g, d, sigmas, &slice, &thresholds))
        .collect();
    Ok(accumulate(&evals, &thresholds))
}

fn accumulate(evals: &[ImageEval], thresholds: &[f64]) -> ApAr {
    let rec_thrs = recall_thresholds();
    let scores: Vec<f64> = evals.iter().flat_map(|e| e.dt_scores.iter().copied()).collect();
    let order = score_order(&scores);
    let npig = evals
        .iter()
        .flat_map(|e| e.gt_ignore.iter())
        .filter(|ig| !**ig)
        .count();
    if npig == 0 {
        return ApAr { ap: -1.0, ar: -1.0 };
    }
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    for ti in 0..thresholds.len() {
        let matched: Vec<bool> = evals.iter().flat_map(|e| e.dt_matched[ti].iter().copied()).collect();
        let ignored: Vec<bool> = evals.iter().flat_map(|e| e.dt_ignore[ti].iter().copied()).collect();
        let (mut tp, mut fp) = (0.0, 0.0);
        let mut rc = Vec::with_capacity(order.len());
        let mut pr = Vec::with_capacity(order.len());
        for &i in &order {
            if ignored[i] {
                // cumulative sums still advance by zero at this position
            } else if matched[i] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            rc.push(tp / npig as f64);
            pr.push(tp / (fp + tp + EPS));
        }
        recalls.push(rc.last().copied().unwrap_or(0.0));
        for i in (1..pr.len()).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        for r in &rec_thrs {
            let pi = rc.partition_point(|v| v < r);
            // past the end the remaining grid points keep precision 0
            precisions.push(if pi < pr.len() { pr[pi] } else { 0.0 });
        }
    }
    let mean = |v: &[f64]| {
        let valid: Vec<f64> = v.iter().copied().filter(|x| *x > -1.0).collect();
        if valid.is_empty() {
            -1.0
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        }
    };
    ApAr {
        ap: mean(&precisions),
        ar: mean(&recalls),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartResult {
    pub part: String,
    pub ap: f64,
    pub ar: f64,
    /// Gt instances with at least one labeled keypoint in this part.
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub parts: Vec<PartResult>,
    pub num_gt: usize,
    pub num_pred: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpjpe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpjpe_units: Option<String>,
}

impl EvalReport {
    pub fn part(&self, name: &str) -> Option<&PartResult> {
        self.parts.iter().find(|p| p.part == name)
    }

    /// Aligned text table, one row per metric and one column per part.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}", "");
        for p in &self.parts {
            let _ = write!(s, "{:>10}", p.part);
        }
        s.push('\n');
        for (label, get) in [("AP", 0), ("AR", 1)] {
            let _ = write!(s, "{label:<8}");
            for p in &self.parts {
                let v = if get == 0 { p.ap } else { p.ar };
                if v < 0.0 {
                    let _ = write!(s, "{:>10}", "n/a");
                } else {
                    let _ = write!(s, "{v:>10.4}");
                }
            }
            s.push('\n');
        }
        if let Some(m) = self.mpjpe {
            let units = self.mpjpe_units.as_deref().unwrap_or("input units");
            let _ = writeln!(s, "MPJPE   {m:.6} ({units})");
        }
        s
    }
}

/// AP/AR for the whole layout and each body part, in the order whole, body, foot, face,
/// hand. Each part is scored with only its own keypoints and sigmas.
pub fn per_part_report(
    preds: &[Prediction],
    gts: &[GroundTruth],
    image_ids: &[u64],
    schema: &KeypointSchema,
) -> Result<EvalReport> {
    let mut parts = Vec::new();
    for name in PART_ORDER {
        let slice = if name == "whole" {
            0..schema.size()
        } else {
            schema.part_slice(name)?
        };
        let r = ap_ar(preds, gts, image_ids, schema.sigmas(), slice.clone())?;
        let num_gt = gts
            .iter()
            .filter(|g| slice.clone().any(|i| g.pose.is_labeled(i)))
            .count();
        parts.push(PartResult {
            part: name.to_string(),
            ap: r.ap,
            ar: r.ar,
            num_gt,
        });
    }
    Ok(EvalReport {
        parts,
        num_gt: gts.len(),
        num_pred: preds.len(),
        mpjpe: None,
        mpjpe_units: None,
    })
}

/// Mean Euclidean joint error over labeled joints. With `root_align`, each pose is first
/// translated so its root (resolved on the labeled joints) sits at the origin.
pub fn mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]], labeled: &[bool], root_align: Option<&RootRule>) -> Result<f64> {
    if pred.len() != gt.len() || labeled.len() != gt.len() {
        return Err(Error::shape(format!(
            "mpjpe: {} predicted, {} gt joints, {} flags",
            pred.len(),
            gt.len(),
            labeled.len()
        )));
    }
    let n = labeled.iter().filter(|l| **l).count();
    if n == 0 {
        return Err(Error::invalid("mpjpe needs at least one labeled joint"));
    }
    let root = |p: &[[f64; 3]]| -> Result<[f64; 3]> {
        let Some(rule) = root_align else {
            return Ok([0.0; 3]);
        };
        let mut r = [0.0; 3];
        for (a, slot) in r.iter_mut().enumerate() {
            let axis: Vec<f64> = p.iter().map(|j| j[a]).collect();
            *slot = rule
                .resolve(&axis, labeled)
                .ok_or_else(|| Error::invalid("no root joint for alignment"))?
                .0;
        }
        Ok(r)
    };
    let (rp, rg) = (root(pred)?, root(gt)?);
    let mut sum = 0.0;
    for i in (0..gt.len()).filter(|&i| labeled[i]) {
        let d2: f64 = (0..3)
            .map(|a| ((pred[i][a] - rp[a]) - (gt[i][a] - rg[a])).powi(2))
            .sum();
        sum += d2.sqrt();
    }
    Ok(sum / n as f64)
}

/// Ground truth instances and the image id list of a COCO-style file.
pub fn ground_truth_from_coco(file: &CocoFile, schema: &KeypointSchema) -> Result<(Vec<GroundTruth>, Vec<u64>)> {
    let mut gts = Vec::with_capacity(file.annotations.len());
    for (i, a) in file.annotations.iter().enumerate() {
        let src = a.to_instance(schema.name(), "")?;
        if src.instance.pose.len() != schema.size() {
            return Err(Error::Schema(format!(
                "annotation {}: {} keypoints, schema '{}' has {}",
                a.id,
                src.instance.pose.len(),
                schema.name(),
                schema.size()
            )));
        }
        let [x, y, w, h] = a.bbox;
        gts.push(GroundTruth {
            id: if a.id > 0 { a.id } else { i as u64 + 1 },
            image_id: a.image_id,
            pose: src.instance.pose,
            area: a.area,
            bbox: BBox { x, y, w, h },
            iscrowd: a.iscrowd != 0,
        });
    }
    let ids = file
        .images
        .iter()
        .filter_map(|im| im.get("id").and_then(|v| v.as_u64()))
        .collect();
    Ok((gts, ids))
}

/// A keypoint detection result: `[x, y, confidence]` per keypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    #[serde(default = "one")]
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    /// Mean keypoint confidence when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

fn one() -> u64 {
    1
}

impl PredictionRecord {
    pub fn to_prediction(&self, size: usize) -> Result<Prediction> {
        if self.keypoints.len() != 3 * size {
            return Err(Error::Schema(format!(
                "prediction for image {}: {} values, expected {}",
                self.image_id,
                self.keypoints.len(),
                3 * size
            )));
        }
        let coords = self.keypoints.chunks_exact(3).map(|c| [c[0], c[1]]).collect();
        let mut pose = Pose::visible(coords);
        pose.scores = Some(self.keypoints.chunks_exact(3).map(|c| c[2]).collect());
        let score = self.score.unwrap_or_else(|| instance_score(&pose));
        Ok(Prediction {
            image_id: self.image_id,
            pose,
            score,
        })
    }

    pub fn from_prediction(p: &Prediction) -> Self {
        let scores = p.pose.scores.clone().unwrap_or_else(|| vec![1.0; p.pose.len()]);
        PredictionRecord {
            image_id: p.image_id,
            category_id: 1,
            keypoints: p
                .pose
                .coords
                .iter()
                .zip(&scores)
                .flat_map(|(c, s)| [c[0], c[1], *s])
                .collect(),
            score: Some(p.score),
        }
    }
}

pub fn read_predictions(path: impl AsRef<Path>, size: usize) -> Result<Vec<Prediction>> {
    let recs: Vec<PredictionRecord> = read_json(path)?;
    recs.iter().map(|r| r.to_prediction(size)).collect()
}
