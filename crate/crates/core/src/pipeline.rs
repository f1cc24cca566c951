//! Top-down inference over a frame stream.
//!
//! The detector runs every `detect_interval` frames. In between, each instance's box is
//! rebuilt from the extent of its previous keypoints. Every box is cropped to the model
//! input, decoded, mapped back to image coordinates, filtered by OKS-based pose NMS and
//! temporally smoothed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::instance_score;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::types::{BBox, Pose};

pub const DEFAULT_SCORE_FLOOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SmootherConfig {
    None,
    Ema { alpha: f64 },
    OneEuro { min_cutoff: f64, beta: f64 },
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig::OneEuro {
            min_cutoff: 1.0,
            beta: 0.007,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub detect_interval: usize,
    pub bbox_padding: f64,
    pub nms_oks_thr: f64,
    pub smoother: SmootherConfig,
    /// Frame rate assumed by the one-euro filter.
    pub fps: f64,
    /// Keypoints at or below this score do not contribute to tracking boxes.
    pub score_floor: f64,
    pub input_w: usize,
    pub input_h: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            detect_interval: 1,
            bbox_padding: 1.25,
            nms_oks_thr: 0.9,
            smoother: SmootherConfig::default(),
            fps: 30.0,
            score_floor: DEFAULT_SCORE_FLOOR,
            input_w: 48,
            input_h: 64,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.detect_interval == 0 {
            return bad("detect_interval must be at least 1".into());
        }
        if !(self.bbox_padding >= 1.0) {
            return bad(format!("bbox_padding must be >= 1, got {}", self.bbox_padding));
        }
        if !(self.nms_oks_thr > 0.0 && self.nms_oks_thr <= 1.0) {
            return bad(format!("nms_oks_thr must be in (0, 1], got {}", self.nms_oks_thr));
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.input_w == 0 || self.input_h == 0 {
            return bad("input size must be positive".into());
        }
        match self.smoother {
            SmootherConfig::Ema { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                bad(format!("ema alpha must be in (0, 1], got {alpha}"))
            }
            SmootherConfig::OneEuro { min_cutoff, beta } if !(min_cutoff > 0.0 && beta >= 0.0) => {
                bad(format!("one-euro parameters ({min_cutoff}, {beta})"))
            }
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------------------
// Geometry

/// Affine map from image to patch coordinates: `p = s·(q − c) + o`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub scale: f64,
    pub center: [f64; 2],
    pub offset: [f64; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            scale: 1.0,
            center: [0.0, 0.0],
            offset: [0.0, 0.0],
        }
    }

    pub fn apply(&self, q: [f64; 2]) -> [f64; 2] {
        [
            self.scale * (q[0] - self.center[0]) + self.offset[0],
            self.scale * (q[1] - self.center[1]) + self.offset[1],
        ]
    }

    pub fn invert(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        if !(self.scale != 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("singular transform (scale {})", self.scale)));
        }
        Ok([
            (p[0] - self.offset[0]) / self.scale + self.center[0],
            (p[1] - self.offset[1]) / self.scale + self.center[1],
        ])
    }
}

/// Crop the padded box to an `out_w × out_h` patch with bilinear sampling.
///
/// The box keeps its center; its shorter side (relative to the patch aspect) is extended
/// so the aspect matches. Samples outside the image are zero.
pub fn affine_crop(
    image: &Tensor,
    bbox: &BBox,
    out_w: usize,
    out_h: usize,
    padding: f64,
) -> Result<(Tensor, AffineTransform)> {
    if !bbox.is_valid() {
        return Err(Error::invalid(format!("degenerate bbox {:?}", bbox.to_array())));
    }
    if out_w == 0 || out_h == 0 || !(padding > 0.0) {
        return Err(Error::invalid("crop size and padding must be positive"));
    }
    let (c, h, w) = image.dims3()?;
    let aspect = out_w as f64 / out_h as f64;
    let (bw, bh) = (bbox.w * padding, bbox.h * padding);
    let bw = bw.max(bh * aspect);
    let t = AffineTransform {
        scale: out_w as f64 / bw,
        center: bbox.center(),
        offset: [out_w as f64 / 2.0, out_h as f64 / 2.0],
    };
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let src = image.data();
    let plane = h * w;
    for v in 0..out_h {
        for u in 0..out_w {
            let [x, y] = t.invert([u as f64, v as f64])?;
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut taps = [(0usize, 0.0f64); 4];
            let mut n = 0;
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let (xi, yi) = (x0 + dx, y0 + dy);
                    if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h && wx * wy > 0.0 {
                        taps[n] = (yi as usize * w + xi as usize, wx * wy);
                        n += 1;
                    }
                }
            }
            for ch in 0..c {
                let s: f64 = taps[..n].iter().map(|(i, wt)| wt * src[ch * plane + i]).sum();
                out.data_mut()[(ch * out_h + v) * out_w + u] = s;
            }
        }
    }
    Ok((out, t))
}

/// Map a patch-space pose back to image coordinates. Visibility and scores are kept.
pub fn invert_transform(pose: &Pose, t: &AffineTransform) -> Result<Pose> {
    let mut out = pose.clone();
    for c in out.coords.iter_mut() {
        *c = t.invert(*c)?;
    }
    Ok(out)
}

/// Bounds of the keypoints scoring above `floor`, scaled by `padding` about the center.
/// `None` when no keypoint qualifies or the bounds are degenerate.
pub fn bbox_from_keypoints(pose: &Pose, padding: f64, floor: f64) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut any = false;
    for i in 0..pose.len() {
        let ok = match &pose.scores {
            Some(s) => s[i] > floor,
            None => pose.is_labeled(i),
        };
        let [x, y] = pose.coords[i];
        if !ok || !x.is_finite() || !y.is_finite() {
            continue;
        }
        any = true;
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !any {
        return None;
    }
    let b = BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
    .scaled(padding);
    b.is_valid().then_some(b)
}

// ---------------------------------------------------------------------------------------
// Pose NMS

fn extent_area(p: &Pose) -> f64 {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for [x, y] in &p.coords {
        x0 = x0.min(*x);
        y0 = y0.min(*y);
        x1 = x1.max(*x);
        y1 = y1.max(*y);
    }
    if p.coords.is_empty() {
        0.0
    } else {
        (x1 - x0) * (y1 - y0)
    }
}

/// Symmetric OKS between two predicted poses, over all keypoints, with the mean of their
/// keypoint-extent areas as scale.
pub fn pose_oks(a: &Pose, b: &Pose, sigmas: &[f64]) -> f64 {
    let area = 0.5 * (extent_area(a) + extent_area(b));
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        let var = (2.0 * sigmas[i]).powi(2);
        let d2 = (a.coords[i][0] - b.coords[i][0]).powi(2) + (a.coords[i][1] - b.coords[i][1]).powi(2);
        sum += (-(d2 / var / (area + f64::EPSILON) / 2.0)).exp();
    }
    sum / n as f64
}

/// Greedy OKS NMS. Returns kept indices in descending score order (ties: lower index
/// first).
pub fn pose_nms(poses: &[Pose], scores: &[f64], sigmas: &[f64], oks_thr: f64) -> Result<Vec<usize>> {
    if poses.len() != scores.len() {
        return Err(Error::shape(format!("{} poses, {} scores", poses.len(), scores.len())));
    }
    let mut order: Vec<usize> = (0..poses.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| pose_oks(&poses[i], &poses[k], sigmas) < oks_thr) {
            kept.push(i);
        }
    }
    Ok(kept)
}

// ---------------------------------------------------------------------------------------
// Smoothing

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SmootherState {
    prev: Option<Vec<[f64; 2]>>,
    deriv: Vec<[f64; 2]>,
}

fn lowpass_alpha(cutoff: f64, fps: f64) -> f64 {
    let tau = 1.0 / (2.0 * std::f64::consts::PI * cutoff);
    let te = 1.0 / fps;
    1.0 / (1.0 + tau / te)
}

/// Smooth one instance's keypoints. The first frame passes through unchanged.
pub fn smooth(pose: &Pose, state: &mut SmootherState, cfg: &SmootherConfig, fps: f64) -> Pose {
    let mut out = pose.clone();
    let prev = match (&state.prev, cfg) {
        (_, SmootherConfig::None) => return out,
        (Some(p), _) if p.len() == pose.len() => p.clone(),
        _ => {
            state.prev = Some(pose.coords.clone());
            state.deriv = vec![[0.0; 2]; pose.len()];
            return out;
        }
    };
    for (i, c) in out.coords.iter_mut().enumerate() {
        for a in 0..2 {
            let x = c[a];
            let xp = prev[i][a];
            c[a] = match *cfg {
                SmootherConfig::Ema { alpha } => alpha * x + (1.0 - alpha) * xp,
                SmootherConfig::OneEuro { min_cutoff, beta } => {
                    let dx = (x - xp) * fps;
                    let ad = lowpass_alpha(1.0, fps);
                    let d = ad * dx + (1.0 - ad) * state.deriv[i][a];
                    state.deriv[i][a] = d;
                    let cutoff = min_cutoff + beta * d.abs();
                    let ax = lowpass_alpha(cutoff, fps);
                    ax * x + (1.0 - ax) * xp
                }
                SmootherConfig::None => x,
            };
        }
    }
    state.prev = Some(out.coords.clone());
    out
}

// ---------------------------------------------------------------------------------------
// Pipeline

/// A model taking a cropped patch to a pose in patch coordinates.
///
/// `transform` maps image to patch coordinates for the current crop; learned models can
/// ignore it.
pub trait PoseEstimator {
    fn estimate(&self, patch: &Tensor, transform: &AffineTransform) -> Result<Pose>;
}

impl PoseEstimator for Model {
    fn estimate(&self, patch: &Tensor, _transform: &AffineTransform) -> Result<Pose> {
        self.predict(patch)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineState {
    pub frame_counter: u64,
    pub bboxes: Vec<BBox>,
    pub smoothers: Vec<SmootherState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutput {
    pub pose: Pose,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutput {
    pub frame: u64,
    pub detector_called: bool,
    /// Boxes fed to the cropper, in list order.
    pub crop_boxes: Vec<BBox>,
    pub instances: Vec<InstanceOutput>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub sigmas: Vec<f64>,
    pub state: PipelineState,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, sigmas: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            cfg,
            sigmas,
            state: PipelineState::default(),
        })
    }

    pub fn should_detect(&self, frame_index: u64) -> bool {
        frame_index.is_multiple_of(self.cfg.detect_interval as u64)
    }

    /// Process one frame. The detector is called iff `frame_index` is a multiple of the
    /// detection interval; its boxes replace the tracked list wholesale.
    pub fn step<D, E>(&mut self, frame_index: u64, image: &Tensor, detector: D, model: &E) -> Result<FrameOutput>
    where
        D: FnOnce(&Tensor) -> Vec<BBox>,
        E: PoseEstimator + ?Sized,
    {
        let detector_called = self.should_detect(frame_index);
        if detector_called {
            self.state.bboxes = detector(image).into_iter().filter(|b| b.is_valid()).collect();
        }
        let crop_boxes = self.state.bboxes.clone();
        let mut poses = Vec::with_capacity(crop_boxes.len());
        for b in &crop_boxes {
            let (patch, t) = affine_crop(image, b, self.cfg.input_w, self.cfg.input_h, self.cfg.bbox_padding)?;
            let p = model.estimate(&patch, &t)?;
            poses.push(invert_transform(&p, &t)?);
        }
        let scores: Vec<f64> = poses.iter().map(instance_score).collect();
        let mut kept = pose_nms(&poses, &scores, &self.sigmas, self.cfg.nms_oks_thr)?;
        // instances keep their list positions
        kept.sort_unstable();
        self.state.smoothers.resize(kept.len(), SmootherState::default());
        let mut instances = Vec::with_capacity(kept.len());
        for (slot, &i) in kept.iter().enumerate() {
            let pose = smooth(&poses[i], &mut self.state.smoothers[slot], &self.cfg.smoother, self.cfg.fps);
            instances.push(InstanceOutput {
                pose,
                score: scores[i],
            });
        }
        let mut next = Vec::new();
        let mut smoothers = Vec::new();
        for (inst, st) in instances.iter().zip(&self.state.smoothers) {
            if let Some(b) = bbox_from_keypoints(&inst.pose, self.cfg.bbox_padding, self.cfg.score_floor) {
                next.push(b);
                smoothers.push(st.clone());
            }
        }
        self.state.bboxes = next;
        self.state.smoothers = smoothers;
        self.state.frame_counter += 1;
        Ok(FrameOutput {
            frame: frame_index,
            detector_called,
            crop_boxes,
            instances,
        })
    }
}

// ---------------------------------------------------------------------------------------
// Trace simulation

/// Per-frame synthetic detections and ground truth poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub detections: Vec<[f64; 4]>,
    pub poses: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub width: usize,
    pub height: usize,
    pub num_keypoints: usize,
    pub frames: Vec<TraceFrame>,
}

/// Stands in for a trained model: returns the ground-truth pose nearest the crop center,
/// projected into the patch, with deterministic noise. Keypoints outside the patch are
/// clamped to its border and scored low.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    pub poses: Vec<Vec<[f64; 2]>>,
    pub num_keypoints: usize,
    pub noise: f64,
    pub seed: u64,
    pub input_w: usize,
    pub input_h: usize,
}

impl PoseEstimator for OracleEstimator {
    fn estimate(&self, _patch: &Tensor, t: &AffineTransform) -> Result<Pose> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let (w, h) = (self.input_w as f64, self.input_h as f64);
        let center = [w / 2.0, h / 2.0];
        let projected: Vec<Vec<[f64; 2]>> = self
            .poses
            .iter()
            .map(|p| p.iter().map(|q| t.apply(*q)).collect())
            .collect();
        let dist = |p: &[[f64; 2]]| {
            let n = p.len().max(1) as f64;
            let cx = p.iter().map(|q| q[0]).sum::<f64>() / n;
            let cy = p.iter().map(|q| q[1]).sum::<f64>() / n;
            (cx - center[0]).powi(2) + (cy - center[1]).powi(2)
        };
        let Some(best) = projected
            .iter()
            .min_by(|a, b| dist(a).total_cmp(&dist(b)))
        else {
            let k = self.num_keypoints;
            let mut p = Pose::visible(vec![center; k]);
            p.scores = Some(vec![0.0; k]);
            return Ok(p);
        };
        // noise stream keyed by the crop so results do not depend on call order
        let key = t.center[0].to_bits() ^ t.center[1].to_bits().rotate_left(21) ^ t.scale.to_bits().rotate_left(42);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ key);
        let normal = Normal::new(0.0, self.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
        let mut coords = Vec::with_capacity(best.len());
        let mut scores = Vec::with_capacity(best.len());
        for q in best {
            let (nx, ny) = if self.noise > 0.0 {
                (normal.sample(&mut rng), normal.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            let (x, y) = (q[0] + nx, q[1] + ny);
            let inside = x >= 0.0 && y >= 0.0 && x < w && y < h;
            coords.push([x.clamp(0.0, w - 0.5), y.clamp(0.0, h - 0.5)]);
            scores.push(if inside { 0.9 } else { 0.1 });
        }
        let mut p = Pose::visible(coords);
        p.scores = Some(scores);
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub frames: Vec<FrameOutput>,
    pub detector_calls: usize,
    /// Mean distance from each output keypoint to the nearest ground-truth instance's
    /// keypoint, over all frames.
    pub mean_error: Option<f64>,
}

/// Replay a trace through the pipeline with the oracle estimator.
pub fn simulate(trace: &Trace, cfg: PipelineConfig, sigmas: Vec<f64>, noise: f64, seed: u64) -> Result<SimulationResult> {
    if sigmas.len() != trace.num_keypoints {
        return Err(Error::shape(format!(
            "{} sigmas for {} keypoints",
            sigmas.len(),
            trace.num_keypoints
        )));
    }
    let image = Tensor::zeros(&[1, trace.height, trace.width]);
    let mut pipe = Pipeline::new(cfg.clone(), sigmas)?;
    let mut frames = Vec::with_capacity(trace.frames.len());
    let mut calls = 0;
    let (mut err_sum, mut err_n) = (0.0, 0usize);
    for (i, f) in trace.frames.iter().enumerate() {
        if f.poses.iter().any(|p| p.len() != trace.num_keypoints) {
            return Err(Error::shape(format!("frame {i}: pose length differs from num_keypoints")));
        }
        let est = OracleEstimator {
            poses: f.poses.clone(),
            num_keypoints: trace.num_keypoints,
            noise,
            seed: seed.wrapping_add(i as u64),
            input_w: cfg.input_w,
            input_h: cfg.input_h,
        };
        let dets: Vec<BBox> = f
            .detections
            .iter()
            .map(|d| BBox {
                x: d[0],
                y: d[1],
                w: d[2],
                h: d[3],
            })
            .collect();
        let out = pipe.step(
            i as u64,
            &image,
            |_| {
                calls += 1;
                dets
            },
            &est,
        )?;
        for inst in &out.instances {
            let best = f
                .poses
                .iter()
                .map(|g| {
                    g.iter()
                        .zip(&inst.pose.coords)
                        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                        .sum::<f64>()
                        / g.len().max(1) as f64
                })
                .min_by(f64::total_cmp);
            if let Some(e) = best {
                err_sum += e;
                err_n += 1;
            }
        }
        frames.push(out);
    }
    Ok(SimulationResult {
        frames,
        detector_calls: calls,
        mean_error: (err_n > 0).then(|| err_sum / err_n as f64),
    })
}

/// A trace of people walking in straight lines, with a detection box per person on every
/// frame.
pub fn synthetic_trace(num_frames: usize, people: usize, num_keypoints: usize, seed: u64) -> Trace {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (320usize, 240usize);
    type Walker = (Vec<[f64; 2]>, [f64; 2], [f64; 2]);
    let shapes: Vec<Walker> = (0..people)
        .map(|_| {
            let start = [rng.random_range(60.0..260.0), rng.random_range(60.0..180.0)];
            let vel = [rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0)];
            let offs = (0..num_keypoints)
                .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-35.0..35.0)])
                .collect();
            (offs, start, vel)
        })
        .collect();
    let frames = (0..num_frames)
        .map(|f| {
            let poses: Vec<Vec<[f64; 2]>> = shapes
                .iter()
                .map(|(offs, s, v)| {
                    offs.iter()
                        .map(|o| [s[0] + v[0] * f as f64 + o[0], s[1] + v[1] * f as f64 + o[1]])
                        .collect()
                })
                .collect();
            let detections = poses
                .iter()
                .map(|p| {
                    let b = bbox_from_keypoints(&Pose::visible(p.clone()), 1.0, 0.0).expect("spread keypoints");
                    [b.x, b.y, b.w, b.h]
                })
                .collect();
            TraceFrame { detections, poses }
        })
        .collect();
    Trace {
        width: w,
        height: h,
        num_keypoints,
        frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn crop_corners_and_padding() {
        let img = Tensor::zeros(&[3, 100, 100]);
        let b = BBox::new(10.0, 20.0, 30.0, 40.0).unwrap();
        let (_, t) = affine_crop(&img, &b, 48, 64, 1.0).unwrap();
        let tl = t.apply([10.0, 20.0]);
        let br = t.apply([40.0, 60.0]);
        assert!(tl[0].abs() < 1e-12 && tl[1].abs() < 1e-12);
        assert!((br[0] - 48.0).abs() < 1e-12 && (br[1] - 64.0).abs() < 1e-12);

        let (_, t) = affine_crop(&img, &b, 48, 64, 1.25).unwrap();
        let span = t.apply([40.0, 60.0])[1] - t.apply([10.0, 20.0])[1];
        assert!((span / 64.0 - 0.8).abs() < 1e-12);
        assert!(affine_crop(&img, &BBox { x: 0.0, y: 0.0, w: 0.0, h: 5.0 }, 48, 64, 1.0).is_err());
    }

    #[test]
    fn crop_samples_the_image() {
        // a horizontal ramp stays a ramp under a pure scale
        let mut img = Tensor::zeros(&[1, 40, 40]);
        for y in 0..40 {
            for x in 0..40 {
                img.data_mut()[y * 40 + x] = x as f64;
            }
        }
        let b = BBox::new(10.0, 10.0, 16.0, 16.0).unwrap();
        let (patch, t) = affine_crop(&img, &b, 8, 8, 1.0).unwrap();
        for u in 0..8 {
            let want = t.invert([u as f64, 3.0]).unwrap()[0];
            assert!((patch.data()[3 * 8 + u] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bbox_examples() {
        let mut p = Pose::visible(vec![[10.0, 30.0], [20.0, 50.0], [15.0, 40.0]]);
        p.scores = Some(vec![0.9, 0.8, 0.7]);
        let b = bbox_from_keypoints(&p, 1.0, 0.3).unwrap();
        assert_eq!(b.to_array(), [10.0, 30.0, 10.0, 20.0]);
        let b = bbox_from_keypoints(&p, 1.25, 0.3).unwrap();
        assert_eq!(b.to_array(), [8.75, 27.5, 12.5, 25.0]);
        p.scores = Some(vec![0.1, 0.2, 0.3]);
        assert!(bbox_from_keypoints(&p, 1.0, 0.3).is_none());
    }

    #[test]
    fn nms_examples() {
        let s = vec![0.05; 3];
        let a = Pose::visible(vec![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]);
        assert_eq!(pose_nms(std::slice::from_ref(&a), &[0.5], &s, 0.9).unwrap(), vec![0]);
        assert_eq!(pose_nms(&[a.clone(), a.clone()], &[0.9, 0.8], &s, 0.9).unwrap(), vec![0]);
        assert_eq!(pose_nms(&[a.clone(), a.clone()], &[0.8, 0.8], &s, 0.9).unwrap(), vec![0]);
        assert!(pose_nms(&[a], &[], &s, 0.9).is_err());
    }

    #[test]
    fn smoother_examples() {
        let p = |x: f64| Pose::visible(vec![[x, 2.0 * x]]);
        let ema = SmootherConfig::Ema { alpha: 0.5 };
        let mut st = SmootherState::default();
        assert_eq!(smooth(&p(0.0), &mut st, &ema, 30.0).coords[0], [0.0, 0.0]);
        assert_eq!(smooth(&p(1.0), &mut st, &ema, 30.0).coords[0], [0.5, 1.0]);

        let ident = SmootherConfig::Ema { alpha: 1.0 };
        let mut st = SmootherState::default();
        for x in [3.0, -1.0, 7.5] {
            assert_eq!(smooth(&p(x), &mut st, &ident, 30.0).coords[0], [x, 2.0 * x]);
        }
        for cfg in [ema, SmootherConfig::default()] {
            let mut st = SmootherState::default();
            for _ in 0..5 {
                assert_eq!(smooth(&p(4.0), &mut st, &cfg, 30.0).coords[0], [4.0, 8.0]);
            }
        }
        // one-euro lags a step change but moves toward it
        let mut st = SmootherState::default();
        let cfg = SmootherConfig::default();
        smooth(&p(0.0), &mut st, &cfg, 30.0);
        let y = smooth(&p(10.0), &mut st, &cfg, 30.0).coords[0][0];
        assert!(y > 0.0 && y < 10.0);
    }

    #[test]
    fn scheduling_examples() {
        let trace = synthetic_trace(6, 2, 5, 1);
        for (k, calls) in [(1, 6), (3, 2)] {
            let cfg = PipelineConfig {
                detect_interval: k,
                ..Default::default()
            };
            let r = simulate(&trace, cfg, vec![0.05; 5], 0.5, 7).unwrap();
            assert_eq!(r.detector_calls, calls);
            let called: Vec<u64> = r.frames.iter().filter(|f| f.detector_called).map(|f| f.frame).collect();
            if k == 3 {
                assert_eq!(called, vec![0, 3]);
            }
        }
    }

    #[test]
    fn pure_without_smoothing() {
        let trace = synthetic_trace(8, 3, 6, 2);
        let cfg = PipelineConfig {
            smoother: SmootherConfig::None,
            ..Default::default()
        };
        let a = simulate(&trace, cfg.clone(), vec![0.05; 6], 1.0, 3).unwrap();
        let b = simulate(&trace, cfg, vec![0.05; 6], 1.0, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.mean_error.unwrap() < 5.0);
    }

    proptest! {
        #[test]
        fn affine_round_trip(
            x in -100.0f64..500.0, y in -100.0f64..500.0, w in 1.0f64..300.0, h in 1.0f64..300.0,
            px in -50.0f64..600.0, py in -50.0f64..600.0, pad in 1.0f64..2.0,
        ) {
            let img = Tensor::zeros(&[1, 2, 2]);
            let (_, t) = affine_crop(&img, &BBox::new(x, y, w, h).unwrap(), 12, 16, pad).unwrap();
            let back = t.invert(t.apply([px, py])).unwrap();
            prop_assert!((back[0] - px).abs() < 1e-6 && (back[1] - py).abs() < 1e-6);
        }
    }
}
