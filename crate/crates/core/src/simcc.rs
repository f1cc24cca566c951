//! Coordinate classification codec.
//!
//! Each axis of the input patch is split into `k` bins per pixel. A keypoint becomes one
//! Gaussian-smoothed label row per axis, and decoding takes the arg-max bin of each row.
//! Depth is encoded the same way over a fixed root-relative range.

use serde::{Deserialize, Serialize};

use crate::depth::RootRule;
use crate::error::{Error, Result};
use crate::tensor::{softmax_temp, Tensor};
use crate::types::{Pose, VISIBLE};

/// Label geometry of the codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCCLabelSpec {
    pub input_w: usize,
    pub input_h: usize,
    pub split_ratio: f64,
    /// Overrides for the per-axis smoothing widths, in bins.
    #[serde(default)]
    pub sigma_x: Option<f64>,
    #[serde(default)]
    pub sigma_y: Option<f64>,
    pub normalize_labels: bool,
    pub z_bins: usize,
    pub z_range: (f64, f64),
    #[serde(default)]
    pub sigma_z: Option<f64>,
}

impl SimCCLabelSpec {
    pub fn new(input_w: usize, input_h: usize) -> Self {
        SimCCLabelSpec {
            input_w,
            input_h,
            split_ratio: 2.0,
            sigma_x: None,
            sigma_y: None,
            normalize_labels: true,
            z_bins: 450,
            z_range: (-1.0, 1.0),
            sigma_z: None,
        }
    }

    pub fn with_split_ratio(mut self, k: f64) -> Self {
        self.split_ratio = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio.is_finite()) {
            return Err(Error::invalid(format!("split ratio {}", self.split_ratio)));
        }
        if self.input_w == 0 || self.input_h == 0 || self.len_x() == 0 || self.len_y() == 0 {
            return Err(Error::invalid("empty patch"));
        }
        if !(self.z_range.0 < self.z_range.1) {
            return Err(Error::invalid(format!("z range {:?}", self.z_range)));
        }
        if self.z_bins == 0 {
            return Err(Error::invalid("z_bins must be positive"));
        }
        for s in [self.sigma_x, self.sigma_y, self.sigma_z].into_iter().flatten() {
            if !(s > 0.0) {
                return Err(Error::invalid(format!("sigma {s}")));
            }
        }
        Ok(())
    }

    pub fn len_x(&self) -> usize {
        (self.split_ratio * self.input_w as f64).round() as usize
    }

    pub fn len_y(&self) -> usize {
        (self.split_ratio * self.input_h as f64).round() as usize
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
            .unwrap_or_else(|| sigma_for(self.len_x() as f64).expect("positive length"))
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
            .unwrap_or_else(|| sigma_for(self.len_y() as f64).expect("positive length"))
    }

    pub fn sigma_z(&self) -> f64 {
        self.sigma_z
            .unwrap_or_else(|| sigma_for(self.z_bins as f64).expect("positive length"))
    }

    /// Fractional z bin of a root-relative offset (clamped to the range).
    pub fn z_to_bin(&self, offset: f64) -> f64 {
        let (lo, hi) = self.z_range;
        (offset.clamp(lo, hi) - lo) / (hi - lo) * (self.z_bins as f64 - 1.0)
    }

    pub fn bin_to_z(&self, bin: f64) -> f64 {
        let (lo, hi) = self.z_range;
        if self.z_bins == 1 {
            return lo;
        }
        lo + bin / (self.z_bins as f64 - 1.0) * (hi - lo)
    }
}

/// Encoded training targets for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCCLabels {
    pub x_labels: Tensor,
    pub y_labels: Tensor,
    pub z_labels: Option<Tensor>,
    pub keypoint_weights: Vec<f64>,
    pub z_weights: Vec<f64>,
}

/// Smoothing width that scales with the label vector length: `sqrt(len / 16)`.
pub fn sigma_for(vector_length: f64) -> Result<f64> {
    if !(vector_length > 0.0) {
        return Err(Error::invalid(format!("vector length {vector_length}")));
    }
    Ok((vector_length / 16.0).sqrt())
}

/// Gaussian label row centred on fractional bin `t`.
pub fn encode_axis(t: f64, len: usize, sigma: f64, normalize: bool) -> Result<Vec<f64>> {
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("label target {t}")));
    }
    if len == 0 || !(sigma > 0.0) {
        return Err(Error::invalid(format!("length {len}, sigma {sigma}")));
    }
    let denom = 2.0 * sigma * sigma;
    let mut v: Vec<f64> = (0..len)
        .map(|i| {
            let d = i as f64 - t;
            (-(d * d) / denom).exp()
        })
        .collect();
    if normalize {
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter_mut().for_each(|x| *x /= s);
        }
    }
    Ok(v)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if !(x > b) => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Encode x/y labels. Unlabeled or out-of-patch keypoints get weight 0 and zero rows.
pub fn encode_pose(pose: &Pose, spec: &SimCCLabelSpec) -> SimCCLabels {
    let k = pose.len();
    let (lx, ly) = (spec.len_x(), spec.len_y());
    let (sx, sy) = (spec.sigma_x(), spec.sigma_y());
    let mut x_labels = Tensor::zeros(&[k, lx]);
    let mut y_labels = Tensor::zeros(&[k, ly]);
    let mut weights = vec![0.0; k];
    for i in 0..k {
        let [x, y] = pose.coords[i];
        let labeled = pose.visibility.get(i).is_some_and(|v| (1..=VISIBLE).contains(v));
        let inside = x.is_finite()
            && y.is_finite()
            && x >= 0.0
            && y >= 0.0
            && x < spec.input_w as f64
            && y < spec.input_h as f64;
        if !(labeled && inside) {
            continue;
        }
        let rx = encode_axis(x * spec.split_ratio, lx, sx, spec.normalize_labels);
        let ry = encode_axis(y * spec.split_ratio, ly, sy, spec.normalize_labels);
        if let (Ok(rx), Ok(ry)) = (rx, ry) {
            x_labels.row_mut(i).copy_from_slice(&rx);
            y_labels.row_mut(i).copy_from_slice(&ry);
            weights[i] = 1.0;
        }
    }
    SimCCLabels {
        x_labels,
        y_labels,
        z_labels: None,
        keypoint_weights: weights,
        z_weights: vec![0.0; k],
    }
}

/// Encode root-relative depth labels.
///
/// `has_z[i]` marks keypoints with depth annotation; when absent, every labeled keypoint
/// with a depth value counts as annotated. A pose without depth, or without a resolvable
/// root, yields all-zero weights.
pub fn encode_z(
    pose: &Pose,
    has_z: Option<&[bool]>,
    root: &RootRule,
    spec: &SimCCLabelSpec,
) -> (Tensor, Vec<f64>) {
    let k = pose.len();
    let mut labels = Tensor::zeros(&[k, spec.z_bins]);
    let mut weights = vec![0.0; k];
    let Some(z) = pose.z.as_ref().filter(|z| z.len() == k) else {
        return (labels, weights);
    };
    let mask: Vec<bool> = match has_z {
        Some(m) => (0..k)
            .map(|i| m.get(i).copied().unwrap_or(false) && pose.is_labeled(i))
            .collect(),
        None => (0..k).map(|i| pose.is_labeled(i)).collect(),
    };
    let Some((root_z, _)) = root.resolve(z, &mask) else {
        return (labels, weights);
    };
    let sigma = spec.sigma_z();
    for i in 0..k {
        if !mask[i] || !z[i].is_finite() {
            continue;
        }
        let t = spec.z_to_bin(z[i] - root_z);
        if let Ok(row) = encode_axis(t, spec.z_bins, sigma, spec.normalize_labels) {
            labels.row_mut(i).copy_from_slice(&row);
            weights[i] = 1.0;
        }
    }
    (labels, weights)
}

/// x/y labels plus depth labels; depth weights never exceed keypoint weights.
pub fn encode_pose_3d(
    pose: &Pose,
    has_z: Option<&[bool]>,
    root: &RootRule,
    spec: &SimCCLabelSpec,
) -> SimCCLabels {
    let mut labels = encode_pose(pose, spec);
    let (mut zl, mut zw) = encode_z(pose, has_z, root, spec);
    for i in 0..pose.len() {
        if labels.keypoint_weights[i] <= 0.0 && zw[i] > 0.0 {
            zw[i] = 0.0;
            zl.row_mut(i).fill(0.0);
        }
        zw[i] = zw[i].min(labels.keypoint_weights[i]);
    }
    labels.z_labels = Some(zl);
    labels.z_weights = zw;
    labels
}

/// Arg-max bin divided by the split ratio.
pub fn decode_axis(v: &[f64], split_ratio: f64) -> Result<f64> {
    let i = argmax(v).ok_or_else(|| Error::invalid("decode of empty vector"))?;
    Ok(i as f64 / split_ratio)
}

/// Decode per-axis logits into a pose with per-keypoint confidences.
///
/// The score of a keypoint is the smaller of the peak softmax probabilities of its x and
/// y rows. Depth, when given, is returned as a root-relative offset in `z`.
pub fn decode_pose(
    x_logits: &Tensor,
    y_logits: &Tensor,
    z_logits: Option<&Tensor>,
    spec: &SimCCLabelSpec,
) -> Result<Pose> {
    let (k, _) = x_logits.dims2()?;
    let (ky, _) = y_logits.dims2()?;
    if ky != k {
        return Err(Error::shape(format!("{k} x rows vs {ky} y rows")));
    }
    if let Some(z) = z_logits {
        if z.dims2()?.0 != k {
            return Err(Error::shape(format!("{k} x rows vs {:?} z logits", z.shape())));
        }
    }
    let mut coords = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    for i in 0..k {
        let (xr, yr) = (x_logits.row(i), y_logits.row(i));
        coords.push([
            decode_axis(xr, spec.split_ratio)?,
            decode_axis(yr, spec.split_ratio)?,
        ]);
        let px = softmax_temp(xr, 1.0)?.into_iter().fold(0.0, f64::max);
        let py = softmax_temp(yr, 1.0)?.into_iter().fold(0.0, f64::max);
        scores.push(px.min(py));
    }
    let z = match z_logits {
        Some(zl) => Some(
            (0..k)
                .map(|i| {
                    let bin = argmax(zl.row(i)).ok_or_else(|| Error::invalid("empty z row"))?;
                    Ok(spec.bin_to_z(bin as f64))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(Pose {
        coords,
        z,
        visibility: vec![VISIBLE; k],
        scores: Some(scores),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::UNLABELED;
    use proptest::prelude::*;

    #[test]
    fn sigma_values() {
        assert_eq!(sigma_for(16.0).unwrap(), 1.0);
        assert!((sigma_for(384.0).unwrap() - 4.898979485566356).abs() < 1e-12);
        assert!((sigma_for(512.0).unwrap() - 5.656854249492381).abs() < 1e-12);
        assert!(sigma_for(0.0).is_err());
        assert!(sigma_for(-3.0).is_err());
    }

    #[test]
    fn axis_unnormalized() {
        let v = encode_axis(4.0, 9, 1.0, false).unwrap();
        assert_eq!(v[4], 1.0);
        // exp(-1/2), exp(-2)
        assert!((v[3] - 0.6065306597126334).abs() < 1e-12);
        assert_eq!(v[3], v[5]);
        assert!((v[2] - 0.1353352832366127).abs() < 1e-12);
        assert_eq!(v[2], v[6]);
    }

    #[test]
    fn axis_normalized_and_one_hot_limit() {
        let v = encode_axis(4.0, 9, 1.0, true).unwrap();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let v = encode_axis(4.0, 9, 1e-6, false).unwrap();
        assert!((v[4] - 1.0).abs() < 1e-12);
        assert!(v.iter().enumerate().all(|(i, x)| i == 4 || *x < 1e-12));
        assert!(encode_axis(f64::NAN, 9, 1.0, false).is_err());
    }

    #[test]
    fn decode_examples() {
        let mut v = vec![0.0; 12];
        v[7] = 1.0;
        assert_eq!(decode_axis(&v, 2.0).unwrap(), 3.5);
        assert_eq!(decode_axis(&[0.3; 10], 2.0).unwrap(), 0.0);
        assert!(decode_axis(&[], 2.0).is_err());
        let row = encode_axis(100.5, 400, 2.0, true).unwrap();
        assert_eq!(argmax(&row), Some(100));
        assert_eq!(decode_axis(&row, 2.0).unwrap(), 50.0);
    }

    #[test]
    fn encode_pose_cases() {
        let spec = SimCCLabelSpec::new(192, 256);
        let mut pose = Pose::visible(vec![[0.0, 0.0], [50.25, 10.0], [5.0, 5.0], [192.0, 3.0]]);
        pose.visibility[2] = UNLABELED;
        let l = encode_pose(&pose, &spec);
        assert_eq!(l.x_labels.shape(), &[4, 384]);
        assert_eq!(l.y_labels.shape(), &[4, 512]);
        assert_eq!(argmax(l.x_labels.row(0)), Some(0));
        assert_eq!(argmax(l.y_labels.row(0)), Some(0));
        assert_eq!(argmax(l.x_labels.row(1)), Some(100));
        assert_eq!(l.keypoint_weights, vec![1.0, 1.0, 0.0, 0.0]);
        assert!(l.x_labels.row(2).iter().all(|v| *v == 0.0));
        assert!(l.y_labels.row(3).iter().all(|v| *v == 0.0));
        assert!(l.z_weights.iter().all(|w| *w == 0.0));
    }

    fn pose3d(z: Vec<f64>) -> Pose {
        let n = z.len();
        Pose {
            coords: (0..n).map(|i| [i as f64, i as f64]).collect(),
            z: Some(z),
            visibility: vec![VISIBLE; n],
            scores: None,
        }
    }

    #[test]
    fn z_root_bin() {
        let spec = SimCCLabelSpec::new(48, 64);
        assert_eq!(spec.z_to_bin(0.0), 224.5);
        let mut z = vec![0.3; 17];
        z[11] = 0.2;
        z[12] = 0.4;
        let (labels, w) = encode_z(&pose3d(z), None, &RootRule::default(), &spec);
        assert!(w.iter().all(|v| *v == 1.0));
        // every keypoint sits at the root depth, so the peak is at bin 224 (tie → lower)
        assert_eq!(argmax(labels.row(0)), Some(224));
        assert_eq!(labels.row(0)[224], labels.row(0)[225]);
    }

    #[test]
    fn z_mask_for_2d() {
        let spec = SimCCLabelSpec::new(48, 64);
        let pose = Pose::visible(vec![[1.0, 1.0]; 17]);
        let l = encode_pose_3d(&pose, None, &RootRule::default(), &spec);
        assert!(l.z_weights.iter().all(|w| *w == 0.0));
        assert!(l.z_labels.unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn z_translation_invariant() {
        let spec = SimCCLabelSpec::new(48, 64);
        // dyadic values keep the shifted arithmetic exact
        let z: Vec<f64> = (0..17).map(|i| (i as f64 - 8.0) / 64.0).collect();
        let shifted: Vec<f64> = z.iter().map(|v| v + 0.25).collect();
        let a = encode_z(&pose3d(z.clone()), None, &RootRule::default(), &spec);
        let b = encode_z(&pose3d(shifted), None, &RootRule::default(), &spec);
        assert_eq!(a, b);
        let c = encode_z(
            &pose3d(z.iter().map(|v| v + 0.3).collect()),
            None,
            &RootRule::default(),
            &spec,
        );
        for (x, y) in a.0.data().iter().zip(c.0.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn z_weights_bounded_by_keypoint_weights() {
        let spec = SimCCLabelSpec::new(48, 64);
        let mut pose = pose3d(vec![0.1; 17]);
        pose.coords[3] = [-5.0, 2.0];
        let l = encode_pose_3d(&pose, None, &RootRule::default(), &spec);
        for (z, k) in l.z_weights.iter().zip(&l.keypoint_weights) {
            assert!(z <= k);
        }
        assert_eq!(l.z_weights[3], 0.0);
    }

    #[test]
    fn decode_pose_cases() {
        let spec = SimCCLabelSpec::new(48, 64);
        let uniform_x = Tensor::zeros(&[3, spec.len_x()]);
        let uniform_y = Tensor::zeros(&[3, spec.len_y()]);
        let p = decode_pose(&uniform_x, &uniform_y, None, &spec).unwrap();
        let expected = (1.0 / spec.len_x() as f64).min(1.0 / spec.len_y() as f64);
        for (c, s) in p.coords.iter().zip(p.scores.unwrap()) {
            assert_eq!(*c, [0.0, 0.0]);
            assert!((s - expected).abs() < 1e-12);
        }

        let mut zl = Tensor::zeros(&[3, 450]);
        for i in 0..3 {
            zl.row_mut(i)[0] = 5.0;
        }
        let p = decode_pose(&uniform_x, &uniform_y, Some(&zl), &spec).unwrap();
        assert!(p.z.unwrap().iter().all(|z| *z == -1.0));

        assert!(decode_pose(&uniform_x, &Tensor::zeros(&[2, 128]), None, &spec).is_err());
    }

    #[test]
    fn decode_of_encoded_labels() {
        let spec = SimCCLabelSpec::new(48, 64);
        let pose = Pose::visible(vec![[3.3, 60.7], [47.0, 0.0], [20.25, 31.75]]);
        let l = encode_pose(&pose, &spec);
        let d = decode_pose(&l.x_labels, &l.y_labels, None, &spec).unwrap();
        for (a, b) in d.coords.iter().zip(&pose.coords) {
            assert!((a[0] - b[0]).abs() <= 0.25 && (a[1] - b[1]).abs() <= 0.25);
        }
    }

    proptest! {
        #[test]
        fn round_trip_bound(x in 0.0f64..191.0, y in 0.0f64..255.0, k in prop::sample::select(vec![1.0, 2.0, 3.0])) {
            let spec = SimCCLabelSpec::new(192, 256).with_split_ratio(k);
            let pose = Pose::visible(vec![[x, y]]);
            let l = encode_pose(&pose, &spec);
            let d = decode_pose(&l.x_labels, &l.y_labels, None, &spec).unwrap();
            prop_assert!((d.coords[0][0] - x).abs() <= 0.5 / k + 1e-12);
            prop_assert!((d.coords[0][1] - y).abs() <= 0.5 / k + 1e-12);
        }

        #[test]
        fn argmax_is_nearest_bin(t in 20.0f64..80.0) {
            let v = encode_axis(t, 100, 3.0, false).unwrap();
            let nearest = if (t - t.floor() - 0.5).abs() < 1e-12 { t.floor() } else { t.round() };
            prop_assert_eq!(argmax(&v).unwrap() as f64, nearest);
        }

        #[test]
        fn normalized_rows_sum_to_one(t in -10.0f64..110.0, sigma in 0.5f64..8.0) {
            let v = encode_axis(t, 100, sigma, true).unwrap();
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn sigma_monotone(a in 1.0f64..1e5, d in 1e-3f64..100.0) {
            prop_assert!(sigma_for(a + d).unwrap() > sigma_for(a).unwrap());
        }
    }
}
