//! Synthetic images: every keypoint is drawn as a Gaussian blob in its own color.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use crate::model::TrainSample;
use crate::simcc::{encode_pose, SimCCLabelSpec};
use crate::tensor::Tensor;
use crate::types::Pose;

/// Deterministic per-keypoint color, spread around the hue circle.
pub fn keypoint_color(i: usize, k: usize) -> [f64; 3] {
    let h = (i as f64 + 0.5) / k.max(1) as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let rgb = match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    };
    // alternate brightness so neighbouring hues stay separable
    let s = if i.is_multiple_of(2) { 1.0 } else { 0.6 };
    rgb.map(|c| c * s)
}

/// Render labeled keypoints as blobs of the given radii (Gaussian sigma, pixels).
pub fn render(pose: &Pose, radii: &[f64], width: usize, height: usize) -> Tensor {
    let k = pose.len();
    let mut img = Tensor::zeros(&[3, height, width]);
    let plane = width * height;
    for i in 0..k {
        if !pose.is_labeled(i) {
            continue;
        }
        let [cx, cy] = pose.coords[i];
        let r = radii[i];
        let color = keypoint_color(i, k);
        let reach = (3.0 * r).ceil() as isize + 1;
        let (x0, y0) = (cx.floor() as isize, cy.floor() as isize);
        for y in (y0 - reach).max(0)..(y0 + reach + 1).min(height as isize) {
            for x in (x0 - reach).max(0)..(x0 + reach + 1).min(width as isize) {
                // pixel centers sit at integer coordinates, matching the codec
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let g = (-d2 / (2.0 * r * r)).exp();
                let at = y as usize * width + x as usize;
                for c in 0..3 {
                    let v = &mut img.data_mut()[c * plane + at];
                    *v = v.max(g * color[c]);
                }
            }
        }
    }
    img
}

/// Uniformly random keypoints at least `margin` pixels from the border.
pub fn random_pose(k: usize, width: usize, height: usize, margin: f64, rng: &mut impl Rng) -> Pose {
    let coords = (0..k)
        .map(|_| {
            [
                rng.random_range(margin..width as f64 - 1.0 - margin),
                rng.random_range(margin..height as f64 - 1.0 - margin),
            ]
        })
        .collect();
    Pose::visible(coords)
}

/// A rendered example together with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthExample {
    pub pose: Pose,
    pub sample: TrainSample,
}

fn example(pose: Pose, radii: &[f64], spec: &SimCCLabelSpec) -> SynthExample {
    let image = render(&pose, radii, spec.input_w, spec.input_h);
    let labels = encode_pose(&pose, spec);
    SynthExample {
        pose,
        sample: TrainSample { image, labels },
    }
}

/// `n` instances of `k` uniformly placed blobs of radius 1.5.
pub fn blob_corpus(k: usize, n: usize, spec: &SimCCLabelSpec, seed: u64) -> Vec<SynthExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radii = vec![1.5; k];
    (0..n)
        .map(|_| example(random_pose(k, spec.input_w, spec.input_h, 3.0, &mut rng), &radii, spec))
        .collect()
}

/// Multi-scale corpus: the first `large` keypoints are wide blobs spread over the patch
/// (torso-like), the rest are small blobs clustered around one random point (hand-like).
pub fn multiscale_corpus(
    large: usize,
    small: usize,
    n: usize,
    spec: &SimCCLabelSpec,
    seed: u64,
) -> Vec<SynthExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.input_w as f64, spec.input_h as f64);
    let mut radii = vec![3.0; large];
    radii.extend(std::iter::repeat_n(0.8, small));
    let cluster = 5.0;
    (0..n)
        .map(|_| {
            let mut coords: Vec<[f64; 2]> = (0..large)
                .map(|_| [rng.random_range(4.0..w - 5.0), rng.random_range(4.0..h - 5.0)])
                .collect();
            let c = [
                rng.random_range(cluster + 2.0..w - cluster - 3.0),
                rng.random_range(cluster + 2.0..h - cluster - 3.0),
            ];
            coords.extend((0..small).map(|_| {
                [
                    c[0] + rng.random_range(-cluster..cluster),
                    c[1] + rng.random_range(-cluster..cluster),
                ]
            }));
            example(Pose::visible(coords), &radii, spec)
        })
        .collect()
}

/// On-disk description of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "lowercase")]
pub enum CorpusSpec {
    Blob { num_keypoints: usize, instances: usize, seed: u64 },
    Multiscale { large: usize, small: usize, instances: usize, seed: u64 },
}

impl CorpusSpec {
    pub fn num_keypoints(&self) -> usize {
        match self {
            CorpusSpec::Blob { num_keypoints, .. } => *num_keypoints,
            CorpusSpec::Multiscale { large, small, .. } => large + small,
        }
    }

    pub fn build(&self, spec: &SimCCLabelSpec) -> Result<Vec<SynthExample>> {
        let too_small = |m: f64| (spec.input_w as f64) < m || (spec.input_h as f64) < m;
        match *self {
            CorpusSpec::Blob { num_keypoints, instances, seed } => {
                if num_keypoints == 0 || instances == 0 || too_small(8.0) {
                    return Err(Error::invalid(format!("cannot build blob corpus from {self:?}")));
                }
                Ok(blob_corpus(num_keypoints, instances, spec, seed))
            }
            CorpusSpec::Multiscale { large, small, instances, seed } => {
                if large + small == 0 || instances == 0 || too_small(16.0) {
                    return Err(Error::invalid(format!("cannot build multiscale corpus from {self:?}")));
                }
                Ok(multiscale_corpus(large, small, instances, spec, seed))
            }
        }
    }
}

/// Mean Euclidean distance over keypoints labeled in `truth`.
pub fn mean_error(pred: &Pose, truth: &Pose) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..truth.len().min(pred.len()) {
        if truth.is_labeled(i) {
            let [a, b] = pred.coords[i];
            let [c, d] = truth.coords[i];
            sum += ((a - c).powi(2) + (b - d).powi(2)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_peaks_at_keypoint() {
        let pose = Pose::visible(vec![[10.0, 7.0]]);
        let img = render(&pose, &[1.5], 20, 16);
        let c = keypoint_color(0, 1);
        let ch = (0..3).max_by(|a, b| c[*a].total_cmp(&c[*b])).unwrap();
        let plane = &img.data()[ch * 320..(ch + 1) * 320];
        let best = (0..320).max_by(|a, b| plane[*a].total_cmp(&plane[*b])).unwrap();
        assert_eq!((best % 20, best / 20), (10, 7));
    }

    #[test]
    fn corpus_is_seeded() {
        let spec = SimCCLabelSpec::new(48, 64);
        let a = blob_corpus(4, 3, &spec, 1);
        let b = blob_corpus(4, 3, &spec, 1);
        assert_eq!(a[2].sample.image, b[2].sample.image);
        let c: CorpusSpec = serde_json::from_str(r#"{"generator":"blob","num_keypoints":4,"instances":3,"seed":1}"#).unwrap();
        assert_eq!(c.build(&spec).unwrap()[2].sample.image, a[2].sample.image);
        let m = multiscale_corpus(4, 4, 2, &spec, 5);
        for ex in &m {
            assert!(ex.sample.labels.keypoint_weights.iter().all(|w| *w == 1.0));
        }
    }

    #[test]
    fn distinct_colors() {
        for k in [3, 8, 17] {
            for i in 0..k {
                for j in 0..i {
                    assert_ne!(keypoint_color(i, k), keypoint_color(j, k));
                }
            }
        }
    }
}
