//! Root-relative depth.
//!
//! Depth annotations from different sources use different camera origins. Expressing
//! every depth as an offset from a skeleton root removes that origin.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// How the root depth of a skeleton is chosen.
///
/// Resolution falls back in order: both hips labeled gives their midpoint, one labeled hip
/// gives that hip, otherwise the centroid of labeled torso (body-slice) keypoints. With
/// nothing labeled there is no root and the instance's depth is masked out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootRule {
    pub left_hip: usize,
    pub right_hip: usize,
    pub torso: Range<usize>,
}

impl Default for RootRule {
    fn default() -> Self {
        RootRule {
            left_hip: 11,
            right_hip: 12,
            torso: 0..17,
        }
    }
}

/// Which step of the fallback chain produced the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RootSource {
    HipMidpoint,
    SingleHip,
    TorsoCentroid,
}

impl RootRule {
    /// Root depth, or `None` when no usable keypoint carries depth.
    ///
    /// `has_z[i]` marks keypoints whose depth is annotated.
    pub fn resolve(&self, z: &[f64], has_z: &[bool]) -> Option<(f64, RootSource)> {
        let ok = |i: usize| i < z.len() && has_z.get(i).copied().unwrap_or(false) && z[i].is_finite();
        match (ok(self.left_hip), ok(self.right_hip)) {
            (true, true) => {
                return Some((
                    0.5 * (z[self.left_hip] + z[self.right_hip]),
                    RootSource::HipMidpoint,
                ))
            }
            (true, false) => return Some((z[self.left_hip], RootSource::SingleHip)),
            (false, true) => return Some((z[self.right_hip], RootSource::SingleHip)),
            _ => {}
        }
        let (sum, n) = self
            .torso
            .clone()
            .filter(|&i| ok(i))
            .fold((0.0, 0usize), |(s, n), i| (s + z[i], n + 1));
        (n > 0).then(|| (sum / n as f64, RootSource::TorsoCentroid))
    }
}

/// Depth offsets from the resolved root. `None` when no root can be resolved.
///
/// Entries whose depth is not annotated are returned as 0. Offsets are built from
/// differences to one anchor keypoint, so a global depth shift cancels before any
/// division and dyadic inputs give shift-invariant results bit for bit.
pub fn root_relative_z(z: &[f64], has_z: &[bool], rule: &RootRule) -> Option<Vec<f64>> {
    let (_, src) = rule.resolve(z, has_z)?;
    let ok = |i: usize| i < z.len() && has_z.get(i).copied().unwrap_or(false) && z[i].is_finite();
    let (anchor, offset) = match src {
        RootSource::HipMidpoint => (
            rule.left_hip,
            0.5 * (z[rule.right_hip] - z[rule.left_hip]),
        ),
        RootSource::SingleHip => (
            if ok(rule.left_hip) { rule.left_hip } else { rule.right_hip },
            0.0,
        ),
        RootSource::TorsoCentroid => {
            let idx: Vec<usize> = rule.torso.clone().filter(|&i| ok(i)).collect();
            let a = idx[0];
            let sum: f64 = idx.iter().map(|&i| z[i] - z[a]).sum();
            (a, sum / idx.len() as f64)
        }
    };
    Some(
        z.iter()
            .zip(has_z)
            .map(|(v, &h)| if h { (v - z[anchor]) - offset } else { 0.0 })
            .collect(),
    )
}
