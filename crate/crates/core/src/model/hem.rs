//! Hierarchical encoding: every pyramid level gets its own keypoint encoding, and the
//! per-level encodings are concatenated and fused into one `[K, hidden]` matrix.

use crate::error::{Error, Result};
use crate::tensor::{Conv2d, ConvCache, Grads, Linear, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct HemLevel {
    /// Large-kernel conv from neck channels to one map per keypoint.
    pub conv: Conv2d,
    /// Flattened keypoint map to hidden width.
    pub proj: Linear,
    pub spatial: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hem {
    pub levels: Vec<HemLevel>,
    /// Absent for a single level, where the merge is the identity.
    pub fuse: Option<Linear>,
    pub hidden: usize,
    pub keypoints: usize,
}

#[derive(Debug, Clone)]
pub struct HemCache {
    conv: Vec<ConvCache>,
    flat: Vec<Tensor>,
    concat: Option<Tensor>,
}

impl Hem {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        spatial: &[(usize, usize)],
        keypoints: usize,
        hidden: usize,
        kernel: usize,
    ) -> Self {
        let levels: Vec<HemLevel> = spatial
            .iter()
            .enumerate()
            .map(|(i, &(h, w))| HemLevel {
                conv: Conv2d::new(
                    store,
                    &format!("{name}.level{i}.conv"),
                    channels,
                    keypoints,
                    kernel,
                    1,
                    false,
                ),
                proj: Linear::new(store, &format!("{name}.level{i}.proj"), h * w, hidden),
                spatial: (h, w),
            })
            .collect();
        let fuse = (levels.len() > 1)
            .then(|| Linear::new(store, &format!("{name}.fuse"), levels.len() * hidden, hidden));
        Hem {
            levels,
            fuse,
            hidden,
            keypoints,
        }
    }

    pub fn forward(&self, store: &ParamStore, fused: &[Tensor]) -> Result<(Tensor, HemCache)> {
        if fused.len() != self.levels.len() {
            return Err(Error::shape(format!(
                "{} feature levels for {} encoders",
                fused.len(),
                self.levels.len()
            )));
        }
        let k = self.keypoints;
        let mut conv = Vec::new();
        let mut flat = Vec::new();
        let mut codes = Vec::new();
        for (lvl, f) in self.levels.iter().zip(fused) {
            let (_, h, w) = f.dims3()?;
            if (h, w) != lvl.spatial {
                return Err(Error::shape(format!(
                    "level is {h}x{w}, encoder expects {:?}",
                    lvl.spatial
                )));
            }
            let (maps, c) = lvl.conv.forward(store, f)?;
            let fl = maps.reshape(&[k, h * w])?;
            codes.push(lvl.proj.forward(store, &fl)?);
            conv.push(c);
            flat.push(fl);
        }
        let Some(fuse) = &self.fuse else {
            let code = codes.pop().expect("one level");
            return Ok((
                code,
                HemCache {
                    conv,
                    flat,
                    concat: None,
                },
            ));
        };
        let width = self.hidden * codes.len();
        let mut cat = Tensor::zeros(&[k, width]);
        for r in 0..k {
            let row = cat.row_mut(r);
            for (l, code) in codes.iter().enumerate() {
                row[l * self.hidden..(l + 1) * self.hidden].copy_from_slice(code.row(r));
            }
        }
        let merged = fuse.forward(store, &cat)?;
        Ok((
            merged,
            HemCache {
                conv,
                flat,
                concat: Some(cat),
            },
        ))
    }

    /// Gradients with respect to each input level.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &HemCache,
        d_merged: &Tensor,
        grads: &mut Grads,
    ) -> Result<Vec<Tensor>> {
        let k = self.keypoints;
        let d_codes: Vec<Tensor> = match (&self.fuse, &cache.concat) {
            (Some(fuse), Some(cat)) => {
                let dcat = fuse.backward(store, cat, d_merged, grads)?;
                (0..self.levels.len())
                    .map(|l| {
                        let mut t = Tensor::zeros(&[k, self.hidden]);
                        for r in 0..k {
                            t.row_mut(r).copy_from_slice(
                                &dcat.row(r)[l * self.hidden..(l + 1) * self.hidden],
                            );
                        }
                        t
                    })
                    .collect()
            }
            _ => vec![d_merged.clone()],
        };
        self.levels
            .iter()
            .zip(&d_codes)
            .zip(cache.flat.iter().zip(&cache.conv))
            .map(|((lvl, dc), (fl, cc))| {
                let dflat = lvl.proj.backward(store, fl, dc, grads)?;
                let (h, w) = lvl.spatial;
                let dmaps = dflat.reshape(&[k, h, w])?;
                lvl.conv.backward(store, cc, &dmaps, grads)
            })
            .collect()
    }
}
