//! Path-aggregation feature pyramid: a top-down pass followed by a bottom-up pass.

use crate::error::{Error, Result};
use crate::tensor::{
    concat_channels, split_channels, upsample_nearest2x, upsample_nearest2x_backward, Conv2d,
    ConvCache, Grads, ParamStore, Tensor,
};

/// 1×1 channel reduction followed by a 3×3 conv, both with SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub reduce: Conv2d,
    pub conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    reduce: ConvCache,
    conv: ConvCache,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        ConvBlock {
            reduce: Conv2d::new(store, &format!("{name}.reduce"), cin, cout, 1, 1, true),
            conv: Conv2d::new(store, &format!("{name}.conv"), cout, cout, 3, 1, true),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (r, reduce) = self.reduce.forward(store, x)?;
        let (y, conv) = self.conv.forward(store, &r)?;
        Ok((y, BlockCache { reduce, conv }))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BlockCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let dr = self.conv.backward(store, &cache.conv, dy, grads)?;
        self.reduce.backward(store, &cache.reduce, &dr, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pafpn {
    pub channels: usize,
    pub lateral: Vec<Conv2d>,
    /// `top_down[i]` produces level `i` from level `i` and the upsampled level `i + 1`.
    pub top_down: Vec<ConvBlock>,
    /// `down[i - 1]` / `bottom_up[i - 1]` produce level `i` from level `i - 1`.
    pub down: Vec<Conv2d>,
    pub bottom_up: Vec<ConvBlock>,
    /// Used instead of the two passes when there is a single level.
    pub single: Option<ConvBlock>,
}

#[derive(Debug, Clone)]
pub struct PafpnCache {
    lateral: Vec<ConvCache>,
    top_down: Vec<BlockCache>,
    down: Vec<ConvCache>,
    bottom_up: Vec<BlockCache>,
    single: Option<BlockCache>,
}

impl Pafpn {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: &[usize], channels: usize) -> Self {
        let levels = in_channels.len();
        let lateral = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("{name}.lateral{i}"), c, channels, 1, 1, true))
            .collect();
        if levels == 1 {
            let single = ConvBlock::new(store, &format!("{name}.block0"), channels, channels);
            return Pafpn {
                channels,
                lateral,
                top_down: vec![],
                down: vec![],
                bottom_up: vec![],
                single: Some(single),
            };
        }
        let top_down = (0..levels - 1)
            .map(|i| ConvBlock::new(store, &format!("{name}.td{i}"), 2 * channels, channels))
            .collect();
        let mut down = Vec::new();
        let mut bottom_up = Vec::new();
        for i in 1..levels {
            down.push(Conv2d::new(
                store,
                &format!("{name}.down{i}"),
                channels,
                channels,
                3,
                2,
                true,
            ));
            bottom_up.push(ConvBlock::new(
                store,
                &format!("{name}.bu{i}"),
                2 * channels,
                channels,
            ));
        }
        Pafpn {
            channels,
            lateral,
            top_down,
            down,
            bottom_up,
            single: None,
        }
    }

    pub fn levels(&self) -> usize {
        self.lateral.len()
    }

    /// Fuse per-level features ordered fine to coarse. Spatial sizes are preserved.
    pub fn forward(&self, store: &ParamStore, feats: &[Tensor]) -> Result<(Vec<Tensor>, PafpnCache)> {
        let n = self.levels();
        if feats.len() != n {
            return Err(Error::shape(format!("{} levels for a {n}-level neck", feats.len())));
        }
        for i in 1..n {
            let (_, h0, w0) = feats[i - 1].dims3()?;
            let (_, h1, w1) = feats[i].dims3()?;
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(Error::shape(format!(
                    "level {i} is {h1}x{w1} but level {} is {h0}x{w0} (need a 2x step)",
                    i - 1
                )));
            }
        }
        let mut lat = Vec::with_capacity(n);
        let mut lat_cache = Vec::with_capacity(n);
        for (conv, f) in self.lateral.iter().zip(feats) {
            let (y, c) = conv.forward(store, f)?;
            lat.push(y);
            lat_cache.push(c);
        }
        if let Some(block) = &self.single {
            let (y, c) = block.forward(store, &lat[0])?;
            return Ok((
                vec![y],
                PafpnCache {
                    lateral: lat_cache,
                    top_down: vec![],
                    down: vec![],
                    bottom_up: vec![],
                    single: Some(c),
                },
            ));
        }

        let mut td: Vec<Tensor> = lat.clone();
        let mut td_cache: Vec<Option<BlockCache>> = vec![None; n - 1];
        for i in (0..n - 1).rev() {
            let up = upsample_nearest2x(&td[i + 1])?;
            let cat = concat_channels(&[&lat[i], &up])?;
            let (y, c) = self.top_down[i].forward(store, &cat)?;
            td[i] = y;
            td_cache[i] = Some(c);
        }

        let mut out = vec![td[0].clone()];
        let mut down_cache = Vec::with_capacity(n - 1);
        let mut bu_cache = Vec::with_capacity(n - 1);
        for i in 1..n {
            let (d, dc) = self.down[i - 1].forward(store, &out[i - 1])?;
            let cat = concat_channels(&[&d, &td[i]])?;
            let (y, bc) = self.bottom_up[i - 1].forward(store, &cat)?;
            out.push(y);
            down_cache.push(dc);
            bu_cache.push(bc);
        }
        Ok((
            out,
            PafpnCache {
                lateral: lat_cache,
                top_down: td_cache.into_iter().map(|c| c.expect("filled")).collect(),
                down: down_cache,
                bottom_up: bu_cache,
                single: None,
            },
        ))
    }

    /// Gradients with respect to the input levels.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &PafpnCache,
        d_out: Vec<Tensor>,
        grads: &mut Grads,
    ) -> Result<Vec<Tensor>> {
        let n = self.levels();
        let c = self.channels;
        let mut d_lat: Vec<Tensor>;
        if let (Some(block), Some(bc)) = (&self.single, &cache.single) {
            d_lat = vec![block.backward(store, bc, &d_out[0], grads)?];
        } else {
            let mut d_out = d_out;
            let mut d_td: Vec<Option<Tensor>> = vec![None; n];
            for i in (1..n).rev() {
                let dcat = self.bottom_up[i - 1].backward(store, &cache.bottom_up[i - 1], &d_out[i], grads)?;
                let mut parts = split_channels(&dcat, &[c, c])?;
                let dtd = parts.pop().expect("two parts");
                let dd = parts.pop().expect("two parts");
                add_into(&mut d_td[i], dtd);
                let dprev = self.down[i - 1].backward(store, &cache.down[i - 1], &dd, grads)?;
                d_out[i - 1].add_assign(&dprev);
            }
            add_into(&mut d_td[0], d_out.swap_remove(0));

            d_lat = (0..n).map(|_| Tensor::default()).collect();
            for i in 0..n - 1 {
                let g = d_td[i].take().expect("top-down gradient present");
                let dcat = self.top_down[i].backward(store, &cache.top_down[i], &g, grads)?;
                let mut parts = split_channels(&dcat, &[c, c])?;
                let dup = parts.pop().expect("two parts");
                d_lat[i] = parts.pop().expect("two parts");
                add_into(&mut d_td[i + 1], upsample_nearest2x_backward(&dup)?);
            }
            d_lat[n - 1] = d_td[n - 1].take().expect("top level gradient present");
        }
        self.lateral
            .iter()
            .zip(&cache.lateral)
            .zip(d_lat.iter())
            .map(|((conv, lc), g)| conv.backward(store, lc, g, grads))
            .collect()
    }
}

fn add_into(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}
