//! The pose network: plain conv backbone → PAFPN → hierarchical encoding → GAU →
//! per-axis classification branches.

mod checkpoint;
mod hem;
mod neck;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use hem::{Hem, HemCache};
pub use neck::{ConvBlock, Pafpn, PafpnCache};
pub use train::{
    batch_loss_and_grads, loss_and_grads, task_loss, LossBreakdown, TrainConfig, TrainSample, Trainer,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simcc::{decode_pose, SimCCLabelSpec};
use crate::tensor::{
    Conv2d, ConvCache, Gau, GauCache, GauConfig, Grads, Linear, ParamStore, Precision, Tensor,
};
use crate::types::Pose;

/// Parameter name prefixes of the feature extractor (backbone, neck, encoder).
pub const FEATURE_PREFIXES: [&str; 3] = ["backbone.", "neck.", "hem."];
/// Parameter name prefixes of the attention block and output branches.
pub const HEAD_PREFIXES: [&str; 2] = ["gau.", "head."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_w: usize,
    pub input_h: usize,
    /// Output channels of each stride-2 backbone stage (the first is the stem).
    pub backbone_channels: Vec<usize>,
    pub neck_channels: usize,
    /// Number of pyramid levels taken from the last backbone stages.
    pub num_levels: usize,
    pub num_keypoints: usize,
    pub split_ratio: f64,
    pub hem_hidden: usize,
    pub final_kernel: usize,
    pub gau: GauConfig,
    pub use_gau: bool,
    pub enable_z: bool,
    pub z_bins: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for ModelConfig {
    /// 64×48 input, levels at strides 4 and 8.
    fn default() -> Self {
        ModelConfig {
            input_w: 48,
            input_h: 64,
            backbone_channels: vec![8, 16, 24],
            neck_channels: 8,
            num_levels: 2,
            num_keypoints: 17,
            split_ratio: 2.0,
            hem_hidden: 256,
            final_kernel: 7,
            gau: GauConfig::new(256),
            use_gau: true,
            enable_z: false,
            z_bins: 450,
            precision: Precision::Single,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the toy experiments.
    pub fn toy(num_keypoints: usize) -> Self {
        ModelConfig {
            num_keypoints,
            hem_hidden: 64,
            gau: GauConfig::new(64),
            ..Default::default()
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hem_hidden = hidden;
        self.gau.model_dim = hidden;
        self.gau.expansion_dim = 2 * hidden;
        self
    }

    pub fn stages(&self) -> usize {
        self.backbone_channels.len()
    }

    /// Stride of the coarsest stage.
    pub fn max_stride(&self) -> usize {
        1 << self.stages()
    }

    /// `(stride, height, width)` of each pyramid level, fine to coarse.
    pub fn level_geometry(&self) -> Vec<(usize, usize, usize)> {
        let first = self.stages() - self.num_levels;
        (first..self.stages())
            .map(|s| {
                let stride = 1 << (s + 1);
                (stride, self.input_h / stride, self.input_w / stride)
            })
            .collect()
    }

    pub fn len_x(&self) -> usize {
        (self.split_ratio * self.input_w as f64).round() as usize
    }

    pub fn len_y(&self) -> usize {
        (self.split_ratio * self.input_h as f64).round() as usize
    }

    pub fn label_spec(&self) -> SimCCLabelSpec {
        let mut spec = SimCCLabelSpec::new(self.input_w, self.input_h).with_split_ratio(self.split_ratio);
        spec.z_bins = self.z_bins;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.num_keypoints == 0 {
            return bad("num_keypoints must be at least 1".into());
        }
        if self.num_levels == 0 || self.num_levels > self.stages() {
            return bad(format!(
                "num_levels {} must be in 1..={}",
                self.num_levels,
                self.stages()
            ));
        }
        if self.backbone_channels.contains(&0) || self.neck_channels == 0 || self.hem_hidden == 0 {
            return bad("channel widths must be positive".into());
        }
        let s = self.max_stride();
        if self.input_w == 0 || self.input_h == 0 || !self.input_w.is_multiple_of(s) || !self.input_h.is_multiple_of(s) {
            return bad(format!(
                "input {}x{} must be divisible by the largest stride {s}",
                self.input_w, self.input_h
            ));
        }
        if !(self.split_ratio > 0.0) {
            return bad(format!("split ratio {}", self.split_ratio));
        }
        if self.final_kernel.is_multiple_of(2) {
            return bad("final kernel must be odd".into());
        }
        self.gau.validate()?;
        if self.gau.model_dim != self.hem_hidden {
            return bad(format!(
                "GAU width {} must equal the hidden width {}",
                self.gau.model_dim, self.hem_hidden
            ));
        }
        if self.enable_z && self.z_bins == 0 {
            return bad("z_bins must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    backbone: Vec<Conv2d>,
    neck: Pafpn,
    hem: Hem,
    gau: Gau,
    cls_x: Linear,
    cls_y: Linear,
    cls_z: Option<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Layers,
}

/// Network outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub x_logits: Tensor,
    pub y_logits: Tensor,
    pub z_logits: Option<Tensor>,
    /// Finest fused pyramid level `[C, H, W]`, the distillation feature tap.
    pub feature: Tensor,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    backbone: Vec<ConvCache>,
    neck: PafpnCache,
    hem: HemCache,
    merged: Tensor,
    gau: Option<GauCache>,
    tokens: Tensor,
}

/// Upstream gradients for [`Model::backward`].
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub x_logits: Option<Tensor>,
    pub y_logits: Option<Tensor>,
    pub z_logits: Option<Tensor>,
    pub feature: Option<Tensor>,
}

impl Model {
    /// Build and initialize. Identical config and seed give bit-identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::build_uninit(config)?;
        model.init_params(seed);
        Ok(model)
    }

    /// Build with all parameters at their registration values (zeros, GAU scales at one).
    pub fn build_uninit(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.precision);
        let mut backbone = Vec::new();
        let mut cin = 3;
        for (i, &c) in config.backbone_channels.iter().enumerate() {
            backbone.push(Conv2d::new(
                &mut store,
                &format!("backbone.stage{i}"),
                cin,
                c,
                3,
                2,
                true,
            ));
            cin = c;
        }
        let first = config.stages() - config.num_levels;
        let neck = Pafpn::new(
            &mut store,
            "neck",
            &config.backbone_channels[first..],
            config.neck_channels,
        );
        let spatial: Vec<(usize, usize)> = config
            .level_geometry()
            .iter()
            .map(|&(_, h, w)| (h, w))
            .collect();
        let hem = Hem::new(
            &mut store,
            "hem",
            config.neck_channels,
            &spatial,
            config.num_keypoints,
            config.hem_hidden,
            config.final_kernel,
        );
        let gau = Gau::new(&mut store, "gau", config.gau);
        let cls_x = Linear::new(&mut store, "head.cls_x", config.hem_hidden, config.len_x());
        let cls_y = Linear::new(&mut store, "head.cls_y", config.hem_hidden, config.len_y());
        let cls_z = config
            .enable_z
            .then(|| Linear::new(&mut store, "head.cls_z", config.hem_hidden, config.z_bins));
        Ok(Model {
            config,
            params: store,
            layers: Layers {
                backbone,
                neck,
                hem,
                gau,
                cls_x,
                cls_y,
                cls_z,
            },
        })
    }

    /// He-style uniform init `U(-√(6/fan_in), √(6/fan_in))` for weights; biases and
    /// offsets zero; GAU scales one.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_store(&mut self.params, &mut rng, |_| true);
    }

    /// Re-draw the parameters whose names start with one of `prefixes`.
    pub fn reinit_where(&mut self, seed: u64, prefixes: &[&str]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_store(&mut self.params, &mut rng, |name| {
            prefixes.iter().any(|p| name.starts_with(p))
        });
    }

    /// Zero the output branches.
    pub fn zero_heads(&mut self) {
        let ids: Vec<_> = self
            .params
            .ids()
            .filter(|id| self.params.param(*id).name.starts_with("head."))
            .collect();
        for id in ids {
            self.params.value_mut(id).fill(0.0);
        }
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.config.precision = precision;
        self.params.set_precision(precision);
    }

    pub fn label_spec(&self) -> SimCCLabelSpec {
        self.config.label_spec()
    }

    pub fn forward(&self, image: &Tensor) -> Result<ModelOutput> {
        Ok(self.forward_cached(image)?.0)
    }

    pub fn forward_cached(&self, image: &Tensor) -> Result<(ModelOutput, ForwardCache)> {
        let cfg = &self.config;
        let store = &self.params;
        if image.shape() != [3, cfg.input_h, cfg.input_w] {
            return Err(Error::shape(format!(
                "image {:?}, model expects [3, {}, {}]",
                image.shape(),
                cfg.input_h,
                cfg.input_w
            )));
        }
        let mut x = image.clone();
        store.precision().apply(&mut x);
        let mut bb_cache = Vec::with_capacity(cfg.stages());
        let mut stage_out = Vec::with_capacity(cfg.stages());
        for conv in &self.layers.backbone {
            let (y, c) = conv.forward(store, &x)?;
            bb_cache.push(c);
            stage_out.push(y.clone());
            x = y;
        }
        let first = cfg.stages() - cfg.num_levels;
        let feats = &stage_out[first..];
        let (fused, neck_cache) = self.layers.neck.forward(store, feats)?;
        let (merged, hem_cache) = self.layers.hem.forward(store, &fused)?;
        let (tokens, gau_cache) = if cfg.use_gau {
            let (t, c) = self.layers.gau.forward(store, &merged)?;
            (t, Some(c))
        } else {
            (merged.clone(), None)
        };
        let x_logits = self.layers.cls_x.forward(store, &tokens)?;
        let y_logits = self.layers.cls_y.forward(store, &tokens)?;
        let z_logits = match &self.layers.cls_z {
            Some(l) => Some(l.forward(store, &tokens)?),
            None => None,
        };
        Ok((
            ModelOutput {
                x_logits,
                y_logits,
                z_logits,
                feature: fused[0].clone(),
            },
            ForwardCache {
                backbone: bb_cache,
                neck: neck_cache,
                hem: hem_cache,
                merged,
                gau: gau_cache,
                tokens,
            },
        ))
    }

    /// Accumulate parameter gradients into `grads`; returns the gradient of the image.
    pub fn backward(&self, cache: &ForwardCache, d: &OutputGrads, grads: &mut Grads) -> Result<Tensor> {
        let store = &self.params;
        let l = &self.layers;
        let mut d_tokens = Tensor::zeros(cache.tokens.shape());
        if let Some(g) = &d.x_logits {
            d_tokens.add_assign(&l.cls_x.backward(store, &cache.tokens, g, grads)?);
        }
        if let Some(g) = &d.y_logits {
            d_tokens.add_assign(&l.cls_y.backward(store, &cache.tokens, g, grads)?);
        }
        if let (Some(g), Some(cz)) = (&d.z_logits, &l.cls_z) {
            d_tokens.add_assign(&cz.backward(store, &cache.tokens, g, grads)?);
        }
        let d_merged = match &cache.gau {
            Some(gc) => l.gau.backward(store, gc, &d_tokens, grads)?,
            None => d_tokens,
        };
        debug_assert_eq!(d_merged.shape(), cache.merged.shape());
        let mut d_fused = l.hem.backward(store, &cache.hem, &d_merged, grads)?;
        if let Some(g) = &d.feature {
            d_fused[0].add_assign(g);
        }
        let d_feats = l.neck.backward(store, &cache.neck, d_fused, grads)?;

        let first = self.config.stages() - self.config.num_levels;
        let mut d_level: Vec<Option<Tensor>> = vec![None; self.config.stages()];
        for (i, g) in d_feats.into_iter().enumerate() {
            d_level[first + i] = Some(g);
        }
        let mut carry: Option<Tensor> = None;
        for s in (0..l.backbone.len()).rev() {
            let g = match (carry.take(), d_level[s].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => continue,
            };
            carry = Some(l.backbone[s].backward(store, &cache.backbone[s], &g, grads)?);
        }
        Ok(carry.unwrap_or_else(|| Tensor::zeros(&[3, self.config.input_h, self.config.input_w])))
    }

    /// Forward and decode to a pose in patch coordinates.
    pub fn predict(&self, image: &Tensor) -> Result<Pose> {
        let out = self.forward(image)?;
        decode_pose(
            &out.x_logits,
            &out.y_logits,
            out.z_logits.as_ref(),
            &self.label_spec(),
        )
    }

    /// Whether a named parameter belongs to the attention block or output branches.
    pub fn is_head_param(name: &str) -> bool {
        HEAD_PREFIXES.iter().any(|p| name.starts_with(p))
    }
}

fn init_store(store: &mut ParamStore, rng: &mut ChaCha8Rng, select: impl Fn(&str) -> bool) {
    let prec = store.precision();
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.param_mut(id);
        if !select(&p.name) {
            continue;
        }
        let name = p.name.as_str();
        if name.ends_with(".bias") || name.contains(".beta_") {
            p.value.fill(0.0);
        } else if name.contains(".gamma_") {
            p.value.fill(1.0);
        } else {
            let shape = p.value.shape();
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in p.value.data_mut() {
                *v = prec.round(rng.random_range(-bound..bound));
            }
        }
    }
}
