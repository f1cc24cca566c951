use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Model, ModelOutput, OutputGrads};
use crate::error::{Error, Result};
use crate::simcc::SimCCLabels;
use crate::tensor::{kl_discret_loss, Grads, Sgd, SgdConfig, Tensor, DEFAULT_TAU};

#[derive(Debug, Clone)]
pub struct TrainSample {
    /// `[3, H, W]` patch.
    pub image: Tensor,
    pub labels: SimCCLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub tau: f64,
    /// Per-keypoint loss multipliers (for rebalancing body parts).
    #[serde(default)]
    pub part_weights: Option<Vec<f64>>,
    pub z_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            tau: DEFAULT_TAU,
            part_weights: None,
            z_loss_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub distill_logit: f64,
    pub distill_feature: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
        self.distill_logit += o.distill_logit;
        self.distill_feature += o.distill_feature;
    }

    fn scale(&mut self, s: f64) {
        self.total *= s;
        self.x *= s;
        self.y *= s;
        self.z *= s;
        self.distill_logit *= s;
        self.distill_feature *= s;
    }
}

/// SimCC KL loss of one output against its labels, with gradients for the logits.
pub fn task_loss(
    out: &ModelOutput,
    labels: &SimCCLabels,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, OutputGrads)> {
    let pw = cfg.part_weights.as_deref();
    let w = &labels.keypoint_weights;
    let (lx, gx) = kl_discret_loss(&out.x_logits, &labels.x_labels, w, cfg.tau, pw)?;
    let (ly, gy) = kl_discret_loss(&out.y_logits, &labels.y_labels, w, cfg.tau, pw)?;
    let mut loss = LossBreakdown {
        total: lx + ly,
        x: lx,
        y: ly,
        ..Default::default()
    };
    let mut grads = OutputGrads {
        x_logits: Some(gx),
        y_logits: Some(gy),
        ..Default::default()
    };
    if let (Some(zl), Some(zt)) = (&out.z_logits, &labels.z_labels) {
        let (lz, mut gz) = kl_discret_loss(zl, zt, &labels.z_weights, cfg.tau, pw)?;
        gz.scale(cfg.z_loss_weight);
        loss.z = lz;
        loss.total += cfg.z_loss_weight * lz;
        grads.z_logits = Some(gz);
    }
    Ok((loss, grads))
}

/// Task loss and parameter gradients for one sample.
pub fn loss_and_grads(model: &Model, sample: &TrainSample, cfg: &TrainConfig) -> Result<(LossBreakdown, Grads)> {
    let (out, cache) = model.forward_cached(&sample.image)?;
    let (loss, d) = task_loss(&out, &sample.labels, cfg)?;
    let mut grads = model.params.new_grads();
    model.backward(&cache, &d, &mut grads)?;
    Ok((loss, grads))
}

/// Mean loss and gradients over a batch.
///
/// Samples are processed in parallel and reduced in input order, so results do not
/// depend on thread scheduling.
pub fn batch_loss_and_grads<F>(model: &Model, samples: &[TrainSample], per_sample: F) -> Result<(LossBreakdown, Grads)>
where
    F: Fn(&Model, &TrainSample) -> Result<(LossBreakdown, Grads)> + Sync,
{
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let results: Vec<Result<(LossBreakdown, Grads)>> =
        samples.par_iter().map(|s| per_sample(model, s)).collect();
    let mut total = LossBreakdown::default();
    let mut grads = model.params.new_grads();
    for r in results {
        let (l, g) = r?;
        total.add(&l);
        grads.add_assign(&g);
    }
    let inv = 1.0 / samples.len() as f64;
    total.scale(inv);
    grads.scale(inv);
    Ok((total, grads))
}

/// SGD trainer over a model, with optional frozen parameter prefixes.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    opt: Sgd,
    frozen: Vec<String>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        let opt = Sgd::new(cfg.sgd, &model.params);
        Trainer {
            model,
            cfg,
            opt,
            frozen: vec![],
        }
    }

    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) {
        self.frozen = prefixes.iter().map(|s| s.to_string()).collect();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.cfg.lr = lr;
        self.cfg.sgd.lr = lr;
    }

    /// Apply pre-computed mean gradients.
    pub fn apply(&mut self, grads: &Grads) -> Result<()> {
        let trainable: Vec<bool> = self
            .model
            .params
            .params()
            .iter()
            .map(|p| !self.is_frozen(&p.name))
            .collect();
        if !trainable.iter().any(|t| *t) {
            return Err(Error::invalid("no trainable parameters"));
        }
        self.model.params.zero_grad();
        self.model.params.accumulate(grads);
        self.opt.step_where(&mut self.model.params, |id| trainable[id.0]);
        Ok(())
    }

    /// One SGD step on the task loss.
    pub fn step(&mut self, batch: &[TrainSample]) -> Result<LossBreakdown> {
        let cfg = self.cfg.clone();
        let (loss, grads) = batch_loss_and_grads(&self.model, batch, |m, s| loss_and_grads(m, s, &cfg))?;
        self.apply(&grads)?;
        Ok(loss)
    }
}
