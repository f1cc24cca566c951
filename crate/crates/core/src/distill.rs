//! Two-stage distillation.
//!
//! Stage 1 trains a student on the task loss plus a logit term (KL to the teacher's
//! temperature-softened distributions) and a feature term (MSE between fused features,
//! through a learned 1×1 projector when widths differ). Stage 2 freezes the student's
//! feature extractor and retrains its attention block and branches against the logits of
//! the stage-1 student.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    batch_loss_and_grads, loss_and_grads, task_loss, LossBreakdown, Model, ModelOutput,
    OutputGrads, TrainSample, Trainer, FEATURE_PREFIXES, HEAD_PREFIXES,
};
use crate::tensor::{
    kl_to_distribution, softmax_temp, Conv2d, ConvCache, Grads, ParamStore, Precision, Sgd,
    SgdConfig, Tensor, DEFAULT_TAU,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub tau_d: f64,
    pub alpha: f64,
    pub beta: f64,
    pub stage: u8,
    pub stage2_fraction: f64,
    /// Linearly decay α and β to zero over the run.
    #[serde(default)]
    pub linear_decay: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_d: DEFAULT_TAU,
            alpha: 1.0,
            beta: 0.5,
            stage: 1,
            stage2_fraction: 0.2,
            linear_decay: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid(format!(
                "distillation weights must be nonnegative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if !(self.tau_d > 0.0) {
            return Err(Error::invalid(format!("tau_d must be positive, got {}", self.tau_d)));
        }
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::invalid(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(0.0..=1.0).contains(&self.stage2_fraction) {
            return Err(Error::invalid(format!("stage2_fraction {}", self.stage2_fraction)));
        }
        Ok(())
    }

    /// `(α, β)` at `step` of `total`.
    pub fn weights_at(&self, step: usize, total: usize) -> (f64, f64) {
        if !self.linear_decay || total == 0 {
            return (self.alpha, self.beta);
        }
        let f = 1.0 - (step.min(total) as f64 / total as f64);
        (self.alpha * f, self.beta * f)
    }

    /// Split a step budget into stage-1 and stage-2 steps.
    pub fn split_steps(&self, total: usize) -> (usize, usize) {
        let s2 = (total as f64 * self.stage2_fraction).round() as usize;
        (total - s2, s2)
    }
}

/// KL from the teacher's to the student's temperature-softmaxed rows, keypoint-weighted.
/// Returns the loss and its gradient with respect to the student logits.
pub fn logit_distill_loss(
    teacher: &Tensor,
    student: &Tensor,
    weights: &[f64],
    tau_d: f64,
) -> Result<(f64, Tensor)> {
    if teacher.shape() != student.shape() {
        return Err(Error::shape(format!(
            "teacher logits {:?}, student logits {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    let (k, l) = teacher.dims2()?;
    let mut target = Tensor::zeros(&[k, l]);
    for i in 0..k {
        target.row_mut(i).copy_from_slice(&softmax_temp(teacher.row(i), tau_d)?);
    }
    kl_to_distribution(student, &target, weights, tau_d, None)
}

/// Maps student feature channels to teacher channels with a 1×1 conv; the identity when
/// the widths agree.
#[derive(Debug, Clone)]
pub struct FeatureProjector {
    pub params: ParamStore,
    conv: Option<Conv2d>,
}

impl FeatureProjector {
    pub fn new(student_channels: usize, teacher_channels: usize, precision: Precision) -> Self {
        let mut params = ParamStore::new(precision);
        let conv = (student_channels != teacher_channels).then(|| {
            Conv2d::new(
                &mut params,
                "distill.proj",
                student_channels,
                teacher_channels,
                1,
                1,
                false,
            )
        });
        FeatureProjector { params, conv }
    }

    pub fn is_identity(&self) -> bool {
        self.conv.is_none()
    }

    /// Uniform init in `±√(6/fan_in)`, zero bias.
    pub fn init(&mut self, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let prec = self.params.precision();
        for id in self.params.ids().collect::<Vec<_>>() {
            let p = self.params.param_mut(id);
            if p.name.ends_with(".bias") {
                p.value.fill(0.0);
                continue;
            }
            let bound = (6.0 / p.value.shape()[1..].iter().product::<usize>() as f64).sqrt();
            for v in p.value.data_mut() {
                *v = prec.round(rng.random_range(-bound..bound));
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Option<ConvCache>)> {
        match &self.conv {
            Some(c) => {
                let (y, cache) = c.forward(&self.params, x)?;
                Ok((y, Some(cache)))
            }
            None => Ok((x.clone(), None)),
        }
    }
}

/// Mean squared error between the projected student feature and the teacher feature.
///
/// Returns the loss, the gradient for the student feature, and projector gradients.
pub fn feature_distill_loss(
    teacher: &Tensor,
    student: &Tensor,
    projector: &FeatureProjector,
) -> Result<(f64, Tensor, Grads)> {
    let (_, th, tw) = teacher.dims3()?;
    let (_, sh, sw) = student.dims3()?;
    if (th, tw) != (sh, sw) {
        return Err(Error::shape(format!(
            "teacher feature {th}x{tw}, student feature {sh}x{sw}"
        )));
    }
    let (proj, cache) = projector.forward(student)?;
    if proj.shape() != teacher.shape() {
        return Err(Error::shape(format!(
            "projected student feature {:?}, teacher feature {:?}",
            proj.shape(),
            teacher.shape()
        )));
    }
    let n = proj.len() as f64;
    let mut loss = 0.0;
    let mut d = Tensor::zeros(proj.shape());
    for ((g, p), t) in d.data_mut().iter_mut().zip(proj.data()).zip(teacher.data()) {
        let e = p - t;
        loss += e * e;
        *g = 2.0 * e / n;
    }
    let mut grads = projector.params.new_grads();
    let ds = match (&projector.conv, &cache) {
        (Some(c), Some(cache)) => c.backward(&projector.params, cache, &d, &mut grads)?,
        _ => d,
    };
    Ok((loss / n, ds, grads))
}

fn add_scaled(slot: &mut Option<Tensor>, g: Tensor, s: f64) {
    let mut g = g;
    g.scale(s);
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Logit distillation over x, y and (when both models have it) z.
fn logit_terms(
    teacher: &ModelOutput,
    student: &ModelOutput,
    weights: &[f64],
    z_weights: &[f64],
    tau_d: f64,
) -> Result<(f64, OutputGrads)> {
    let (lx, gx) = logit_distill_loss(&teacher.x_logits, &student.x_logits, weights, tau_d)?;
    let (ly, gy) = logit_distill_loss(&teacher.y_logits, &student.y_logits, weights, tau_d)?;
    let mut d = OutputGrads {
        x_logits: Some(gx),
        y_logits: Some(gy),
        ..Default::default()
    };
    let mut loss = lx + ly;
    if let (Some(tz), Some(sz)) = (&teacher.z_logits, &student.z_logits) {
        let (lz, gz) = logit_distill_loss(tz, sz, z_weights, tau_d)?;
        loss += lz;
        d.z_logits = Some(gz);
    }
    Ok((loss, d))
}

/// Stage 1: task loss plus weighted teacher terms.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub student: Trainer,
    pub teacher: Model,
    pub projector: FeatureProjector,
    pub cfg: DistillConfig,
    proj_opt: Sgd,
}

impl Stage1 {
    pub fn new(student: Trainer, teacher: Model, cfg: DistillConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (s, t) = (&student.model.config, &teacher.config);
        if (s.input_w, s.input_h, s.num_keypoints) != (t.input_w, t.input_h, t.num_keypoints)
            || s.len_x() != t.len_x()
            || s.len_y() != t.len_y()
        {
            return Err(Error::invalid(
                "teacher and student must share input size, keypoints and split ratio",
            ));
        }
        let mut projector = FeatureProjector::new(
            s.neck_channels,
            t.neck_channels,
            student.model.config.precision,
        );
        projector.init(seed);
        let proj_opt = Sgd::new(student.cfg.sgd, &projector.params);
        Ok(Stage1 {
            student,
            teacher,
            projector,
            cfg,
            proj_opt,
        })
    }

    /// Loss and student gradients for one sample with the given term weights.
    pub fn sample_loss(
        &self,
        model: &Model,
        sample: &TrainSample,
        alpha: f64,
        beta: f64,
    ) -> Result<(LossBreakdown, Grads, Option<Grads>)> {
        if alpha == 0.0 && beta == 0.0 {
            let (l, g) = loss_and_grads(model, sample, &self.student.cfg)?;
            return Ok((l, g, None));
        }
        let (out, cache) = model.forward_cached(&sample.image)?;
        let (mut loss, mut d) = task_loss(&out, &sample.labels, &self.student.cfg)?;
        let t_out = self.teacher.forward(&sample.image)?;
        if alpha > 0.0 {
            let w = &sample.labels.keypoint_weights;
            let (l, dl) = logit_terms(&t_out, &out, w, &sample.labels.z_weights, self.cfg.tau_d)?;
            loss.distill_logit = l;
            loss.total += alpha * l;
            for (slot, g) in [
                (&mut d.x_logits, dl.x_logits),
                (&mut d.y_logits, dl.y_logits),
                (&mut d.z_logits, dl.z_logits),
            ] {
                if let Some(g) = g {
                    add_scaled(slot, g, alpha);
                }
            }
        }
        let mut pgrads = None;
        if beta > 0.0 {
            let (l, ds, mut pg) = feature_distill_loss(&t_out.feature, &out.feature, &self.projector)?;
            loss.distill_feature = l;
            loss.total += beta * l;
            add_scaled(&mut d.feature, ds, beta);
            pg.scale(beta);
            pgrads = Some(pg);
        }
        let mut grads = model.params.new_grads();
        model.backward(&cache, &d, &mut grads)?;
        Ok((loss, grads, pgrads))
    }

    /// One step at position `step` of a `total`-step run.
    pub fn step(&mut self, batch: &[TrainSample], step: usize, total: usize) -> Result<LossBreakdown> {
        let (alpha, beta) = self.cfg.weights_at(step, total);
        if alpha == 0.0 && beta == 0.0 {
            return self.student.step(batch);
        }
        let pgrads = std::sync::Mutex::new(Vec::new());
        let (loss, grads) = {
            let this = &*self;
            batch_loss_and_grads(&this.student.model, batch, |m, s| {
                let (l, g, pg) = this.sample_loss(m, s, alpha, beta)?;
                if let Some(pg) = pg {
                    let idx = batch
                        .iter()
                        .position(|b| std::ptr::eq(b, s))
                        .expect("sample from batch");
                    pgrads.lock().expect("lock").push((idx, pg));
                }
                Ok((l, g))
            })?
        };
        self.student.apply(&grads)?;
        let mut pg = pgrads.into_inner().expect("lock");
        if !pg.is_empty() && !self.projector.is_identity() {
            pg.sort_by_key(|(i, _)| *i);
            let mut sum = self.projector.params.new_grads();
            for (_, g) in &pg {
                sum.add_assign(g);
            }
            sum.scale(1.0 / batch.len() as f64);
            self.projector.params.zero_grad();
            self.projector.params.accumulate(&sum);
            self.proj_opt.step(&mut self.projector.params);
        }
        Ok(loss)
    }
}

/// Stage 2 setup: the student's head is retrained against a frozen copy of itself.
///
/// The trainable head is re-drawn from `seed` before training so the self-distillation
/// target differs from the starting point.
pub fn stage2_trainer(stage1_student: &Model, sgd: SgdConfig, seed: u64) -> (Trainer, Model) {
    let reference = stage1_student.clone();
    let mut student = stage1_student.clone();
    student.reinit_where(seed, &HEAD_PREFIXES);
    let mut trainer = Trainer::new(
        student,
        crate::model::TrainConfig {
            sgd,
            ..Default::default()
        },
    );
    trainer.freeze_prefixes(&FEATURE_PREFIXES);
    (trainer, reference)
}

/// One stage-2 step: logit distillation of every keypoint against `teacher_logits`.
///
/// Parameters under `frozen` prefixes are never modified. Returns the mean loss over the
/// batch before the update.
pub fn stage2_head_distill_step<F>(
    student: &mut Trainer,
    frozen: &[&str],
    teacher_logits: F,
    batch: &[Tensor],
    tau_d: f64,
) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<ModelOutput> + Sync,
{
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    student.freeze_prefixes(frozen);
    let k = student.model.config.num_keypoints;
    let ones = vec![1.0; k];
    let results: Vec<Result<(f64, Grads)>> = {
        use rayon::prelude::*;
        let model = &student.model;
        batch
            .par_iter()
            .map(|img| {
                let t = teacher_logits(img)?;
                let (out, cache) = model.forward_cached(img)?;
                let (loss, d) = logit_terms(&t, &out, &ones, &ones, tau_d)?;
                let mut g = model.params.new_grads();
                model.backward(&cache, &d, &mut g)?;
                Ok((loss, g))
            })
            .collect()
    };
    let mut total = 0.0;
    let mut grads = student.model.params.new_grads();
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    student.apply(&grads)?;
    Ok(total * inv)
}

/// Mean stage-2 loss of `student` against `teacher` over `images`, without updating.
pub fn stage2_loss(student: &Model, teacher: &Model, images: &[Tensor], tau_d: f64) -> Result<f64> {
    let ones = vec![1.0; student.config.num_keypoints];
    let mut total = 0.0;
    for img in images {
        let (l, _) = logit_terms(&teacher.forward(img)?, &student.forward(img)?, &ones, &ones, tau_d)?;
        total += l;
    }
    Ok(total / images.len().max(1) as f64)
}
