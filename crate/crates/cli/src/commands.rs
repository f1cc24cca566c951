use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use posekit_core::dataset::{convert_file, load_mapping, read_coco};
use posekit_core::distill::{stage2_head_distill_step, stage2_loss, stage2_trainer, DistillConfig, Stage1};
use posekit_core::error::read_json;
use posekit_core::eval::{ground_truth_from_coco, per_part_report, read_predictions, EvalReport};
use posekit_core::model::{
    load_checkpoint, save_checkpoint, Model, ModelConfig, TrainConfig, TrainSample, Trainer, FEATURE_PREFIXES,
};
use posekit_core::pipeline::{
    affine_crop, invert_transform, pose_nms, simulate, smooth, PipelineConfig, SimulationResult, SmootherConfig,
    SmootherState, Trace,
};
use posekit_core::simcc::{decode_pose, encode_pose};
use posekit_core::synth::{blob_corpus, mean_error, random_pose, render, CorpusSpec, SynthExample};
use posekit_core::tensor::SgdConfig;
use posekit_core::types::WHOLEBODY;
use posekit_core::{BBox, KeypointSchema, Pose, SchemaRegistry, SimCCLabelSpec, Tensor};

use crate::overlay::render_svg;
use crate::{
    BenchArgs, CliError, CliResult, CodecCommand, CodecDecodeArgs, CodecEncodeArgs, CodecRoundtripArgs, Command,
    ConvertArgs, DistillArgs, EvalArgs, Geometry, PipelineSimArgs, PlotOverlayArgs, TrainToyArgs,
};

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Codec(CodecCommand::Encode(a)) => codec_encode(a),
        Command::Codec(CodecCommand::Decode(a)) => codec_decode(a),
        Command::Codec(CodecCommand::Roundtrip(a)) => codec_roundtrip(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Distill(a) => distill(a),
        Command::Convert(a) => convert(a),
        Command::Eval(a) => eval(a),
        Command::PipelineSim(a) => pipeline_sim(a),
        Command::Bench(a) => bench(a),
        Command::PlotOverlay(a) => plot_overlay(a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn data(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

/// Pretty JSON to `out`, or to stdout when no path is given.
fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| data(e.to_string()))?;
    text.push('\n');
    match out {
        Some(p) => write_text(p, &text),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes()).map_err(|e| data(e.to_string()))
        }
    }
}

fn label_spec(g: &Geometry) -> CliResult<SimCCLabelSpec> {
    let spec = SimCCLabelSpec::new(g.w, g.h).with_split_ratio(g.k);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

// ---------------------------------------------------------------------------------------
// codec

#[derive(Debug, Serialize, Deserialize)]
struct EncodedLabels {
    input_w: usize,
    input_h: usize,
    split_ratio: f64,
    sigma_x: f64,
    sigma_y: f64,
    keypoints: Vec<EncodedKeypoint>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncodedKeypoint {
    x: f64,
    y: f64,
    weight: f64,
    x_labels: Vec<f64>,
    y_labels: Vec<f64>,
}

fn codec_encode(a: CodecEncodeArgs) -> CliResult<()> {
    let spec = label_spec(&a.geometry)?;
    let pose = Pose::visible(a.points.clone());
    let l = encode_pose(&pose, &spec);
    let keypoints = a
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| EncodedKeypoint {
            x: p[0],
            y: p[1],
            weight: l.keypoint_weights[i],
            x_labels: l.x_labels.row(i).to_vec(),
            y_labels: l.y_labels.row(i).to_vec(),
        })
        .collect();
    emit_json(
        a.out.as_deref(),
        &EncodedLabels {
            input_w: spec.input_w,
            input_h: spec.input_h,
            split_ratio: spec.split_ratio,
            sigma_x: spec.sigma_x(),
            sigma_y: spec.sigma_y(),
            keypoints,
        },
    )
}

#[derive(Debug, Serialize)]
struct DecodedKeypoint {
    x: f64,
    y: f64,
    score: f64,
}

fn codec_decode(a: CodecDecodeArgs) -> CliResult<()> {
    let enc: EncodedLabels = read_json(&a.input)?;
    let spec = SimCCLabelSpec::new(enc.input_w, enc.input_h).with_split_ratio(enc.split_ratio);
    spec.validate()?;
    if enc.keypoints.is_empty() {
        return Err(data(format!("{}: no keypoints", a.input.display())));
    }
    let xs: Vec<Vec<f64>> = enc.keypoints.iter().map(|k| k.x_labels.clone()).collect();
    let ys: Vec<Vec<f64>> = enc.keypoints.iter().map(|k| k.y_labels.clone()).collect();
    let (xt, yt) = (Tensor::from_rows(&xs)?, Tensor::from_rows(&ys)?);
    if xt.dims2()?.1 != spec.len_x() || yt.dims2()?.1 != spec.len_y() {
        return Err(data(format!(
            "{}: label lengths do not match a {}x{} patch at k={}",
            a.input.display(),
            spec.input_w,
            spec.input_h,
            spec.split_ratio
        )));
    }
    let pose = decode_pose(&xt, &yt, None, &spec)?;
    let scores = pose.scores.clone().unwrap_or_default();
    let out: Vec<DecodedKeypoint> = pose
        .coords
        .iter()
        .zip(&scores)
        .map(|(c, s)| DecodedKeypoint {
            x: c[0],
            y: c[1],
            score: *s,
        })
        .collect();
    emit_json(a.out.as_deref(), &out)
}

#[derive(Debug, Serialize)]
struct RoundtripReport {
    seed: u64,
    n: usize,
    input_w: usize,
    input_h: usize,
    split_ratio: f64,
    max_error_x: f64,
    max_error_y: f64,
    bound: f64,
    within_bound: bool,
}

fn codec_roundtrip(a: CodecRoundtripArgs) -> CliResult<()> {
    let spec = label_spec(&a.geometry)?;
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (w, h) = (spec.input_w as f64 - 1.0, spec.input_h as f64 - 1.0);
    let (mut ex, mut ey) = (0.0f64, 0.0f64);
    let mut left = a.n;
    while left > 0 {
        let m = left.min(1000);
        left -= m;
        let pts: Vec<[f64; 2]> = (0..m)
            .map(|_| [rng.random_range(0.0..=w), rng.random_range(0.0..=h)])
            .collect();
        let l = encode_pose(&Pose::visible(pts.clone()), &spec);
        let d = decode_pose(&l.x_labels, &l.y_labels, None, &spec)?;
        for (p, q) in pts.iter().zip(&d.coords) {
            ex = ex.max((p[0] - q[0]).abs());
            ey = ey.max((p[1] - q[1]).abs());
        }
    }
    let bound = 0.5 / spec.split_ratio;
    let report = RoundtripReport {
        seed: a.seed,
        n: a.n,
        input_w: spec.input_w,
        input_h: spec.input_h,
        split_ratio: spec.split_ratio,
        max_error_x: ex,
        max_error_y: ey,
        bound,
        within_bound: ex <= bound + 1e-12 && ey <= bound + 1e-12,
    };
    emit_json(a.out.as_deref(), &report)?;
    if report.within_bound {
        Ok(())
    } else {
        Err(data(format!("round-trip error {} exceeds {bound}", ex.max(ey))))
    }
}

// ---------------------------------------------------------------------------------------
// training

fn sgd(lr: f64, clip: f64) -> CliResult<SgdConfig> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(usage(format!("--lr must be a non-negative number, got {lr}")));
    }
    Ok(SgdConfig {
        lr,
        max_grad_norm: (clip > 0.0).then_some(clip),
        ..Default::default()
    })
}

/// Batch `step` of a fixed cycle over `examples`.
fn cycle_batch(examples: &[SynthExample], batch: usize, step: usize) -> Vec<TrainSample> {
    (0..batch)
        .map(|j| examples[(step * batch + j) % examples.len()].sample.clone())
        .collect()
}

fn corpus_error(model: &Model, examples: &[SynthExample]) -> CliResult<f64> {
    let mut sum = 0.0;
    for ex in examples {
        sum += mean_error(&model.predict(&ex.sample.image)?, &ex.pose);
    }
    Ok(sum / examples.len().max(1) as f64)
}

fn log_every(steps: usize) -> usize {
    (steps / 20).max(1)
}

#[derive(Debug, Serialize)]
struct TrainReport {
    seed: u64,
    steps: usize,
    batch: usize,
    /// (step, loss) samples
    losses: Vec<(usize, f64)>,
    final_loss: f64,
    mean_error_px: f64,
    params: usize,
}

fn train_toy(a: TrainToyArgs) -> CliResult<()> {
    if a.keypoints == 0 || a.instances == 0 || a.batch == 0 || a.steps == 0 {
        return Err(usage("--keypoints, --instances, --batch and --steps must be positive"));
    }
    let mut cfg = ModelConfig::toy(a.keypoints).with_hidden(a.hidden);
    cfg.input_w = a.width;
    cfg.input_h = a.height;
    cfg.num_levels = a.levels;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let model = Model::build(cfg, a.seed)?;
    let examples = blob_corpus(a.keypoints, a.instances, &model.label_spec(), a.seed.wrapping_add(1));
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            sgd: sgd(a.lr, a.clip)?,
            ..Default::default()
        },
    );
    let mut losses = Vec::new();
    let mut last = f64::NAN;
    for step in 0..a.steps {
        let l = trainer.step(&cycle_batch(&examples, a.batch, step))?;
        last = l.total;
        if step % log_every(a.steps) == 0 || step + 1 == a.steps {
            log::info!("step {step}: loss {:.5}", l.total);
            losses.push((step, l.total));
        }
        if !l.total.is_finite() {
            return Err(data(format!("loss diverged at step {step}")));
        }
    }
    save_checkpoint(&trainer.model, &a.out)?;
    let report = TrainReport {
        seed: a.seed,
        steps: a.steps,
        batch: a.batch,
        losses,
        final_loss: last,
        mean_error_px: corpus_error(&trainer.model, &examples)?,
        params: trainer.model.params.num_values(),
    };
    if let Some(p) = &a.report {
        emit_json(Some(p), &report)?;
    }
    eprintln!("final loss {:.5}, mean error {:.3} px", report.final_loss, report.mean_error_px);
    Ok(())
}

#[derive(Debug, Serialize)]
struct DistillReport {
    seed: u64,
    stage: u8,
    steps: usize,
    losses: Vec<(usize, f64)>,
    initial_distill_loss: Option<f64>,
    final_distill_loss: Option<f64>,
    mean_error_px: f64,
}

fn distill(a: DistillArgs) -> CliResult<()> {
    if a.steps == 0 || a.batch == 0 {
        return Err(usage("--steps and --batch must be positive"));
    }
    let teacher = load_checkpoint(&a.teacher)?;
    let student = load_checkpoint(&a.student)?;
    let spec: CorpusSpec = read_json(&a.corpus)?;
    let k = student.config.num_keypoints;
    if spec.num_keypoints() != k || teacher.config.num_keypoints != k {
        return Err(data(format!(
            "keypoint counts differ: corpus {}, teacher {}, student {k}",
            spec.num_keypoints(),
            teacher.config.num_keypoints
        )));
    }
    let examples = spec.build(&student.label_spec())?;
    let sgd = sgd(a.lr, a.clip)?;
    let mut losses = Vec::new();
    let (model, initial, fin) = if a.stage == 1 {
        let cfg = DistillConfig {
            tau_d: a.tau,
            alpha: a.alpha,
            beta: a.beta,
            stage: 1,
            linear_decay: a.linear_decay,
            ..Default::default()
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        let trainer = Trainer::new(student, TrainConfig { sgd, ..Default::default() });
        let mut s1 = Stage1::new(trainer, teacher, cfg, a.seed)?;
        for step in 0..a.steps {
            let l = s1.step(&cycle_batch(&examples, a.batch, step), step, a.steps)?;
            if step % log_every(a.steps) == 0 || step + 1 == a.steps {
                log::info!("step {step}: loss {:.5}", l.total);
                losses.push((step, l.total));
            }
        }
        (s1.student.model, None, None)
    } else {
        if !(a.tau > 0.0) {
            return Err(usage(format!("--tau must be positive, got {}", a.tau)));
        }
        let (mut trainer, _) = stage2_trainer(&student, sgd, a.seed);
        let images: Vec<Tensor> = examples.iter().map(|e| e.sample.image.clone()).collect();
        let initial = stage2_loss(&trainer.model, &teacher, &images, a.tau)?;
        for step in 0..a.steps {
            let batch: Vec<Tensor> = cycle_batch(&examples, a.batch, step).into_iter().map(|s| s.image).collect();
            let l = stage2_head_distill_step(&mut trainer, &FEATURE_PREFIXES, |img| teacher.forward(img), &batch, a.tau)?;
            if step % log_every(a.steps) == 0 || step + 1 == a.steps {
                log::info!("step {step}: distill loss {l:.5}");
                losses.push((step, l));
            }
        }
        let fin = stage2_loss(&trainer.model, &teacher, &images, a.tau)?;
        (trainer.model, Some(initial), Some(fin))
    };
    save_checkpoint(&model, &a.out)?;
    let report = DistillReport {
        seed: a.seed,
        stage: a.stage,
        steps: a.steps,
        losses,
        initial_distill_loss: initial,
        final_distill_loss: fin,
        mean_error_px: corpus_error(&model, &examples)?,
    };
    if let Some(p) = &a.report {
        emit_json(Some(p), &report)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------
// data

fn convert(a: ConvertArgs) -> CliResult<()> {
    let registry = SchemaRegistry::default();
    let mapping = load_mapping(&a.mapping, &registry)?;
    let file = read_coco(&a.input)?;
    let schema = a.schema.as_deref().unwrap_or(mapping.source_schema());
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        a.input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let out = convert_file(&file, schema, &mapping, &dataset)?;
    emit_json(Some(&a.out), &out)?;
    eprintln!("converted {} annotations", out.annotations.len());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let gt = read_coco(&a.gt)?;
    let registry = SchemaRegistry::default();
    let name = gt
        .schema
        .clone()
        .or_else(|| a.schema.clone())
        .unwrap_or_else(|| WHOLEBODY.to_string());
    let schema = registry.require(&name)?;
    let (gts, image_ids) = ground_truth_from_coco(&gt, schema)?;
    let preds = read_predictions(&a.pred, schema.size())?;
    let report: EvalReport = per_part_report(&preds, &gts, &image_ids, schema)?;
    if let Some(p) = &a.out {
        emit_json(Some(p), &report)?;
    }
    if a.json {
        emit_json(None, &report)
    } else {
        print!("{}", report.to_table());
        Ok(())
    }
}

// ---------------------------------------------------------------------------------------
// pipeline

fn sigmas_for(k: usize) -> Vec<f64> {
    let registry = SchemaRegistry::default();
    let name = [KeypointSchema::wholebody(), KeypointSchema::coco17(), KeypointSchema::synthetic3()]
        .into_iter()
        .find(|s| s.size() == k)
        .map(|s| s.name().to_string())
        .unwrap_or_default();
    registry.sigmas_or_default(&name, k)
}

#[derive(Debug, Serialize)]
struct SimulationOutput {
    seed: u64,
    noise: f64,
    config: PipelineConfig,
    #[serde(flatten)]
    result: SimulationResult,
}

fn pipeline_sim(a: PipelineSimArgs) -> CliResult<()> {
    let trace: Trace = read_json(&a.trace)?;
    let cfg: PipelineConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if !(a.noise >= 0.0) {
        return Err(usage(format!("--noise must be non-negative, got {}", a.noise)));
    }
    let result = simulate(&trace, cfg.clone(), sigmas_for(trace.num_keypoints), a.noise, a.seed)?;
    eprintln!(
        "{} frames, {} detector calls",
        result.frames.len(),
        result.detector_calls
    );
    emit_json(
        Some(&a.out),
        &SimulationOutput {
            seed: a.seed,
            noise: a.noise,
            config: cfg,
            result,
        },
    )
}

#[derive(Debug, Serialize)]
struct StageTiming {
    stage: &'static str,
    mean_us: f64,
    min_us: f64,
    max_us: f64,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    seed: u64,
    iters: usize,
    keypoints: usize,
    instances: usize,
    input_w: usize,
    input_h: usize,
    threads: usize,
    stages: Vec<StageTiming>,
}

fn time_stage<T>(name: &'static str, iters: usize, mut f: impl FnMut() -> CliResult<T>) -> CliResult<StageTiming> {
    let mut v = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        std::hint::black_box(f()?);
        v.push(t.elapsed().as_secs_f64() * 1e6);
    }
    Ok(StageTiming {
        stage: name,
        mean_us: v.iter().sum::<f64>() / iters as f64,
        min_us: v.iter().copied().fold(f64::INFINITY, f64::min),
        max_us: v.iter().copied().fold(0.0, f64::max),
    })
}

fn bench(a: BenchArgs) -> CliResult<()> {
    if a.iters == 0 || a.keypoints == 0 || a.instances == 0 {
        return Err(usage("--iters, --keypoints and --instances must be positive"));
    }
    let cfg = ModelConfig::toy(a.keypoints);
    let model = Model::build(cfg.clone(), a.seed)?;
    let spec = model.label_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (fw, fh) = (4 * cfg.input_w, 4 * cfg.input_h);
    let frame_pose = random_pose(a.keypoints, fw, fh, 8.0, &mut rng);
    let frame = render(&frame_pose, &vec![3.0; a.keypoints], fw, fh);
    let boxes: Vec<BBox> = (0..a.instances)
        .map(|_| {
            let (w, h) = (rng.random_range(40.0..120.0), rng.random_range(60.0..160.0));
            BBox {
                x: rng.random_range(0.0..fw as f64 - w),
                y: rng.random_range(0.0..fh as f64 - h),
                w,
                h,
            }
        })
        .collect();
    let patch_pose = random_pose(a.keypoints, cfg.input_w, cfg.input_h, 2.0, &mut rng);
    let (patch, t) = affine_crop(&frame, &boxes[0], cfg.input_w, cfg.input_h, 1.25)?;
    let out = model.forward(&patch)?;
    let decoded = decode_pose(&out.x_logits, &out.y_logits, None, &spec)?;
    let mut poses: Vec<Pose> = Vec::new();
    for b in &boxes {
        let (_, t) = affine_crop(&frame, b, cfg.input_w, cfg.input_h, 1.25)?;
        poses.push(invert_transform(&decoded, &t)?);
    }
    let scores: Vec<f64> = (0..poses.len()).map(|i| 1.0 - i as f64 * 0.01).collect();
    let sigmas = sigmas_for(a.keypoints);
    let mut stages = vec![
        time_stage("encode", a.iters, || Ok(encode_pose(&patch_pose, &spec)))?,
        time_stage("crop", a.iters, || {
            let mut v = Vec::with_capacity(boxes.len());
            for b in &boxes {
                v.push(affine_crop(&frame, b, cfg.input_w, cfg.input_h, 1.25)?);
            }
            Ok(v)
        })?,
        time_stage("forward", a.iters, || Ok(model.forward(&patch)?))?,
        time_stage("decode", a.iters, || Ok(decode_pose(&out.x_logits, &out.y_logits, None, &spec)?))?,
        time_stage("invert", a.iters, || Ok(invert_transform(&decoded, &t)?))?,
        time_stage("nms", a.iters, || Ok(pose_nms(&poses, &scores, &sigmas, 0.9)?))?,
    ];
    let smoother = SmootherConfig::default();
    let mut state = SmootherState::default();
    stages.push(time_stage("smooth", a.iters, || Ok(smooth(&decoded, &mut state, &smoother, 30.0)))?);
    let report = BenchReport {
        seed: a.seed,
        iters: a.iters,
        keypoints: a.keypoints,
        instances: a.instances,
        input_w: cfg.input_w,
        input_h: cfg.input_h,
        threads: rayon::current_num_threads(),
        stages,
    };
    emit_json(a.out.as_deref(), &report)
}

// ---------------------------------------------------------------------------------------
// overlay

fn plot_overlay(a: PlotOverlayArgs) -> CliResult<()> {
    use crate::OverlaySource;
    let registry = SchemaRegistry::default();
    let (name, mut poses): (String, Vec<(u64, Pose)>) = match a.source {
        OverlaySource::Gt => {
            let file = read_coco(&a.input)?;
            let name = file
                .schema
                .clone()
                .or_else(|| a.schema.clone())
                .unwrap_or_else(|| WHOLEBODY.to_string());
            let schema = registry.require(&name)?;
            let (gts, _) = ground_truth_from_coco(&file, schema)?;
            (name, gts.into_iter().map(|g| (g.image_id, g.pose)).collect())
        }
        OverlaySource::Pred => {
            let name = a.schema.clone().unwrap_or_else(|| WHOLEBODY.to_string());
            let schema = registry.require(&name)?;
            let preds = read_predictions(&a.input, schema.size())?;
            (name, preds.into_iter().map(|p| (p.image_id, p.pose)).collect())
        }
    };
    if let Some(id) = a.image_id {
        poses.retain(|(i, _)| *i == id);
    }
    if poses.is_empty() {
        return Err(data(format!("{}: no instances to draw", a.input.display())));
    }
    let schema = registry.require(&name)?;
    let poses: Vec<Pose> = poses.into_iter().map(|(_, p)| p).collect();
    let svg = render_svg(&poses, schema, a.size);
    write_text(&a.out, &svg)
}
