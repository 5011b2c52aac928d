//! Training loop: clean backgrounds in, copy-paste defects on the fly.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use crate::augment::{copy_paste, photometric, weight_map, CopyPasteOutput, WeightMap};
use crate::classic::align;
use crate::error::{Error, Result};
use crate::image::{DefectMask, SemImage};
use crate::losses::{total_loss_with_grad, weighted_bce_with_grad, EmbeddingMap, LossConfig, LossInputs, SegTarget};
use crate::net::{save_checkpoint, Adam, ForwardOutput, OutputGrads, ProjectCache, Tape, Tensor, UNet};
use crate::rng::{derive, seeded};
use crate::simgen::{resolve, Manifest, Split};

/// Clean training backgrounds, with references already registered onto
/// their images when the mode needs them.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub images: Vec<SemImage>,
    pub references: Option<Vec<SemImage>>,
}

impl TrainSet {
    pub fn load(manifest_path: &Path, with_references: bool) -> Result<TrainSet> {
        let manifest = Manifest::load(manifest_path)?;
        let mut images = Vec::new();
        let mut refs = Vec::new();
        for rec in manifest.split(Split::Train) {
            let img = SemImage::load_png(&resolve(manifest_path, &rec.image_path))?;
            if with_references {
                let rel = rec.reference_path.as_ref().ok_or_else(|| {
                    Error::config(format!(
                        "ref-def mode requires paired references in the manifest, but {} has none \
                         (generate with data.generate.train_references = true)",
                        rec.image_path.display()
                    ))
                })?;
                let reference = SemImage::load_png(&resolve(manifest_path, rel))?;
                refs.push(align(&reference, &img)?.0);
            }
            images.push(img);
        }
        if images.is_empty() {
            return Err(Error::config(format!("{} has no training images", manifest_path.display())));
        }
        Ok(TrainSet {
            images,
            references: with_references.then_some(refs),
        })
    }
}

/// One prepared training example.
pub struct Sample {
    pub input: Tensor,
    pub mask: DefectMask,
    pub weights: WeightMap,
    /// Photometric view of the defect image for the contrastive branch.
    pub view: Option<Tensor>,
}

const STREAM_STEP: u64 = 0x5354_4550;

const PASTE_ATTEMPTS: u64 = 8;

/// Mean absolute change over the pasted pixels.
fn paste_change(before: &SemImage, after: &CopyPasteOutput) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, &l) in after.mask.labels.iter().enumerate() {
        if l != 0 {
            sum += (after.image.pixels[i] - before.pixels[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Copy-paste, redrawn while the paste barely changes the crop (a patch
/// landing in phase with the line pattern is invisible but still labelled).
/// The last draw is kept when every attempt stays below the bar.
fn paste(crop: &SemImage, cfg: &TrainConfig, seed: u64) -> Result<CopyPasteOutput> {
    let mut out = copy_paste(crop, &cfg.copy_paste, seed)?;
    for attempt in 1..PASTE_ATTEMPTS {
        if cfg.min_paste_change <= 0.0 || paste_change(crop, &out) >= cfg.min_paste_change {
            break;
        }
        out = copy_paste(crop, &cfg.copy_paste, derive(seed, attempt))?;
    }
    Ok(out)
}

/// Deterministic in `(cfg.seed, step, index)`.
pub fn make_sample(set: &TrainSet, cfg: &TrainConfig, step: usize, index: usize) -> Result<Sample> {
    let seed = derive(derive(cfg.seed ^ STREAM_STEP, step as u64), index as u64);
    let mut rng = seeded(seed);
    let k = rng.random_range(0..set.images.len());
    let img = &set.images[k];
    let c = cfg.crop;
    if img.height < c || img.width < c {
        return Err(Error::config(format!(
            "train.crop {c} exceeds training image size {}x{}",
            img.height, img.width
        )));
    }
    let r0 = rng.random_range(0..=img.height - c);
    let c0 = rng.random_range(0..=img.width - c);
    let crop = img.crop(r0, c0, c, c)?;
    let pasted = if rng.random_bool(cfg.clean_fraction) {
        CopyPasteOutput {
            mask: DefectMask::zeros(c, c),
            image: crop,
            placements: Vec::new(),
        }
    } else {
        paste(&crop, cfg, derive(seed, 1))?
    };
    let weights = weight_map(&pasted.mask);
    let input = match &set.references {
        Some(refs) => {
            let rc = refs[k].crop(r0, c0, c, c)?;
            Tensor::from_images(&[&pasted.image, &rc])?
        }
        None => Tensor::from_images(&[&pasted.image])?,
    };
    let view = if cfg.mode.uses_clr() {
        let v = photometric(&pasted.image, &cfg.photometric, derive(seed, 2))?;
        Some(Tensor::from_images(&[&v])?)
    } else {
        None
    };
    Ok(Sample {
        input,
        mask: pasted.mask,
        weights,
        view,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub wbce: f64,
    pub clr: f64,
    pub consistency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_wbce: Option<f64>,
    pub lr: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub steps: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    pub log: PathBuf,
    pub wall_clock_s: f64,
    pub config_digest: String,
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RUN_FILE: &str = "run.json";

fn channel_major(dim: usize, h: usize, w: usize, pixel_major: &[f64]) -> Tensor {
    let n = h * w;
    let mut data = vec![0.0f32; dim * n];
    for p in 0..n {
        for c in 0..dim {
            data[c * n + p] = pixel_major[p * dim + c] as f32;
        }
    }
    Tensor {
        channels: dim,
        height: h,
        width: w,
        data,
    }
}

struct Branch {
    out: ForwardOutput,
    tape: Tape,
    proj: Option<(Tensor, ProjectCache)>,
}

fn run_branch(net: &UNet, x: &Tensor, project: bool) -> Result<Branch> {
    let (out, tape) = net.forward_train(x)?;
    let proj = if project {
        Some(net.project(out.embed_source(&net.config))?)
    } else {
        None
    };
    Ok(Branch { out, tape, proj })
}

fn backprop(net: &UNet, b: &Branch, prob: Option<&[f64]>, embed_grad: Option<&[f64]>, grads: &mut crate::net::Grads) {
    let d_src = match (&b.proj, embed_grad) {
        (Some((e, cache)), Some(g)) => {
            let d = channel_major(e.channels, e.height, e.width, g);
            Some(net.project_backward(cache, &d, grads))
        }
        _ => None,
    };
    let (high, low) = if net.config.embed_on_low {
        (None, d_src.as_ref())
    } else {
        (d_src.as_ref(), None)
    };
    net.backward(&b.tape, &b.out, OutputGrads { prob, high, low }, grads);
}

fn with_step(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
        other => other,
    }
}

struct Models {
    student: UNet,
    student_opt: Adam,
    teacher: Option<(UNet, Adam)>,
}

fn train_step(models: &mut Models, batch: &[Sample], loss: &LossConfig, cfg: &TrainConfig, step: usize) -> Result<StepRecord> {
    let clr = cfg.mode.uses_clr();
    let student = &models.student;
    let main: Vec<Branch> = batch.iter().map(|s| run_branch(student, &s.input, clr)).collect::<Result<_>>()?;
    let views: Vec<Branch> = if clr {
        batch
            .iter()
            .map(|s| run_branch(student, s.view.as_ref().expect("view prepared in contrastive mode"), true))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let teacher_out: Option<Vec<Branch>> = match &models.teacher {
        Some((t, _)) => Some(batch.iter().map(|s| run_branch(t, &s.input, false)).collect::<Result<_>>()?),
        None => None,
    };
    let to_maps = |bs: &[Branch]| -> Vec<EmbeddingMap> {
        bs.iter()
            .map(|b| {
                let e = &b.proj.as_ref().expect("projected").0;
                EmbeddingMap::from_channel_major(e.channels, &e.data)
            })
            .collect()
    };
    let (embeds, view_embeds) = if clr { (to_maps(&main), to_maps(&views)) } else { (Vec::new(), Vec::new()) };
    let teacher_probs: Option<Vec<Vec<f64>>> = teacher_out
        .as_ref()
        .map(|ts| ts.iter().map(|b| b.out.prob_map.clone()).collect());
    let seg: Vec<SegTarget<'_>> = main
        .iter()
        .zip(batch)
        .map(|(b, s)| SegTarget {
            prob: &b.out.prob_map,
            mask: &s.mask,
            weights: &s.weights,
        })
        .collect();
    let inputs = LossInputs {
        segmentation: &seg,
        embeddings: clr.then_some((&embeds[..], &view_embeds[..])),
        teacher: teacher_probs.as_deref(),
        seed: derive(cfg.seed, step as u64),
    };
    let (breakdown, lg) = total_loss_with_grad(&inputs, loss).map_err(|e| with_step(step, e))?;

    let mut grads = student.params.zero_grads();
    for (i, b) in main.iter().enumerate() {
        backprop(student, b, Some(&lg.prob[i]), lg.embeds.get(i).map(Vec::as_slice), &mut grads);
    }
    for (i, b) in views.iter().enumerate() {
        backprop(student, b, None, lg.aug.get(i).map(Vec::as_slice), &mut grads);
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("step {step}: student parameter gradients")));
    }
    models.student_opt.step(&mut models.student.params, &grads);

    // The teacher only learns from the supervised term; the consistency term
    // is a stop-gradient target for the student.
    let mut teacher_wbce = None;
    if let (Some((teacher, opt)), Some(outs)) = (&mut models.teacher, &teacher_out) {
        let n = batch.len() as f64;
        let mut tg = teacher.params.zero_grads();
        let mut total = 0.0;
        for (b, s) in outs.iter().zip(batch) {
            let (v, g) = weighted_bce_with_grad(&b.out.prob_map, &s.mask, &s.weights, loss.clamp_eps)?;
            total += v / n;
            let g: Vec<f64> = g.iter().map(|x| x * loss.lambda_bce / n).collect();
            backprop(teacher, b, Some(&g), None, &mut tg);
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("step {step}: loss term `teacher_wbce` evaluated to {total}")));
        }
        if !tg.all_finite() {
            return Err(Error::NonFinite(format!("step {step}: teacher parameter gradients")));
        }
        opt.step(&mut teacher.params, &tg);
        teacher_wbce = Some(total);
    }
    Ok(StepRecord {
        step,
        total: breakdown.total,
        wbce: breakdown.wbce,
        clr: breakdown.clr,
        consistency: breakdown.consistency,
        teacher_wbce,
        lr: models.student_opt.config.learning_rate,
        elapsed_s: 0.0,
    })
}

fn checkpoint_meta(cfg: &TrainConfig, step: usize, digest: &str) -> serde_json::Value {
    serde_json::json!({
        "mode": cfg.mode,
        "crop": cfg.crop,
        "step": step,
        "config_digest": digest,
    })
}

/// Train according to `cfg`, writing checkpoints, the JSON-lines log and
/// `run.json` into `out_dir`. `on_step` sees every log record.
pub fn train(
    cfg: &TrainConfig,
    manifest_path: &Path,
    out_dir: &Path,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<RunRecord> {
    cfg.validate()?;
    let loss = cfg.effective_loss()?;
    let net_cfg = cfg.effective_net();
    let set = TrainSet::load(manifest_path, cfg.mode.uses_reference())?;
    let digest = cfg.digest();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let student = UNet::new(net_cfg, derive(cfg.seed, 0))?;
    let student_opt = Adam::new(cfg.optimizer, &student.params);
    let teacher = if cfg.mode.uses_teacher() {
        let t = UNet::new(net_cfg, derive(cfg.seed, 1))?;
        let opt = Adam::new(cfg.optimizer, &t.params);
        Some((t, opt))
    } else {
        None
    };
    let mut models = Models {
        student,
        student_opt,
        teacher,
    };

    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.steps);
    let (tx, rx) = sync_channel::<Result<Vec<Sample>>>(cfg.queue_depth);
    std::thread::scope(|scope| -> Result<()> {
        let set = &set;
        scope.spawn(move || {
            for step in 0..cfg.steps {
                let batch = (0..cfg.batch_size).map(|i| make_sample(set, cfg, step, i)).collect();
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        // Dropping `rx` on an early return stops the producer.
        let rx = rx;
        for step in 0..cfg.steps {
            let batch = rx
                .recv()
                .map_err(|_| Error::config("training data producer stopped unexpectedly"))??;
            let lr = cfg.learning_rate_at(step);
            models.student_opt.config.learning_rate = lr;
            if let Some((_, opt)) = &mut models.teacher {
                opt.config.learning_rate = lr;
            }
            let mut rec = train_step(&mut models, &batch, &loss, cfg, step)?;
            rec.elapsed_s = start.elapsed().as_secs_f64();
            let line = serde_json::to_string(&rec).map_err(|e| Error::format(&log_path, e))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            on_step(&rec);
            records.push(rec);
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                let p = out_dir.join("checkpoints").join(format!("step_{:06}.ckpt", step + 1));
                save_checkpoint(&models.student, &checkpoint_meta(cfg, step + 1, &digest), &p)?;
            }
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let checkpoint = out_dir.join(MODEL_FILE);
    save_checkpoint(&models.student, &checkpoint_meta(cfg, cfg.steps, &digest), &checkpoint)?;
    let teacher_checkpoint = match &models.teacher {
        Some((t, _)) => {
            let p = out_dir.join(TEACHER_FILE);
            save_checkpoint(t, &checkpoint_meta(cfg, cfg.steps, &digest), &p)?;
            Some(p)
        }
        None => None,
    };
    let run = RunRecord {
        mode: cfg.mode,
        steps: records,
        checkpoint,
        teacher_checkpoint,
        log: log_path,
        wall_clock_s: start.elapsed().as_secs_f64(),
        config_digest: digest,
    };
    let run_path = out_dir.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&run).map_err(|e| Error::format(&run_path, e))?;
    std::fs::write(&run_path, text).map_err(|e| Error::io(&run_path, e))?;
    Ok(run)
}
