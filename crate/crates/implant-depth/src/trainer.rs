//! Stage training loop: seeded shuffles and augmentation, per-step JSONL logs, periodic
//! checkpoints, resume, and a loss-curve plot.
//!
//! Every random choice derives from `(train.seed, epoch, record index)`, and batches are
//! reduced in a fixed order, so a run is a pure function of its config and dataset. Resuming
//! from the checkpoint after epoch `e` replays epochs `e..` exactly as the uninterrupted run.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use implant_depth_core::augment::{augment_idpnet, augment_ird, sample_seed, IdpSample, IrdSample};
use implant_depth_core::idpnet::IdpNet;
use implant_depth_core::ird::{crop_subvolume, RegionDetector};
use implant_depth_core::optim::Optimizer;
use implant_depth_core::params::{ParamGrads, ParamSet};
use implant_depth_core::pipeline::PipelineConfig;
use implant_depth_core::schedule::{lr_at, Stage, TrainConfig};
use implant_depth_core::split::shuffled_indices;
use implant_depth_core::train::{idpnet_step, ird_batch_step, TplSettings};
use implant_depth_core::PatientRecord;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, EpochStats, ModelConfig};
use crate::error::{HarnessError, IoContext, Result};
use crate::plot;

pub const LOG_FILE: &str = "train.jsonl";
pub const CURVE_FILE: &str = "training_curve.svg";
pub const DUMP_FILE: &str = "divergence.json";
pub const FINAL_DIR: &str = "final";

/// Salt for the per-epoch shuffle seed; no sample index reaches it.
const SHUFFLE_INDEX: u64 = u64::MAX;

/// What to train.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Periodic checkpoint interval in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub resume: Option<Checkpoint>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub global_step: usize,
    pub lr: f64,
    pub batch: Vec<String>,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    stage: Stage,
    epoch: usize,
    step: usize,
    global_step: usize,
    lr: f64,
    batch: &'a [String],
    batch_indices: &'a [usize],
    error: String,
}

pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch-{epoch:04}"))
}

/// Detector inputs: crown slices resized to the detector side.
pub fn ird_samples(records: &[PatientRecord], side: usize) -> Result<Vec<IrdSample>> {
    records
        .iter()
        .map(|r| {
            let v = &r.volume;
            let s = IrdSample::new(v.height(), v.width(), r.crown_slice(), r.annotation.axial_position, r.annotation.condition)?;
            Ok(s.resized(side))
        })
        .collect()
}

/// Depth-network inputs: crops at the annotated position, intervals in crop coordinates.
pub fn idpnet_samples(records: &[PatientRecord], pipeline: &PipelineConfig) -> Result<Vec<IdpSample>> {
    records
        .iter()
        .map(|r| {
            let crop = crop_subvolume(&r.volume, r.annotation.axial_position, pipeline.crop_hw, pipeline.crop_d)?;
            Ok(IdpSample { interval: r.annotation.interval.shifted(-(crop.origin[0] as f64)), volume: crop.volume })
        })
        .collect()
}

enum Trainee {
    Detector(RegionDetector, Vec<IrdSample>),
    Idpnet(IdpNet, Vec<IdpSample>, TplSettings),
}

impl Trainee {
    fn params(&self) -> &ParamSet {
        match self {
            Trainee::Detector(m, _) => m.params(),
            Trainee::Idpnet(m, _, _) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Trainee::Detector(m, _) => m.params_mut(),
            Trainee::Idpnet(m, _, _) => m.params_mut(),
        }
    }

    fn step(&self, train: &TrainConfig, epoch: usize, indices: &[usize]) -> Result<(f64, BTreeMap<String, f64>, ParamGrads)> {
        let seed = |i: usize| sample_seed(train.seed, epoch as u64, i as u64);
        match self {
            Trainee::Detector(det, samples) => {
                let batch: Vec<_> = indices.iter().map(|&i| augment_ird(&samples[i], train.augment, seed(i))).collect();
                let (r, grads) = ird_batch_step(det, &batch)?;
                let terms = BTreeMap::from([("focal".into(), r.focal), ("offset".into(), r.offset), ("total".into(), r.total)]);
                Ok((r.total, terms, grads))
            }
            Trainee::Idpnet(net, samples, tpl) => {
                let batch: Vec<_> = indices.iter().map(|&i| augment_idpnet(&samples[i], train.augment.flip, seed(i))).collect();
                let s = idpnet_step(net, &batch, train.switches(), tpl)?;
                let r = s.report;
                let terms = BTreeMap::from([
                    ("l_reg".into(), r.l_reg),
                    ("l_tiou".into(), r.l_tiou),
                    ("l_tpl".into(), r.l_tpl),
                    ("l_con".into(), r.l_con),
                    ("l_icon".into(), r.l_icon),
                    ("l_total".into(), r.l_total),
                ]);
                Ok((r.l_total, terms, s.grads))
            }
        }
    }
}

fn build(spec: &StageSpec, dataset: &[PatientRecord]) -> Result<Trainee> {
    match &spec.model {
        ModelConfig::Detector(cfg) => {
            Ok(Trainee::Detector(RegionDetector::new(cfg.clone())?, ird_samples(dataset, spec.pipeline.detector_side)?))
        }
        ModelConfig::Idpnet(cfg) => {
            let tpl = TplSettings { k: spec.train.tpl_k, margin: spec.train.tpl_margin, ..TplSettings::default() };
            Ok(Trainee::Idpnet(IdpNet::new(cfg.clone())?, idpnet_samples(dataset, &spec.pipeline)?, tpl))
        }
    }
}

fn check_resume(ckpt: &Checkpoint, spec: &StageSpec, ids: &[String]) -> Result<()> {
    let mismatch = |what: &str| Err(HarnessError::Mismatch(format!("resume checkpoint has a different {what}")));
    if ckpt.model != spec.model {
        return mismatch("model config");
    }
    if ckpt.train != spec.train {
        return mismatch("training config");
    }
    if ckpt.pipeline != spec.pipeline {
        return mismatch("pipeline config");
    }
    if ckpt.dataset != ids {
        return mismatch("training set");
    }
    if ckpt.epoch > spec.train.epochs {
        return Err(HarnessError::Mismatch(format!("checkpoint epoch {} beyond schedule of {}", ckpt.epoch, spec.train.epochs)));
    }
    Ok(())
}

/// Keep the log lines of epochs before `epoch`; returns their `(global_step, loss)` points.
fn truncate_log(path: &Path, epoch: usize) -> Result<Vec<(usize, f64)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(path).at(path)?;
    let mut kept = Vec::new();
    let mut points = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.at(path)?;
        let rec: StepRecord = serde_json::from_str(&line).map_err(|e| HarnessError::format(path, e.to_string()))?;
        if rec.epoch < epoch {
            points.push((rec.global_step, rec.loss));
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).at(path)?;
    Ok(points)
}

/// Train one stage on `dataset` for its full schedule, writing logs and checkpoints to `out`.
pub fn train_stage(spec: &StageSpec, dataset: &[PatientRecord], out: &Path, opts: &TrainOptions) -> Result<Checkpoint> {
    let train = &spec.train;
    train.validate()?;
    if train.stage != spec.model.stage() {
        return Err(HarnessError::Config(format!("training config is for {:?} but the model is for {:?}", train.stage, spec.model.stage())));
    }
    if dataset.is_empty() {
        return Err(HarnessError::Config("empty training set".into()));
    }
    fs::create_dir_all(out).at(out)?;
    let ids: Vec<String> = dataset.iter().map(|r| r.id.clone()).collect();

    let mut trainee = build(spec, dataset)?;
    let mut optimizer = Optimizer::for_config(train, trainee.params());
    let mut history = Vec::new();
    let mut start = 0;
    if let Some(ckpt) = &opts.resume {
        check_resume(ckpt, spec, &ids)?;
        trainee.params_mut().load_from(&ckpt.params).map_err(|e| HarnessError::Mismatch(e.to_string()))?;
        optimizer.load_state(&ckpt.optimizer).map_err(|e| HarnessError::Mismatch(e.to_string()))?;
        history = ckpt.history.clone();
        start = ckpt.epoch;
    }

    let log_path = out.join(LOG_FILE);
    let mut curve = if opts.resume.is_some() { truncate_log(&log_path, start)? } else { Vec::new() };
    let log_file = fs::OpenOptions::new().create(true).append(true).truncate(false).open(&log_path).at(&log_path)?;
    if opts.resume.is_none() {
        log_file.set_len(0).at(&log_path)?;
    }
    let mut log = BufWriter::new(log_file);

    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(train.batch_size);
    let snapshot = |trainee: &Trainee, optimizer: &Optimizer, epoch: usize, history: &[EpochStats]| Checkpoint {
        stage: train.stage,
        epoch,
        model: spec.model.clone(),
        train: train.clone(),
        pipeline: spec.pipeline,
        dataset: ids.clone(),
        history: history.to_vec(),
        params: trainee.params().to_named(),
        optimizer: optimizer.state(),
    };

    for epoch in start..train.epochs {
        let lr = lr_at(epoch, train)?;
        let order = shuffled_indices(n, sample_seed(train.seed, epoch as u64, SHUFFLE_INDEX));
        let mut losses = Vec::with_capacity(steps_per_epoch);
        let mut term_sums: BTreeMap<String, f64> = BTreeMap::new();
        for (step, indices) in order.chunks(train.batch_size).enumerate() {
            let global_step = epoch * steps_per_epoch + step;
            let batch_ids: Vec<String> = indices.iter().map(|&i| ids[i].clone()).collect();
            let outcome = trainee.step(train, epoch, indices).and_then(|(loss, terms, grads)| {
                if !loss.is_finite() {
                    return Err(implant_depth_core::Error::NonFinite(format!("loss {loss}")).into());
                }
                optimizer.step(trainee.params_mut(), &grads, lr)?;
                Ok((loss, terms))
            });
            let (loss, terms) = match outcome {
                Ok(v) => v,
                Err(e) if e.category() == "non-finite" => {
                    log.flush().at(&log_path)?;
                    let dump = out.join(DUMP_FILE);
                    let body = DivergenceDump {
                        stage: train.stage,
                        epoch,
                        step,
                        global_step,
                        lr,
                        batch: &batch_ids,
                        batch_indices: indices,
                        error: e.to_string(),
                    };
                    let text = serde_json::to_string_pretty(&body).expect("dump is plain data");
                    fs::write(&dump, text).at(&dump)?;
                    log::error!("training diverged at epoch {epoch}, step {step}: {e}");
                    return Err(HarnessError::Diverged { epoch, step, batch: batch_ids, dump });
                }
                Err(e) => return Err(e),
            };
            for (k, v) in &terms {
                *term_sums.entry(k.clone()).or_default() += v;
            }
            let rec = StepRecord { stage: train.stage, epoch, step, global_step, lr, batch: batch_ids, loss, terms };
            writeln!(log, "{}", serde_json::to_string(&rec).expect("log record is plain data")).at(&log_path)?;
            curve.push((global_step, loss));
            losses.push(loss);
        }
        log.flush().at(&log_path)?;
        let steps = losses.len();
        let mean_loss = losses.iter().sum::<f64>() / steps as f64;
        let mean_terms = term_sums.into_iter().map(|(k, v)| (k, v / steps as f64)).collect();
        log::info!("{:?} epoch {epoch}: lr {lr:e}, mean loss {mean_loss:.5}", train.stage);
        history.push(EpochStats { epoch, lr, steps, first_step_loss: losses[0], mean_loss, mean_terms });

        let done = epoch + 1;
        if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 && done < train.epochs {
            snapshot(&trainee, &optimizer, done, &history).save(&checkpoint_dir(out, done))?;
        }
    }

    let last = snapshot(&trainee, &optimizer, train.epochs, &history);
    last.save(&out.join(FINAL_DIR))?;
    let epochs: Vec<(f64, f64)> = history.iter().map(|h| ((h.epoch + 1) as f64 * steps_per_epoch as f64, h.mean_loss)).collect();
    let steps: Vec<(f64, f64)> = curve.iter().map(|&(s, l)| (s as f64, l)).collect();
    plot::line_chart(
        &out.join(CURVE_FILE),
        &format!("{:?} training loss", train.stage),
        "step",
        "loss",
        &[("step loss", &steps), ("epoch mean", &epochs)],
    )?;
    Ok(last)
}
