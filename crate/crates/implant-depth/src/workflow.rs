//! The operations behind each CLI subcommand, usable from code and tests.

use std::fs;
use std::path::Path;

use implant_depth_core::metrics::{texture_variation_curve, TextureOptions};
use implant_depth_core::phantom::generate_phantom;
use implant_depth_core::pipeline::{evaluate, Pipeline, Prediction};
use implant_depth_core::schedule::Stage;
use implant_depth_core::split::dataset_split;
use implant_depth_core::PatientRecord;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, ModelConfig};
use crate::config::{DataConfig, ExperimentConfig};
use crate::error::{HarnessError, IoContext, Result};
use crate::plot;
use crate::report::EvalSummary;
use crate::trainer::{train_stage, StageSpec, TrainOptions};
use crate::volume_io::{read_dataset, read_patient, write_patient};

pub const CONFIG_FILE: &str = "config.toml";

pub fn generate_records(data: &DataConfig) -> Result<Vec<PatientRecord>> {
    (0..data.count as u64).map(|i| Ok(generate_phantom(&data.phantom, data.seed + i)?)).collect()
}

/// Write each record to `out/<id>/`.
pub fn write_records(out: &Path, records: &[PatientRecord]) -> Result<()> {
    for r in records {
        write_patient(&out.join(&r.id), r)?;
    }
    Ok(())
}

/// Records from `data` if given, else freshly generated phantoms.
pub fn load_records(data: Option<&Path>, cfg: &DataConfig) -> Result<Vec<PatientRecord>> {
    match data {
        Some(dir) => read_dataset(dir),
        None => generate_records(cfg),
    }
}

pub fn split_records(records: Vec<PatientRecord>, cfg: &DataConfig) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>)> {
    Ok(dataset_split(records, cfg.train_fraction, cfg.split_seed)?)
}

pub fn stage_spec(cfg: &ExperimentConfig, stage: Stage) -> StageSpec {
    match stage {
        Stage::Ird => StageSpec { train: cfg.ird.train.clone(), model: ModelConfig::Detector(cfg.ird.model.clone()), pipeline: cfg.pipeline },
        Stage::Idpnet => {
            StageSpec { train: cfg.idpnet.train.clone(), model: ModelConfig::Idpnet(cfg.idpnet.model.clone()), pipeline: cfg.pipeline }
        }
    }
}

/// Train `stage` on the training split, writing the resolved config beside the outputs.
pub fn train(cfg: &ExperimentConfig, stage: Stage, records: Vec<PatientRecord>, out: &Path, resume: Option<&Path>) -> Result<Checkpoint> {
    cfg.save(&out.join(CONFIG_FILE))?;
    let (train_set, _) = split_records(records, &cfg.data)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let opts = TrainOptions { checkpoint_every: cfg.run.checkpoint_every, resume };
    train_stage(&stage_spec(cfg, stage), &train_set, out, &opts)
}

/// Evaluate the two-stage pipeline. Without a detector the annotated position is used.
pub fn eval(
    cfg: &ExperimentConfig,
    detector: Option<&Checkpoint>,
    idpnet: &Checkpoint,
    records: &[PatientRecord],
    out: &Path,
) -> Result<EvalSummary> {
    let det = detector.map(Checkpoint::detector).transpose()?;
    let net = idpnet.idpnet()?;
    let mut pipeline_cfg = idpnet.pipeline;
    if let Some(d) = detector {
        pipeline_cfg.detector_side = d.pipeline.detector_side;
    }
    let pipeline = Pipeline { detector: det.as_ref(), net: &net, config: pipeline_cfg, oracle_position: det.is_none() };
    let (result, predictions) = evaluate(&pipeline, records, &cfg.eval.thresholds, &pipeline_cfg)?;
    let summary = EvalSummary::new(&result, records, &predictions, det.is_none());
    cfg.save(&out.join(CONFIG_FILE))?;
    summary.write(out)?;
    Ok(summary)
}

/// Predict one patient and write `prediction.json`, `crown.png` and `depth.png`.
pub fn predict(detector: Option<&Checkpoint>, idpnet: &Checkpoint, patient: &Path, out: &Path) -> Result<Prediction> {
    let record = read_patient(patient)?;
    let det = detector.map(Checkpoint::detector).transpose()?;
    let net = idpnet.idpnet()?;
    let mut cfg = idpnet.pipeline;
    if let Some(d) = detector {
        cfg.detector_side = d.pipeline.detector_side;
    }
    let pipeline = Pipeline { detector: det.as_ref(), net: &net, config: cfg, oracle_position: det.is_none() };
    let p = implant_depth_core::pipeline::DepthPredictor::predict(&pipeline, &record)?;

    fs::create_dir_all(out).at(out)?;
    #[derive(Serialize)]
    struct Out<'a> {
        id: &'a str,
        oracle_position: bool,
        #[serde(flatten)]
        prediction: &'a Prediction,
    }
    let path = out.join("prediction.json");
    let body = Out { id: &record.id, oracle_position: det.is_none(), prediction: &p };
    fs::write(&path, serde_json::to_string_pretty(&body).expect("prediction is plain data")).at(&path)?;
    plot::save_png(&out.join("crown.png"), &plot::crown_overlay(&record, &p, cfg.crop_hw, 4))?;
    plot::save_png(&out.join("depth.png"), &plot::depth_overlay(&record, &p, cfg.crop_hw, 4))?;
    Ok(p)
}

/// Texture variation against sampling interval, averaged over `records`; writes CSV and SVG.
pub fn analyze_texture(cfg: &ExperimentConfig, records: &[PatientRecord], out: &Path) -> Result<Vec<(usize, f64)>> {
    if records.is_empty() {
        return Err(HarnessError::Config("no volumes to analyze".into()));
    }
    let opts = TextureOptions { samples: cfg.texture.samples, ..TextureOptions::default() };
    let mut mean = vec![0.0; cfg.texture.ks.len()];
    for r in records {
        for (m, (_, v)) in mean.iter_mut().zip(texture_variation_curve(&r.volume, &cfg.texture.ks, &opts)?) {
            *m += v / records.len() as f64;
        }
    }
    let curve: Vec<(usize, f64)> = cfg.texture.ks.iter().copied().zip(mean).collect();
    fs::create_dir_all(out).at(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let csv: String = std::iter::once("k,variation\n".to_string()).chain(curve.iter().map(|(k, v)| format!("{k},{v}\n"))).collect();
    let path = out.join("texture_curve.csv");
    fs::write(&path, csv).at(&path)?;
    let pts: Vec<(f64, f64)> = curve.iter().map(|&(k, v)| (k as f64, v)).collect();
    plot::line_chart(&out.join("texture_curve.svg"), "texture variation", "sampling interval k", "mean edge std", &[("variation", &pts)])?;
    Ok(curve)
}
