//! End-to-end inference: detect the implant position, crop, regress the depth interval.

use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::IrdSample;
use crate::error::{bail, Result};
use crate::idpnet::{volumes_to_tensor, IdpNet};
use crate::ird::{crop_subvolume, extract_peak, RegionDetector};
use crate::losses::interval_iou;
use crate::metrics::{aggregate, safety_check, CanalSide, EvalResult, PatientScore, SAFETY_MARGIN_MM};
use crate::volume::{Interval, PatientRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Side the crown slice is resized to before detection.
    pub detector_side: usize,
    pub crop_hw: usize,
    pub crop_d: usize,
    pub canal_side: CanalSide,
    pub safety_mm: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// Matches the 96×64×64 desk phantoms.
    pub fn desk() -> Self {
        Self { detector_side: 64, crop_hw: 32, crop_d: 80, canal_side: CanalSide::Below, safety_mm: SAFETY_MARGIN_MM }
    }

    /// 432×776×776 scans, 512-pixel detector input, 352×256×256 crops.
    pub fn full_scale() -> Self {
        Self { detector_side: 512, crop_hw: 256, crop_d: 352, ..Self::desk() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Implant position on the crown slice, in original voxel units.
    pub position: (f64, f64),
    pub crop_origin: [usize; 3],
    pub interval_crop: Interval,
    /// `interval_crop` shifted by the crop's depth origin.
    pub interval: Interval,
}

/// Anything that maps a patient to a predicted interval in original coordinates.
pub trait DepthPredictor {
    fn predict(&self, record: &PatientRecord) -> Result<Prediction>;
}

/// Map a crown slice onto the detector's square input and locate the implant.
pub fn detect_position(detector: &RegionDetector, record: &PatientRecord, side: usize) -> Result<(f64, f64)> {
    let vol = &record.volume;
    let sample = IrdSample::new(
        vol.height(),
        vol.width(),
        record.crown_slice(),
        record.annotation.axial_position,
        record.annotation.condition,
    )?;
    let input = sample.resized(side);
    let out = detector.predict(&input.image, side, record.annotation.condition)?;
    let (r, c) = extract_peak(&out);
    let sr = (vol.height() - 1) as f64 / (side - 1).max(1) as f64;
    let sc = (vol.width() - 1) as f64 / (side - 1).max(1) as f64;
    Ok(((r * sr).clamp(0.0, (vol.height() - 1) as f64), (c * sc).clamp(0.0, (vol.width() - 1) as f64)))
}

/// Crop at `position` and regress the interval with `net`.
pub fn predict_at(net: &IdpNet, record: &PatientRecord, position: (f64, f64), config: &PipelineConfig) -> Result<Prediction> {
    let crop = crop_subvolume(&record.volume, position, config.crop_hw, config.crop_d)?;
    let (intervals, _) = net.predict(volumes_to_tensor(&[&crop.volume])?)?;
    let interval_crop = intervals[0];
    if !(interval_crop.start.is_finite() && interval_crop.end.is_finite()) {
        bail!(NonFinite, "predicted interval ({}, {})", interval_crop.start, interval_crop.end);
    }
    Ok(Prediction { position, crop_origin: crop.origin, interval_crop, interval: interval_crop.shifted(crop.origin[0] as f64) })
}

/// Detector followed by the depth network. With `oracle_position` the annotated position
/// replaces detection.
pub struct Pipeline<'a> {
    pub detector: Option<&'a RegionDetector>,
    pub net: &'a IdpNet,
    pub config: PipelineConfig,
    pub oracle_position: bool,
}

impl DepthPredictor for Pipeline<'_> {
    fn predict(&self, record: &PatientRecord) -> Result<Prediction> {
        let position = match (self.oracle_position, self.detector) {
            (true, _) => record.annotation.axial_position,
            (false, Some(d)) => detect_position(d, record, self.config.detector_side)?,
            (false, None) => bail!(Config, "no detector given and oracle position disabled"),
        };
        predict_at(self.net, record, position, &self.config)
    }
}

/// Score one patient. Safety is only judged when a canal landmark exists.
pub fn score(record: &PatientRecord, prediction: &Result<Prediction>, config: &PipelineConfig) -> PatientScore {
    match prediction {
        Ok(p) => PatientScore {
            id: record.id.clone(),
            iou: interval_iou(&p.interval, &record.annotation.interval),
            safety_ok: record.annotation.canal_slice.map(|canal| {
                safety_check(&p.interval, canal, record.volume.spacing_mm()[0], config.safety_mm, config.canal_side)
            }),
            error: None,
        },
        Err(e) => PatientScore { id: record.id.clone(), iou: 0.0, safety_ok: None, error: Some(e.to_string()) },
    }
}

/// Run `model` on every record; failures score IoU 0 and evaluation continues.
pub fn evaluate(
    model: &dyn DepthPredictor,
    records: &[PatientRecord],
    thresholds: &[f64],
    config: &PipelineConfig,
) -> Result<(EvalResult, Vec<Result<Prediction>>)> {
    if records.is_empty() {
        bail!(Invalid, "empty test set");
    }
    let predictions: Vec<Result<Prediction>> = records.iter().map(|r| model.predict(r)).collect();
    let scores = records.iter().zip(&predictions).map(|(r, p)| score(r, p, config)).collect();
    Ok((aggregate(scores, thresholds)?, predictions))
}
