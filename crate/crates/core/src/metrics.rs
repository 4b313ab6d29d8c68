//! Evaluation metrics and the slice texture-variation analysis.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::edges::{canny, CannyParams};
use crate::error::{bail, Result};
use crate::math;
use crate::volume::{Interval, Volume};
use crate::losses::interval_iou;

/// IoU thresholds of the standard report.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.6, 0.7, 0.8];
pub const SAFETY_MARGIN_MM: f64 = 1.5;

/// Percentage of predictions whose IoU with ground truth strictly exceeds `m`
/// (and whose safety flag holds, when flags are given).
pub fn acc_r1(preds: &[Interval], gts: &[Interval], m: f64, safety: Option<&[bool]>) -> Result<f64> {
    if preds.len() != gts.len() {
        bail!(Shape, "{} predictions for {} ground-truth intervals", preds.len(), gts.len());
    }
    if preds.is_empty() {
        bail!(Shape, "accuracy over an empty set");
    }
    if let Some(s) = safety {
        if s.len() != preds.len() {
            bail!(Shape, "{} safety flags for {} predictions", s.len(), preds.len());
        }
    }
    let hits = preds
        .iter()
        .zip(gts)
        .enumerate()
        .filter(|(j, (p, g))| interval_iou(p, g) > m && safety.is_none_or(|s| s[*j]))
        .count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Which way the nerve canal lies relative to the implant along the slice axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanalSide {
    /// Canal at larger slice indices than the implant apex.
    #[default]
    Below,
    Above,
}

/// True when the implant apex keeps at least `min_mm` from the canal (boundary inclusive).
pub fn safety_check(pred: &Interval, canal_slice: f64, spacing_d_mm: f64, min_mm: f64, side: CanalSide) -> bool {
    let gap_slices = match side {
        CanalSide::Below => canal_slice - pred.end,
        CanalSide::Above => pred.start - canal_slice,
    };
    // Tolerate the rounding of `slices × spacing` so an exact boundary stays inclusive.
    gap_slices * spacing_d_mm >= min_mm - 1e-12
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureOptions {
    pub canny: CannyParams,
    /// Slices sampled per interval `k`: `start, start + k, …` (fewer if the volume ends).
    pub samples: usize,
    pub start: usize,
}

impl Default for TextureOptions {
    fn default() -> Self {
        Self { canny: CannyParams::default(), samples: 5, start: 0 }
    }
}

/// For each `k`, the pixel-wise standard deviation across Canny maps of slices
/// sampled every `k` slices, averaged over pixels.
pub fn texture_variation_curve(volume: &Volume, ks: &[usize], opts: &TextureOptions) -> Result<Vec<(usize, f64)>> {
    let [d, h, w] = volume.dims();
    if opts.samples < 2 {
        bail!(Config, "texture variation needs at least 2 samples per interval");
    }
    if opts.start >= d {
        bail!(OutOfRange, "start slice {} outside depth {}", opts.start, d);
    }
    let mut cache: Vec<Option<Vec<u8>>> = alloc::vec![None; d];
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 || k >= d {
            bail!(OutOfRange, "sampling interval {} outside [1, {})", k, d);
        }
        let idx: Vec<usize> = (0..opts.samples).map(|i| opts.start + i * k).take_while(|&z| z < d).collect();
        if idx.len() < 2 {
            bail!(OutOfRange, "sampling interval {} leaves fewer than 2 slices after slice {}", k, opts.start);
        }
        for &z in &idx {
            if cache[z].is_none() {
                cache[z] = Some(canny(&volume.slice_f64(z), h, w, &opts.canny)?);
            }
        }
        let mut total = 0.0;
        let mut column = Vec::with_capacity(idx.len());
        for p in 0..h * w {
            column.clear();
            column.extend(idx.iter().map(|&z| cache[z].as_ref().expect("filled above")[p] as f64));
            total += math::std_dev(&column);
        }
        out.push((k, total / (h * w) as f64));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub id: String,
    pub iou: f64,
    /// `None` when the patient has no canal annotation.
    pub safety_ok: Option<bool>,
    pub error: Option<String>,
}

impl PatientScore {
    fn counts_at(&self, m: f64) -> bool {
        self.error.is_none() && self.iou > m && self.safety_ok.unwrap_or(true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_patient: Vec<PatientScore>,
    /// `(m, percentage)` pairs in ascending `m`.
    pub acc_at: Vec<(f64, f64)>,
}

impl EvalResult {
    pub fn acc(&self, m: f64) -> Option<f64> {
        self.acc_at.iter().find(|(t, _)| (*t - m).abs() < 1e-12).map(|(_, a)| *a)
    }
}

/// Aggregate per-patient scores (sorted by id) into accuracies at each threshold.
pub fn aggregate(mut scores: Vec<PatientScore>, thresholds: &[f64]) -> Result<EvalResult> {
    if scores.is_empty() {
        bail!(Invalid, "cannot aggregate an empty evaluation");
    }
    scores.sort_by(|a, b| a.id.cmp(&b.id));
    let mut ms = thresholds.to_vec();
    ms.sort_by(f64::total_cmp);
    ms.dedup();
    let acc_at = ms
        .iter()
        .map(|&m| (m, 100.0 * scores.iter().filter(|s| s.counts_at(m)).count() as f64 / scores.len() as f64))
        .collect();
    Ok(EvalResult { per_patient: scores, acc_at })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: f64, e: f64) -> Interval {
        Interval::new(s, e)
    }

    #[test]
    fn acc_examples() {
        let gts = [iv(0.0, 10.0); 4];
        assert_eq!(acc_r1(&gts, &gts, 0.8, None).unwrap(), 100.0);
        // IoUs 0.65, 0.75, 0.85, 0.55 against (0, 10).
        let preds = [iv(0.0, 6.5), iv(0.0, 7.5), iv(0.0, 8.5), iv(0.0, 5.5)];
        assert_eq!(acc_r1(&preds, &gts, 0.7, None).unwrap(), 50.0);
        assert_eq!(acc_r1(&[iv(0.0, 7.0)], &[iv(0.0, 10.0)], 0.7, None).unwrap(), 0.0);
        assert_eq!(acc_r1(&preds, &gts, 0.6, Some(&[true, false, true, false])).unwrap(), 50.0);
        assert!(acc_r1(&preds, &gts[..3], 0.7, None).is_err());
    }

    #[test]
    fn safety_examples() {
        assert!(safety_check(&iv(50.0, 100.0), 108.0, 0.25, 1.5, CanalSide::Below));
        assert!(!safety_check(&iv(50.0, 100.0), 105.0, 0.25, 1.5, CanalSide::Below));
        assert!(safety_check(&iv(50.0, 100.0), 106.0, 0.25, 1.5, CanalSide::Below));
        assert!(safety_check(&iv(0.1, 0.2), 0.1 + 0.2 + 15.0, 0.1, 1.5, CanalSide::Below));
        assert!(safety_check(&iv(20.0, 30.0), 10.0, 0.25, 1.5, CanalSide::Above));
    }

    #[test]
    fn constant_volume_has_no_texture_variation() {
        let v = Volume::new([30, 16, 16], [0.25; 3], alloc::vec![0.4; 30 * 256]).unwrap();
        let c = texture_variation_curve(&v, &[1, 5, 7], &TextureOptions::default()).unwrap();
        assert!(c.iter().all(|(_, var)| *var == 0.0));
        assert!(texture_variation_curve(&v, &[30], &TextureOptions::default()).is_err());
        assert!(texture_variation_curve(&v, &[0], &TextureOptions::default()).is_err());
    }

    #[test]
    fn aggregation_is_nested_and_failures_count_as_misses() {
        let scores = alloc::vec![
            PatientScore { id: "b".into(), iou: 0.75, safety_ok: Some(true), error: None },
            PatientScore { id: "a".into(), iou: 0.95, safety_ok: None, error: None },
            PatientScore { id: "c".into(), iou: 0.0, safety_ok: None, error: Some("boom".into()) },
            PatientScore { id: "d".into(), iou: 0.9, safety_ok: Some(false), error: None },
        ];
        let r = aggregate(scores, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.per_patient[0].id, "a");
        assert_eq!(r.acc(0.6), Some(50.0));
        assert_eq!(r.acc(0.8), Some(25.0));
        assert!(r.acc(0.8) <= r.acc(0.7) && r.acc(0.7) <= r.acc(0.6));
    }
}
