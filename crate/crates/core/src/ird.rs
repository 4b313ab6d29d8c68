//! Implant region detector: conditional heatmap regression on an axial slice,
//! peak extraction and sub-volume cropping.
//!
//! The detector is a residual encoder (total stride 32) followed by three ×2
//! deconvolutions, so heatmaps come out at stride 4. A learned 3-row embedding
//! of the text condition is broadcast over the last decoder map and
//! concatenated with it before the prediction head, which emits one heatmap
//! channel (sigmoid) and two sub-pixel offset channels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::conv::ConvGeom;
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, Deconv, ResBlock2d, UPSAMPLE_2X};
use crate::math;
use crate::params::{Init, ParamId, ParamSet};
use crate::tensor::Tensor;
use crate::volume::{Condition, Volume};

pub const TOTAL_STRIDE: usize = 32;
pub const HEATMAP_STRIDE: usize = 4;
/// Initial heatmap logit so the prior probability is about 0.1.
const HEATMAP_PRIOR_LOGIT: f64 = -2.19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub stem_width: usize,
    pub widths: [usize; 4],
    pub blocks_per_stage: usize,
    pub decoder_widths: [usize; 3],
    pub embed_dim: usize,
    pub head_width: usize,
    /// Gaussian radius of the training targets, in heatmap pixels.
    pub sigma: f64,
    pub init_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            stem_width: 16,
            widths: [16, 32, 64, 128],
            blocks_per_stage: 2,
            decoder_widths: [64, 32, 32],
            embed_dim: 32,
            head_width: 32,
            sigma: 8.0,
            init_seed: 0,
        }
    }
}

impl DetectorConfig {
    /// Default widths with the target radius shrunk for the 16×16 heatmap of a 64-pixel input.
    pub fn desk() -> Self {
        Self { sigma: 2.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.widths.iter().chain(&self.decoder_widths).chain([&self.stem_width, &self.embed_dim, &self.head_width]);
        if widths.into_iter().any(|w| *w == 0) || self.blocks_per_stage == 0 {
            bail!(Config, "detector widths and block counts must be positive");
        }
        if !(self.sigma > 0.0) {
            bail!(Config, "heatmap sigma must be positive, got {}", self.sigma);
        }
        Ok(())
    }
}

/// Non-negative map in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            bail!(Shape, "heatmap {}x{} cannot hold {} values", height, width, values.len());
        }
        if values.iter().any(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
            bail!(Invalid, "heatmap values must be finite and in [0, 1]");
        }
        Ok(Self { height, width, values })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }
}

/// Two-channel sub-pixel offset map (`dr` plane, then `dc` plane).
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl OffsetMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0.0; 2 * height * width] }
    }

    pub fn at(&self, r: usize, c: usize) -> (f64, f64) {
        let hw = self.height * self.width;
        (self.values[r * self.width + c], self.values[hw + r * self.width + c])
    }

    pub fn set(&mut self, r: usize, c: usize, value: (f64, f64)) {
        let hw = self.height * self.width;
        self.values[r * self.width + c] = value.0;
        self.values[hw + r * self.width + c] = value.1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub heatmap: Heatmap,
    pub offsets: OffsetMap,
    /// Input pixels per heatmap pixel.
    pub stride: usize,
}

/// Detector graph outputs: heatmap `[N, 1, 1, h, w]` after the sigmoid and offsets `[N, 2, 1, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct DetectorVars {
    pub heatmap: Var,
    pub offsets: Var,
}

#[derive(Clone, Debug)]
pub struct RegionDetector {
    config: DetectorConfig,
    stem: Conv,
    blocks: Vec<ResBlock2d>,
    decoder: Vec<Deconv>,
    embedding: ParamId,
    head1: Conv,
    head2: Conv,
    params: ParamSet,
}

impl RegionDetector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(config.init_seed);
        let stem = Conv::new(&mut params, &mut init, "stem", 1, config.stem_width, ConvGeom::planar(3, 2));
        let mut blocks = Vec::new();
        let mut cin = config.stem_width;
        for (s, &w) in config.widths.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                blocks.push(ResBlock2d::new(&mut params, &mut init, &format!("stage{s}.block{b}"), cin, w, stride));
                cin = w;
            }
        }
        let mut decoder = Vec::new();
        for (i, &w) in config.decoder_widths.iter().enumerate() {
            decoder.push(Deconv::new(&mut params, &mut init, &format!("decoder{i}"), cin, w, UPSAMPLE_2X));
            cin = w;
        }
        let embedding = params.add("condition.embedding", init.uniform(&[Condition::ALL.len(), config.embed_dim], 0.5));
        let head1 = Conv::new(&mut params, &mut init, "head.conv1", cin + config.embed_dim, config.head_width, ConvGeom::planar(3, 1));
        let head2 = Conv::with_gain(&mut params, &mut init, "head.conv2", config.head_width, 3, ConvGeom::pointwise([1; 3]), 0.1);
        if let Some(b) = head2.bias {
            params.get_mut(b).data_mut()[0] = HEATMAP_PRIOR_LOGIT;
        }
        Ok(Self { config, stem, blocks, decoder, embedding, head1, head2, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Forward pass over `x` of shape `[N, 1, 1, S, S]` with one condition per item.
    pub fn forward(&self, g: &mut Graph, x: Var, conditions: &[Condition]) -> Result<DetectorVars> {
        let [n, c, d, h, w] = g.value(x).dims5()?;
        if c != 1 || d != 1 {
            bail!(Shape, "detector input must be [N, 1, 1, H, W], got {:?}", g.value(x).shape());
        }
        if h != w || h % TOTAL_STRIDE != 0 || h == 0 {
            bail!(Shape, "detector input must be square with side divisible by {}, got {}x{}", TOTAL_STRIDE, h, w);
        }
        if conditions.len() != n {
            bail!(Shape, "{} conditions for a batch of {}", conditions.len(), n);
        }
        let p = &self.params;
        let mut y = self.stem.forward(g, p, x)?;
        y = g.relu(y);
        for b in &self.blocks {
            y = b.forward(g, p, y)?;
        }
        for dec in &self.decoder {
            y = dec.forward(g, p, y)?;
            y = g.relu(y);
        }
        let [_, _, dd, hh, ww] = g.value(y).dims5()?;
        let table = g.param(p, self.embedding);
        let labels: Vec<usize> = conditions.iter().map(|c| c.index()).collect();
        let emb = g.embed(table, &labels, [dd, hh, ww])?;
        let y = g.concat(&[y, emb])?;
        let y = self.head1.forward(g, p, y)?;
        let y = g.relu(y);
        let out = self.head2.forward(g, p, y)?;
        let logits = g.channels(out, 0, 1)?;
        let heatmap = g.sigmoid(logits);
        let offsets = g.channels(out, 1, 2)?;
        Ok(DetectorVars { heatmap, offsets })
    }

    /// Deterministic inference on a single row-major `side × side` slice.
    pub fn predict(&self, slice: &[f64], side: usize, condition: Condition) -> Result<DetectorOutput> {
        let input = Tensor::new(&[1, 1, 1, side, side], slice.to_vec())?;
        let mut g = Graph::new();
        let x = g.input(input);
        let vars = self.forward(&mut g, x, &[condition])?;
        let outputs = detector_outputs(&g, vars)?;
        Ok(outputs.into_iter().next().expect("batch of one"))
    }
}

/// Split batched graph outputs into per-item [`DetectorOutput`]s.
pub fn detector_outputs(g: &Graph, vars: DetectorVars) -> Result<Vec<DetectorOutput>> {
    let hm = g.value(vars.heatmap);
    let off = g.value(vars.offsets);
    let [n, _, _, h, w] = hm.dims5()?;
    let hw = h * w;
    (0..n)
        .map(|i| {
            let heatmap = Heatmap::new(h, w, hm.data()[i * hw..(i + 1) * hw].to_vec())?;
            let offsets = OffsetMap { height: h, width: w, values: off.data()[i * 2 * hw..(i + 1) * 2 * hw].to_vec() };
            Ok(DetectorOutput { heatmap, offsets, stride: HEATMAP_STRIDE })
        })
        .collect()
}

/// Integer pixel where a target centered on `position` peaks.
pub fn peak_pixel(position: (f64, f64), shape: (usize, usize)) -> Result<(usize, usize)> {
    let (r, c) = position;
    let (h, w) = shape;
    if !(r.is_finite() && c.is_finite() && r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64) {
        bail!(OutOfRange, "position ({}, {}) lies outside {}x{}", r, c, h, w);
    }
    Ok(((math::round(r) as usize).min(h - 1), (math::round(c) as usize).min(w - 1)))
}

/// Gaussian target `exp(-d² / 2σ²)` around the rounded `position` (heatmap pixels).
pub fn gaussian_target(position: (f64, f64), sigma: f64, shape: (usize, usize)) -> Result<Heatmap> {
    if !(sigma > 0.0) {
        bail!(Config, "sigma must be positive, got {}", sigma);
    }
    let (pr, pc) = peak_pixel(position, shape)?;
    let (h, w) = shape;
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (dr, dc) = (r as f64 - pr as f64, c as f64 - pc as f64);
            values.push(math::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma)));
        }
    }
    Heatmap::new(h, w, values)
}

pub const FOCAL_EPS: f64 = 1e-7;

/// Penalty-reduced pixel-wise focal loss with its gradient with respect to `pred`.
///
/// Pixels where the target is exactly 1 contribute `-(1-p)^α log p`; all others
/// contribute `-(1-y)^β p^α log(1-p)`. The sum is divided by the number of peak
/// pixels (at least 1). Predictions are clamped to `[ε, 1-ε]`; clamped pixels get
/// zero gradient.
pub fn focal_loss_grad(pred: &Heatmap, target: &Heatmap, alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    if (pred.height, pred.width) != (target.height, target.width) {
        bail!(Shape, "focal loss shapes differ: {}x{} vs {}x{}", pred.height, pred.width, target.height, target.width);
    }
    let peaks = target.values.iter().filter(|&&y| y >= 1.0).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.values.len()];
    for (k, (&p_raw, &y)) in pred.values.iter().zip(&target.values).enumerate() {
        let p = p_raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let inside = p == p_raw;
        let (term, d) = if y >= 1.0 {
            let q = 1.0 - p;
            let term = -math::powf(q, alpha) * math::ln(p);
            let d = alpha * math::powf(q, alpha - 1.0) * math::ln(p) - math::powf(q, alpha) / p;
            (term, d)
        } else {
            let wgt = math::powf(1.0 - y, beta);
            let lq = math::ln(1.0 - p);
            let term = -wgt * math::powf(p, alpha) * lq;
            let d = -wgt * (alpha * math::powf(p, alpha - 1.0) * lq - math::powf(p, alpha) / (1.0 - p));
            (term, d)
        };
        loss += term;
        if inside {
            grad[k] = d / peaks;
        }
    }
    Ok((loss / peaks, grad))
}

pub fn focal_loss(pred: &Heatmap, target: &Heatmap, alpha: f64, beta: f64) -> Result<f64> {
    focal_loss_grad(pred, target, alpha, beta).map(|(l, _)| l)
}

/// `|pred_dr - dr| + |pred_dc - dc|` at the peak pixel, with its gradient over the map.
pub fn offset_l1_loss_grad(offsets: &OffsetMap, gt: (f64, f64), peak: (usize, usize)) -> Result<(f64, Vec<f64>)> {
    let (r, c) = peak;
    if r >= offsets.height || c >= offsets.width {
        bail!(OutOfRange, "peak ({}, {}) outside offset map {}x{}", r, c, offsets.height, offsets.width);
    }
    let (pr, pc) = offsets.at(r, c);
    let mut grad = vec![0.0; offsets.values.len()];
    let hw = offsets.height * offsets.width;
    grad[r * offsets.width + c] = math::sign(pr - gt.0);
    grad[hw + r * offsets.width + c] = math::sign(pc - gt.1);
    Ok(((pr - gt.0).abs() + (pc - gt.1).abs(), grad))
}

pub fn offset_l1_loss(offsets: &OffsetMap, gt: (f64, f64), peak: (usize, usize)) -> Result<f64> {
    offset_l1_loss_grad(offsets, gt, peak).map(|(l, _)| l)
}

/// Arg-max pixel refined by its offsets, in input pixels. Ties go to the smallest
/// row, then the smallest column.
pub fn extract_peak(output: &DetectorOutput) -> (f64, f64) {
    let hm = &output.heatmap;
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for r in 0..hm.height {
        for c in 0..hm.width {
            let v = hm.at(r, c);
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
    }
    let (dr, dc) = output.offsets.at(best.0, best.1);
    let s = output.stride as f64;
    ((best.0 as f64 + dr) * s, (best.1 as f64 + dc) * s)
}

/// A cropped sub-volume and the index of its first voxel in the source volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub volume: Volume,
    pub origin: [usize; 3],
}

fn window(center: f64, size: usize, extent: usize) -> usize {
    let start = math::round(center) as i64 - (size / 2) as i64;
    start.clamp(0, (extent - size) as i64) as usize
}

/// Cut a `crop_d × crop_hw × crop_hw` window: in-plane centered on `position` and
/// depth centered on `D/2`, each shifted minimally to stay inside the volume.
pub fn crop_subvolume(volume: &Volume, position: (f64, f64), crop_hw: usize, crop_d: usize) -> Result<Crop> {
    let [d, h, w] = volume.dims();
    if crop_hw > h.min(w) || crop_d > d {
        bail!(Shape, "crop {}x{}x{} exceeds volume {}x{}x{}", crop_d, crop_hw, crop_hw, d, h, w);
    }
    if !(position.0.is_finite() && position.1.is_finite()) {
        bail!(Invalid, "crop position ({}, {}) is not finite", position.0, position.1);
    }
    let origin = [window(d as f64 / 2.0, crop_d, d), window(position.0, crop_hw, h), window(position.1, crop_hw, w)];
    let mut voxels = Vec::with_capacity(crop_d * crop_hw * crop_hw);
    for z in origin[0]..origin[0] + crop_d {
        for r in origin[1]..origin[1] + crop_hw {
            let start = volume.index(z, r, origin[2]);
            voxels.extend_from_slice(&volume.voxels()[start..start + crop_hw]);
        }
    }
    let cropped = Volume::new([crop_d, crop_hw, crop_hw], volume.spacing_mm(), voxels)?;
    Ok(Crop { volume: cropped, origin })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn output_with_peak(h: usize, w: usize, peaks: &[(usize, usize)]) -> DetectorOutput {
        let mut values = vec![0.0; h * w];
        for &(r, c) in peaks {
            values[r * w + c] = 1.0;
        }
        DetectorOutput { heatmap: Heatmap::new(h, w, values).unwrap(), offsets: OffsetMap::zeros(h, w), stride: 4 }
    }

    #[test]
    fn peak_extraction_examples() {
        let mut out = output_with_peak(32, 32, &[(10, 20)]);
        assert_eq!(extract_peak(&out), (40.0, 80.0));
        out.offsets.set(10, 20, (0.5, 0.25));
        assert_eq!(extract_peak(&out), (42.0, 81.0));
        assert_eq!(extract_peak(&output_with_peak(16, 16, &[(5, 2), (3, 9)])), (12.0, 36.0));
    }

    #[test]
    fn gaussian_target_examples() {
        let t = gaussian_target((8.0, 8.0), 3.0, (17, 17)).unwrap();
        assert_eq!(t.at(8, 8), 1.0);
        assert!((t.at(8, 11) - (-0.5f64).exp()).abs() < 1e-15);
        for r in 0..17 {
            for c in 0..17 {
                assert_eq!(t.at(r, c), t.at(16 - r, c));
                assert_eq!(t.at(r, c), t.at(r, 16 - c));
            }
        }
        assert!(gaussian_target((17.0, 3.0), 2.0, (17, 17)).is_err());
        assert!(gaussian_target((-0.5, 3.0), 2.0, (17, 17)).is_err());
    }

    #[test]
    fn focal_loss_examples() {
        let target = Heatmap::new(1, 1, vec![1.0]).unwrap();
        let pred = Heatmap::new(1, 1, vec![0.5]).unwrap();
        let l = focal_loss(&pred, &target, 2.0, 4.0).unwrap();
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.1733).abs() < 1e-4);

        let t = gaussian_target((3.0, 4.0), 2.0, (8, 8)).unwrap();
        let mut p = t.clone();
        for (k, v) in p.values.iter_mut().enumerate() {
            *v = if t.values[k] >= 1.0 { 1.0 - 1e-7 } else { 1e-7 };
        }
        assert!(focal_loss(&p, &t, 2.0, 4.0).unwrap() < 1e-5);
        assert!(focal_loss(&Heatmap::new(1, 2, vec![0.5, 0.5]).unwrap(), &target, 2.0, 4.0).is_err());
    }

    #[test]
    fn offset_loss_examples() {
        let mut m = OffsetMap::zeros(4, 4);
        m.set(1, 2, (0.2, 0.1));
        assert!((offset_l1_loss(&m, (0.5, 0.5), (1, 2)).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(offset_l1_loss(&m, (0.2, 0.1), (1, 2)).unwrap(), 0.0);
        m.set(0, 0, (9.0, -9.0));
        assert!((offset_l1_loss(&m, (0.5, 0.5), (1, 2)).unwrap() - 0.7).abs() < 1e-12);
        assert!(offset_l1_loss(&m, (0.5, 0.5), (4, 0)).is_err());
    }

    fn ramp_volume(d: usize, h: usize, w: usize) -> Volume {
        let n = d * h * w;
        Volume::new([d, h, w], [0.25; 3], (0..n).map(|i| (i % 1000) as f32 / 1000.0).collect()).unwrap()
    }

    #[test]
    fn crop_windows() {
        let v = ramp_volume(40, 24, 24);
        let c = crop_subvolume(&v, (0.0, 0.0), 8, 16).unwrap();
        assert_eq!(c.origin, [12, 0, 0]);
        let c = crop_subvolume(&v, (23.0, 12.0), 8, 16).unwrap();
        assert_eq!(c.origin, [12, 16, 8]);
        assert_eq!(c.volume.get(3, 2, 5), v.get(15, 18, 13));
        let same = crop_subvolume(&v, (5.0, 17.0), 24, 40).unwrap();
        assert_eq!(same.origin, [0, 0, 0]);
        assert_eq!(same.volume, v);
        assert!(crop_subvolume(&v, (5.0, 5.0), 25, 16).is_err());
        assert!(crop_subvolume(&v, (5.0, 5.0), 8, 41).is_err());
    }

    #[test]
    fn detector_heatmap_is_quarter_resolution_and_bounded() {
        let cfg = DetectorConfig { stem_width: 4, widths: [4, 4, 8, 8], blocks_per_stage: 1, decoder_widths: [8, 4, 4], embed_dim: 4, head_width: 4, ..Default::default() };
        let det = RegionDetector::new(cfg).unwrap();
        let img: Vec<f64> = (0..64 * 64).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        let a = det.predict(&img, 64, Condition::Left).unwrap();
        assert_eq!((a.heatmap.height, a.heatmap.width), (16, 16));
        assert!(a.heatmap.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, det.predict(&img, 64, Condition::Left).unwrap());
        assert_ne!(a, det.predict(&img, 64, Condition::Right).unwrap());
        assert!(det.predict(&img[..48 * 48], 48, Condition::Left).is_err());
    }
}
