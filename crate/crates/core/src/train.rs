//! Single optimization steps: forward, losses, backward, parameter gradients.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::{IdpSample, IrdSample};
use crate::edges::SoftEdgeParams;
use crate::error::{bail, Result};
use crate::graph::Graph;
use crate::idpnet::{intervals_of, volumes_to_tensor, IdpNet};
use crate::ird::{
    detector_outputs, focal_loss_grad, gaussian_target, offset_l1_loss_grad, peak_pixel, RegionDetector, HEATMAP_STRIDE,
};
use crate::losses::{l_reg, l_tiou, l_total, l_tpl, texture_extract, LossReport, LossSwitches};
use crate::params::ParamGrads;
use crate::tensor::Tensor;
use crate::volume::Interval;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;

/// Detector losses averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IrdReport {
    pub focal: f64,
    pub offset: f64,
    pub total: f64,
}

/// Heatmap-space target position and the sub-pixel offset the detector should predict there.
pub fn heatmap_target(position: (f64, f64), shape: (usize, usize)) -> Result<((f64, f64), (usize, usize), (f64, f64))> {
    let s = HEATMAP_STRIDE as f64;
    let p = (position.0 / s, position.1 / s);
    let peak = peak_pixel(p, shape)?;
    Ok((p, peak, (p.0 - peak.0 as f64, p.1 - peak.1 as f64)))
}

/// One detector step on square samples of equal side.
pub fn ird_batch_step(detector: &RegionDetector, batch: &[IrdSample]) -> Result<(IrdReport, ParamGrads)> {
    let Some(first) = batch.first() else {
        bail!(Shape, "empty detector batch");
    };
    let side = first.height;
    if batch.iter().any(|s| s.height != side || s.width != side) {
        bail!(Shape, "detector batch must hold square samples of one size");
    }
    let n = batch.len();
    let mut data = Vec::with_capacity(n * side * side);
    for s in batch {
        data.extend_from_slice(&s.image);
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[n, 1, 1, side, side], data)?);
    let conditions: Vec<_> = batch.iter().map(|s| s.condition).collect();
    let vars = detector.forward(&mut g, x, &conditions)?;
    let outputs = detector_outputs(&g, vars)?;

    let sigma = detector.config().sigma;
    let (h, w) = (outputs[0].heatmap.height, outputs[0].heatmap.width);
    let hw = h * w;
    let mut d_heat = Tensor::zeros(g.value(vars.heatmap).shape());
    let mut d_off = Tensor::zeros(g.value(vars.offsets).shape());
    let mut report = IrdReport::default();
    let inv_n = 1.0 / n as f64;
    for (i, (s, out)) in batch.iter().zip(&outputs).enumerate() {
        let (p, peak, gt_offset) = heatmap_target(s.position, (h, w))?;
        let target = gaussian_target(p, sigma, (h, w))?;
        let (focal, gf) = focal_loss_grad(&out.heatmap, &target, FOCAL_ALPHA, FOCAL_BETA)?;
        let (offset, go) = offset_l1_loss_grad(&out.offsets, gt_offset, peak)?;
        report.focal += focal * inv_n;
        report.offset += offset * inv_n;
        for (dst, v) in d_heat.data_mut()[i * hw..(i + 1) * hw].iter_mut().zip(gf) {
            *dst = v * inv_n;
        }
        for (dst, v) in d_off.data_mut()[i * 2 * hw..(i + 1) * 2 * hw].iter_mut().zip(go) {
            *dst = v * inv_n;
        }
    }
    report.total = report.focal + report.offset;
    if !report.total.is_finite() {
        bail!(NonFinite, "detector loss {}", report.total);
    }
    let grads = g.backward(&[(vars.heatmap, &d_heat), (vars.offsets, &d_off)])?;
    let mut pg = ParamGrads::zeros_like(detector.params());
    g.accumulate_param_grads(&grads, &mut pg)?;
    Ok((report, pg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TplSettings {
    pub k: usize,
    pub margin: f64,
    pub edge: SoftEdgeParams,
}

impl Default for TplSettings {
    fn default() -> Self {
        Self { k: 10, margin: 0.1, edge: SoftEdgeParams::default() }
    }
}

/// Outcome of one depth-network step.
#[derive(Clone, Debug)]
pub struct IdpStep {
    pub report: LossReport,
    pub grads: ParamGrads,
    pub predictions: Vec<Interval>,
}

/// One depth-network step: `l_reg` plus the enabled `l_tiou` and texture terms.
pub fn idpnet_step(net: &IdpNet, batch: &[IdpSample], switches: LossSwitches, tpl: &TplSettings) -> Result<IdpStep> {
    if batch.is_empty() {
        bail!(Shape, "empty depth-network batch");
    }
    let volumes: Vec<_> = batch.iter().map(|s| &s.volume).collect();
    let gts: Vec<Interval> = batch.iter().map(|s| s.interval).collect();
    let mut g = Graph::new();
    let x = g.input(volumes_to_tensor(&volumes)?);
    let vars = net.forward(&mut g, x)?;
    let predictions = intervals_of(g.value(vars.interval));

    let reg = l_reg(&predictions, &gts)?;
    let tiou = l_tiou(&predictions, &gts)?;
    let mut d_interval = Tensor::zeros(&[batch.len(), 2]);
    for (j, gr) in reg.grad.iter().enumerate() {
        let mut row = *gr;
        if switches.tiou {
            row[0] += tiou.grad[j][0];
            row[1] += tiou.grad[j][1];
        }
        d_interval.data_mut()[2 * j..2 * j + 2].copy_from_slice(&row);
    }

    let mut seeds_feature = None;
    let (mut l_con, mut l_icon) = (0.0, 0.0);
    if switches.tpl {
        let (stack, tape) = texture_extract(g.value(vars.feature), tpl.edge, tpl.k)?;
        let terms = l_tpl(&stack, tpl.margin)?;
        l_con = terms.l_con;
        l_icon = terms.l_icon;
        seeds_feature = Some(tape.backward(&terms.grad)?);
    }
    let report = l_total(reg.value, tiou.value, l_con, l_icon, switches);
    if !report.l_total.is_finite() {
        bail!(NonFinite, "depth-network loss {}", report.l_total);
    }

    let mut seeds = alloc::vec![(vars.interval, &d_interval)];
    if let Some(df) = &seeds_feature {
        seeds.push((vars.feature, df));
    }
    let grads = g.backward(&seeds)?;
    let mut pg = ParamGrads::zeros_like(net.params());
    g.accumulate_param_grads(&grads, &mut pg)?;
    Ok(IdpStep { report, grads: pg, predictions })
}
