//! Training losses of the depth network.
//!
//! Every loss returns its value together with the gradient with respect to its
//! inputs, so it can seed [`Graph::backward`](crate::graph::Graph::backward).
//!
//! * [`l_reg`]: summed L1 distance between predicted and ground-truth `(start, end)`.
//! * [`l_tiou`]: batch mean of `1 - IoU` of the 1D intervals.
//! * [`texture_extract`] + [`l_tpl`]: texture-perceive loss on the encoder feature.
//!   The feature is reduced to one channel, every depth slice goes through the
//!   smooth edge pipeline, neighbouring slices are pulled together (`l_con`) and
//!   slices `k` apart are pushed to a mean-squared distance of at least `margin`
//!   (`l_icon`, a hinge).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::edges::{SoftEdge, SoftEdgeParams};
use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Tensor;
use crate::volume::Interval;

/// Loss value with the gradient for each predicted interval as `[d_start, d_end]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalLoss {
    pub value: f64,
    pub grad: Vec<[f64; 2]>,
}

fn check_batch(pred: &[Interval], gt: &[Interval]) -> Result<()> {
    if pred.len() != gt.len() {
        bail!(Shape, "prediction batch {} and ground-truth batch {} differ", pred.len(), gt.len());
    }
    if pred.is_empty() {
        bail!(Shape, "empty interval batch");
    }
    Ok(())
}

/// `Σ_j |s_j - ŝ_j| + |e_j - ê_j|` over the batch.
pub fn l_reg(pred: &[Interval], gt: &[Interval]) -> Result<IntervalLoss> {
    check_batch(pred, gt)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        value += (p.start - g.start).abs() + (p.end - g.end).abs();
        grad.push([math::sign(p.start - g.start), math::sign(p.end - g.end)]);
    }
    Ok(IntervalLoss { value, grad })
}

/// Overlap ratio of two 1D intervals; lengths clamp at zero and an empty union gives 0.
pub fn interval_iou(a: &Interval, b: &Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 || !union.is_finite() {
        0.0
    } else {
        inter / union
    }
}

/// IoU and its gradient with respect to `pred`'s `(start, end)`.
fn iou_with_grad(pred: &Interval, gt: &Interval) -> (f64, [f64; 2]) {
    let lo = pred.start.max(gt.start);
    let hi = pred.end.min(gt.end);
    let inter = (hi - lo).max(0.0);
    let union = pred.length() + gt.length() - inter;
    if union <= 0.0 || !union.is_finite() {
        return (0.0, [0.0, 0.0]);
    }
    let iou = inter / union;
    let mut d_inter = [0.0; 2];
    if hi > lo {
        if pred.start > gt.start {
            d_inter[0] = -1.0;
        }
        if pred.end < gt.end {
            d_inter[1] = 1.0;
        }
    }
    let d_len = if pred.end > pred.start { [-1.0, 1.0] } else { [0.0, 0.0] };
    let mut grad = [0.0; 2];
    for k in 0..2 {
        let d_union = d_len[k] - d_inter[k];
        grad[k] = (d_inter[k] * union - inter * d_union) / (union * union);
    }
    (iou, grad)
}

/// Batch mean of `1 - IoU(pred_j, gt_j)`.
pub fn l_tiou(pred: &[Interval], gt: &[Interval]) -> Result<IntervalLoss> {
    check_batch(pred, gt)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let (iou, d) = iou_with_grad(p, g);
        value += 1.0 - iou;
        grad.push([-d[0] / n, -d[1] / n]);
    }
    Ok(IntervalLoss { value: value / n, grad })
}

/// Per-slice edge-response matrices, `N × D″ × H′ × W′`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureStack {
    pub batch: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub matrices: Vec<f64>,
    pub sampling_interval_k: usize,
}

impl TextureStack {
    pub fn new(dims: [usize; 4], matrices: Vec<f64>, k: usize) -> Result<Self> {
        let [batch, depth, height, width] = dims;
        if matrices.len() != batch * depth * height * width {
            bail!(Shape, "texture stack dims {:?} do not match {} values", dims, matrices.len());
        }
        if k == 0 {
            bail!(Config, "sampling interval k must be at least 1");
        }
        if matrices.iter().any(|v| !(0.0..=1.0).contains(v)) {
            bail!(Invalid, "texture matrices must lie in [0, 1]");
        }
        Ok(Self { batch, depth, height, width, matrices, sampling_interval_k: k })
    }

    fn slice(&self, n: usize, d: usize) -> &[f64] {
        let hw = self.height * self.width;
        let base = (n * self.depth + d) * hw;
        &self.matrices[base..base + hw]
    }
}

/// Backward state of [`texture_extract`].
#[derive(Clone, Debug)]
pub struct TextureTape {
    shape: [usize; 5],
    slices: Vec<SoftEdge>,
}

impl TextureTape {
    /// Gradient with respect to the feature `F` given the gradient of the stack.
    pub fn backward(&self, d_stack: &[f64]) -> Result<Tensor> {
        let [n, c, d, h, w] = self.shape;
        let hw = h * w;
        if d_stack.len() != n * d * hw {
            bail!(Shape, "texture gradient has {} values, expected {}", d_stack.len(), n * d * hw);
        }
        let mut df = Tensor::zeros(&self.shape);
        for i in 0..n {
            for z in 0..d {
                let s = i * d + z;
                let dx = self.slices[s].backward(&d_stack[s * hw..(s + 1) * hw]);
                for ch in 0..c {
                    let base = ((i * c + ch) * d + z) * hw;
                    for (dst, v) in df.data_mut()[base..base + hw].iter_mut().zip(&dx) {
                        *dst = v / c as f64;
                    }
                }
            }
        }
        Ok(df)
    }
}

/// Reduce `F` (`N × C × D′ × H′ × W′`) to its channel mean and run the smooth
/// edge pipeline on every depth slice.
pub fn texture_extract(f: &Tensor, edge: SoftEdgeParams, k: usize) -> Result<(TextureStack, TextureTape)> {
    let [n, c, d, h, w] = f.dims5()?;
    if d < 2 {
        bail!(Shape, "texture extraction needs at least 2 depth slices, got {}", d);
    }
    if !f.is_finite() {
        bail!(NonFinite, "encoder feature contains non-finite values");
    }
    let hw = h * w;
    let mut matrices = Vec::with_capacity(n * d * hw);
    let mut slices = Vec::with_capacity(n * d);
    let mut mean = vec![0.0; hw];
    for i in 0..n {
        for z in 0..d {
            mean.fill(0.0);
            for ch in 0..c {
                let base = ((i * c + ch) * d + z) * hw;
                for (m, v) in mean.iter_mut().zip(&f.data()[base..base + hw]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= c as f64);
            let e = SoftEdge::forward(&mean, h, w, edge);
            matrices.extend_from_slice(e.output());
            slices.push(e);
        }
    }
    let stack = TextureStack::new([n, d, h, w], matrices, k)?;
    Ok((stack, TextureTape { shape: [n, c, d, h, w], slices }))
}

/// `(l_con, l_icon)` with the gradient of `l_con + l_icon` with respect to the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct TplTerms {
    pub l_con: f64,
    pub l_icon: f64,
    /// False when the stack has no slice pair `k` apart (so `l_icon` is 0 by definition).
    pub icon_defined: bool,
    pub grad: Vec<f64>,
}

pub fn l_tpl(stack: &TextureStack, margin: f64) -> Result<TplTerms> {
    if stack.matrices.is_empty() || stack.batch == 0 {
        bail!(Shape, "empty texture stack");
    }
    if stack.depth < 2 {
        bail!(Shape, "texture loss needs at least 2 slices, got {}", stack.depth);
    }
    let (n, d, k) = (stack.batch, stack.depth, stack.sampling_interval_k);
    let hw = stack.height * stack.width;
    let pix = hw as f64;
    let mut grad = vec![0.0; stack.matrices.len()];

    let con_pairs = (n * (d - 1)) as f64;
    let mut l_con = 0.0;
    for i in 0..n {
        for z in 0..d - 1 {
            let (a, b) = (stack.slice(i, z), stack.slice(i, z + 1));
            let (ba, bb) = ((i * d + z) * hw, (i * d + z + 1) * hw);
            let mut msd = 0.0;
            for p in 0..hw {
                let diff = a[p] - b[p];
                msd += diff * diff;
                let g = 2.0 * diff / (pix * con_pairs);
                grad[ba + p] += g;
                grad[bb + p] -= g;
            }
            l_con += msd / pix;
        }
    }
    l_con /= con_pairs;

    let icon_defined = d > k;
    let mut l_icon = 0.0;
    if icon_defined {
        let icon_pairs = (n * (d - k)) as f64;
        for i in 0..n {
            for z in 0..d - k {
                let (a, b) = (stack.slice(i, z), stack.slice(i, z + k));
                let msd = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / pix;
                let hinge = margin - msd;
                if hinge > 0.0 {
                    l_icon += hinge;
                    let (ba, bb) = ((i * d + z) * hw, (i * d + z + k) * hw);
                    for p in 0..hw {
                        let g = -2.0 * (a[p] - b[p]) / (pix * icon_pairs);
                        grad[ba + p] += g;
                        grad[bb + p] -= g;
                    }
                }
            }
        }
        l_icon /= icon_pairs;
    } else {
        log::warn!("texture stack depth {} <= sampling interval {}; inconsistency term is 0", d, k);
    }
    Ok(TplTerms { l_con, l_icon, icon_defined, grad })
}

/// Which terms enter the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub tiou: bool,
    pub tpl: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self { tiou: true, tpl: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_reg: f64,
    pub l_tiou: f64,
    pub l_tpl: f64,
    pub l_con: f64,
    pub l_icon: f64,
    pub l_total: f64,
}

/// Assemble the total loss with unit weights. A disabled term is reported as exactly 0.
pub fn l_total(l_reg: f64, l_tiou: f64, l_con: f64, l_icon: f64, switches: LossSwitches) -> LossReport {
    let l_tiou = if switches.tiou { l_tiou } else { 0.0 };
    let (l_con, l_icon) = if switches.tpl { (l_con, l_icon) } else { (0.0, 0.0) };
    let l_tpl = l_con + l_icon;
    LossReport { l_reg, l_tiou, l_tpl, l_con, l_icon, l_total: l_reg + l_tiou + l_tpl }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: f64, e: f64) -> Interval {
        Interval::new(s, e)
    }

    #[test]
    fn l_reg_examples() {
        assert_eq!(l_reg(&[iv(3.0, 9.0)], &[iv(3.0, 9.0)]).unwrap().value, 0.0);
        assert_eq!(l_reg(&[iv(10.0, 20.0)], &[iv(12.0, 18.0)]).unwrap().value, 4.0);
        let two = l_reg(&[iv(10.0, 20.0), iv(0.0, 10.0)], &[iv(12.0, 18.0), iv(3.0, 13.0)]).unwrap();
        assert_eq!(two.value, 10.0);
        assert!(l_reg(&[iv(0.0, 1.0)], &[]).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(interval_iou(&iv(2.0, 9.0), &iv(2.0, 9.0)), 1.0);
        assert_eq!(interval_iou(&iv(0.0, 10.0), &iv(20.0, 30.0)), 0.0);
        assert!((interval_iou(&iv(10.0, 20.0), &iv(15.0, 25.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(interval_iou(&iv(0.0, 0.0), &iv(0.0, 0.0)), 0.0);
        assert_eq!(interval_iou(&iv(5.0, 1.0), &iv(0.0, 10.0)), 0.0);
    }

    #[test]
    fn tiou_examples() {
        assert_eq!(l_tiou(&[iv(1.0, 4.0)], &[iv(1.0, 4.0)]).unwrap().value, 0.0);
        assert_eq!(l_tiou(&[iv(0.0, 10.0)], &[iv(20.0, 30.0)]).unwrap().value, 1.0);
        assert!((l_tiou(&[iv(10.0, 20.0)], &[iv(15.0, 25.0)]).unwrap().value - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tpl_examples() {
        let same = TextureStack::new([1, 12, 2, 2], vec![0.4; 48], 10).unwrap();
        let t = l_tpl(&same, 0.1).unwrap();
        assert_eq!(t.l_con, 0.0);
        assert!((t.l_icon - 0.1).abs() < 1e-15);

        let mut two = vec![0.0; 8];
        two[4..].fill(1.0);
        let t = l_tpl(&TextureStack::new([1, 2, 2, 2], two, 10).unwrap(), 0.1).unwrap();
        assert_eq!(t.l_con, 1.0);
        assert_eq!(t.l_icon, 0.0);
        assert!(!t.icon_defined);

        // Alternating 0/1 blocks every 10 slices: every distant pair is maximally apart.
        let m: Vec<f64> = (0..20 * 4).map(|i| if (i / 4) % 20 < 10 { 0.0 } else { 1.0 }).collect();
        let t = l_tpl(&TextureStack::new([1, 20, 2, 2], m, 10).unwrap(), 0.1).unwrap();
        assert_eq!(t.l_icon, 0.0);
        assert!(l_tpl(&TextureStack { batch: 0, depth: 0, height: 0, width: 0, matrices: vec![], sampling_interval_k: 1 }, 0.1).is_err());
    }

    #[test]
    fn total_examples() {
        let r = l_total(4.0, 2.0 / 3.0, 0.03, 0.02, LossSwitches::default());
        assert!((r.l_total - 4.716_666_666_666_667).abs() < 1e-12);
        assert_eq!(r.l_tpl, 0.03 + 0.02);
        assert_eq!(l_total(0.0, 0.0, 0.0, 0.0, LossSwitches::default()).l_total, 0.0);
        let off = l_total(4.0, 0.5, 0.3, 0.2, LossSwitches { tiou: true, tpl: false });
        assert_eq!(off.l_tpl, 0.0);
        assert_eq!(off.l_total, 4.0 + 0.5);
    }

    #[test]
    fn texture_extract_rejects_single_slice() {
        let f = Tensor::zeros(&[1, 2, 1, 4, 4]);
        assert!(texture_extract(&f, SoftEdgeParams::default(), 10).is_err());
        let f = Tensor::full(&[1, 2, 3, 4, 4], 0.3);
        let (s, _) = texture_extract(&f, SoftEdgeParams::default(), 10).unwrap();
        assert!(s.matrices.iter().all(|v| *v == 0.0));
    }
}
