//! Parameterized building blocks shared by the detector and the depth network.

use alloc::format;

use crate::conv::ConvGeom;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv {
    /// He-initialized convolution with a zero bias.
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        Self::with_gain(params, init, name, cin, cout, geom, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain(params: &mut ParamSet, init: &mut Init, name: &str, cin: usize, cout: usize, geom: ConvGeom, gain: f64) -> Self {
        let [kd, kh, kw] = geom.kernel;
        let fan_in = cin * kd * kh * kw;
        let weight = params.add(&format!("{name}.weight"), init.he_uniform(&[cout, cin, kd, kh, kw], fan_in, gain));
        let bias = Some(params.add(&format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = self.bias.map(|b| g.param(params, b));
        g.conv(x, w, b, self.geom)
    }
}

/// Transposed convolution (deconvolution), weight layout `[C_in, C_out, kd, kh, kw]`.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Deconv {
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        let [kd, kh, kw] = geom.kernel;
        // Each output sees roughly cin · kernel / stride² inputs.
        let stride_area = geom.stride.iter().product::<usize>();
        let fan_in = (cin * kd * kh * kw / stride_area).max(1);
        let weight = params.add(&format!("{name}.weight"), init.he_uniform(&[cin, cout, kd, kh, kw], fan_in, 1.0));
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        g.conv_transpose(x, w, Some(b), self.geom)
    }
}

/// ×2 in-plane upsampling: kernel `1×4×4`, stride `1×2×2`, padding `0×1×1`.
pub const UPSAMPLE_2X: ConvGeom = ConvGeom::new([1, 4, 4], [1, 2, 2], [0, 1, 1]);

/// 2D basic residual block (`3×3 → ReLU → 3×3`, projection shortcut when the shape changes).
#[derive(Clone, Debug)]
pub struct ResBlock2d {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResBlock2d {
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = Conv::new(params, init, &format!("{name}.conv1"), cin, cout, ConvGeom::planar(3, stride));
        // Residual branches start small so stacked blocks keep activations bounded.
        let conv2 = Conv::with_gain(params, init, &format!("{name}.conv2"), cout, cout, ConvGeom::planar(3, 1), 0.5);
        let shortcut = (cin != cout || stride != 1)
            .then(|| Conv::new(params, init, &format!("{name}.shortcut"), cin, cout, ConvGeom::pointwise([1, stride, stride])));
        Self { conv1, conv2, shortcut }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, params, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, params, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, params, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

/// Factored (2+1)D convolution: in-plane `1×3×3` then across-slice `3×1×1`.
#[derive(Clone, Debug)]
struct Factored {
    spatial: Conv,
    temporal: Conv,
}

impl Factored {
    fn new(params: &mut ParamSet, init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize, gain: f64) -> Self {
        let spatial = Conv::new(params, init, &format!("{name}.spatial"), cin, cout, ConvGeom::planar(3, stride));
        let temporal = Conv::with_gain(
            params,
            init,
            &format!("{name}.temporal"),
            cout,
            cout,
            ConvGeom::new([3, 1, 1], [stride, 1, 1], [1, 0, 0]),
            gain,
        );
        Self { spatial, temporal }
    }

    fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let h = self.spatial.forward(g, params, x)?;
        let h = g.relu(h);
        self.temporal.forward(g, params, h)
    }
}

/// 3D residual block built from factored (2+1)D convolutions; strides all three axes.
#[derive(Clone, Debug)]
pub struct ResBlock3d {
    conv1: Factored,
    conv2: Factored,
    shortcut: Option<Conv>,
}

impl ResBlock3d {
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = Factored::new(params, init, &format!("{name}.conv1"), cin, cout, stride, 1.0);
        let conv2 = Factored::new(params, init, &format!("{name}.conv2"), cout, cout, 1, 1.0);
        let shortcut = (cin != cout || stride != 1)
            .then(|| Conv::new(params, init, &format!("{name}.shortcut"), cin, cout, ConvGeom::pointwise([stride; 3])));
        Self { conv1, conv2, shortcut }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, params, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, params, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, params, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}
