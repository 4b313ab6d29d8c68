//! Depth prediction network.
//!
//! Encoder: two (2+1)D residual blocks striding all three axes, then two 2D
//! residual blocks applied per depth slice (depth folded into the batch). The
//! encoder output `F` (`N × C × D/4 × H/s × W/s`) also feeds the texture loss.
//! Decoder: three ×2 in-plane deconvolutions. Head: global average pooling, two
//! 1×1 convolutions with rectifiers, read as a normalized `(start, length)` pair.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::conv::ConvGeom;
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, Deconv, ResBlock2d, ResBlock3d, UPSAMPLE_2X};
use crate::math;
use crate::params::{Init, ParamSet};
use crate::tensor::Tensor;
use crate::volume::{Interval, Volume};

pub const DEPTH_STRIDE: usize = 4;
/// Initial normalized head output `(start, length)`, i.e. the interval `(0.25·D, 0.75·D)`.
pub const HEAD_PRIOR: [f64; 2] = [0.25, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdpConfig {
    pub widths_3d: [usize; 2],
    pub widths_2d: [usize; 2],
    /// In-plane stride of each 2D block.
    pub stride_2d: usize,
    pub decoder_widths: [usize; 3],
    pub head_hidden: usize,
    pub init_seed: u64,
}

impl Default for IdpConfig {
    fn default() -> Self {
        Self { widths_3d: [16, 32], widths_2d: [64, 64], stride_2d: 2, decoder_widths: [32, 32, 32], head_hidden: 32, init_seed: 0 }
    }
}

impl IdpConfig {
    /// Every layer `width` channels wide, default strides.
    pub fn uniform(width: usize) -> Self {
        Self {
            widths_3d: [width; 2],
            widths_2d: [width; 2],
            decoder_widths: [width; 3],
            head_hidden: width,
            ..Self::default()
        }
    }

    /// Small network for CPU training on desk-scale phantoms: 2D blocks keep the
    /// in-plane resolution so the texture loss sees more than a 2×2 map.
    pub fn desk() -> Self {
        Self { widths_3d: [8, 16], widths_2d: [16, 16], stride_2d: 1, decoder_widths: [16, 8, 8], head_hidden: 16, init_seed: 0 }
    }

    pub fn channels(&self) -> usize {
        self.widths_2d[1]
    }

    pub fn spatial_stride(&self) -> usize {
        4 * self.stride_2d * self.stride_2d
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.widths_3d.iter().chain(&self.widths_2d).chain(&self.decoder_widths).chain([&self.head_hidden]);
        if all.into_iter().any(|w| *w == 0) || self.stride_2d == 0 {
            bail!(Config, "depth network widths and strides must be positive");
        }
        Ok(())
    }

    /// Shape of the encoder feature for an input of extents `[D, H, W]`.
    pub fn feature_shape(&self, batch: usize, dims: [usize; 3]) -> Result<[usize; 5]> {
        let s = self.spatial_stride();
        let [d, h, w] = dims;
        if d == 0 || h == 0 || w == 0 || d % DEPTH_STRIDE != 0 || h % s != 0 || w % s != 0 {
            bail!(Shape, "input {}x{}x{} must divide by depth stride {} and spatial stride {}", d, h, w, DEPTH_STRIDE, s);
        }
        Ok([batch, self.channels(), d / DEPTH_STRIDE, h / s, w / s])
    }

    pub fn decoder_shape(&self, batch: usize, dims: [usize; 3]) -> Result<[usize; 5]> {
        let [n, _, d, h, w] = self.feature_shape(batch, dims)?;
        Ok([n, self.decoder_widths[2], d, 8 * h, 8 * w])
    }
}

/// `(s, len)` normalized head outputs to slice indices `(s·D, (s + len)·D)`.
pub fn interval_from_head(s_norm: f64, len_norm: f64, depth: usize) -> Interval {
    let d = depth as f64;
    Interval::new(s_norm * d, (s_norm + len_norm) * d)
}

#[derive(Clone, Copy, Debug)]
pub struct IdpVars {
    /// `[N, 2]` rows of `(start, end)` slice indices.
    pub interval: Var,
    pub feature: Var,
}

#[derive(Clone, Debug)]
pub struct IdpNet {
    config: IdpConfig,
    blocks_3d: [ResBlock3d; 2],
    blocks_2d: [ResBlock2d; 2],
    decoder: [Deconv; 3],
    head1: Conv,
    head2: Conv,
    params: ParamSet,
}

impl IdpNet {
    pub fn new(config: IdpConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(config.init_seed);
        let p = &mut params;
        let [a, b] = config.widths_3d;
        let [c, d] = config.widths_2d;
        let blocks_3d = [ResBlock3d::new(p, &mut init, "enc3d.0", 1, a, 2), ResBlock3d::new(p, &mut init, "enc3d.1", a, b, 2)];
        let blocks_2d = [
            ResBlock2d::new(p, &mut init, "enc2d.0", b, c, config.stride_2d),
            ResBlock2d::new(p, &mut init, "enc2d.1", c, d, config.stride_2d),
        ];
        let [e, f, gw] = config.decoder_widths;
        let decoder = [
            Deconv::new(p, &mut init, "decoder.0", d, e, UPSAMPLE_2X),
            Deconv::new(p, &mut init, "decoder.1", e, f, UPSAMPLE_2X),
            Deconv::new(p, &mut init, "decoder.2", f, gw, UPSAMPLE_2X),
        ];
        let head1 = Conv::new(p, &mut init, "head.conv1", gw, config.head_hidden, ConvGeom::pointwise([1; 3]));
        let head2 = Conv::new(p, &mut init, "head.conv2", config.head_hidden, 2, ConvGeom::pointwise([1; 3]));
        // Start from the prior interval: zero weights and a bias at softplus⁻¹ of the prior.
        p.get_mut(head2.weight).data_mut().fill(0.0);
        if let Some(bias) = head2.bias {
            let b = p.get_mut(bias).data_mut();
            b[0] = math::softplus_inv(HEAD_PRIOR[0]);
            b[1] = math::softplus_inv(HEAD_PRIOR[1]);
        }
        Ok(Self { config, blocks_3d, blocks_2d, decoder, head1, head2, params })
    }

    pub fn config(&self) -> &IdpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = g.value(x).dims5()?;
        if c != 1 {
            bail!(Shape, "depth network input must have one channel, got {}", c);
        }
        self.config.feature_shape(n, [d, h, w])?;
        let p = &self.params;
        let mut y = x;
        for b in &self.blocks_3d {
            y = b.forward(g, p, y)?;
        }
        let mut s = g.fold_depth(y)?;
        for b in &self.blocks_2d {
            s = b.forward(g, p, s)?;
        }
        g.unfold_depth(s, n)
    }

    pub fn decoder_forward(&self, g: &mut Graph, feature: Var) -> Result<Var> {
        let [_, c, ..] = g.value(feature).dims5()?;
        if c != self.config.channels() {
            bail!(Shape, "decoder expects {} channels, got {}", self.config.channels(), c);
        }
        let mut y = feature;
        for dec in &self.decoder {
            y = dec.forward(g, &self.params, y)?;
            y = g.relu(y);
        }
        Ok(y)
    }

    /// `[N, 2]` interval rows for an input with `depth` slices.
    pub fn regression_head(&self, g: &mut Graph, decoded: Var, depth: usize) -> Result<Var> {
        let pooled = g.global_avg_pool(decoded)?;
        let h = self.head1.forward(g, &self.params, pooled)?;
        let h = g.relu(h);
        let h = self.head2.forward(g, &self.params, h)?;
        let h = g.softplus(h);
        g.interval_head(h, depth as f64)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<IdpVars> {
        let depth = g.value(x).shape().get(2).copied().unwrap_or(0);
        let feature = self.encoder_forward(g, x)?;
        let decoded = self.decoder_forward(g, feature)?;
        let interval = self.regression_head(g, decoded, depth)?;
        Ok(IdpVars { interval, feature })
    }

    /// Inference on a `[N, 1, D, H, W]` batch: intervals in input-slice units and the encoder feature.
    pub fn predict(&self, input: Tensor) -> Result<(Vec<Interval>, Tensor)> {
        let mut g = Graph::new();
        let x = g.input(input);
        let vars = self.forward(&mut g, x)?;
        Ok((intervals_of(g.value(vars.interval)), g.value(vars.feature).clone()))
    }
}

pub fn intervals_of(rows: &Tensor) -> Vec<Interval> {
    rows.data().chunks(2).map(|p| Interval::new(p[0], p[1])).collect()
}

/// Stack volumes of equal extents into a `[N, 1, D, H, W]` tensor.
pub fn volumes_to_tensor(volumes: &[&Volume]) -> Result<Tensor> {
    let Some(first) = volumes.first() else {
        bail!(Shape, "empty volume batch");
    };
    let [d, h, w] = first.dims();
    let mut data = Vec::with_capacity(volumes.len() * d * h * w);
    for v in volumes {
        if v.dims() != first.dims() {
            bail!(Shape, "volume batch extents differ: {:?} vs {:?}", v.dims(), first.dims());
        }
        data.extend(v.voxels().iter().map(|&x| x as f64));
    }
    Tensor::new(&[volumes.len(), 1, d, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize, d: usize, h: usize, w: usize) -> Tensor {
        let len = n * d * h * w;
        Tensor::new(&[n, 1, d, h, w], (0..len).map(|i| ((i * 2654435761usize) % 997) as f64 / 997.0).collect()).unwrap()
    }

    #[test]
    fn desk_shapes_compose() {
        let net = IdpNet::new(IdpConfig::default()).unwrap();
        let mut g = Graph::new();
        let x = g.input(input(1, 16, 32, 32));
        let vars = net.forward(&mut g, x).unwrap();
        assert_eq!(g.value(vars.feature).shape(), &[1, 64, 4, 2, 2]);
        assert_eq!(g.value(vars.interval).shape(), &[1, 2]);
        let dec = net.decoder_forward(&mut g, vars.feature).unwrap();
        assert_eq!(g.value(dec).shape(), &[1, 32, 4, 16, 16]);
    }

    #[test]
    fn head_starts_at_the_prior_interval() {
        let net = IdpNet::new(IdpConfig::uniform(4)).unwrap();
        let (iv, _) = net.predict(input(2, 16, 16, 16)).unwrap();
        for i in iv {
            assert!((i.start - 4.0).abs() < 1e-9 && (i.end - 12.0).abs() < 1e-9, "{i:?}");
        }
        assert_eq!(interval_from_head(0.25, 0.5, 352), Interval::new(88.0, 264.0));
        let z = interval_from_head(0.0, 0.0, 352);
        assert_eq!(crate::losses::interval_iou(&z, &z), 0.0);
    }

    #[test]
    fn indivisible_inputs_are_shape_errors() {
        let net = IdpNet::new(IdpConfig::uniform(2)).unwrap();
        assert!(matches!(net.predict(input(1, 18, 16, 16)), Err(crate::Error::Shape(_))));
        assert!(matches!(net.predict(input(1, 16, 24, 16)), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn zero_decoder_weights_give_the_rectified_bias() {
        let mut net = IdpNet::new(IdpConfig::uniform(3)).unwrap();
        let ids: Vec<_> = net.params().iter().filter(|(_, n, _)| n.starts_with("decoder")).map(|(id, n, _)| (id, n.ends_with("bias"))).collect();
        for (id, is_bias) in ids {
            let v = if is_bias { 0.125 } else { 0.0 };
            net.params_mut().get_mut(id).data_mut().fill(v);
        }
        let mut g = Graph::new();
        let x = g.input(input(1, 8, 16, 16));
        let f = net.encoder_forward(&mut g, x).unwrap();
        let y = net.decoder_forward(&mut g, f).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.125));
    }
}
