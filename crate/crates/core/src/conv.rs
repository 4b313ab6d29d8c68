//! 3D convolution and transposed convolution via im2col + GEMM.
//!
//! Weight layouts follow the usual conventions: a convolution holds
//! `[C_out, C_in, kd, kh, kw]`, a transposed convolution `[C_in, C_out, kd, kh, kw]`.
//! 2D layers are 3D layers whose depth kernel, stride and padding are `1, 1, 0`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub const fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { kernel, stride, pad }
    }

    /// `k×k` in-plane kernel, "same"-style padding for odd `k`.
    pub const fn planar(k: usize, stride: usize) -> Self {
        Self::new([1, k, k], [1, stride, stride], [0, k / 2, k / 2])
    }

    pub const fn pointwise(stride: [usize; 3]) -> Self {
        Self::new([1, 1, 1], stride, [0, 0, 0])
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_identity_gather(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Output extents of a convolution over `input` extents.
    pub fn conv_out(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if self.stride[a] == 0 || padded < self.kernel[a] {
                bail!(Shape, "kernel {:?} does not fit input {:?} (geometry {:?})", self.kernel, input, self);
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Output extents of a transposed convolution over `input` extents.
    pub fn transpose_out(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a].max(1) - 1) * self.stride[a] + self.kernel[a];
            if input[a] == 0 || full <= 2 * self.pad[a] {
                bail!(Shape, "transposed convolution {:?} collapses input {:?}", self, input);
            }
            out[a] = full - 2 * self.pad[a];
        }
        Ok(out)
    }
}

/// Unfold one image `[c, d, h, w]` into columns `[c·kd·kh·kw, od·oh·ow]`.
fn im2col(x: &[f64], c: usize, dims: [usize; 3], g: &ConvGeom, odims: [usize; 3], cols: &mut [f64]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = odims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            dst[idx..idx + oh * ow].fill(0.0);
                            idx += oh * ow;
                            continue;
                        }
                        let plane = &xc[iz as usize * h * w..(iz as usize + 1) * h * w];
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                dst[idx..idx + ow].fill(0.0);
                                idx += ow;
                                continue;
                            }
                            let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                dst[idx] = if ix < 0 || ix >= w as isize { 0.0 } else { line[ix as usize] };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image.
fn col2im(cols: &[f64], c: usize, dims: [usize; 3], g: &ConvGeom, odims: [usize; 3], x: &mut [f64]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = odims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            idx += oh * ow;
                            continue;
                        }
                        let base = iz as usize * h * w;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                idx += ow;
                                continue;
                            }
                            let line = base + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    xc[line + ix as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Row-major `C[m×n] = A·B + beta·C` where `A` is `m×k` (or its transpose is stored)
/// and `B` is `k×n` (or transposed).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the addressed extents (checked above in debug builds,
    // guaranteed by every caller's shape arithmetic).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn spatial(dims: [usize; 5]) -> [usize; 3] {
    [dims[2], dims[3], dims[4]]
}

fn check_weight(w: &Tensor, g: &ConvGeom) -> Result<[usize; 5]> {
    let wd = w.dims5()?;
    if [wd[2], wd[3], wd[4]] != g.kernel {
        bail!(Shape, "weight kernel {:?} disagrees with geometry {:?}", &wd[2..], g.kernel);
    }
    Ok(wd)
}

fn check_bias(b: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.len() != channels {
            bail!(Shape, "bias has {} entries, expected {}", b.len(), channels);
        }
    }
    Ok(())
}

pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeom) -> Result<Tensor> {
    let [n, ci, ..] = x.dims5()?;
    let [co, wci, ..] = check_weight(w, g)?;
    if wci != ci {
        bail!(Shape, "convolution expects {} input channels, got {}", wci, ci);
    }
    check_bias(b, co)?;
    let idims = spatial(x.dims5()?);
    let odims = g.conv_out(idims)?;
    let (ip, op) = (idims.iter().product::<usize>(), odims.iter().product::<usize>());
    let k = ci * g.kernel_volume();
    let mut out = Tensor::zeros(&[n, co, odims[0], odims[1], odims[2]]);
    let mut cols = if g.is_identity_gather() { Vec::new() } else { vec![0.0; k * op] };
    for i in 0..n {
        let xi = &x.data()[i * ci * ip..(i + 1) * ci * ip];
        let src: &[f64] = if g.is_identity_gather() {
            xi
        } else {
            im2col(xi, ci, idims, g, odims, &mut cols);
            &cols
        };
        let oi = &mut out.data_mut()[i * co * op..(i + 1) * co * op];
        gemm(co, k, op, w.data(), false, src, false, 0.0, oi);
        if let Some(b) = b {
            for (c, bias) in b.data().iter().enumerate() {
                oi[c * op..(c + 1) * op].iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Ok(out)
}

/// Gradients `(dx, dw, db)` of a convolution given the upstream gradient.
pub fn conv3d_backward(x: &Tensor, w: &Tensor, g: &ConvGeom, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, ci, ..] = x.dims5()?;
    let [co, ..] = check_weight(w, g)?;
    let idims = spatial(x.dims5()?);
    let odims = g.conv_out(idims)?;
    if dout.shape() != [n, co, odims[0], odims[1], odims[2]] {
        bail!(Shape, "upstream gradient shape {:?} does not match convolution output", dout.shape());
    }
    let (ip, op) = (idims.iter().product::<usize>(), odims.iter().product::<usize>());
    let k = ci * g.kernel_volume();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let identity = g.is_identity_gather();
    let mut cols = vec![0.0; if identity { 0 } else { k * op }];
    let mut dcols = vec![0.0; if identity { 0 } else { k * op }];
    for i in 0..n {
        let xi = &x.data()[i * ci * ip..(i + 1) * ci * ip];
        let di = &dout.data()[i * co * op..(i + 1) * co * op];
        for c in 0..co {
            db.data_mut()[c] += di[c * op..(c + 1) * op].iter().sum::<f64>();
        }
        let src: &[f64] = if identity {
            xi
        } else {
            im2col(xi, ci, idims, g, odims, &mut cols);
            &cols
        };
        gemm(co, op, k, di, false, src, true, 1.0, dw.data_mut());
        let dxi = &mut dx.data_mut()[i * ci * ip..(i + 1) * ci * ip];
        if identity {
            gemm(k, co, op, w.data(), true, di, false, 0.0, dxi);
        } else {
            gemm(k, co, op, w.data(), true, di, false, 0.0, &mut dcols);
            col2im(&dcols, ci, idims, g, odims, dxi);
        }
    }
    Ok((dx, dw, db))
}

pub fn conv_transpose3d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeom) -> Result<Tensor> {
    let [n, ci, ..] = x.dims5()?;
    let [wci, co, ..] = check_weight(w, g)?;
    if wci != ci {
        bail!(Shape, "transposed convolution expects {} input channels, got {}", wci, ci);
    }
    check_bias(b, co)?;
    let idims = spatial(x.dims5()?);
    let odims = g.transpose_out(idims)?;
    // The input grid of a transposed convolution is the output grid of its adjoint convolution.
    if g.conv_out(odims)? != idims {
        bail!(Shape, "transposed convolution geometry {:?} is not invertible for {:?}", g, idims);
    }
    let (ip, op) = (idims.iter().product::<usize>(), odims.iter().product::<usize>());
    let kc = co * g.kernel_volume();
    let mut out = Tensor::zeros(&[n, co, odims[0], odims[1], odims[2]]);
    let mut cols = vec![0.0; kc * ip];
    for i in 0..n {
        let xi = &x.data()[i * ci * ip..(i + 1) * ci * ip];
        gemm(kc, ci, ip, w.data(), true, xi, false, 0.0, &mut cols);
        let oi = &mut out.data_mut()[i * co * op..(i + 1) * co * op];
        col2im(&cols, co, odims, g, idims, oi);
        if let Some(b) = b {
            for (c, bias) in b.data().iter().enumerate() {
                oi[c * op..(c + 1) * op].iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Ok(out)
}

pub fn conv_transpose3d_backward(x: &Tensor, w: &Tensor, g: &ConvGeom, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, ci, ..] = x.dims5()?;
    let [_, co, ..] = check_weight(w, g)?;
    let idims = spatial(x.dims5()?);
    let odims = g.transpose_out(idims)?;
    if dout.shape() != [n, co, odims[0], odims[1], odims[2]] {
        bail!(Shape, "upstream gradient shape {:?} does not match transposed convolution output", dout.shape());
    }
    let (ip, op) = (idims.iter().product::<usize>(), odims.iter().product::<usize>());
    let kc = co * g.kernel_volume();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut cols = vec![0.0; kc * ip];
    for i in 0..n {
        let di = &dout.data()[i * co * op..(i + 1) * co * op];
        for c in 0..co {
            db.data_mut()[c] += di[c * op..(c + 1) * op].iter().sum::<f64>();
        }
        im2col(di, co, odims, g, idims, &mut cols);
        let xi = &x.data()[i * ci * ip..(i + 1) * ci * ip];
        gemm(ci, kc, ip, w.data(), false, &cols, false, 0.0, &mut dx.data_mut()[i * ci * ip..(i + 1) * ci * ip]);
        gemm(ci, ip, kc, xi, false, &cols, true, 1.0, dw.data_mut());
    }
    Ok((dx, dw, db))
}
