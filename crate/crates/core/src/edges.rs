//! Edge operators on single `H × W` maps.
//!
//! [`canny`] is the classical detector (blur, Sobel, non-maximum suppression,
//! hysteresis) used for analysis. [`SoftEdge`] is its smooth analogue used inside
//! the texture loss: blur → Sobel → gradient magnitude → `tanh` squashing to
//! `[0, 1)`, with an exact adjoint. All filters replicate the border, so a
//! constant map has zero response everywhere.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::math;

const SOBEL_SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
const SOBEL_DIFF: [f64; 3] = [-1.0, 0.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Rows,
    Cols,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = math::floor(3.0 * sigma).max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// `y[i] = Σ_k f[k] · x[clamp(i + k - r)]` along one axis.
fn filter(x: &[f64], h: usize, w: usize, f: &[f64], axis: Axis) -> Vec<f64> {
    let r = (f.len() / 2) as isize;
    let mut y = vec![0.0; x.len()];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, fk) in f.iter().enumerate() {
                let o = k as isize - r;
                let (ii, jj) = match axis {
                    Axis::Rows => ((i as isize + o).clamp(0, h as isize - 1) as usize, j),
                    Axis::Cols => (i, (j as isize + o).clamp(0, w as isize - 1) as usize),
                };
                acc += fk * x[ii * w + jj];
            }
            y[i * w + j] = acc;
        }
    }
    y
}

/// Adjoint of [`filter`].
fn filter_adjoint(dy: &[f64], h: usize, w: usize, f: &[f64], axis: Axis) -> Vec<f64> {
    let r = (f.len() / 2) as isize;
    let mut dx = vec![0.0; dy.len()];
    for i in 0..h {
        for j in 0..w {
            let g = dy[i * w + j];
            if g == 0.0 {
                continue;
            }
            for (k, fk) in f.iter().enumerate() {
                let o = k as isize - r;
                let (ii, jj) = match axis {
                    Axis::Rows => ((i as isize + o).clamp(0, h as isize - 1) as usize, j),
                    Axis::Cols => (i, (j as isize + o).clamp(0, w as isize - 1) as usize),
                };
                dx[ii * w + jj] += fk * g;
            }
        }
    }
    dx
}

pub fn gaussian_blur(x: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    filter(&filter(x, h, w, &k, Axis::Cols), h, w, &k, Axis::Rows)
}

/// Horizontal and vertical Sobel responses.
pub fn sobel(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let gx = filter(&filter(x, h, w, &SOBEL_DIFF, Axis::Cols), h, w, &SOBEL_SMOOTH, Axis::Rows);
    let gy = filter(&filter(x, h, w, &SOBEL_DIFF, Axis::Rows), h, w, &SOBEL_SMOOTH, Axis::Cols);
    (gx, gy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    /// Hysteresis thresholds on the Sobel magnitude.
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { sigma: 1.0, low: 0.25, high: 0.5 }
    }
}

/// Binary (`0`/`1`) Canny edge map of a row-major `h × w` image.
pub fn canny(img: &[f64], h: usize, w: usize, p: &CannyParams) -> Result<Vec<u8>> {
    if img.len() != h * w || h == 0 || w == 0 {
        bail!(Shape, "image buffer of {} values does not match {}x{}", img.len(), h, w);
    }
    if !(p.sigma > 0.0 && 0.0 <= p.low && p.low <= p.high) {
        bail!(Config, "invalid Canny parameters {:?}", p);
    }
    let blurred = gaussian_blur(img, h, w, p.sigma);
    let (gx, gy) = sobel(&blurred, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| math::sqrt(a * a + b * b)).collect();

    // Non-maximum suppression along the quantized gradient direction.
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            mag[i as usize * w + j as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let m = mag[i * w + j];
            if m == 0.0 {
                continue;
            }
            let angle = libm::atan2(gy[i * w + j], gx[i * w + j]).to_degrees();
            let a = if angle < 0.0 { angle + 180.0 } else { angle };
            let (di, dj) = if !(22.5..157.5).contains(&a) {
                (0, 1)
            } else if a < 67.5 {
                (1, 1)
            } else if a < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (ii, jj) = (i as isize, j as isize);
            if m >= at(ii + di, jj + dj) && m >= at(ii - di, jj - dj) {
                thin[i * w + j] = m;
            }
        }
    }

    // Hysteresis: keep weak pixels 8-connected to a strong one.
    let mut edges = vec![0u8; h * w];
    let mut stack: Vec<usize> = Vec::new();
    for (k, &m) in thin.iter().enumerate() {
        if m >= p.high && m > 0.0 {
            edges[k] = 1;
            stack.push(k);
        }
    }
    while let Some(k) = stack.pop() {
        let (i, j) = ((k / w) as isize, (k % w) as isize);
        for di in -1..=1 {
            for dj in -1..=1 {
                let (ni, nj) = (i + di, j + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let nk = ni as usize * w + nj as usize;
                if edges[nk] == 0 && thin[nk] >= p.low && thin[nk] > 0.0 {
                    edges[nk] = 1;
                    stack.push(nk);
                }
            }
        }
    }
    Ok(edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftEdgeParams {
    pub sigma: f64,
    /// Magnitude scale of the `tanh` squashing.
    pub scale: f64,
    /// Smoothing of the gradient magnitude at zero.
    pub eps: f64,
}

impl Default for SoftEdgeParams {
    fn default() -> Self {
        Self { sigma: 1.0, scale: 1.0, eps: 1e-3 }
    }
}

/// Forward intermediates of the smooth edge pipeline on one map.
#[derive(Clone, Debug)]
pub struct SoftEdge {
    h: usize,
    w: usize,
    kernel: Vec<f64>,
    params: SoftEdgeParams,
    gx: Vec<f64>,
    gy: Vec<f64>,
    mag: Vec<f64>,
    out: Vec<f64>,
}

impl SoftEdge {
    pub fn forward(x: &[f64], h: usize, w: usize, params: SoftEdgeParams) -> Self {
        debug_assert_eq!(x.len(), h * w);
        let kernel = gaussian_kernel(params.sigma);
        let blurred = filter(&filter(x, h, w, &kernel, Axis::Cols), h, w, &kernel, Axis::Rows);
        let (gx, gy) = sobel(&blurred, h, w);
        let e2 = params.eps * params.eps;
        let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| math::sqrt(a * a + b * b + e2) - params.eps).collect();
        let out = mag.iter().map(|m| math::tanh(m / params.scale)).collect();
        Self { h, w, kernel, params, gx, gy, mag, out }
    }

    pub fn output(&self) -> &[f64] {
        &self.out
    }

    /// Gradient with respect to the input map given the gradient of the output.
    pub fn backward(&self, dout: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let n = h * w;
        let mut dgx = vec![0.0; n];
        let mut dgy = vec![0.0; n];
        for k in 0..n {
            let dmag = dout[k] * (1.0 - self.out[k] * self.out[k]) / self.params.scale;
            let denom = self.mag[k] + self.params.eps;
            dgx[k] = dmag * self.gx[k] / denom;
            dgy[k] = dmag * self.gy[k] / denom;
        }
        let bx = filter_adjoint(&filter_adjoint(&dgx, h, w, &SOBEL_SMOOTH, Axis::Rows), h, w, &SOBEL_DIFF, Axis::Cols);
        let by = filter_adjoint(&filter_adjoint(&dgy, h, w, &SOBEL_SMOOTH, Axis::Cols), h, w, &SOBEL_DIFF, Axis::Rows);
        let db: Vec<f64> = bx.iter().zip(&by).map(|(a, b)| a + b).collect();
        filter_adjoint(&filter_adjoint(&db, h, w, &self.kernel, Axis::Rows), h, w, &self.kernel, Axis::Cols)
    }
}
