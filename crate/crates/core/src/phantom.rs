//! Synthetic CBCT phantoms with ground-truth implant annotations.
//!
//! Slice index 0 is the occlusal end of the scan. Teeth are vertical capsules
//! placed along a jaw arc: a crown above the alveolar crest and a tapering root
//! below it, textured with band-limited noise whose correlation length spans
//! several slices. One interior tooth is missing; the implant interval runs from
//! the crest at the gap down to just above the shorter neighbouring root, and an
//! optional nerve canal passes below it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::math;
use crate::volume::{Condition, ImplantAnnotation, Interval, PatientRecord, Volume, MIN_EXTENT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub spacing_mm: [f64; 3],
    /// Tooth sites along the arc, including the missing one.
    pub teeth: usize,
    pub canal: bool,
    /// Amplitude of the per-voxel white noise.
    pub noise: f64,
    /// Amplitude of the band-limited tooth texture.
    pub texture_amplitude: f64,
    /// Gaussian correlation width of the texture along depth, in slices.
    pub texture_period_slices: f64,
    /// In-plane correlation length of the texture, in pixels.
    pub texture_scale_px: f64,
    /// Amplitude of the trabecular bone texture.
    pub bone_texture_amplitude: f64,
    /// Amplitude of the soft-tissue texture around the jaw.
    pub soft_texture_amplitude: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PhantomConfig {
    /// 96×64×64 at 0.25 mm per voxel.
    pub fn desk() -> Self {
        Self {
            depth: 96,
            height: 64,
            width: 64,
            spacing_mm: [0.25; 3],
            teeth: 7,
            canal: true,
            noise: 0.01,
            texture_amplitude: 0.4,
            texture_period_slices: 18.0,
            texture_scale_px: 2.0,
            bone_texture_amplitude: 0.4,
            soft_texture_amplitude: 0.5,
        }
    }

    /// Full scan size of the clinical data (432×776×776). Gigabyte-scale; never used by tests.
    pub fn full_scale() -> Self {
        Self { depth: 432, height: 776, width: 776, texture_period_slices: 81.0, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("depth", self.depth), ("height", self.height), ("width", self.width)] {
            if n < MIN_EXTENT {
                bail!(Config, "phantom {} {} is below the minimum {}", name, n, MIN_EXTENT);
            }
        }
        if self.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            bail!(Config, "phantom spacing must be positive, got {:?}", self.spacing_mm);
        }
        if self.teeth < 3 {
            bail!(Config, "need at least 3 tooth sites for an interior gap, got {}", self.teeth);
        }
        if !(self.noise >= 0.0 && self.texture_amplitude >= 0.0 && self.bone_texture_amplitude >= 0.0 && self.soft_texture_amplitude >= 0.0 && self.texture_period_slices > 0.0 && self.texture_scale_px > 0.0) {
            bail!(Config, "noise/texture parameters must be non-negative with a positive period");
        }
        Ok(())
    }
}

/// Region masks the generator used, for checking its own placement.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomMasks {
    /// Voxels inside any tooth.
    pub tooth: Vec<bool>,
    /// Voxels of the missing-tooth site over the implant interval's slices.
    pub gap: Vec<bool>,
}

/// Texture field that is stationary along depth: white noise on a coarse in-plane lattice,
/// smoothed along depth with a Gaussian of width `sigma` slices, then interpolated in-plane.
/// Correlation between slices therefore decays monotonically with their distance.
struct DepthNoise {
    depth: usize,
    lattice: [usize; 2],
    scale: f64,
    /// `[depth][row][col]` lattice values with standard deviation about 0.5.
    values: Vec<f64>,
}

impl DepthNoise {
    fn new(rng: &mut ChaCha8Rng, dims: [usize; 3], sigma: f64, scale: f64) -> Self {
        let lattice = [(dims[1] as f64 / scale) as usize + 3, (dims[2] as f64 / scale) as usize + 3];
        let radius = math::floor(3.0 * sigma) as usize + 1;
        let kernel: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let x = i as f64 - radius as f64;
                math::exp(-x * x / (2.0 * sigma * sigma))
            })
            .collect();
        let norm = 0.5 / math::sqrt(kernel.iter().map(|k| k * k).sum::<f64>());
        let columns = lattice[0] * lattice[1];
        let padded = dims[0] + 2 * radius;
        let mut values = vec![0.0; dims[0] * columns];
        let mut white = vec![0.0; padded];
        for col in 0..columns {
            white.iter_mut().for_each(|v| *v = std_normal(rng));
            for z in 0..dims[0] {
                let acc: f64 = kernel.iter().zip(&white[z..z + kernel.len()]).map(|(k, w)| k * w).sum();
                values[z * columns + col] = acc * norm;
            }
        }
        Self { depth: dims[0], lattice, scale, values }
    }

    fn sample(&self, p: [f64; 3]) -> f64 {
        let z = (math::floor(p[0]) as usize).min(self.depth - 1);
        let mut base = [0usize; 2];
        let mut frac = [0.0; 2];
        for a in 0..2 {
            let u = (p[a + 1] / self.scale).max(0.0);
            base[a] = (math::floor(u) as usize).min(self.lattice[a] - 2);
            let t = u - base[a] as f64;
            frac[a] = t * t * (3.0 - 2.0 * t);
        }
        let plane = &self.values[z * self.lattice[0] * self.lattice[1]..];
        let at = |i: usize, j: usize| plane[(base[0] + i) * self.lattice[1] + base[1] + j];
        let v = (1.0 - frac[0]) * ((1.0 - frac[1]) * at(0, 0) + frac[1] * at(0, 1))
            + frac[0] * ((1.0 - frac[1]) * at(1, 0) + frac[1] * at(1, 1));
        v.clamp(-1.0, 1.0)
    }
}

/// Standard normal draw (Box-Muller).
fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(core::f64::consts::TAU * u2)
}

struct Tooth {
    row: f64,
    col: f64,
    crown_radius: f64,
    root_end: f64,
}

const BACKGROUND: f64 = 0.05;
const BONE: f64 = 0.38;
const CROWN: f64 = 0.85;
const ROOT: f64 = 0.72;
const PULP: f64 = 0.3;
const CANAL: f64 = 0.15;

pub fn generate_phantom(config: &PhantomConfig, seed: u64) -> Result<PatientRecord> {
    generate_phantom_with_masks(config, seed).map(|(r, _)| r)
}

pub fn generate_phantom_with_masks(config: &PhantomConfig, seed: u64) -> Result<(PatientRecord, PhantomMasks)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_n, h_n, w_n) = (config.depth, config.height, config.width);
    let (df, hf, wf) = (d_n as f64, h_n as f64, w_n as f64);
    let side = hf.min(wf);

    // Arc geometry in the axial plane.
    let center = (hf * (0.86 + rng.random_range(-0.03..=0.03)), wf * (0.5 + rng.random_range(-0.03..=0.03)));
    let radius = side * rng.random_range(0.42..=0.47);
    let half_span = rng.random_range(60.0f64..=68.0).to_radians();
    let n = config.teeth;
    let arc_step = radius * 2.0 * half_span / (n - 1) as f64;

    // Depth landmarks.
    let crown_top = df * rng.random_range(0.03..=0.08);
    let crest = crown_top + df * rng.random_range(0.14..=0.20);
    let cap = (df * 0.03).max(0.5);

    let angles: Vec<f64> = (0..n)
        .map(|i| -half_span + 2.0 * half_span * i as f64 / (n - 1) as f64 + rng.random_range(-0.02..=0.02))
        .collect();
    let teeth: Vec<Tooth> = angles
        .iter()
        .map(|&a| Tooth {
            row: center.0 - radius * math::cos(a),
            col: center.1 + radius * math::sin(a),
            crown_radius: arc_step * rng.random_range(0.36..=0.42),
            root_end: crest + df * rng.random_range(0.32..=0.44),
        })
        .collect();
    let gap = rng.random_range(1..n - 1);
    let gap_crest = crest + df * rng.random_range(0.0..=0.02);

    let start = math::round(gap_crest);
    let end = math::floor(teeth[gap - 1].root_end.min(teeth[gap + 1].root_end) - df * 0.02);
    if !(start >= 0.0 && start < end && end <= df) {
        bail!(Config, "degenerate gap placement: interval ({}, {}) in depth {}", start, end, d_n);
    }
    let canal_slice = if config.canal {
        let c = math::round(end + df * rng.random_range(0.08..=0.13));
        if c >= df - 1.0 {
            bail!(Config, "degenerate gap placement: nerve canal at slice {} does not fit depth {}", c, d_n);
        }
        Some(c)
    } else {
        None
    };
    let position = (teeth[gap].row, teeth[gap].col);
    if !(position.0 >= 0.0 && position.0 < hf && position.1 >= 0.0 && position.1 < wf) {
        bail!(Config, "degenerate gap placement: position {:?} outside {}x{}", position, h_n, w_n);
    }
    let arc_fraction = (angles[gap] + half_span) / (2.0 * half_span);
    let condition = Condition::from_fraction(arc_fraction);
    let crown_slice = (math::round((crown_top + crest) / 2.0) as usize).min(d_n - 1);

    let (tp, ts) = (config.texture_period_slices, config.texture_scale_px);
    let texture = DepthNoise::new(&mut rng, [d_n, h_n, w_n], tp, ts);
    let trabecular = DepthNoise::new(&mut rng, [d_n, h_n, w_n], tp, ts);

    // Nearest tooth site per axial pixel (sites never overlap).
    let hw = h_n * w_n;
    let mut nearest = vec![(0usize, f64::INFINITY); hw];
    for r in 0..h_n {
        for c in 0..w_n {
            let (rf, cf) = (r as f64 + 0.5, c as f64 + 0.5);
            for (i, t) in teeth.iter().enumerate() {
                let rho = math::sqrt((rf - t.row) * (rf - t.row) + (cf - t.col) * (cf - t.col));
                if rho < nearest[r * w_n + c].1 {
                    nearest[r * w_n + c] = (i, rho);
                }
            }
        }
    }
    let arc_geom: Vec<(f64, f64)> = (0..hw)
        .map(|p| {
            let (rf, cf) = ((p / w_n) as f64 + 0.5, (p % w_n) as f64 + 0.5);
            let (dr, dc) = (center.0 - rf, cf - center.1);
            (math::sqrt(dr * dr + dc * dc), libm::atan2(dc, dr))
        })
        .collect();
    let bone_half_width = side * 0.12;
    let canal_radius = (side * 0.035, (df * 0.025).max(0.5));

    let tooth_radius = |t: &Tooth, z: f64| -> f64 {
        if z < crown_top || z >= t.root_end {
            0.0
        } else if z < crown_top + cap {
            let u = (crown_top + cap - z) / cap;
            t.crown_radius * math::sqrt((1.0 - u * u).max(0.0))
        } else if z < crest {
            t.crown_radius
        } else {
            let u = (z - crest) / (t.root_end - crest);
            t.crown_radius * (0.8 - 0.45 * u)
        }
    };

    let mut voxels = vec![0f32; d_n * hw];
    let mut tooth_mask = vec![false; d_n * hw];
    let mut gap_mask = vec![false; d_n * hw];
    let gap_tooth = &teeth[gap];
    for z in 0..d_n {
        let zf = z as f64 + 0.5;
        for p in 0..hw {
            let (r, c) = (p / w_n, p % w_n);
            let pos = [zf, r as f64 + 0.5, c as f64 + 0.5];
            let (rho_arc, theta) = arc_geom[p];
            let mut v = BACKGROUND + config.soft_texture_amplitude * 0.5 * (1.0 + trabecular.sample(pos));
            let in_arc = theta.abs() <= half_span + 0.25;
            let bone_band = (rho_arc - radius).abs();
            if in_arc && zf >= crest && bone_band < bone_half_width {
                let fade = ((bone_half_width - bone_band) / 1.5).min(1.0);
                v = BACKGROUND + fade * (BONE - BACKGROUND + config.bone_texture_amplitude * trabecular.sample(pos));
            }
            if let Some(cs) = canal_slice {
                let (rr, rd) = canal_radius;
                let e = (bone_band / rr) * (bone_band / rr) + ((zf - cs - 0.5) / rd) * ((zf - cs - 0.5) / rd);
                if in_arc && e < 1.0 {
                    v = CANAL;
                }
            }
            let (ti, rho) = nearest[p];
            if ti != gap {
                let t = &teeth[ti];
                let rad = tooth_radius(t, zf);
                let a = (rad - rho + 0.5).clamp(0.0, 1.0);
                if a > 0.0 {
                    let tissue = if zf < crest { CROWN } else { ROOT };
                    let mut tv = tissue + config.texture_amplitude * texture.sample(pos);
                    if zf > crown_top + 0.4 * (crest - crown_top) && rho < 0.3 * rad {
                        tv = PULP + 0.5 * config.texture_amplitude * texture.sample(pos);
                    }
                    v = a * tv + (1.0 - a) * v;
                    if rho < rad {
                        tooth_mask[z * hw + p] = true;
                    }
                }
            } else {
                let gr = (gap_tooth.row - pos[1]) * (gap_tooth.row - pos[1]) + (gap_tooth.col - pos[2]) * (gap_tooth.col - pos[2]);
                if zf >= start && zf < end && math::sqrt(gr) < gap_tooth.crown_radius * 0.8 {
                    gap_mask[z * hw + p] = true;
                }
            }
            if config.noise > 0.0 {
                v += rng.random_range(-config.noise..=config.noise);
            }
            voxels[z * hw + p] = v.clamp(0.0, 1.0) as f32;
        }
    }

    let volume = Volume::new([d_n, h_n, w_n], config.spacing_mm, voxels)?;
    let annotation = ImplantAnnotation {
        axial_position: position,
        interval: Interval::new(start, end),
        condition,
        canal_slice,
    };
    let record = PatientRecord::new(format!("phantom-{seed:05}"), volume, annotation, crown_slice)?;
    Ok((record, PhantomMasks { tooth: tooth_mask, gap: gap_mask }))
}
