//! Seeded training-time augmentation for both stages.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::math;
use crate::schedule::AugmentFlags;
use crate::volume::{Condition, Interval, Volume};

/// Per-sample seed derived from the run seed, the epoch and the sample index.
pub fn sample_seed(global: u64, epoch: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a simple combination; stable across platforms.
    let mut z = global
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch.wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add(index.wrapping_mul(0x1656_67B1_9E37_79F9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A detector training sample: one 2D slice with its implant position and condition.
#[derive(Clone, Debug, PartialEq)]
pub struct IrdSample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub position: (f64, f64),
    pub condition: Condition,
}

impl IrdSample {
    pub fn new(height: usize, width: usize, image: Vec<f64>, position: (f64, f64), condition: Condition) -> Result<Self> {
        if image.len() != height * width || height == 0 || width == 0 {
            bail!(Shape, "image of {} values for {}×{}", image.len(), height, width);
        }
        let (r, c) = position;
        if !(r >= 0.0 && r <= (height - 1) as f64 && c >= 0.0 && c <= (width - 1) as f64) {
            bail!(OutOfRange, "position ({}, {}) outside {}×{}", r, c, height, width);
        }
        Ok(Self { height, width, image, position, condition })
    }

    /// Resample to `side × side`, mapping the position with the same pixel-center scaling.
    pub fn resized(&self, side: usize) -> IrdSample {
        if side == self.height && side == self.width {
            return self.clone();
        }
        let image = resize_bilinear(&self.image, self.height, self.width, side, side);
        let sr = (side - 1) as f64 / (self.height - 1).max(1) as f64;
        let sc = (side - 1) as f64 / (self.width - 1).max(1) as f64;
        IrdSample {
            height: side,
            width: side,
            image,
            position: (self.position.0 * sr, self.position.1 * sc),
            condition: self.condition,
        }
    }
}

/// Bilinear resize with aligned corner pixels and edge replication.
pub fn resize_bilinear(img: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let sr = (h - 1) as f64 / (oh - 1).max(1) as f64;
    let sc = (w - 1) as f64 / (ow - 1).max(1) as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            out.push(sample_bilinear(img, h, w, r as f64 * sr, c as f64 * sc));
        }
    }
    out
}

fn sample_bilinear(img: &[f64], h: usize, w: usize, r: f64, c: f64) -> f64 {
    let r = r.clamp(0.0, (h - 1) as f64);
    let c = c.clamp(0.0, (w - 1) as f64);
    let r0 = math::floor(r) as usize;
    let c0 = math::floor(c) as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let top = img[r0 * w + c0] * (1.0 - fc) + img[r0 * w + c1] * fc;
    let bottom = img[r1 * w + c0] * (1.0 - fc) + img[r1 * w + c1] * fc;
    top * (1.0 - fr) + bottom * fr
}

/// Concrete detector augmentation: crop window `(origin, crop_factor · size)` resized back to full
/// size, then zoom by `scale` about the image center, then an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IrdAugment {
    pub crop_factor: f64,
    pub origin: (f64, f64),
    pub scale: f64,
    pub flip: bool,
}

impl IrdAugment {
    pub const IDENTITY: IrdAugment = IrdAugment { crop_factor: 1.0, origin: (0.0, 0.0), scale: 1.0, flip: false };

    /// Draw parameters; the crop origin is restricted so the position stays inside the output.
    pub fn sample(sample: &IrdSample, flags: AugmentFlags, rng: &mut impl Rng) -> IrdAugment {
        let crop_factor = if flags.crop { rng.random_range(0.7..=1.0) } else { 1.0 };
        let mut scale = if flags.scale { rng.random_range(0.8..=1.2) } else { 1.0 };
        let flip = flags.flip && rng.random_bool(0.5);
        let u = (rng.random::<f64>(), rng.random::<f64>());
        let axes = |scale: f64| {
            let r = origin_range(sample.position.0, sample.height, crop_factor, scale)?;
            let c = origin_range(sample.position.1, sample.width, crop_factor, scale)?;
            Some((r, c))
        };
        let ((rlo, rhi), (clo, chi)) = match axes(scale) {
            Some(v) => v,
            None => {
                // Zooming in would push the position off the image; keep the crop only.
                scale = 1.0;
                axes(scale).expect("an unscaled crop can always contain the position")
            }
        };
        let origin = if flags.crop { (rlo + u.0 * (rhi - rlo), clo + u.1 * (chi - clo)) } else { (0.0, 0.0) };
        IrdAugment { crop_factor, origin, scale, flip }
    }

    fn maps_forward(&self, x: f64, origin: f64, n: usize) -> f64 {
        let ctr = (n - 1) as f64 / 2.0;
        ctr + self.scale * ((x - origin) / self.crop_factor - ctr)
    }

    fn maps_back(&self, y: f64, origin: f64, n: usize) -> f64 {
        let ctr = (n - 1) as f64 / 2.0;
        origin + self.crop_factor * (ctr + (y - ctr) / self.scale)
    }

    pub fn apply(&self, s: &IrdSample) -> IrdSample {
        let (h, w) = (s.height, s.width);
        let geometric = *self != IrdAugment { flip: self.flip, ..IrdAugment::IDENTITY };
        let (mut image, mut position) = if geometric {
            let mut img = Vec::with_capacity(h * w);
            for r in 0..h {
                let sr = self.maps_back(r as f64, self.origin.0, h);
                for c in 0..w {
                    img.push(sample_bilinear(&s.image, h, w, sr, self.maps_back(c as f64, self.origin.1, w)));
                }
            }
            let p = (self.maps_forward(s.position.0, self.origin.0, h), self.maps_forward(s.position.1, self.origin.1, w));
            // Guard against rounding at the exact image border.
            (img, (p.0.clamp(0.0, (h - 1) as f64), p.1.clamp(0.0, (w - 1) as f64)))
        } else {
            (s.image.clone(), s.position)
        };
        let mut condition = s.condition;
        if self.flip {
            image.chunks_mut(w).for_each(<[f64]>::reverse);
            position.1 = (w - 1) as f64 - position.1;
            condition = condition.mirrored();
        }
        IrdSample { height: h, width: w, image, position, condition }
    }
}

/// Feasible crop-origin interval along one axis, or `None` if empty.
fn origin_range(x: f64, n: usize, crop_factor: f64, scale: f64) -> Option<(f64, f64)> {
    let ctr = (n - 1) as f64 / 2.0;
    let last = (n - 1) as f64;
    // Pre-zoom coordinates that land inside [0, n − 1] after zooming by `scale`.
    let lo = (ctr - ctr / scale).max(0.0);
    let hi = (ctr + (last - ctr) / scale).min(last);
    let a = (x - crop_factor * hi).max(0.0);
    let b = (x - crop_factor * lo).min(n as f64 * (1.0 - crop_factor));
    (a <= b).then_some((a, b))
}

/// Random crop, scale and flip with randomness drawn from `seed`.
pub fn augment_ird(sample: &IrdSample, flags: AugmentFlags, seed: u64) -> IrdSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    IrdAugment::sample(sample, flags, &mut rng).apply(sample)
}

/// A depth-network training sample: cropped sub-volume and interval in crop coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct IdpSample {
    pub volume: Volume,
    pub interval: Interval,
}

/// Horizontal flip with probability 1/2; the slice interval is untouched.
pub fn augment_idpnet(sample: &IdpSample, enabled: bool, seed: u64) -> IdpSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if enabled && rng.random_bool(0.5) {
        IdpSample { volume: sample.volume.flipped_horizontally(), interval: sample.interval }
    } else {
        sample.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> IrdSample {
        let image = (0..h * w).map(|i| (i % w) as f64 / w as f64 + (i / w) as f64 * 0.001).collect();
        IrdSample::new(h, w, image, (10.0, 5.0), Condition::Left).unwrap()
    }

    #[test]
    fn identity_parameters_are_identity() {
        let s = ramp(16, 12);
        assert_eq!(IrdAugment::IDENTITY.apply(&s), s);
        assert_eq!(augment_ird(&s, AugmentFlags::NONE, 9), s);
    }

    #[test]
    fn flip_reflects_columns_and_condition() {
        let s = ramp(16, 12);
        let f = IrdAugment { flip: true, ..IrdAugment::IDENTITY }.apply(&s);
        assert_eq!(f.position, (10.0, 6.0));
        assert_eq!(f.condition, Condition::Right);
        assert_eq!(f.image[3 * 12], s.image[3 * 12 + 11]);
    }

    #[test]
    fn position_follows_content() {
        // A single bright pixel must land where the transformed position says.
        let (h, w) = (33, 33);
        let mut image = alloc::vec![0.0; h * w];
        image[12 * w + 20] = 1.0;
        let s = IrdSample::new(h, w, image, (12.0, 20.0), Condition::Middle).unwrap();
        let aug = IrdAugment { crop_factor: 0.75, origin: (4.0, 6.0), scale: 1.1, flip: false };
        let out = aug.apply(&s);
        let (pr, pc) = out.position;
        let at = |r: f64, c: f64| sample_bilinear(&out.image, h, w, r, c);
        assert!(at(pr, pc) > 0.3, "{}", at(pr, pc));
        assert!(at(pr + 3.0, pc) < 1e-12 && at(pr, pc - 3.0) < 1e-12);
    }

    #[test]
    fn depth_flip_keeps_interval() {
        let voxels = (0..8 * 8 * 8).map(|i| (i % 8) as f32 / 8.0).collect();
        let s = IdpSample { volume: Volume::new([8, 8, 8], [1.0; 3], voxels).unwrap(), interval: Interval::new(1.0, 5.0) };
        for seed in 0..8 {
            let a = augment_idpnet(&s, true, seed);
            assert_eq!(a.interval, s.interval);
            assert!(a.volume == s.volume || a.volume.get(2, 3, 0) == s.volume.get(2, 3, 7));
        }
        assert_eq!(augment_idpnet(&s, false, 1), s);
    }

    #[test]
    fn resize_maps_corners() {
        let s = ramp(16, 16).resized(32);
        assert_eq!((s.height, s.width), (32, 32));
        assert!((s.position.0 - 10.0 * 31.0 / 15.0).abs() < 1e-12);
    }
}
