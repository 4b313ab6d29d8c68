use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const MIN_EXTENT: usize = 8;

/// Dense `D × H × W` intensity grid (depth-major) with physical voxel spacing.
///
/// Intensities are finite and lie in `[0, 1]`; every extent is at least [`MIN_EXTENT`].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        for (axis, &n) in ["depth", "height", "width"].iter().zip(&dims) {
            if n < MIN_EXTENT {
                bail!(Invalid, "{} {} is below the minimum extent {}", axis, n, MIN_EXTENT);
            }
        }
        for (axis, &s) in ["spacing_d", "spacing_h", "spacing_w"].iter().zip(&spacing_mm) {
            if !(s.is_finite() && s > 0.0) {
                bail!(Invalid, "{} must be strictly positive, got {}", axis, s);
            }
        }
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            bail!(Shape, "dimensions {:?} need {} voxels, got {}", dims, n, voxels.len());
        }
        if let Some(i) = voxels.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
            bail!(Invalid, "voxel {} has intensity {} outside [0, 1]", i, voxels[i]);
        }
        Ok(Self { dims, spacing_mm, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[self.index(d, h, w)]
    }

    /// Axial slice `d` as a row-major `H × W` buffer.
    pub fn slice(&self, d: usize) -> &[f32] {
        let hw = self.dims[1] * self.dims[2];
        &self.voxels[d * hw..(d + 1) * hw]
    }

    pub fn slice_f64(&self, d: usize) -> Vec<f64> {
        self.slice(d).iter().map(|&v| v as f64).collect()
    }

    /// Mirror every slice left-right: voxel `(d, h, w)` moves to `(d, h, W-1-w)`.
    pub fn flipped_horizontally(&self) -> Volume {
        let [_, _, w] = self.dims;
        let mut voxels = self.voxels.clone();
        for row in voxels.chunks_mut(w) {
            row.reverse();
        }
        Volume { dims: self.dims, spacing_mm: self.spacing_mm, voxels }
    }
}

/// Closed-open slice interval in continuous slice-index units.
///
/// Raw network output may have `end < start`; validity is checked where it matters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub const fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    /// Non-negative length (zero for inverted intervals).
    pub fn length(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.start < self.end
    }

    pub fn shifted(&self, by: f64) -> Interval {
        Interval::new(self.start + by, self.end + by)
    }
}

/// Text condition naming the side of the jaw where the implant goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Left,
    Middle,
    Right,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Left, Condition::Middle, Condition::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Left => "left",
            Condition::Middle => "middle",
            Condition::Right => "right",
        }
    }

    /// Condition after a left-right mirror of the image.
    pub fn mirrored(self) -> Condition {
        match self {
            Condition::Left => Condition::Right,
            Condition::Middle => Condition::Middle,
            Condition::Right => Condition::Left,
        }
    }

    /// Thirds of a normalized position in `[0, 1]` along the arc.
    pub fn from_fraction(t: f64) -> Condition {
        if t < 1.0 / 3.0 {
            Condition::Left
        } else if t < 2.0 / 3.0 {
            Condition::Middle
        } else {
            Condition::Right
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Condition::Left),
            "middle" => Ok(Condition::Middle),
            "right" => Ok(Condition::Right),
            other => bail!(Invalid, "unknown condition `{}`", other),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplantAnnotation {
    /// `(row, col)` of the implant on the crown slice, in voxels.
    pub axial_position: (f64, f64),
    pub interval: Interval,
    pub condition: Condition,
    /// Slice index of the nerve-canal landmark, when annotated.
    pub canal_slice: Option<f64>,
}

impl ImplantAnnotation {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        let [d, h, w] = dims;
        let iv = self.interval;
        if !(iv.start.is_finite() && iv.end.is_finite() && 0.0 <= iv.start && iv.start < iv.end && iv.end <= d as f64) {
            bail!(Invalid, "interval ({}, {}) must satisfy 0 <= start < end <= {}", iv.start, iv.end, d);
        }
        let (r, c) = self.axial_position;
        if !(r.is_finite() && c.is_finite() && 0.0 <= r && r < h as f64 && 0.0 <= c && c < w as f64) {
            bail!(Invalid, "axial position ({}, {}) lies outside {}x{}", r, c, h, w);
        }
        if let Some(canal) = self.canal_slice {
            if !canal.is_finite() {
                bail!(Invalid, "canal slice {} is not finite", canal);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub volume: Volume,
    pub annotation: ImplantAnnotation,
    /// Axial slice fed to the region detector.
    pub crown_slice_index: usize,
}

impl PatientRecord {
    pub fn new(id: String, volume: Volume, annotation: ImplantAnnotation, crown_slice_index: usize) -> Result<Self> {
        annotation.validate(volume.dims())?;
        if crown_slice_index >= volume.depth() {
            bail!(Invalid, "crown slice {} outside [0, {})", crown_slice_index, volume.depth());
        }
        if id.is_empty() {
            bail!(Invalid, "patient id must not be empty");
        }
        Ok(Self { id, volume, annotation, crown_slice_index })
    }

    pub fn crown_slice(&self) -> Vec<f64> {
        self.volume.slice_f64(self.crown_slice_index)
    }
}
