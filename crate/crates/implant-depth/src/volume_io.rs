//! Patient directories: `volume.raw` (little-endian f32, depth-major) plus `meta.txt`.
//!
//! `meta.txt` holds `key=value` lines. Blank lines and `#` comments are ignored.
//! Floats are written in shortest round-trip form, so write→read is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use implant_depth_core::{Condition, ImplantAnnotation, Interval, PatientRecord, Volume};

use crate::error::{HarnessError, IoContext, Result};

pub const VOLUME_FORMAT_VERSION: u32 = 1;
pub const VOLUME_FILE: &str = "volume.raw";
pub const META_FILE: &str = "meta.txt";

pub fn write_patient(dir: &Path, record: &PatientRecord) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let vol = &record.volume;
    let mut bytes = Vec::with_capacity(vol.voxels().len() * 4);
    for v in vol.voxels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let raw = dir.join(VOLUME_FILE);
    fs::write(&raw, bytes).at(&raw)?;

    let a = &record.annotation;
    let [sd, sh, sw] = vol.spacing_mm();
    let canal = a.canal_slice.map_or_else(|| "none".to_string(), |c| c.to_string());
    let meta = format!(
        "version={VOLUME_FORMAT_VERSION}\nid={}\ndepth={}\nheight={}\nwidth={}\nspacing_d={sd}\nspacing_h={sh}\nspacing_w={sw}\n\
         start={}\nend={}\npos_row={}\npos_col={}\ncondition={}\ncrown_slice={}\ncanal_slice={canal}\n",
        record.id,
        vol.depth(),
        vol.height(),
        vol.width(),
        a.interval.start,
        a.interval.end,
        a.axial_position.0,
        a.axial_position.1,
        a.condition,
        record.crown_slice_index,
    );
    let path = dir.join(META_FILE);
    fs::write(&path, meta).at(&path)
}

struct Meta {
    path: PathBuf,
    values: BTreeMap<String, String>,
}

impl Meta {
    fn parse(path: PathBuf, text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(HarnessError::format(&path, format!("line {}: expected key=value", n + 1)));
            };
            if values.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(HarnessError::field(&path, k.trim(), "duplicate key"));
            }
        }
        Ok(Self { path, values })
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| HarnessError::field(&self.path, key, "missing"))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse().map_err(|e| HarnessError::field(&self.path, key, format!("cannot parse `{raw}`: {e}")))
    }
}

pub fn read_patient(dir: &Path) -> Result<PatientRecord> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    let meta = Meta::parse(path.clone(), &text)?;
    let version: u32 = meta.get("version")?;
    if version != VOLUME_FORMAT_VERSION {
        return Err(HarnessError::Version { path, found: version, expected: VOLUME_FORMAT_VERSION });
    }
    let dims = [meta.get("depth")?, meta.get("height")?, meta.get("width")?];
    let spacing = [meta.get("spacing_d")?, meta.get("spacing_h")?, meta.get("spacing_w")?];
    let canal_slice = match meta.raw("canal_slice")? {
        "none" => None,
        _ => Some(meta.get("canal_slice")?),
    };
    let annotation = ImplantAnnotation {
        axial_position: (meta.get("pos_row")?, meta.get("pos_col")?),
        interval: Interval::new(meta.get("start")?, meta.get("end")?),
        condition: meta.get::<Condition>("condition")?,
        canal_slice,
    };
    let crown: usize = meta.get("crown_slice")?;
    let id = match meta.values.get("id") {
        Some(id) => id.clone(),
        None => dir.file_name().map_or_else(|| "patient".to_string(), |n| n.to_string_lossy().into_owned()),
    };

    let raw_path = dir.join(VOLUME_FILE);
    let bytes = fs::read(&raw_path).at(&raw_path)?;
    let expected = dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(HarnessError::format(&raw_path, format!("{} bytes, expected {expected} for {dims:?}", bytes.len())));
    }
    let voxels = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let volume = Volume::new(dims, spacing, voxels).map_err(|e| HarnessError::format(&raw_path, e.to_string()))?;
    PatientRecord::new(id, volume, annotation, crown).map_err(|e| HarnessError::format(&path, e.to_string()))
}

/// Every patient directory directly under `root`, in lexicographic order of directory name.
pub fn read_dataset(root: &Path) -> Result<Vec<PatientRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .at(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(HarnessError::format(root, "no patient directories (with meta.txt) found"));
    }
    dirs.iter().map(|d| read_patient(d)).collect()
}
