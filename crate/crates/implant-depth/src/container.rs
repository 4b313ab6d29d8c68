//! Named-array container: one little-endian binary payload plus a text manifest.
//!
//! Manifest layout:
//!
//! ```text
//! arrays-version=1
//! <name> <dtype> <d0,d1,...> <byte offset>
//! ```
//!
//! Arrays are stored as `f64` so round trips are bit-exact. Scalars have an empty shape
//! written as `-`.

use std::fs;
use std::path::Path;

use implant_depth_core::Tensor;

use crate::error::{HarnessError, IoContext, Result};

pub const ARRAYS_VERSION: u32 = 1;
const DTYPE: &str = "f64";

pub type NamedArrays = Vec<(String, Tensor)>;

/// Write `<stem>.bin` and `<stem>.manifest` inside `dir`.
pub fn write_arrays(dir: &Path, stem: &str, arrays: &[(String, Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut manifest = format!("arrays-version={ARRAYS_VERSION}\n");
    let mut payload = Vec::new();
    for (name, t) in arrays {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(HarnessError::Config(format!("array name `{name}` must be non-empty without whitespace")));
        }
        let shape = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        };
        manifest.push_str(&format!("{name} {DTYPE} {shape} {}\n", payload.len()));
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, payload).at(&bin)?;
    let man = dir.join(format!("{stem}.manifest"));
    fs::write(&man, manifest).at(&man)
}

pub fn read_arrays(dir: &Path, stem: &str) -> Result<NamedArrays> {
    let man = dir.join(format!("{stem}.manifest"));
    let text = fs::read_to_string(&man).at(&man)?;
    let bin = dir.join(format!("{stem}.bin"));
    let payload = fs::read(&bin).at(&bin)?;

    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().unwrap_or_default();
    let version = header
        .strip_prefix("arrays-version=")
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| HarnessError::field(&man, "arrays-version", format!("bad header `{header}`")))?;
    if version != ARRAYS_VERSION {
        return Err(HarnessError::Version { path: man, found: version, expected: ARRAYS_VERSION });
    }

    let mut out = Vec::new();
    let mut expected_offset = 0usize;
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, dtype, shape, offset] = fields[..] else {
            return Err(HarnessError::format(&man, format!("expected `name dtype shape offset`, got `{line}`")));
        };
        if dtype != DTYPE {
            return Err(HarnessError::field(&man, name, format!("unsupported dtype `{dtype}`")));
        }
        let shape: Vec<usize> = if shape == "-" {
            Vec::new()
        } else {
            shape
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| HarnessError::field(&man, name, format!("bad shape `{shape}`: {e}")))?
        };
        let offset: usize = offset.parse().map_err(|e| HarnessError::field(&man, name, format!("bad offset: {e}")))?;
        if offset != expected_offset {
            return Err(HarnessError::field(&man, name, format!("offset {offset}, expected {expected_offset}")));
        }
        let len = shape.iter().product::<usize>() * 8;
        let Some(bytes) = payload.get(offset..offset + len) else {
            return Err(HarnessError::format(&bin, format!("array `{name}` runs past the end of the payload")));
        };
        let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect();
        out.push((name.to_string(), Tensor::new(&shape, data)?));
        expected_offset += len;
    }
    if expected_offset != payload.len() {
        return Err(HarnessError::format(&bin, format!("{} trailing bytes", payload.len() - expected_offset)));
    }
    Ok(out)
}
