//! The `kvol` on-disk format: a JSON header `<name>.kvol.json` next to a raw
//! little-endian payload `<name>.kvol.raw`.
//!
//! ```json
//! {"shape":[nx,ny,nz],"spacing_mm":[sx,sy,sz],"dtype":"f32","order":"x-fastest"}
//! ```
//!
//! Multi-channel probability maps add `"channels": n` and store `n`
//! consecutive volumes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Grid, LabelVolume, ProbMap, Shape, Spacing, Volume};

pub const ORDER_X_FASTEST: &str = "x-fastest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub shape: Shape,
    pub spacing_mm: Spacing,
    pub dtype: Dtype,
    pub order: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

/// Anything a kvol file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Kvol {
    Image(Volume),
    Labels(LabelVolume, Spacing),
    Probabilities(ProbMap, Spacing),
}

/// Strips `.kvol.json`, `.kvol.raw` or `.kvol` from a path, yielding the stem
/// both files share.
pub fn stem(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for suffix in [".kvol.json", ".kvol.raw", ".kvol"] {
        if let Some(base) = s.strip_suffix(suffix) {
            return PathBuf::from(base);
        }
    }
    path.to_path_buf()
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = stem(path).into_os_string();
    s.push(".kvol.json");
    s.into()
}

pub fn payload_path(path: &Path) -> PathBuf {
    let mut s = stem(path).into_os_string();
    s.push(".kvol.raw");
    s.into()
}

fn write_pair(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let hp = header_path(path);
    if let Some(dir) = hp.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_vec_pretty(header)?;
    fs::write(&hp, json).map_err(|e| Error::io(&hp, e))?;
    let pp = payload_path(path);
    fs::write(&pp, payload).map_err(|e| Error::io(&pp, e))
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let header = Header {
        shape: volume.shape(),
        spacing_mm: volume.spacing(),
        dtype: Dtype::F32,
        order: ORDER_X_FASTEST.into(),
        channels: 1,
    };
    write_pair(path, &header, &f32_bytes(volume.data()))
}

pub fn write_labels(path: &Path, labels: &LabelVolume, spacing: Spacing) -> Result<()> {
    let header = Header {
        shape: labels.shape(),
        spacing_mm: spacing,
        dtype: Dtype::U8,
        order: ORDER_X_FASTEST.into(),
        channels: 1,
    };
    write_pair(path, &header, labels.data())
}

pub fn write_probabilities(path: &Path, probs: &ProbMap, spacing: Spacing) -> Result<()> {
    let header = Header {
        shape: probs.shape(),
        spacing_mm: spacing,
        dtype: Dtype::F32,
        order: ORDER_X_FASTEST.into(),
        channels: probs.classes(),
    };
    write_pair(path, &header, &f32_bytes(probs.data()))
}

/// Writes an arbitrary nonnegative scalar field (e.g. a weight map).
pub fn write_scalar_field(path: &Path, grid: &Grid<f32>, spacing: Spacing) -> Result<()> {
    write_volume(path, &Volume::new(grid.clone(), spacing)?)
}

pub fn read_header(path: &Path) -> Result<Header> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let parse_err = |detail: String| Error::Parse {
        path: hp.clone(),
        detail,
    };
    let header: Header = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    if header.order != ORDER_X_FASTEST {
        return Err(parse_err(format!("unsupported order `{}`", header.order)));
    }
    if header.shape.contains(&0) {
        return Err(parse_err(format!("zero extent in shape {:?}", header.shape)));
    }
    if header.channels == 0 || (header.dtype == Dtype::U8 && header.channels != 1) {
        return Err(parse_err(format!(
            "invalid channel count {} for dtype {:?}",
            header.channels, header.dtype
        )));
    }
    Ok(header)
}

pub fn read(path: &Path) -> Result<Kvol> {
    let header = read_header(path)?;
    let pp = payload_path(path);
    let bytes = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    let count = voxel_count(header.shape) * header.channels;
    let expected = count * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "{} holds {} bytes, header implies {}",
            pp.display(),
            bytes.len(),
            expected
        )));
    }
    match header.dtype {
        Dtype::U8 => Ok(Kvol::Labels(
            Grid::from_vec(header.shape, bytes)?,
            header.spacing_mm,
        )),
        Dtype::F32 => {
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if header.channels == 1 {
                Ok(Kvol::Image(Volume::from_vec(
                    header.shape,
                    header.spacing_mm,
                    values,
                )?))
            } else {
                Ok(Kvol::Probabilities(
                    ProbMap::from_raw(header.shape, header.channels, values)?,
                    header.spacing_mm,
                ))
            }
        }
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match read(path)? {
        Kvol::Image(v) => Ok(v),
        other => Err(Error::Integrity(format!(
            "{} is not a single-channel f32 volume ({})",
            path.display(),
            kind(&other)
        ))),
    }
}

pub fn read_labels(path: &Path) -> Result<(LabelVolume, Spacing)> {
    match read(path)? {
        Kvol::Labels(l, s) => Ok((l, s)),
        other => Err(Error::Integrity(format!(
            "{} is not a u8 label volume ({})",
            path.display(),
            kind(&other)
        ))),
    }
}

fn kind(k: &Kvol) -> &'static str {
    match k {
        Kvol::Image(_) => "image",
        Kvol::Labels(..) => "labels",
        Kvol::Probabilities(..) => "probabilities",
    }
}
