//! On-disk containers: a JSON sidecar describing a raw little-endian payload.
//!
//! A path may name the sidecar (`x.vol.json`), the payload (`x.vol.raw`, `x.bin`), or a bare
//! stem (`x`), in which case `.<kind>.json` / `.<kind>.raw` are appended.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DistanceMatrix, Volume};
use crate::metrics::LabeledVolume;
use crate::scalar::Real;

/// `path` with its last extension replaced by `ext`.
pub fn companion_path(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e == ext)
}

/// `(sidecar, payload)` paths for a container of the given kind.
pub fn container_paths(path: &Path, kind: &str) -> (PathBuf, PathBuf) {
    if has_ext(path, "json") {
        let raw = companion_path(path, "raw");
        let bin = companion_path(path, "bin");
        let payload = if !raw.exists() && bin.exists() { bin } else { raw };
        (path.to_path_buf(), payload)
    } else if has_ext(path, "raw") || has_ext(path, "bin") {
        (companion_path(path, "json"), path.to_path_buf())
    } else {
        let s = path.as_os_str().to_string_lossy();
        (
            PathBuf::from(format!("{s}.{kind}.json")),
            PathBuf::from(format!("{s}.{kind}.raw")),
        )
    }
}

fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
        .collect())
}

fn write_f32s<T: Real>(path: &Path, values: &[T]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn check_dtype(found: &str, want: &str, path: &Path) -> Result<()> {
    if found != want {
        return Err(Error::Format(format!(
            "{}: dtype '{found}', expected '{want}'",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    dtype: String,
    layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spacing_um: Option<[f64; 3]>,
}

pub fn write_volume<T: Real>(path: &Path, vol: &Volume<T>) -> Result<()> {
    let (json, raw) = container_paths(path, "vol");
    let header = VolumeHeader {
        dims: vol.dims(),
        dtype: "f32".into(),
        layout: "depth-fastest".into(),
        spacing_um: vol.spacing(),
    };
    write_f32s(&raw, vol.as_slice())?;
    fs::write(json, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn read_volume<T: Real>(path: &Path) -> Result<Volume<T>> {
    let (json, raw) = container_paths(path, "vol");
    let header: VolumeHeader = serde_json::from_str(&fs::read_to_string(&json)?)?;
    check_dtype(&header.dtype, "f32", &json)?;
    if header.layout != "depth-fastest" {
        return Err(Error::Format(format!("{}: unsupported layout '{}'", json.display(), header.layout)));
    }
    let values = read_f32s(&raw, header.dims.iter().product())?;
    let vol = Volume::new(header.dims, values.into_iter().map(|v| T::lit(v as f64)).collect())?;
    Ok(match header.spacing_um {
        Some(s) => vol.with_spacing(s),
        None => vol,
    })
}

#[derive(Serialize, Deserialize)]
struct LabelHeader {
    dims: [usize; 3],
    c: usize,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    runtime_s: Option<f64>,
}

/// Run information stored alongside segmentation output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LabelRunInfo {
    pub converged: Option<bool>,
    pub runtime_s: Option<f64>,
}

pub fn write_labels(path: &Path, labels: &LabeledVolume, info: LabelRunInfo) -> Result<()> {
    let (json, raw) = container_paths(path, "lbl");
    let header = LabelHeader {
        dims: labels.dims(),
        c: labels.c(),
        dtype: "u8".into(),
        converged: info.converged,
        runtime_s: info.runtime_s,
    };
    fs::write(&raw, labels.as_slice())?;
    fs::write(json, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<(LabeledVolume, LabelRunInfo)> {
    let (json, raw) = container_paths(path, "lbl");
    let header: LabelHeader = serde_json::from_str(&fs::read_to_string(&json)?)?;
    check_dtype(&header.dtype, "u8", &json)?;
    let bytes = fs::read(&raw)?;
    let labels = LabeledVolume::new(header.dims, header.c, bytes)?;
    Ok((
        labels,
        LabelRunInfo {
            converged: header.converged,
            runtime_s: header.runtime_s,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    n: usize,
    c: usize,
    dtype: String,
}

/// Reads a row-major `n × c` f32 matrix.
pub fn read_matrix<T: Real>(path: &Path) -> Result<(usize, usize, Vec<T>)> {
    let (json, raw) = container_paths(path, "dist");
    let header: MatrixHeader = serde_json::from_str(&fs::read_to_string(&json)?)?;
    check_dtype(&header.dtype, "f32", &json)?;
    let values = read_f32s(&raw, header.n * header.c)?;
    Ok((header.n, header.c, values.into_iter().map(|v| T::lit(v as f64)).collect()))
}

pub fn write_matrix<T: Real>(path: &Path, n: usize, c: usize, values: &[T]) -> Result<()> {
    if values.len() != n * c {
        return Err(Error::InvalidDimension(format!("{n}x{c} matrix with {} values", values.len())));
    }
    let (json, raw) = container_paths(path, "dist");
    write_f32s(&raw, values)?;
    let header = MatrixHeader {
        n,
        c,
        dtype: "f32".into(),
    };
    fs::write(json, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn read_distances<T: Real>(path: &Path) -> Result<DistanceMatrix<T>> {
    let (n, c, v) = read_matrix(path)?;
    DistanceMatrix::new(n, c, v)
}

pub fn write_distances<T: Real>(path: &Path, d: &DistanceMatrix<T>) -> Result<()> {
    write_matrix(path, d.n(), d.c(), d.as_slice())
}
