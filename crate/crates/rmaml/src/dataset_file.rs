//! Dataset files.
//!
//! ```text
//! "RMDS"               magic
//! u32  version         = 1
//! u32  classes         >= 1
//! u32  samples_per_class >= 1
//! u32  height, u32 width, u32 channels
//! u8   pixel_max       largest pixel value allowed in the payload (1..=255)
//! classes × samples_per_class × height × width × channels bytes
//! ```
//!
//! Pixels are class-major (all samples of class 0 first), each image stored
//! row-major with channels last. On load every value is rescaled by
//! `255 / pixel_max` (rounded), so the in-memory range is always `[0, 255]`.
//! A single image is a file with one class of one sample.

use std::fs;
use std::path::Path;

use rmaml_core::tasks::{Dataset, Dims};

use crate::bytes::{u32_field, Reader};
use crate::error::{Result, RunError};

pub const MAGIC: &[u8; 4] = b"RMDS";
pub const VERSION: u32 = 1;

pub fn encode(data: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(29 + data.pixels().len());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(u32_field(data.classes(), "classes")?);
    out.extend(u32_field(data.samples_per_class(), "samples_per_class")?);
    let (h, w, c) = data.dims();
    for v in [h, w, c] {
        out.extend(u32_field(v, "image dim")?);
    }
    out.push(255);
    out.extend(data.pixels());
    Ok(out)
}

pub fn decode(buf: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = Reader::new(buf, path);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(RunError::format(path, format!("unsupported dataset version {version}")));
    }
    let classes = r.u32("classes")? as usize;
    let spc = r.u32("samples_per_class")? as usize;
    let dims: Dims = (r.u32("height")? as usize, r.u32("width")? as usize, r.u32("channels")? as usize);
    let pixel_max = r.u8("pixel_max")?;
    if classes == 0 {
        return Err(RunError::format(path, "header declares 0 classes"));
    }
    if spc == 0 {
        return Err(RunError::format(path, "header declares 0 samples per class"));
    }
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(RunError::format(path, format!("header declares empty images {dims:?}")));
    }
    if pixel_max == 0 {
        return Err(RunError::format(path, "header declares pixel_max = 0"));
    }
    let expected = classes
        .checked_mul(spc)
        .and_then(|v| v.checked_mul(dims.0 * dims.1 * dims.2))
        .ok_or_else(|| RunError::format(path, "declared payload size overflows"))?;
    if r.remaining() != expected {
        return Err(RunError::format(
            path,
            format!(
                "payload size mismatch: expected {} bytes, file has {}",
                r.pos() + expected,
                buf.len()
            ),
        ));
    }
    let raw = r.take(expected, "pixels")?;
    if let Some(pos) = raw.iter().position(|&p| p > pixel_max) {
        return Err(RunError::format(
            path,
            format!("pixel {} at payload offset {pos} exceeds pixel_max {pixel_max}", raw[pos]),
        ));
    }
    let pixels = if pixel_max == 255 {
        raw.to_vec()
    } else {
        let s = 255.0 / pixel_max as f64;
        raw.iter().map(|&p| (p as f64 * s).round() as u8).collect()
    };
    Ok(Dataset::new(classes, spc, dims, pixels)?)
}

pub fn save(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode(data)?).map_err(|e| RunError::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path).map_err(|e| RunError::io(path, e))?;
    decode(&buf, path)
}

/// Builds a dataset from a directory holding one `*.raw` file per class
/// (sorted by file name). Each file is a concatenation of `u8` images of
/// `dims`. Every class keeps its first `samples_per_class` images; by default
/// that is the smallest image count over all files.
pub fn convert_raw_dir(dir: &Path, dims: Dims, samples_per_class: Option<usize>) -> Result<Dataset> {
    let image = dims.0 * dims.1 * dims.2;
    if image == 0 {
        return Err(RunError::Config(format!("image dims must be positive, got {dims:?}")));
    }
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| RunError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "raw"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(RunError::Config(format!("{}: no .raw class files found", dir.display())));
    }
    let mut classes = Vec::with_capacity(files.len());
    for f in &files {
        let buf = fs::read(f).map_err(|e| RunError::io(f, e))?;
        if buf.len() % image != 0 || buf.is_empty() {
            return Err(RunError::format(
                f,
                format!("{} bytes is not a positive multiple of the image size {image}", buf.len()),
            ));
        }
        classes.push(buf);
    }
    let available = classes.iter().map(|c| c.len() / image).min().unwrap_or(0);
    let spc = samples_per_class.unwrap_or(available);
    if spc == 0 || spc > available {
        return Err(RunError::Config(format!(
            "samples_per_class = {spc} but the smallest class file holds {available} images"
        )));
    }
    let mut pixels = Vec::with_capacity(classes.len() * spc * image);
    for c in &classes {
        pixels.extend(&c[..spc * image]);
    }
    Ok(Dataset::new(classes.len(), spc, dims, pixels)?)
}
