//! Output of a neuron inversion. A dump directory holds:
//!
//! * `inverted.rmds`: the inverted image as a single-image dataset file
//!   (pixels rounded to the nearest level);
//! * `seed.pgm`, `inverted.pgm`: plain-text grayscale (`P2`, maxval 255),
//!   one image per channel with a `_c{k}` suffix when there are several;
//! * `trace.csv`: `step,activation` for the activation before the first step
//!   (step 0) and after every step;
//! * `inverted.csv`: the unrounded pixel values, one image row per line.

use std::fs;
use std::path::Path;

use rmaml_core::evaluation::IamResult;
use rmaml_core::tasks::{Dataset, Dims};
use rmaml_core::Tensor;

use crate::dataset_file;
use crate::error::{Result, RunError};

fn to_u8(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

/// `P2` text for channel `ch` of an HWC image.
pub fn pgm(img: &[f64], dims: Dims, ch: usize) -> String {
    let (h, w, c) = dims;
    let mut out = format!("P2\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| to_u8(img[(y * w + x) * c + ch]).to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

fn write_pgms(dir: &Path, stem: &str, img: &Tensor, dims: Dims) -> Result<()> {
    for ch in 0..dims.2 {
        let name = if dims.2 == 1 { format!("{stem}.pgm") } else { format!("{stem}_c{ch}.pgm") };
        write(&dir.join(name), pgm(img.data(), dims, ch))?;
    }
    Ok(())
}

pub fn dump(result: &IamResult, dims: Dims, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    let pixels = result.inverted_image.data().iter().map(|&v| to_u8(v)).collect();
    dataset_file::save(&Dataset::new(1, 1, dims, pixels)?, &dir.join("inverted.rmds"))?;
    write_pgms(dir, "seed", &result.seed_image, dims)?;
    write_pgms(dir, "inverted", &result.inverted_image, dims)?;
    let mut trace = String::from("step,activation\n");
    for (i, v) in result.objective_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{v:?}\n"));
    }
    write(&dir.join("trace.csv"), trace)?;
    let (h, w, c) = dims;
    let mut raw = String::new();
    for y in 0..h {
        let row = &result.inverted_image.data()[y * w * c..(y + 1) * w * c];
        raw.push_str(&row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        raw.push('\n');
    }
    write(&dir.join("inverted.csv"), raw)
}
