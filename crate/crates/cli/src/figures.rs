//! Grayscale heatmaps as binary PGM (`P5`) images.

use std::path::Path;

use crate::error::{CliError, Result};

/// Encodes row-major values in `[0, 1]` as an 8-bit image; value `v` maps
/// to `round(255 v)` after clamping.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(CliError::Format(format!("{width}x{height} image needs {} values, got {}", width * height, values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    std::fs::write(path, pgm_bytes(width, height, values)?).map_err(|e| CliError::io(path, e))
}
