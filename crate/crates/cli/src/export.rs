//! 16-bit grayscale PGM output.

use std::path::Path;

use std::fs::File;
use std::io::{BufWriter, Write};

use pact_core::ImageField;

use crate::error::Result;

fn peak_normalized(p: &ImageField) -> Vec<f64> {
    let peak = p.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let s = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    p.values.iter().map(|v| v * s).collect()
}

/// Binary PGM, maxval 65535, big-endian samples.
fn save(path: &Path, nx: usize, ny: usize, levels: impl Iterator<Item = f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{nx} {ny}\n65535\n")?;
    for v in levels {
        w.write_all(&((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Peak-normalised image; negative values clip to black.
pub fn write_image(path: &Path, p: &ImageField) -> Result<()> {
    save(path, p.grid.nx, p.grid.ny, peak_normalized(p).into_iter())
}

/// Signed difference of the peak-normalised images around mid grey:
/// black is -1, white is +1.
pub fn write_difference(path: &Path, p: &ImageField, reference: &ImageField) -> Result<()> {
    let a = peak_normalized(p);
    let b = peak_normalized(reference);
    save(path, p.grid.nx, p.grid.ny, a.iter().zip(&b).map(|(x, y)| 0.5 + 0.5 * (x - y)))
}
