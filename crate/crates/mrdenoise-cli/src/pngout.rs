//! Grayscale PNG triptychs: one slice from the clean, noisy and denoised
//! volumes side by side, min-max windowed on the clean volume.

use crate::error::CliError;
use mrdenoise::data::Volume;
use std::path::Path;

/// Writes `clean | noisy | denoised` for slice `c` as an 8-bit grayscale PNG.
/// Returns the (lo, hi) window applied.
pub fn write_triptych(
    clean: &Volume,
    noisy: &Volume,
    denoised: &Volume,
    c: usize,
    path: &Path,
) -> Result<(f32, f32), CliError> {
    let (h, w, _) = clean.shape();
    let lo = clean.min();
    let hi = clean.max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let window = |v: f32| -> u8 { (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8 };

    let panels = [clean.slice(c), noisy.slice(c), denoised.slice(c)];
    let mut pixels = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        for panel in &panels {
            for col in 0..w {
                pixels.push(window(panel[row * w + col]));
            }
        }
    }

    let file = std::fs::File::create(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), (3 * w) as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok((lo, hi))
}
