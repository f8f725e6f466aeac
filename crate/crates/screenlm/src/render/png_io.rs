//! 8-bit grayscale PNG export/import for screenshots.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

use super::Screenshot;

/// Write `shot` as an 8-bit grayscale PNG; each byte is
/// `round(intensity * 255)`.
pub fn save_png(shot: &Screenshot, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), shot.width as u32, shot.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    let bytes: Vec<u8> = shot.pixels.iter().map(|&p| (p * 255.0).round() as u8).collect();
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

/// Read an 8-bit grayscale PNG back into intensities in [0, 1].
///
/// The result carries no EOS/source metadata; it is a pixel grid for
/// inspection and round-trip checks.
pub fn load_png(path: &Path, patch_width: usize) -> Result<Screenshot> {
    let decoder = png::Decoder::new(File::open(path)?);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "expected 8-bit grayscale, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    let width = info.width as usize;
    let height = info.height as usize;
    let pixels = buf[..width * height].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Screenshot {
        pixels,
        width,
        height,
        patch_width,
        eos_patch_index: None,
        source_text: String::new(),
        truncated: false,
    })
}
