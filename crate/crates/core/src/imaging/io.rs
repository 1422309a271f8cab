use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{EnhancedImage, RawImage};
use crate::error::{Error, Result};

/// Reads an 8-bit PNG as RGB. Grey and alpha channels are expanded or
/// dropped.
pub fn read_png(path: &Path) -> Result<RawImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let data = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => {
            bytes.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
        }
        png::ColorType::Indexed => {
            return Err(Error::Png(format!("{}: unexpanded palette", path.display())))
        }
    };
    RawImage::new(w, h, data)
}

pub fn write_png(path: &Path, img: &RawImage) -> Result<()> {
    write_rgb(path, img.width(), img.height(), img.data())
}

fn write_rgb(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Writes an enhanced image quantized to 8 bits (`round(v·255)`).
pub fn write_enhanced_png(path: &Path, img: &EnhancedImage) -> Result<()> {
    write_png(path, &img.to_raw())
}

/// Reads a square PNG back into `[0, 1]` planar form.
pub fn read_enhanced_png(path: &Path) -> Result<EnhancedImage> {
    let raw = read_png(path)?;
    if raw.width() != raw.height() {
        return Err(Error::Image(format!(
            "{}: enhanced image must be square, got {}×{}",
            path.display(),
            raw.width(),
            raw.height()
        )));
    }
    let s = raw.width();
    let mut data = vec![0.0f32; 3 * s * s];
    for (i, p) in raw.pixels().enumerate() {
        for c in 0..3 {
            data[c * s * s + i] = p[c] as f32 / 255.0;
        }
    }
    EnhancedImage::new(s, data)
}
