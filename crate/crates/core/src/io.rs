//! 8-bit PNG boundary. Pixels are unit-range floats everywhere else.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Round-half-up quantisation of a unit-range value to 8 bits.
pub fn quantize_u8(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn encode(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut encoder = png::Encoder::new(create(path)?, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Writes a lossless 8-bit grayscale PNG, `round(p·255)` per pixel.
pub fn write_gray_png(path: &Path, img: &Grid) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|&p| quantize_u8(p)).collect();
    encode(path, img.width(), img.height(), png::ColorType::Grayscale, &bytes)
}

/// Writes an 8-bit RGB PNG from interleaved bytes.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    encode(path, width, height, png::ColorType::Rgb, rgb)
}

/// Encodes a grayscale grid to PNG bytes in memory.
pub fn encode_gray_png(img: &Grid) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| Error::InvalidValue(e.to_string());
        let mut writer = encoder.write_header().map_err(err)?;
        let bytes: Vec<u8> = img.data().iter().map(|&p| quantize_u8(p)).collect();
        writer.write_image_data(&bytes).map_err(err)?;
        writer.finish().map_err(err)?;
    }
    Ok(out)
}

/// Reads an 8-bit grayscale (or RGB/RGBA, first channel) PNG as `value/255`.
pub fn read_gray_png(path: &Path) -> Result<Grid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "only 8-bit PNGs are supported"));
    }
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..info.buffer_size()]
        .chunks(channels)
        .map(|px| px[0] as f32 / 255.0)
        .collect();
    Grid::new(h, w, data)
}
