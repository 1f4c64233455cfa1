//! 8-bit RGB images and single-channel mask rasters, exchanged as PNG.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, interleaved RGB.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::contract(
                "image",
                format!("{} bytes for {width}x{height} RGB", data.len()),
            ));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, png::ColorType::Rgb, &self.data)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let (width, height, color, buf) = decode_png(bytes)?;
        let data = match color {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => {
                buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
            }
            other => return Err(Error::Format(format!("unsupported PNG color {other:?}"))),
        };
        RgbImage::new(width, height, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RgbImage::from_png(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }
}

/// Encodes a 0/255 single-channel raster.
pub fn gray_to_png(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    encode_png(width, height, png::ColorType::Grayscale, data)
}

/// Decodes a single-channel raster; RGB input is reduced to its first channel.
pub fn gray_from_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (width, height, color, buf) = decode_png(bytes)?;
    let stride = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Format(format!("unsupported PNG color {other:?}"))),
    };
    Ok((width, height, buf.iter().step_by(stride).copied().collect()))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((
        info.width as usize,
        info.height as usize,
        info.color_type,
        buf,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_png_round_trip() {
        let data: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 17 % 256) as u8).collect();
        let img = RgbImage::new(5, 3, data).unwrap();
        let back = RgbImage::from_png(&img.to_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn gray_png_round_trip() {
        let data = vec![0, 255, 255, 0, 0, 255];
        let png = gray_to_png(3, 2, &data).unwrap();
        assert_eq!(gray_from_png(&png).unwrap(), (3, 2, data));
    }

    #[test]
    fn wrong_buffer_length_is_rejected() {
        assert!(RgbImage::new(2, 2, vec![0; 11]).is_err());
    }
}
