//! PNG input and output for group images, person masks and saliency maps.

use std::path::Path;

use cohesion_core::data::{Mask, RgbImage};
use image::{GrayImage, ImageFormat, RgbImage as PngRgb};

use crate::error::{Error, Result};

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    image::load_from_memory(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

fn save(path: &Path, img: impl FnOnce(&mut std::io::Cursor<Vec<u8>>) -> image::ImageResult<()>) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, buf.into_inner()).map_err(Error::io(path))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = decode(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let png = PngRgb::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| Error::format(path, "pixel buffer does not match extents"))?;
    save(path, |buf| png.write_to(buf, ImageFormat::Png))
}

/// Single-channel mask; any nonzero pixel marks a person.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = decode(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(|v| v != 0).collect(),
    })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raw = mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_gray(path, mask.width, mask.height, raw)
}

pub fn write_gray(path: &Path, width: usize, height: usize, raw: Vec<u8>) -> Result<()> {
    let png = GrayImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::format(path, "pixel buffer does not match extents"))?;
    save(path, |buf| png.write_to(buf, ImageFormat::Png))
}

/// A `[0, 1]` map quantized to 0..=255, so 0 maps to black and 1 to white.
pub fn quantize(map: &[f64]) -> Vec<u8> {
    map.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = decode(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_and_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::filled(5, 3, [10, 20, 30]);
        img.set(4, 2, [255, 0, 128]);
        let p = dir.path().join("a.png");
        write_rgb(&p, &img).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), img);

        let mask = Mask {
            width: 5,
            height: 3,
            data: (0..15).map(|i| i % 3 == 0).collect(),
        };
        let m = dir.path().join("m.png");
        write_mask(&m, &mask).unwrap();
        assert_eq!(read_mask(&m).unwrap(), mask);
    }

    #[test]
    fn quantization_spans_full_range() {
        assert_eq!(quantize(&[0.0, 0.5, 1.0, 2.0]), vec![0, 128, 255, 255]);
    }

    #[test]
    fn undecodable_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"nope").unwrap();
        let err = read_rgb(&p).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");
    }
}
