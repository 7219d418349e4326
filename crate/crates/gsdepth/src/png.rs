//! 8-bit PNG color images.

use std::path::Path;

use gsdepth_core::image::Image;
use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Rgb};

use crate::error::{Error, Result};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

/// Accepts 8-bit RGB or grayscale; anything else is rejected.
pub fn read_png(path: &Path) -> Result<Image> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(b) => b,
        DynamicImage::ImageLuma8(_) => img.to_rgb8(),
        other => {
            return Err(Error::format(path, format!("unsupported color type {:?}, expected 8-bit RGB", other.color())))
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
    Ok(Image::from_vec(w as usize, h as usize, data)?)
}

/// Values are clamped to [0, 1] and rounded to the nearest 8-bit level.
pub fn to_rgb8(img: &Image) -> Vec<u8> {
    img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(img.width as u32, img.height as u32, to_rgb8(img))
        .ok_or_else(|| Error::format(path, "image buffer does not match its size"))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}
