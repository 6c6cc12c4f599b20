//! PNG reading (8- and 16-bit, gray or colour, alpha dropped) and 8-bit writing.

use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::color_hvi::{ImageMeta, RgbImage};
use crate::error::{Error, Result};

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let img_err = |msg: String| Error::Image { path: path.to_path_buf(), msg };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let dynamic = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| img_err(e.to_string()))?;
    let (bit_depth, width, height, data) = match dynamic {
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let rgb = dynamic.to_rgb16();
            let data = rgb.as_raw().iter().map(|&v| v as f32 / 65535.0).collect();
            (16, rgb.width(), rgb.height(), data)
        }
        _ => {
            let rgb = dynamic.to_rgb8();
            let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            (8, rgb.width(), rgb.height(), data)
        }
    };
    let mut img = RgbImage::new(width as usize, height as usize, data).map_err(|e| img_err(e.to_string()))?;
    img.meta = ImageMeta { source: Some(path.to_path_buf()), bit_depth };
    Ok(img)
}

pub fn to_rgb8(img: &RgbImage) -> Vec<u8> {
    img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes an 8-bit RGB PNG; values are rounded to the nearest code.
pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, to_rgb8(img)).expect("buffer matches dimensions");
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })
}
