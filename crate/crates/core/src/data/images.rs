//! Image codecs: 8-bit grayscale/RGB PNG with PGM as a fallback, bridged to
//! [`Tensor`] values in [0, 1]. Masks binarize at >127.

use std::path::Path;

use image::ImageReader;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    reader.decode().map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Width/height without decoding the pixel data.
pub fn probe_dimensions(path: &Path) -> Result<(usize, usize)> {
    let reader = ImageReader::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = reader.into_dimensions().map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((h as usize, w as usize))
}

/// Load as `[H, W, 3]` in [0, 1]; grayscale inputs replicate channels.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    for p in rgb.pixels() {
        data.push(p.0[0] as f64 / 255.0);
        data.push(p.0[1] as f64 / 255.0);
        data.push(p.0[2] as f64 / 255.0);
    }
    Ok(Tensor::from_vec(&[h, w, 3], data))
}

/// Load as a binary `[H, W]` mask: luma > 127 maps to 1.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let gray = decode(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray
        .pixels()
        .map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(&[h, w], data))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save `[H, W, 3]` values in [0, 1] as an 8-bit RGB PNG (or PGM/PNM by
/// extension).
pub fn save_rgb(path: &Path, t: &Tensor) -> Result<()> {
    assert_eq!(t.rank(), 3);
    assert_eq!(t.shape()[2], 3);
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(t.at(&[y, x, 0])),
                    to_u8(t.at(&[y, x, 1])),
                    to_u8(t.at(&[y, x, 2])),
                ]),
            );
        }
    }
    img.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Save `[H, W]` values in [0, 1] as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, t: &Tensor) -> Result<()> {
    assert_eq!(t.rank(), 2);
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([to_u8(t.at(&[y, x]))]));
        }
    }
    img.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
