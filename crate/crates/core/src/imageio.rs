//! PNG/JPEG decoding into [`PixelBuffer`]s and PNG encoding back out.

use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::collage::PixelBuffer;
use crate::error::ImageIoError;

/// Decodes any supported image file as 8-bit RGB.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<PixelBuffer, ImageIoError> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| ImageIoError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(PixelBuffer::from_raw(w, h, 3, rgb.into_raw())?)
}

/// Writes a 1, 2, 3 or 4 channel buffer as PNG.
pub fn save_png(path: impl AsRef<Path>, pixels: &PixelBuffer) -> Result<(), ImageIoError> {
    let path = path.as_ref();
    let (w, h) = (pixels.width(), pixels.height());
    let data = pixels.as_bytes().to_vec();
    let img = match pixels.channels() {
        1 => image::GrayImage::from_raw(w, h, data).map(DynamicImage::ImageLuma8),
        2 => image::GrayAlphaImage::from_raw(w, h, data).map(DynamicImage::ImageLumaA8),
        3 => image::RgbImage::from_raw(w, h, data).map(DynamicImage::ImageRgb8),
        4 => image::RgbaImage::from_raw(w, h, data).map(DynamicImage::ImageRgba8),
        _ => None,
    };
    let img = img.ok_or_else(|| ImageIoError::Image {
        path: path.to_path_buf(),
        source: image::ImageError::Unsupported(
            image::error::UnsupportedError::from_format_and_kind(
                image::error::ImageFormatHint::Exact(ImageFormat::Png),
                image::error::UnsupportedErrorKind::GenericFeature(format!(
                    "{} channels",
                    pixels.channels()
                )),
            ),
        ),
    })?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|source| ImageIoError::Image {
            path: path.to_path_buf(),
            source,
        })
}
