//! Magic-byte sniffing, header-only dimension probing and resizing.

use std::io::Cursor;

use image::{ImageFormat, ImageReader};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageOpError {
    #[error("undecodable image: {0}")]
    Undecodable(String),
    #[error("resize target must be positive")]
    ZeroTarget,
}

/// Image format from leading magic bytes; content-type headers are ignored.
pub fn sniff_format(bytes: &[u8]) -> Option<ImageFormat> {
    const SIGNATURES: &[(&[u8], ImageFormat)] = &[
        (&[0xFF, 0xD8, 0xFF], ImageFormat::Jpeg),
        (b"\x89PNG\r\n\x1a\n", ImageFormat::Png),
    ];
    SIGNATURES
        .iter()
        .find(|(magic, _)| bytes.starts_with(magic))
        .map(|&(_, f)| f)
}

pub fn extension(format: ImageFormat) -> &'static str {
    format.extensions_str().first().copied().unwrap_or("bin")
}

/// Dimensions read from the header without decoding pixel data.
pub fn probe_dimensions(bytes: &[u8], format: ImageFormat) -> Result<(u32, u32), ImageOpError> {
    ImageReader::with_format(Cursor::new(bytes), format)
        .into_dimensions()
        .map_err(|e| ImageOpError::Undecodable(e.to_string()))
}

pub fn decode(bytes: &[u8], format: ImageFormat, max_pixels: u64) -> Result<image::DynamicImage, ImageOpError> {
    let mut reader = ImageReader::with_format(Cursor::new(bytes), format);
    let mut limits = image::Limits::default();
    limits.max_alloc = Some(max_pixels.saturating_mul(8));
    reader.limits(limits);
    reader.decode().map_err(|e| ImageOpError::Undecodable(e.to_string()))
}

/// Dimensions after fitting the longer side into `target`, never upscaling.
pub fn fit_dimensions(width: u32, height: u32, target: u32) -> (u32, u32) {
    let long = width.max(height);
    if long <= target {
        return (width, height);
    }
    let scale = |side: u32| ((u64::from(side) * u64::from(target) + u64::from(long) / 2) / u64::from(long)).max(1) as u32;
    (scale(width), scale(height))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resized {
    pub bytes: Vec<u8>,
    pub width: u32,
    pub height: u32,
    /// False when the input already fit and was returned as-is.
    pub changed: bool,
}

pub const RESIZE_JPEG_QUALITY: u8 = 95;

/// Downscales so the longer side is at most `target_max_side`, preserving
/// the aspect ratio; small images are returned byte-for-byte.
pub fn resize_image(bytes: &[u8], target_max_side: u32) -> Result<Resized, ImageOpError> {
    if target_max_side == 0 {
        return Err(ImageOpError::ZeroTarget);
    }
    let format = sniff_format(bytes).ok_or_else(|| ImageOpError::Undecodable("unknown format".into()))?;
    let img = decode(bytes, format, u64::MAX / 16)?;
    let (w, h) = (img.width(), img.height());
    let (nw, nh) = fit_dimensions(w, h, target_max_side);
    if (nw, nh) == (w, h) {
        return Ok(Resized { bytes: bytes.to_vec(), width: w, height: h, changed: false });
    }
    let small = img.resize_exact(nw, nh, image::imageops::FilterType::Triangle).to_rgb8();
    Ok(Resized { bytes: encode_jpeg(&small, RESIZE_JPEG_QUALITY), width: nw, height: nh, changed: true })
}

pub fn encode_jpeg(img: &image::RgbImage, quality: u8) -> Vec<u8> {
    let mut out = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality)
        .encode_image(img)
        .expect("in-memory JPEG encoding");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jpeg(w: u32, h: u32) -> Vec<u8> {
        encode_jpeg(&image::RgbImage::from_pixel(w, h, image::Rgb([10, 200, 30])), 90)
    }

    #[test]
    fn fit_examples() {
        assert_eq!(fit_dimensions(1000, 500, 256), (256, 128));
        assert_eq!(fit_dimensions(100, 100, 256), (100, 100));
        assert_eq!(fit_dimensions(500, 1000, 256), (128, 256));
        assert_eq!(fit_dimensions(10_000, 1, 256), (256, 1));
    }

    #[test]
    fn resize_examples() {
        let r = resize_image(&jpeg(1000, 500), 256).unwrap();
        assert_eq!((r.width, r.height), (256, 128));
        let decoded = image::load_from_memory(&r.bytes).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (256, 128));
        let original = jpeg(100, 100);
        let r = resize_image(&original, 256).unwrap();
        assert_eq!((r.width, r.height, r.changed), (100, 100, false));
        assert_eq!(r.bytes, original);
        assert!(matches!(resize_image(b"nope", 10), Err(ImageOpError::Undecodable(_))));
    }

    #[test]
    fn sniffing() {
        assert_eq!(sniff_format(&jpeg(4, 4)), Some(ImageFormat::Jpeg));
        assert_eq!(sniff_format(b"GIF89a"), None);
        assert_eq!(sniff_format(b""), None);
        assert_eq!(probe_dimensions(&jpeg(33, 17), ImageFormat::Jpeg).unwrap(), (33, 17));
    }
}
