//! PNG/JPEG codec boundaries for the `[0, 1]` f64 image representation.

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::{JpegDecoder, JpegEncoder};
use image::{DynamicImage, GrayImage, ImageDecoder, ImageEncoder, ImageReader, RgbImage};
use ndarray::Array3;

use super::Image;
use crate::error::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn rgb_bytes(img: &Image) -> Vec<u8> {
    let (h, w, _) = img.data().dim();
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(to_u8(img.data()[[y, x, c]]));
            }
        }
    }
    buf
}

/// Load a PNG (or any format `image` can sniff) as a color or grayscale image.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let dynimg = ImageReader::open(path.as_ref())?
        .with_guessed_format()?
        .decode()?;
    let img = match dynimg {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Image::new(Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
                g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
            }))?
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Image::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            }))?
        }
    };
    Ok(img)
}

/// Write as PNG: RGB for 3-channel images, 8-bit grayscale for 1-channel.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, c) = img.data().dim();
    match c {
        3 => {
            let buf = RgbImage::from_raw(w as u32, h as u32, rgb_bytes(img))
                .ok_or_else(|| Error::Internal("rgb buffer size mismatch".into()))?;
            buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        }
        1 => {
            let mut bytes = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    bytes.push(to_u8(img.data()[[y, x, 0]]));
                }
            }
            let buf = GrayImage::from_raw(w as u32, h as u32, bytes)
                .ok_or_else(|| Error::Internal("gray buffer size mismatch".into()))?;
            buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        }
        _ => return Err(Error::invalid(format!("cannot save {c}-channel image"))),
    }
    Ok(())
}

/// In-memory JPEG encode/decode at `quality`, both directions via the pure-Rust
/// codec, so the result is bit-stable for a fixed input.
pub(super) fn jpeg_roundtrip(img: &Image, quality: u8) -> Result<Image> {
    let (h, w, _) = img.data().dim();
    let mut encoded = Vec::new();
    let encoder = JpegEncoder::new_with_quality(&mut encoded, quality);
    let rgb = RgbImage::from_raw(w as u32, h as u32, rgb_bytes(img))
        .ok_or_else(|| Error::Internal("rgb buffer size mismatch".into()))?;
    encoder.write_image(&rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;

    let decoder = JpegDecoder::new(Cursor::new(encoded))?;
    let (dw, dh) = decoder.dimensions();
    if (dw as usize, dh as usize) != (w, h) {
        return Err(Error::Internal("jpeg roundtrip changed dimensions".into()));
    }
    let decoded = DynamicImage::from_decoder(decoder)?.to_rgb8();
    Image::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        decoded.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_for_u8_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        // Values on the u8/255 grid survive the roundtrip bit-exactly.
        let img = Image::from_fn(6, 5, 3, |y, x, c| ((y * 31 + x * 7 + c * 3) % 256) as f64 / 255.0)
            .unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn gray_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let img = Image::from_fn(4, 4, 1, |y, x, _| ((y * 16 + x) % 256) as f64 / 255.0).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(img, back);
    }
}
