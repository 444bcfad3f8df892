//! File helpers: image and mask PNG I/O, atomic writes and content hashing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raster::BinaryMask;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("png encoding error on {path}: {message}")]
    Png { path: String, message: String },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, IoError> {
    let img = image::open(path).map_err(|source| IoError::Image {
        path: path.display().to_string(),
        source,
    })?;
    Ok(img.into_rgb8())
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

/// PNG with fast deflate: pipeline images are large and written often.
pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>, image::ImageError> {
    let mut buf = Vec::new();
    let enc = PngEncoder::new_with_quality(&mut buf, CompressionType::Fast, FilterType::Adaptive);
    enc.write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)?;
    Ok(buf)
}

pub fn save_png_rgb(path: &Path, img: &RgbImage) -> Result<(), IoError> {
    let bytes = encode_png_rgb(img).map_err(|source| IoError::Image {
        path: path.display().to_string(),
        source,
    })?;
    write_atomic(path, &bytes)
}

/// Encodes a mask as a 1-bit grayscale PNG.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>, png::EncodingError> {
    let (w, h) = mask.dims();
    let stride = (w as usize).div_ceil(8);
    let mut packed = vec![0u8; stride * h as usize];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                packed[y as usize * stride + x as usize / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), w, h);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&packed)?;
        writer.finish()?;
    }
    Ok(out)
}

pub fn save_mask_png(path: &Path, mask: &BinaryMask) -> Result<(), IoError> {
    let bytes = encode_mask_png(mask).map_err(|e| IoError::Png {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_atomic(path, &bytes)
}

/// Decodes any grayscale/colour PNG into a mask; a pixel is set when its
/// luma is at least half intensity.
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask, image::ImageError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.into_luma8();
    let (w, h) = img.dimensions();
    let raw: Vec<u8> = img.as_raw().iter().map(|&v| u8::from(v >= 128)).collect();
    Ok(BinaryMask::from_raw(w, h, &raw))
}

pub fn load_mask_png(path: &Path) -> Result<BinaryMask, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_mask_png(&bytes).map_err(|source| IoError::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bit_mask_png_round_trip() {
        let m = BinaryMask::from_fn(13, 7, |x, y| (x * 3 + y) % 5 == 0);
        let bytes = encode_mask_png(&m).unwrap();
        assert_eq!(decode_mask_png(&bytes).unwrap(), m);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
