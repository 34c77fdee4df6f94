//! Image decode/encode with path-context errors.
//!
//! LDR frames come in as 8-bit PNG/JPEG and are mapped to `[0,1]` as
//! `k/255`. HDR frames travel as float images: OpenEXR (32-bit float) or
//! Radiance RGBE, selected by file extension on write. Tensors are
//! channel-planar `[3,h,w]`; image buffers are interleaved row-major, so
//! every call converts between the two layouts.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::hdr::HdrEncoder;
use image::codecs::openexr::OpenExrEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn codec_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Codec { path: path.to_path_buf(), msg: other.to_string() },
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn open(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .with_guessed_format()
        .map_err(|e| io_err(path, e))?
        .decode()
        .map_err(|e| codec_err(path, e))
}

fn require_rgb(t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 3 || t.c() != 3 {
        return Err(Error::InvalidInput(format!(
            "expected a [3,h,w] frame, got {:?}",
            t.shape()
        )));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("frame contains non-finite values".into()));
    }
    Ok((t.h(), t.w()))
}

/// Interleaved row-major RGB → channel-planar `[3,h,w]`.
fn planar_from_interleaved(w: usize, h: usize, px: impl Iterator<Item = f64>) -> Tensor {
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for (i, v) in px.enumerate() {
        let (pix, c) = (i / 3, i % 3);
        data[c * hw + pix] = v;
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn interleaved_f32(t: &Tensor) -> Vec<f32> {
    let hw = t.h() * t.w();
    let d = t.data();
    let mut out = Vec::with_capacity(3 * hw);
    for pix in 0..hw {
        for c in 0..3 {
            out.push(d[c * hw + pix] as f32);
        }
    }
    out
}

/// Decode an 8-bit LDR image to `[3,h,w]` values in `{k/255}`.
pub fn read_ldr_frame(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(planar_from_interleaved(
        w as usize,
        h as usize,
        img.as_raw().iter().map(|&k| k as f64 / 255.0),
    ))
}

/// Decode a float HDR image (EXR or Radiance) to `[3,h,w]`.
pub fn read_hdr_frame(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb32f();
    let (w, h) = img.dimensions();
    Ok(planar_from_interleaved(
        w as usize,
        h as usize,
        img.as_raw().iter().map(|&v| v as f64),
    ))
}

/// Encode a `[3,h,w]` float frame, format chosen by extension:
/// `.exr` → 32-bit float OpenEXR, `.hdr` → Radiance RGBE.
pub fn write_hdr_frame(t: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = require_rgb(t)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let data = interleaved_f32(t);
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let writer = BufWriter::new(file);
    match ext.as_str() {
        "exr" => {
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in &data {
                bytes.extend_from_slice(&v.to_ne_bytes());
            }
            OpenExrEncoder::new(writer)
                .write_image(&bytes, w as u32, h as u32, ExtendedColorType::Rgb32F)
                .map_err(|e| codec_err(path, e))
        }
        "hdr" => {
            let pixels: Vec<Rgb<f32>> =
                data.chunks_exact(3).map(|p| Rgb([p[0], p[1], p[2]])).collect();
            HdrEncoder::new(writer)
                .encode(&pixels, w, h)
                .map_err(|e| codec_err(path, e))
        }
        other => Err(Error::Config(format!(
            "unsupported HDR output extension {other:?} for {} (use .exr or .hdr)",
            path.display()
        ))),
    }
}

/// Quantize a `[3,h,w]` frame in `[0,1]` to 8 bits and write a PNG.
pub fn write_ldr_png(t: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = require_rgb(t)?;
    let hw = h * w;
    let d = t.data();
    let mut raw = Vec::with_capacity(3 * hw);
    for pix in 0..hw {
        for c in 0..3 {
            raw.push((d[c * hw + pix].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| codec_err(path, e))
}

/// Read a `BufReader` convenience used by checkpoint-sized streams elsewhere;
/// kept here so all file-opening error context lives in one module.
pub fn open_buffered(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| io_err(path, e))?))
}
