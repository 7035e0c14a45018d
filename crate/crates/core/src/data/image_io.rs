//! Binary PPM (P6) images and PGM (P5) masks.
//!
//! Loading scales bytes to `[0, 1]`; masks are thresholded at 128. Saving
//! clamps to `[0, 1]` and quantizes with round-half-up, so a saved file
//! reloads and re-saves to identical bytes.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageDecoder};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const MASK_THRESHOLD: u8 = 128;

pub fn quantize(v: f32) -> u8 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (c * 255.0 + 0.5).floor() as u8
}

fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    let dec = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| Error::Format(format!("bad PNM header: {e}")))?;
    let (w, h) = dec.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Format("PNM image has a zero extent".into()));
    }
    DynamicImage::from_decoder(dec).map_err(|e| Error::Format(format!("bad PNM payload: {e}")))
}

/// Decode PPM bytes into a `[1, 3, H, W]` tensor.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let img = decode(bytes)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Decode PGM bytes into a binary `[1, 1, H, W]` mask.
pub fn decode_mask(bytes: &[u8]) -> Result<Tensor> {
    let img = decode(bytes)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| if b >= MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, 1, h, w], data)
}

fn encode(bytes: &[u8], w: usize, h: usize, gray: bool) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let (subtype, color) = if gray {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    } else {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    };
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .encode(bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Format(format!("PNM encode failed: {e}")))?;
    Ok(out)
}

pub fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 3 {
        return shape_err(format!("image tensor must be [1,3,H,W], got {:?}", t.shape()));
    }
    let plane = h * w;
    let d = t.data();
    let mut raw = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            raw.push(quantize(d[ch * plane + i]));
        }
    }
    encode(&raw, w, h, false)
}

pub fn encode_mask(t: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 1 {
        return shape_err(format!("mask tensor must be [1,1,H,W], got {:?}", t.shape()));
    }
    let raw: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    encode(&raw, w, h, true)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    with_path(path, decode_image(&read(path)?))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    with_path(path, decode_mask(&read(path)?))
}

pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(t)?).map_err(|e| Error::io(path, e))
}

pub fn save_mask(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(t)?).map_err(|e| Error::io(path, e))
}
