//! Composite samples, exit labels, image files, annotations and synthetic
//! desk-scale data.

mod annotations;
pub mod image_io;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::harmonet::{SCORED_STAGES, STAGES};
use crate::tensor::Tensor;

pub use annotations::{
    aggregate_votes, load_annotations, parse_annotations, parse_votes, AnnotationRecord, VoteRecord,
};
pub use image_io::{
    decode_image, decode_mask, encode_image, encode_mask, load_image, load_mask, save_image, save_mask,
};
pub use synth::{painterly_background, synth_dataset, synth_sample, ShapeKind};

pub const MIN_FG_RATIO: f64 = 0.05;
pub const MAX_FG_RATIO: f64 = 0.3;
pub const DEFAULT_RETRIES: usize = 64;

/// One harmonization problem: a composite, its background and the
/// foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeSample {
    pub id: String,
    pub composite: Tensor,
    pub background: Tensor,
    pub fg_mask: Tensor,
}

impl CompositeSample {
    pub fn bg_mask(&self) -> Tensor {
        self.fg_mask.map(|m| 1.0 - m)
    }

    pub fn size(&self) -> usize {
        self.composite.shape()[2]
    }

    pub fn fg_ratio(&self) -> f64 {
        fg_ratio(&self.fg_mask)
    }
}

pub fn fg_ratio(mask: &Tensor) -> f64 {
    let on = mask.data().iter().filter(|&&m| m != 0.0).count();
    on as f64 / mask.len().max(1) as f64
}

/// Where a foreground lands: top-left corner in the frame and a nearest
/// neighbour scale factor applied to the foreground first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub top: usize,
    pub left: usize,
    pub scale: f64,
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            top: 0,
            left: 0,
            scale: 1.0,
        }
    }
}

fn resize_nearest(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, sh, sw) = t.dims4()?;
    let mut out = Tensor::zeros(vec![n, c, h, w]);
    let src = t.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            let sy = (y * sh) / h;
            for x in 0..w {
                let sx = (x * sw) / w;
                dst[(p * h + y) * w + x] = src[(p * sh + sy) * sw + sx];
            }
        }
    }
    Ok(out)
}

/// Paste `foreground` (masked by `fg_mask`) onto `background`.
/// `I^c = M^f * fg + (1 - M^f) * I^b`, evaluated as a select so the
/// background is bit-identical outside the mask.
pub fn compose(
    foreground: &Tensor,
    fg_mask: &Tensor,
    background: &Tensor,
    placement: Placement,
) -> Result<CompositeSample> {
    let (n, c, h, w) = background.dims4()?;
    if n != 1 || c != 3 {
        return shape_err(format!("background must be [1,3,H,W], got {:?}", background.shape()));
    }
    let (fn_, fc, fh, fw) = foreground.dims4()?;
    if fn_ != 1 || fc != 3 || fg_mask.shape() != [1, 1, fh, fw] {
        return shape_err(format!(
            "foreground {:?} and mask {:?} must be [1,3,h,w] and [1,1,h,w]",
            foreground.shape(),
            fg_mask.shape()
        ));
    }
    if !fg_mask.is_binary() {
        return Err(Error::InvalidArgument("foreground mask must be binary".into()));
    }
    if !(placement.scale > 0.0 && placement.scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "placement scale {} must be positive",
            placement.scale
        )));
    }
    let sh = ((fh as f64) * placement.scale).round().max(1.0) as usize;
    let sw = ((fw as f64) * placement.scale).round().max(1.0) as usize;
    if placement.top + sh > h || placement.left + sw > w {
        return Err(Error::InvalidArgument(format!(
            "foreground {sh}x{sw} at ({}, {}) leaves the {h}x{w} frame",
            placement.top, placement.left
        )));
    }
    let (fg, m) = if (sh, sw) == (fh, fw) {
        (foreground.clone(), fg_mask.clone())
    } else {
        (resize_nearest(foreground, sh, sw)?, resize_nearest(fg_mask, sh, sw)?)
    };
    let mut composite = background.clone();
    let mut mask = Tensor::zeros(vec![1, 1, h, w]);
    for y in 0..sh {
        for x in 0..sw {
            if m.data()[y * sw + x] == 0.0 {
                continue;
            }
            let (ty, tx) = (placement.top + y, placement.left + x);
            mask.data_mut()[ty * w + tx] = 1.0;
            for ch in 0..3 {
                composite.data_mut()[(ch * h + ty) * w + tx] = fg.data()[(ch * sh + y) * sw + x];
            }
        }
    }
    Ok(CompositeSample {
        id: String::new(),
        composite,
        background: background.clone(),
        fg_mask: mask,
    })
}

/// Compose with a ratio check: the foreground must cover
/// `[MIN_FG_RATIO, MAX_FG_RATIO]` of the frame.
pub fn compose_checked(
    foreground: &Tensor,
    fg_mask: &Tensor,
    background: &Tensor,
    placement: Placement,
) -> Result<CompositeSample> {
    let s = compose(foreground, fg_mask, background, placement)?;
    let r = s.fg_ratio();
    if !(MIN_FG_RATIO..=MAX_FG_RATIO).contains(&r) {
        return Err(Error::InvalidArgument(format!(
            "foreground ratio {r:.5} outside [{MIN_FG_RATIO}, {MAX_FG_RATIO}]"
        )));
    }
    Ok(s)
}

/// Random placements (scale and offset) until the ratio lands in range or
/// the retry budget runs out.
pub fn compose_random<R: Rng>(
    foreground: &Tensor,
    fg_mask: &Tensor,
    background: &Tensor,
    rng: &mut R,
    retries: usize,
) -> Result<CompositeSample> {
    let (_, _, h, w) = background.dims4()?;
    let (_, _, fh, fw) = foreground.dims4()?;
    let on = fg_ratio(fg_mask) * (fh * fw) as f64;
    for _ in 0..retries {
        let target = rng.random_range(MIN_FG_RATIO..=MAX_FG_RATIO);
        let mut scale = if on > 0.0 {
            (target * (h * w) as f64 / on).sqrt()
        } else {
            1.0
        };
        let max_scale = (h as f64 / fh as f64).min(w as f64 / fw as f64);
        scale = scale.min(max_scale);
        let sh = ((fh as f64) * scale).round().max(1.0) as usize;
        let sw = ((fw as f64) * scale).round().max(1.0) as usize;
        if sh > h || sw > w {
            continue;
        }
        let top = rng.random_range(0..=h - sh);
        let left = rng.random_range(0..=w - sw);
        if let Ok(s) = compose_checked(foreground, fg_mask, background, Placement { top, left, scale }) {
            return Ok(s);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no placement reached a foreground ratio in [{MIN_FG_RATIO}, {MAX_FG_RATIO}] after {retries} tries"
    )))
}

/// Exit labels `y_1..y_3`: `y_k = 0` for `k < exit_stage`, else 1.
pub fn derive_labels(exit_stage: usize) -> Result<[f64; SCORED_STAGES]> {
    if !(1..=STAGES).contains(&exit_stage) {
        return Err(Error::InvalidArgument(format!("exit stage {exit_stage} outside 1..=4")));
    }
    let mut y = [0.0; SCORED_STAGES];
    for (k, v) in y.iter_mut().enumerate() {
        *v = if k + 1 < exit_stage { 0.0 } else { 1.0 };
    }
    Ok(y)
}

/// Dataset manifest entry; paths are relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub composite: PathBuf,
    pub mask: PathBuf,
    pub background: PathBuf,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(entries)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load every sample a manifest points to.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<CompositeSample>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let entries = read_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let composite = load_image(base.join(&e.composite))?;
        let background = load_image(base.join(&e.background))?;
        let fg_mask = load_mask(base.join(&e.mask))?;
        if composite.shape() != background.shape() || fg_mask.shape()[2..] != composite.shape()[2..] {
            return shape_err(format!(
                "sample `{}`: composite, background and mask extents differ",
                e.id
            ));
        }
        out.push(CompositeSample {
            id: e.id,
            composite,
            background,
            fg_mask,
        });
    }
    Ok(out)
}

/// Write images, masks and `manifest.json` into `dir`.
pub fn save_dataset(samples: &[CompositeSample], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let e = ManifestEntry {
            id: s.id.clone(),
            composite: format!("{}_composite.ppm", s.id).into(),
            mask: format!("{}_mask.pgm", s.id).into(),
            background: format!("{}_background.ppm", s.id).into(),
        };
        save_image(&s.composite, dir.join(&e.composite))?;
        save_mask(&s.fg_mask, dir.join(&e.mask))?;
        save_image(&s.background, dir.join(&e.background))?;
        entries.push(e);
    }
    let path = dir.join("manifest.json");
    write_manifest(&entries, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_patterns() {
        assert_eq!(derive_labels(1).unwrap(), [1.0, 1.0, 1.0]);
        assert_eq!(derive_labels(2).unwrap(), [0.0, 1.0, 1.0]);
        assert_eq!(derive_labels(3).unwrap(), [0.0, 0.0, 1.0]);
        assert_eq!(derive_labels(4).unwrap(), [0.0, 0.0, 0.0]);
        assert!(derive_labels(0).is_err());
        assert!(derive_labels(5).is_err());
    }

    #[test]
    fn square_paste() {
        let bg = Tensor::zeros(vec![1, 3, 128, 128]);
        let fg = Tensor::full(vec![1, 3, 32, 32], 1.0);
        let m = Tensor::full(vec![1, 1, 32, 32], 1.0);
        let p = Placement {
            top: 10,
            left: 20,
            scale: 1.0,
        };
        let s = compose_checked(&fg, &m, &bg, p).unwrap();
        assert_eq!(s.fg_ratio(), 0.0625);
        for ch in 0..3 {
            for y in 0..128 {
                for x in 0..128 {
                    let inside = (10..42).contains(&y) && (20..52).contains(&x);
                    let v = s.composite.data()[(ch * 128 + y) * 128 + x];
                    assert_eq!(v, if inside { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn tiny_square_rejected() {
        let bg = Tensor::zeros(vec![1, 3, 256, 256]);
        let fg = Tensor::full(vec![1, 3, 8, 8], 1.0);
        let m = Tensor::full(vec![1, 1, 8, 8], 1.0);
        assert!(compose_checked(&fg, &m, &bg, Placement::default()).is_err());
        let out = compose(
            &fg,
            &m,
            &bg,
            Placement {
                top: 250,
                left: 0,
                scale: 1.0,
            },
        );
        assert!(out.is_err());
    }
}
