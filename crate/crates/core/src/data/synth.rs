//! Procedural desk-scale data: value-noise "paintings" as backgrounds and
//! flat or gradient-filled shapes as photographic foregrounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{compose_random, CompositeSample, DEFAULT_RETRIES};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// One octave of value noise on a `cells x cells` lattice, sampled at
/// `size x size`.
fn value_noise<R: Rng>(rng: &mut R, size: usize, cells: usize) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random::<f32>()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f32 * cells as f32 / size as f32;
        let (iy, ty) = (fy as usize, smooth(fy.fract()));
        for x in 0..size {
            let fx = x as f32 * cells as f32 / size as f32;
            let (ix, tx) = (fx as usize, smooth(fx.fract()));
            let at = |j: usize, i: usize| lattice[j * n + i];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn fractal_noise<R: Rng>(rng: &mut R, size: usize) -> Vec<f32> {
    let mut acc = vec![0.0f32; size * size];
    let mut amp = 1.0f32;
    let mut total = 0.0f32;
    let mut cells = 2;
    while cells <= size.max(2) && cells <= 32 {
        for (a, v) in acc.iter_mut().zip(value_noise(rng, size, cells)) {
            *a += amp * v;
        }
        total += amp;
        amp *= 0.5;
        cells *= 2;
    }
    acc.iter_mut().for_each(|a| *a /= total);
    acc
}

/// A random-palette multi-octave value-noise image `[1, 3, size, size]`.
pub fn painterly_background<R: Rng>(rng: &mut R, size: usize) -> Tensor {
    let palette: Vec<[f32; 3]> = (0..4)
        .map(|_| [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()])
        .collect();
    let tone = fractal_noise(rng, size);
    let grain = fractal_noise(rng, size);
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let t = tone[i].clamp(0.0, 1.0) * (palette.len() - 1) as f32;
        let j = (t as usize).min(palette.len() - 2);
        let f = t - j as f32;
        for c in 0..3 {
            let base = palette[j][c] * (1.0 - f) + palette[j + 1][c] * f;
            data[c * plane + i] = (base + 0.15 * (grain[i] - 0.5)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![1, 3, size, size], data).expect("sized")
}

/// A shape foreground on a `side x side` canvas with its mask.
fn shape_foreground<R: Rng>(rng: &mut R, side: usize) -> (Tensor, Tensor, ShapeKind) {
    let kind = if rng.random_bool(0.5) {
        ShapeKind::Rectangle
    } else {
        ShapeKind::Ellipse
    };
    let c0 = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let c1 = if rng.random_bool(0.5) {
        c0
    } else {
        [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()]
    };
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let aspect = rng.random_range(0.5f32..=1.0);
    let (hw, hh) = if rng.random_bool(0.5) {
        (1.0, aspect)
    } else {
        (aspect, 1.0)
    };
    let plane = side * side;
    let mut img = vec![0.0f32; 3 * plane];
    let mut mask = vec![0.0f32; plane];
    let half = side as f32 / 2.0;
    for y in 0..side {
        for x in 0..side {
            let u = (x as f32 + 0.5 - half) / half;
            let v = (y as f32 + 0.5 - half) / half;
            let inside = match kind {
                ShapeKind::Rectangle => u.abs() <= hw && v.abs() <= hh,
                ShapeKind::Ellipse => (u / hw).powi(2) + (v / hh).powi(2) <= 1.0,
            };
            if !inside {
                continue;
            }
            let i = y * side + x;
            mask[i] = 1.0;
            let t = ((u * dx + v * dy) * 0.5 + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * plane + i] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    (
        Tensor::new(vec![1, 3, side, side], img).expect("sized"),
        Tensor::new(vec![1, 1, side, side], mask).expect("sized"),
        kind,
    )
}

/// Sample `index` of the dataset generated from `seed`; independent of
/// every other index.
pub fn synth_sample(size: usize, seed: u64, index: usize) -> Result<CompositeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let background = painterly_background(&mut rng, size);
    let (fg, mask, _) = shape_foreground(&mut rng, (size / 2).max(4));
    let mut s = compose_random(&fg, &mask, &background, &mut rng, DEFAULT_RETRIES)?;
    s.id = format!("s{index:05}");
    Ok(s)
}

/// `n` synthetic composites of `size x size`; deterministic in `seed`.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<CompositeSample>> {
    if size == 0 || !size.is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!(
            "size {size} must be a positive multiple of 8"
        )));
    }
    par::map_range(n, |i| synth_sample(size, seed, i)).into_iter().collect()
}
