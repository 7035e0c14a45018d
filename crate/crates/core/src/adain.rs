//! Masked per-channel statistics and AdaIN transfer of background statistics
//! onto the foreground region.
//!
//! Statistics are taken over the masked positions only (population standard
//! deviation, divisor = count). [`StatsMode::ZeroFilled`] instead measures the
//! mask-multiplied map over every position, for compatibility with the
//! zero-filled reading of `mu(F * M)`.

use serde::{Deserialize, Serialize};

use crate::encoder::StageFeatures;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    #[default]
    Masked,
    ZeroFilled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedStats<T: Scalar = f32> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
    /// Number of contributing spatial positions (the full plane in
    /// zero-filled mode).
    pub count: usize,
}

impl<T: Scalar> MaskedStats<T> {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Per-position weight `w_i` and membership for one region. Masked mode uses
/// positions with `mask == on` at weight 1; zero-filled mode uses every
/// position with weight `[mask == on]`.
#[inline]
fn region_weight<T: Scalar>(m: T, fg: bool, mode: StatsMode) -> Option<T> {
    let on = if fg { m == T::one() } else { m == T::zero() };
    match mode {
        StatsMode::Masked => on.then_some(T::one()),
        StatsMode::ZeroFilled => Some(if on { T::one() } else { T::zero() }),
    }
}

/// Region statistics for a single channel plane.
pub(crate) fn plane_stats<T: Scalar>(x: &[T], mask: &[T], fg: bool, mode: StatsMode) -> (T, T, usize) {
    let mut sum = T::zero();
    let mut n = 0usize;
    let mut first = None;
    let mut constant = true;
    for (&v, &m) in x.iter().zip(mask) {
        if let Some(w) = region_weight(m, fg, mode) {
            let wv = w * v;
            sum += wv;
            n += 1;
            constant &= *first.get_or_insert(wv) == wv;
        }
    }
    if n == 0 {
        return (T::zero(), T::zero(), 0);
    }
    // A constant region gets exact statistics; the rounded mean would leave
    // a tiny spurious variance whose square root has no usable gradient.
    if constant {
        return (first.unwrap(), T::zero(), n);
    }
    let nf = T::from_usize(n).unwrap();
    let mean = sum / nf;
    let mut ss = T::zero();
    for (&v, &m) in x.iter().zip(mask) {
        if let Some(w) = region_weight(m, fg, mode) {
            let d = w * v - mean;
            ss += d * d;
        }
    }
    (mean, (ss / nf).sqrt(), n)
}

/// Accumulate into `dx` the gradient of a region's (mean, std) given upstream
/// gradients `g_mean`, `g_std`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn plane_stats_backward<T: Scalar>(
    x: &[T],
    mask: &[T],
    fg: bool,
    mode: StatsMode,
    (mean, std, n): (T, T, usize),
    g_mean: T,
    g_std: T,
    dx: &mut [T],
) {
    if n == 0 {
        return;
    }
    let nf = T::from_usize(n).unwrap();
    let gm = g_mean / nf;
    let gs = if std > T::zero() { g_std / (nf * std) } else { T::zero() };
    for ((&v, &m), d) in x.iter().zip(mask).zip(dx.iter_mut()) {
        if let Some(w) = region_weight(m, fg, mode) {
            *d += w * (gm + gs * (w * v - mean));
        }
    }
}

fn check_feat_mask<T: Scalar>(feat: &Tensor<T>, mask: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, c, h, w) = feat.dims4()?;
    let (mn, mc, mh, mw) = mask.dims4()?;
    if n != 1 || mn != 1 || mc != 1 || mh != h || mw != w {
        return shape_err(format!(
            "feature {:?} and mask {:?} must be [1,C,H,W] and [1,1,H,W]",
            feat.shape(),
            mask.shape()
        ));
    }
    if !mask.is_binary() {
        return Err(Error::InvalidArgument("mask must be binary".into()));
    }
    Ok((c, h * w))
}

/// Per-channel statistics of `feat` over positions where `mask == 1`.
pub fn masked_stats<T: Scalar>(feat: &Tensor<T>, mask: &Tensor<T>) -> Result<MaskedStats<T>> {
    masked_stats_with(feat, mask, StatsMode::Masked)
}

pub fn masked_stats_with<T: Scalar>(feat: &Tensor<T>, mask: &Tensor<T>, mode: StatsMode) -> Result<MaskedStats<T>> {
    let (c, hw) = check_feat_mask(feat, mask)?;
    let mut out = MaskedStats {
        mean: Vec::with_capacity(c),
        std: Vec::with_capacity(c),
        count: 0,
    };
    for ch in 0..c {
        let (m, s, n) = plane_stats(&feat.data()[ch * hw..(ch + 1) * hw], mask.data(), true, mode);
        out.mean.push(m);
        out.std.push(s);
        out.count = n;
    }
    Ok(out)
}

/// Outcome of transforming one plane: the region statistics used, needed
/// again for the backward pass.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AdainPlane<T> {
    pub fg: (T, T, usize),
    pub bg: (T, T, usize),
}

pub(crate) fn adain_plane_forward<T: Scalar>(
    x: &[T],
    mask: &[T],
    eps: T,
    mode: StatsMode,
    out: &mut [T],
) -> AdainPlane<T> {
    let fg = plane_stats(x, mask, true, mode);
    let bg = plane_stats(x, mask, false, mode);
    out.copy_from_slice(x);
    if fg.2 > 0 && bg.2 > 0 {
        let denom = fg.1 + eps;
        for ((o, &v), &m) in out.iter_mut().zip(x).zip(mask) {
            if m == T::one() {
                *o = bg.1 * (v - fg.0) / denom + bg.0;
            }
        }
    }
    AdainPlane { fg, bg }
}

pub(crate) fn adain_plane_backward<T: Scalar>(
    x: &[T],
    mask: &[T],
    eps: T,
    mode: StatsMode,
    st: AdainPlane<T>,
    g: &[T],
    dx: &mut [T],
) {
    if st.fg.2 == 0 || st.bg.2 == 0 {
        for (d, &gv) in dx.iter_mut().zip(g) {
            *d += gv;
        }
        return;
    }
    let denom = st.fg.1 + eps;
    let a = st.bg.1 / denom;
    let mut g1 = T::zero();
    let mut g2 = T::zero();
    for ((&v, &m), (&gv, d)) in x.iter().zip(mask).zip(g.iter().zip(dx.iter_mut())) {
        if m == T::one() {
            g1 += gv;
            g2 += gv * (v - st.fg.0);
            *d += a * gv;
        } else {
            *d += gv;
        }
    }
    let g_mu_b = g1;
    let g_mu_f = -a * g1;
    let g_sd_b = g2 / denom;
    let g_sd_f = -g2 * st.bg.1 / (denom * denom);
    plane_stats_backward(x, mask, true, mode, st.fg, g_mu_f, g_sd_f, dx);
    plane_stats_backward(x, mask, false, mode, st.bg, g_mu_b, g_sd_b, dx);
}

/// Result of one AdaIN application.
#[derive(Clone, Debug)]
pub struct AdainOutput<T: Scalar = f32> {
    pub features: Tensor<T>,
    /// Set when the foreground is empty at this resolution and the transform
    /// degenerated to the identity.
    pub empty_foreground: bool,
}

/// Replace foreground statistics with background statistics per channel:
/// `sigma_b * (x - mu_f) / (sigma_f + eps) + mu_b` on foreground positions,
/// background positions copied unchanged.
pub fn adain<T: Scalar>(feat: &Tensor<T>, fg_mask: &Tensor<T>, bg_mask: &Tensor<T>, eps: T) -> Result<AdainOutput<T>> {
    adain_with(feat, fg_mask, bg_mask, eps, StatsMode::Masked)
}

pub fn adain_with<T: Scalar>(
    feat: &Tensor<T>,
    fg_mask: &Tensor<T>,
    bg_mask: &Tensor<T>,
    eps: T,
    mode: StatsMode,
) -> Result<AdainOutput<T>> {
    let (c, hw) = check_feat_mask(feat, fg_mask)?;
    if bg_mask.shape() != fg_mask.shape()
        || fg_mask
            .data()
            .iter()
            .zip(bg_mask.data())
            .any(|(&f, &b)| f + b != T::one())
    {
        return Err(Error::InvalidArgument(
            "foreground and background masks must be complementary".into(),
        ));
    }
    let fg_count = fg_mask.data().iter().filter(|&&m| m == T::one()).count();
    if fg_count == hw {
        return Err(Error::EmptyBackground { stage: 0 });
    }
    let mut out = vec![T::zero(); feat.len()];
    for ch in 0..c {
        let r = ch * hw..(ch + 1) * hw;
        adain_plane_forward(&feat.data()[r.clone()], fg_mask.data(), eps, mode, &mut out[r]);
    }
    Ok(AdainOutput {
        features: Tensor::new(feat.shape().to_vec(), out)?,
        empty_foreground: fg_count == 0,
    })
}

#[derive(Clone, Debug)]
pub struct HarmonizedFeatures<T: Scalar = f32> {
    pub stages: Vec<Tensor<T>>,
    pub warnings: Vec<String>,
}

/// AdaIN applied independently at every encoder stage.
pub fn harmonize_features<T: Scalar>(stages: &StageFeatures<T>, eps: T) -> Result<HarmonizedFeatures<T>> {
    let mut out = HarmonizedFeatures {
        stages: Vec::with_capacity(stages.features.len()),
        warnings: Vec::new(),
    };
    for (k, (feat, mask)) in stages.features.iter().zip(&stages.masks).enumerate() {
        let bg = mask.map(|m| T::one() - m);
        let r = adain(feat, mask, &bg, eps).map_err(|e| match e {
            Error::EmptyBackground { .. } => Error::EmptyBackground { stage: k + 1 },
            e => e,
        })?;
        if r.empty_foreground {
            out.warnings.push(empty_fg_warning(k + 1));
        }
        out.stages.push(r.features);
    }
    Ok(out)
}

pub(crate) fn empty_fg_warning(stage: usize) -> String {
    format!("stage {stage}: foreground vanishes at this resolution; AdaIN left features unchanged")
}
