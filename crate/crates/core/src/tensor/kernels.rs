//! Forward and backward numeric kernels over raw row-major buffers.
//!
//! Convolution is computed directly (no im2col): for every output plane the
//! kernel taps are applied as row-wise axpy updates. Each output element is
//! accumulated over `(c_in, ky, kx)` in that order with the bias added last,
//! so results are independent of the thread count.

use super::Scalar;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Output columns `x` whose input column `x*stride + k - padding` lies in
    /// `[0, in_len)`.
    fn valid_range(in_len: usize, out_len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
        let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
        if in_len + padding <= k {
            return (0, 0);
        }
        let hi = ((in_len - 1 + padding - k) / stride + 1).min(out_len);
        (lo.min(hi), hi)
    }
}

pub fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], bias: Option<&[T]>, g: ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let mut out = vec![T::zero(); g.n * g.c_out * plane];
    let ksz = g.c_in * g.kh * g.kw;
    par::for_each_chunk(&mut out, plane, |idx, dst| {
        let (b, o) = (idx / g.c_out, idx % g.c_out);
        let wrow = &weight[o * ksz..(o + 1) * ksz];
        for c in 0..g.c_in {
            let src = &input[(b * g.c_in + c) * g.h * g.w..(b * g.c_in + c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (ylo, yhi) = ConvGeom::valid_range(g.h, ho, ky, g.stride, g.padding);
                for kx in 0..g.kw {
                    let wv = wrow[(c * g.kh + ky) * g.kw + kx];
                    let (xlo, xhi) = ConvGeom::valid_range(g.w, wo, kx, g.stride, g.padding);
                    for y in ylo..yhi {
                        let iy = y * g.stride + ky - g.padding;
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[y * wo..(y + 1) * wo];
                        if g.stride == 1 {
                            let off = xlo + kx - g.padding;
                            for (d, &sv) in drow[xlo..xhi].iter_mut().zip(&srow[off..off + (xhi - xlo)]) {
                                *d += wv * sv;
                            }
                        } else {
                            for x in xlo..xhi {
                                drow[x] += wv * srow[x * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            let bv = bias[o];
            for d in dst.iter_mut() {
                *d += bv;
            }
        }
    });
    out
}

pub fn conv2d_backward_input<T: Scalar>(grad_out: &[T], weight: &[T], g: ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane_in = g.h * g.w;
    let ksz = g.c_in * g.kh * g.kw;
    let mut din = vec![T::zero(); g.n * g.c_in * plane_in];
    par::for_each_chunk(&mut din, plane_in, |idx, dst| {
        let (b, c) = (idx / g.c_in, idx % g.c_in);
        for o in 0..g.c_out {
            let gplane = &grad_out[(b * g.c_out + o) * ho * wo..(b * g.c_out + o + 1) * ho * wo];
            for ky in 0..g.kh {
                let (ylo, yhi) = ConvGeom::valid_range(g.h, ho, ky, g.stride, g.padding);
                for kx in 0..g.kw {
                    let wv = weight[o * ksz + (c * g.kh + ky) * g.kw + kx];
                    let (xlo, xhi) = ConvGeom::valid_range(g.w, wo, kx, g.stride, g.padding);
                    for y in ylo..yhi {
                        let iy = y * g.stride + ky - g.padding;
                        let grow = &gplane[y * wo..(y + 1) * wo];
                        let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let off = xlo + kx - g.padding;
                            for (d, &gv) in drow[off..off + (xhi - xlo)].iter_mut().zip(&grow[xlo..xhi]) {
                                *d += wv * gv;
                            }
                        } else {
                            for x in xlo..xhi {
                                drow[x * g.stride + kx - g.padding] += wv * grow[x];
                            }
                        }
                    }
                }
            }
        }
    });
    din
}

pub fn conv2d_backward_weight<T: Scalar>(grad_out: &[T], input: &[T], g: ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ksz = g.c_in * g.kh * g.kw;
    let mut dw = vec![T::zero(); g.c_out * ksz];
    par::for_each_chunk(&mut dw, ksz, |o, dst| {
        for b in 0..g.n {
            let gplane = &grad_out[(b * g.c_out + o) * ho * wo..(b * g.c_out + o + 1) * ho * wo];
            for c in 0..g.c_in {
                let src = &input[(b * g.c_in + c) * g.h * g.w..(b * g.c_in + c + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (ylo, yhi) = ConvGeom::valid_range(g.h, ho, ky, g.stride, g.padding);
                    for kx in 0..g.kw {
                        let (xlo, xhi) = ConvGeom::valid_range(g.w, wo, kx, g.stride, g.padding);
                        let mut acc = T::zero();
                        for y in ylo..yhi {
                            let iy = y * g.stride + ky - g.padding;
                            let srow = &src[iy * g.w..(iy + 1) * g.w];
                            let grow = &gplane[y * wo..(y + 1) * wo];
                            if g.stride == 1 {
                                let off = xlo + kx - g.padding;
                                for (&gv, &sv) in grow[xlo..xhi].iter().zip(&srow[off..off + (xhi - xlo)]) {
                                    acc += gv * sv;
                                }
                            } else {
                                for x in xlo..xhi {
                                    acc += grow[x] * srow[x * g.stride + kx - g.padding];
                                }
                            }
                        }
                        dst[(c * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
    dw
}

/// Per-channel sum over batch and spatial positions.
pub fn conv2d_backward_bias<T: Scalar>(grad_out: &[T], n: usize, c_out: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c_out];
    for b in 0..n {
        for (o, acc) in db.iter_mut().enumerate() {
            for &v in &grad_out[(b * c_out + o) * plane..(b * c_out + o + 1) * plane] {
                *acc += v;
            }
        }
    }
    db
}

/// 2x2 max pooling. Returns the output and, per output element, the flat
/// input index of the selected maximum (ties resolve to the first element in
/// row-major scan).
pub fn maxpool2_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..ho {
            for x in 0..wo {
                let cands = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if input[c] > input[best] || input[c].is_nan() {
                        best = c;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn avgpool2_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..ho {
            for x in 0..wo {
                let i = base + 2 * y * w + 2 * x;
                out.push((input[i] + input[i + 1] + input[i + w] + input[i + w + 1]) * quarter);
            }
        }
    }
    out
}

pub fn avgpool2_backward<T: Scalar>(grad_out: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut din = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..ho {
            for x in 0..wo {
                let g = grad_out[(p * ho + y) * wo + x] * quarter;
                let i = p * h * w + 2 * y * w + 2 * x;
                din[i] += g;
                din[i + 1] += g;
                din[i + w] += g;
                din[i + w + 1] += g;
            }
        }
    }
    din
}

pub fn upsample_nearest_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize, scale: usize) -> Vec<T> {
    let (ho, wo) = (h * scale, w * scale);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        for y in 0..ho {
            let row = &input[(p * h + y / scale) * w..(p * h + y / scale + 1) * w];
            for x in 0..wo {
                out.push(row[x / scale]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(grad_out: &[T], planes: usize, h: usize, w: usize, scale: usize) -> Vec<T> {
    let (ho, wo) = (h * scale, w * scale);
    let mut din = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..ho {
            for x in 0..wo {
                din[(p * h + y / scale) * w + x / scale] += grad_out[(p * ho + y) * wo + x];
            }
        }
    }
    din
}

/// Source taps for one axis of align-corners-false bilinear resampling:
/// `(i0, i1, w0, w1)` per output coordinate.
pub fn bilinear_taps(in_len: usize, scale: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..in_len * scale)
        .map(|d| {
            let src = ((d as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

pub fn upsample_bilinear_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize, scale: usize) -> Vec<T> {
    if scale == 1 {
        return input.to_vec();
    }
    let ty = bilinear_taps(h, scale);
    let tx = bilinear_taps(w, scale);
    let mut out = Vec::with_capacity(planes * h * w * scale * scale);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for &(y0, y1, wy0, wy1) in &ty {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for &(x0, x1, wx0, wx1) in &tx {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                let top = wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1];
                let bot = wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1];
                out.push(wy0 * top + wy1 * bot);
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    scale: usize,
) -> Vec<T> {
    if scale == 1 {
        return grad_out.to_vec();
    }
    let ty = bilinear_taps(h, scale);
    let tx = bilinear_taps(w, scale);
    let wo = w * scale;
    let mut din = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut din[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                let g = grad_out[(p * h * scale + oy) * wo + ox];
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    din
}

/// `y[n, o] = sum_i x[n, i] * w[o, i] + b[o]`.
pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, n: usize, i: usize, o: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * o];
    for r in 0..n {
        let xr = &x[r * i..(r + 1) * i];
        for c in 0..o {
            let mut acc = T::zero();
            for (&a, &bv) in xr.iter().zip(&w[c * i..(c + 1) * i]) {
                acc += a * bv;
            }
            if let Some(b) = b {
                acc += b[c];
            }
            y[r * o + c] = acc;
        }
    }
    y
}
