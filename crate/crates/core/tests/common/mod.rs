#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use propih_core::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[lo, hi)`, rounded to f32 so both precisions see the
/// same inputs.
pub fn uniform<T: Scalar>(shape: &[usize], r: &mut impl Rng, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = r.random_range(lo..hi) as f32;
        T::from_f64_lossy(v as f64)
    })
}

/// Binary `[1,1,h,w]` mask with at least `min_on` ones and at least one zero.
pub fn mask<T: Scalar>(h: usize, w: usize, r: &mut impl Rng, p: f64, min_on: usize) -> Tensor<T> {
    loop {
        let m: Tensor<T> = Tensor::from_fn(
            vec![1, 1, h, w],
            |_| {
                if r.random_bool(p) {
                    T::one()
                } else {
                    T::zero()
                }
            },
        );
        let on = m.data().iter().filter(|&&v| v == T::one()).count();
        if on >= min_on && on < h * w {
            return m;
        }
    }
}

/// Foreground rectangle mask.
pub fn rect_mask(size: usize, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(vec![1, 1, size, size], |i| {
        let (y, x) = (i / size, i % size);
        if y >= top && y < top + h && x >= left && x < left + w {
            1.0
        } else {
            0.0
        }
    })
}
