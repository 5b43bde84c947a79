//! Max pooling with first-maximum tie breaking.

use crate::error::{Error, Result};
use crate::real::Real;

/// Output extents of a pad-free max pool.
pub fn pool_extents(h: usize, w: usize, k: usize, stride: usize) -> Result<(usize, usize)> {
    let ok = |len: usize| k >= 1 && stride >= 1 && len >= k && len.is_multiple_of(stride) && (len - k).is_multiple_of(stride);
    if !ok(h) || !ok(w) {
        return Err(Error::shape(format!(
            "max pool with kernel {k}, stride {stride} requires extents divisible by the stride, got {h}x{w}"
        )));
    }
    Ok(((h - k) / stride + 1, (w - k) / stride + 1))
}

/// Returns pooled values and, per output cell, the flat input index of the chosen maximum.
pub fn maxpool2d_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    k: usize,
    stride: usize,
) -> Result<(Vec<T>, Vec<usize>)> {
    let (oh, ow) = pool_extents(h, w, k, stride)?;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = base + (oy * stride + ki) * w + ox * stride + kj;
                        // strict comparison keeps the first row-major maximum
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2d_backward<T: Real>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}
