//! Per-channel batch normalization over NCHW buffers.

use crate::real::Real;

/// Values saved by a forward pass for use in the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Batch statistics of a training-mode pass: per-channel mean and biased variance.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Real>(
    x: &[T],
    [n, c, h, w]: [usize; 4],
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> (Vec<T>, BatchNormSaved<T>, Option<BatchStats<T>>) {
    let plane = h * w;
    let count = n * plane;
    let train = stats.is_none();
    let (mean, var) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let inv = T::one() / T::of(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    s += x[off..off + plane].iter().copied().sum::<T>();
                }
                let m = s * inv;
                let mut v = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    v += x[off..off + plane].iter().map(|&t| (t - m) * (t - m)).sum::<T>();
                }
                mean[ch] = m;
                var[ch] = v * inv;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let batch_stats = train.then_some(BatchStats { mean, var, count });
    (y, BatchNormSaved { xhat, inv_std, train }, batch_stats)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(
    dy: &[T],
    [n, c, h, w]: [usize; 4],
    gamma: &[T],
    saved: &BatchNormSaved<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = h * w;
    let m = T::of((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += dy[i] * saved.xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let k = gamma[ch] * saved.inv_std[ch];
            for i in off..off + plane {
                dx[i] = if saved.train {
                    // dbeta = Σ dy and dgamma = Σ dy·x̂, so these are Σ dx̂/γ and Σ dx̂·x̂/γ
                    k * (dy[i] - (dbeta[ch] + saved.xhat[i] * dgamma[ch]) / m)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
