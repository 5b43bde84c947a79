use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeom, DeconvGeom};
use crate::kernels::norm::{self, BatchNormSaved};
use crate::kernels::pool;
use crate::kernels::resize;
use crate::kernels::routing::{self, RouteDims, RouteTrace};
use crate::real::Real;
use crate::tensor::Tensor;

use super::shape::split_axis;
use super::{Graph, Op, Var};

/// Whether batch normalization uses batch statistics or its running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running mean/variance of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(format!("{what} expects an NCHW tensor, got {shape:?}"))),
    }
}

pub(super) fn softmax_backward<T: Real>(y: &Tensor<T>, axis: usize, g: &[T]) -> Vec<T> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let yd = y.data();
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| yd[idx(k)] * g[idx(k)]).sum();
            for k in 0..len {
                dx[idx(k)] = yd[idx(k)] * (g[idx(k)] - dot);
            }
        }
    }
    dx
}

pub(super) fn xent_backward<T: Real>(probs: &[T], labels: &[usize], shape: &[usize], g: T) -> Vec<T> {
    let (n, k) = (shape[0], shape[1]);
    let scale = g / T::of(n as f64);
    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (row, &l) in labels.iter().enumerate() {
        dx[row * k + l] -= scale;
    }
    dx
}

pub(super) fn conv2d_backward<T: Real>(
    geom: &ConvGeom,
    (vx, x): (Var, &Tensor<T>),
    (vw, w): (Var, &Tensor<T>),
    bias: Option<Var>,
    g: &[T],
    wants: &dyn Fn(Var) -> bool,
) -> Vec<(Var, Vec<T>)> {
    let (dx, dw, db) = conv::conv2d_backward(geom, x.data(), w.data(), g, wants(vx), wants(vw));
    let mut res = Vec::with_capacity(3);
    if let Some(dx) = dx {
        res.push((vx, dx));
    }
    if let Some(dw) = dw {
        res.push((vw, dw));
    }
    if let Some(b) = bias {
        res.push((b, db));
    }
    res
}

pub(super) fn deconv_backward<T: Real>(
    geom: &DeconvGeom,
    (vx, x): (Var, &Tensor<T>),
    (vw, w): (Var, &Tensor<T>),
    bias: Option<Var>,
    g: &[T],
    wants: &dyn Fn(Var) -> bool,
) -> Vec<(Var, Vec<T>)> {
    let (dx, dw, db) = conv::conv_transpose2d_backward(geom, x.data(), w.data(), g, wants(vx), wants(vw));
    let mut res = Vec::with_capacity(3);
    if let Some(dx) = dx {
        res.push((vx, dx));
    }
    if let Some(dw) = dw {
        res.push((vw, dw));
    }
    if let Some(b) = bias {
        res.push((b, db));
    }
    res
}

pub(super) fn batchnorm_backward<T: Real>(
    (vx, x): (Var, &Tensor<T>),
    (vgamma, gamma): (Var, &Tensor<T>),
    vbeta: Var,
    saved: &BatchNormSaved<T>,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let dims = dims4(x.shape(), "batchnorm").expect("validated in forward");
    let (dx, dgamma, dbeta) = norm::batchnorm_backward(g, dims, gamma.data(), saved);
    vec![(vx, dx), (vgamma, dgamma), (vbeta, dbeta)]
}

impl<T: Real> Graph<T> {
    /// Softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = xv.data();
        let mut y = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xd[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (xd[idx(k)] - m).exp();
                    y[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    y[idx(k)] /= z;
                }
            }
        }
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Softmax { x, axis }, rg))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`), `logits` being `[N, K]`.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let &[n, k] = lv.shape() else {
            return Err(Error::shape(format!("cross entropy expects [N, K] logits, got {:?}", lv.shape())));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape(format!("{} labels in [0, {k}) required", n)));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            let x = &lv.data()[row * k..(row + 1) * k];
            let m = x.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = x.iter().map(|&v| (v - m).exp()).sum();
            for (p, &v) in probs[row * k..(row + 1) * k].iter_mut().zip(x) {
                *p = (v - m).exp() / z;
            }
            loss += z.ln() + m - x[label];
        }
        loss /= T::of(n as f64);
        let rg = self.any_requires_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Grouped 2-D cross-correlation. `w` is `[out, in/groups, kh, kw]`, `bias` is `[out]`.
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let input = dims4(xv.shape(), "conv2d")?;
        let &[out_c, cin_g, kh, kw] = wv.shape() else {
            return Err(Error::shape(format!("conv2d weight must be rank 4, got {:?}", wv.shape())));
        };
        if stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        let geom = ConvGeom::new(input, out_c, (kh, kw), stride, padding, groups)?;
        if cin_g * groups != input[1] {
            return Err(Error::shape(format!(
                "weight {:?} expects {} input channels per group, input has {} channels in {groups} groups",
                wv.shape(),
                cin_g,
                input[1]
            )));
        }
        let bv = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [out_c] {
                    return Err(Error::shape(format!("bias shape {:?} for {out_c} outputs", bv.shape())));
                }
                Some(bv)
            }
            None => None,
        };
        let y = conv::conv2d_forward(&geom, xv.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.any_requires_grad(&inputs);
        Ok(self.push(
            Tensor::new(&[input[0], out_c, geom.out_h, geom.out_w], y)?,
            Op::Conv2d { x, w, bias, geom },
            rg,
        ))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`]. `w` is `[in, out, kh, kw]`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let input = dims4(xv.shape(), "conv_transpose2d")?;
        let &[cin, out_c, kh, kw] = wv.shape() else {
            return Err(Error::shape(format!("conv_transpose2d weight must be rank 4, got {:?}", wv.shape())));
        };
        if cin != input[1] {
            return Err(Error::shape(format!("weight {:?} for input with {} channels", wv.shape(), input[1])));
        }
        let geom = DeconvGeom::new(input, out_c, (kh, kw), stride, padding)?;
        let bv = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [out_c] {
                    return Err(Error::shape(format!("bias shape {:?} for {out_c} outputs", bv.shape())));
                }
                Some(bv)
            }
            None => None,
        };
        let y = conv::conv_transpose2d_forward(&geom, xv.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.any_requires_grad(&inputs);
        Ok(self.push(
            Tensor::new(&geom.out_shape(), y)?,
            Op::ConvTranspose2d { x, w, bias, geom },
            rg,
        ))
    }

    pub fn maxpool2d(&self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv.shape(), "maxpool2d")?;
        let (oh, ow) = pool::pool_extents(h, w, kernel, stride)?;
        let (y, argmax) = pool::maxpool2d_forward(xv.data(), n * c, (h, w), kernel, stride)?;
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], y)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Per-channel batch normalization. Training mode normalizes with batch statistics and
    /// updates `stats`; evaluation mode normalizes with `stats`.
    pub fn batchnorm2d(&self, x: Var, gamma: Var, beta: Var, stats: &mut RunningStats<T>, mode: BatchNormMode) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let dims = dims4(xv.shape(), "batchnorm2d")?;
        let c = dims[1];
        if gv.shape() != [c] || bv.shape() != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(format!("batchnorm parameters do not match {c} channels")));
        }
        if mode == BatchNormMode::Train && dims[0] < 2 {
            return Err(Error::config("batch normalization in training mode needs a batch of at least 2"));
        }
        let running = (mode == BatchNormMode::Eval).then_some((stats.mean.as_slice(), stats.var.as_slice()));
        let (y, saved, batch) = norm::batchnorm_forward(xv.data(), dims, gv.data(), bv.data(), running, T::of(stats.eps));
        if let Some(b) = batch {
            let m = T::of(stats.momentum);
            let unbias = T::of(b.count as f64 / (b.count.max(2) - 1) as f64);
            for ch in 0..c {
                stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * b.mean[ch];
                stats.var[ch] = (T::one() - m) * stats.var[ch] + m * b.var[ch] * unbias;
            }
        }
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(xv.shape(), y)?,
            Op::BatchNorm { x, gamma, beta, saved },
            rg,
        ))
    }

    /// Bilinear resampling of the two trailing axes (half-pixel convention).
    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv.shape(), "bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize target extents must be >= 1"));
        }
        let y = resize::bilinear_forward(xv.data(), n * c, (h, w), (out_h, out_w));
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[n, c, out_h, out_w], y)?,
            Op::Resize {
                x,
                from: (h, w),
                to: (out_h, out_w),
            },
            rg,
        ))
    }

    /// Routing by agreement over predictions `[N, I·J·D, H, W]` (channel-major `(i, j, d)`).
    /// Returns the routed capsules `[N, J·D, H, W]` and the per-iteration trace.
    pub fn dynamic_route(&self, pred: Var, inputs: usize, outputs: usize, dim: usize, iters: usize) -> Result<(Var, RouteTrace<T>)> {
        if iters < 1 {
            return Err(Error::config("routing needs at least one iteration"));
        }
        let pv = self.value(pred);
        let [n, ch, h, w] = dims4(pv.shape(), "dynamic_route")?;
        if ch != inputs * outputs * dim {
            return Err(Error::shape(format!(
                "prediction tensor has {ch} channels, expected {inputs}·{outputs}·{dim}"
            )));
        }
        let dims = RouteDims {
            batch: n,
            inputs,
            outputs,
            dim,
            locations: h * w,
            iters,
        };
        let (y, trace) = routing::route_forward(&dims, pv.data());
        let rg = self.any_requires_grad(&[pred]);
        let out = self.push(
            Tensor::new(&[n, outputs * dim, h, w], y)?,
            Op::Route {
                pred,
                dims,
                trace: trace.clone(),
            },
            rg,
        );
        Ok((out, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let g = Graph::<f64>::new();
        let z = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.value(g.softmax(z, 0).unwrap());
        assert!(s.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let x = g.constant(t(&[2, 3], &[0.3, -1.2, 2.0, 5.0, 4.0, -3.0]));
        let xs = g.add_scalar(x, 7.5);
        let a = g.value(g.softmax(x, 1).unwrap());
        let b = g.value(g.softmax(xs, 1).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-7);
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn batchnorm_train_statistics() {
        let g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37) % 11) as f64 * 0.7 - 2.0).collect();
        let x = g.constant(t(&[2, 3, 4, 4], &data));
        let gamma = g.constant(t(&[3], &[1.0; 3]));
        let beta = g.constant(t(&[3], &[0.0; 3]));
        let mut stats = RunningStats::new(3);
        let y = g.value(g.batchnorm2d(x, gamma, beta, &mut stats, BatchNormMode::Train).unwrap());
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| y.data()[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 32.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert!(stats.mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_eval_identity_and_batch_of_one() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 1, 2], &[0.5, -1.0, 2.0, 3.0]));
        let gamma = g.constant(t(&[2], &[1.0; 2]));
        let beta = g.constant(t(&[2], &[0.0; 2]));
        let mut stats = RunningStats::new(2);
        stats.eps = 0.0;
        let y = g.batchnorm2d(x, gamma, beta, &mut stats, BatchNormMode::Eval).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        assert!(matches!(
            g.batchnorm2d(x, gamma, beta, &mut stats, BatchNormMode::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn resize_constant_and_corners() {
        let g = Graph::<f64>::new();
        let c = g.constant(t(&[1, 1, 3, 5], &[2.5; 15]));
        let r = g.value(g.bilinear_resize(c, 7, 4).unwrap());
        assert!(r.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));

        let x = g.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let y = g.value(g.bilinear_resize(x, 4, 4).unwrap());
        // Half-pixel source coordinates for 2 -> 4, clamped into [0, 1]; the image is
        // the affine field f(r, c) = 2r + c, so each output equals f at its source point.
        let src = |d: usize| ((d as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        for r in 0..4 {
            for col in 0..4 {
                let expected = 2.0 * src(r) + src(col);
                assert!((y.data()[r * 4 + col] - expected).abs() < 1e-12);
            }
        }
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[15], 3.0);
        assert_eq!(y.data()[3], 1.0);
        assert_eq!(y.data()[12], 2.0);
    }

    #[test]
    fn resize_round_trip_preserves_affine_interior() {
        let g = Graph::<f64>::new();
        let (h, w) = (16, 16);
        let ramp: Vec<f64> = (0..h * w).map(|i| 0.5 * (i / w) as f64 - 0.25 * (i % w) as f64 + 1.0).collect();
        let x = g.constant(t(&[1, 1, h, w], &ramp));
        let down = g.bilinear_resize(x, 8, 8).unwrap();
        let up = g.value(g.bilinear_resize(down, h, w).unwrap());
        // The border row/column sample outside the half-pixel grid and are clamped.
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                assert!((up.data()[r * w + c] - ramp[r * w + c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_value() {
        let g = Graph::<f64>::new();
        let l = g.param(t(&[2, 2], &[0.0, 0.0, 1.0, 0.0]));
        let loss = g.softmax_cross_entropy(l, &[0, 1]).unwrap();
        let expected = (2f64.ln() + (1.0 + 1f64.exp()).ln()) / 2.0;
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
        g.backward(loss).unwrap();
        let gr = g.grad(l).unwrap();
        assert!((gr.data()[0] - (-0.25)).abs() < 1e-12);
    }
}
