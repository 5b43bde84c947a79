//! im2col-based convolution kernels on raw NCHW buffers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;

/// Geometry of a (possibly grouped) 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent of a convolution along one axis, if it is at least 1.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        input: [usize; 4],
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = input;
        if groups == 0 || in_channels % groups != 0 || !out_channels.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "groups={groups} must divide both input channels ({in_channels}) and output channels ({out_channels})"
            )));
        }
        let out_h = conv_out_extent(in_h, kernel.0, stride, padding);
        let out_w = conv_out_extent(in_w, kernel.1, stride, padding);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(Self {
                batch,
                in_channels,
                in_h,
                in_w,
                out_channels,
                kh: kernel.0,
                kw: kernel.1,
                stride,
                padding,
                groups,
                out_h,
                out_w,
            }),
            _ => Err(Error::shape(format!(
                "convolution of {in_h}x{in_w} with kernel {}x{}, stride {stride}, padding {padding} has empty output",
                kernel.0, kernel.1
            ))),
        }
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the im2col matrix for one group.
    fn k_g(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn in_plane(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.k_g()
    }
}

/// Unfolds `channels` planes of an `h×w` image into a `(channels·kh·kw) × (oh·ow)` matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    img: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    col: &mut [T],
) {
    let p = oh * ow;
    for c in 0..channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(kj, padding, stride, w, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst_row[..lo].fill(T::zero());
                    dst_row[hi..].fill(T::zero());
                    let first = lo * stride + kj - padding;
                    if stride == 1 {
                        dst_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, s) in dst_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kj − padding` lies inside `0..w`.
fn valid_range(kj: usize, padding: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if padding > kj { (padding - kj).div_ceil(stride) } else { 0 }.min(ow);
    let hi = if w + padding > kj { (w + padding - kj).div_ceil(stride) } else { 0 }.clamp(lo, ow);
    (lo, hi)
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back onto an image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    col: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    img: &mut [T],
) {
    let p = oh * ow;
    for c in 0..channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(kj, padding, stride, w, ow);
                if lo == hi {
                    continue;
                }
                let first = lo * stride + kj - padding;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow + lo..oy * ow + hi];
                    for (d, &s) in dst[first..].iter_mut().step_by(stride).zip(src_row) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Grouped cross-correlation. `weight` is `[out, in/groups, kh, kw]`.
pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p = g.positions();
    let (kg, og) = (g.k_g(), g.cout_g());
    let mut out = vec![T::zero(); g.batch * g.out_plane()];
    out.par_chunks_mut(g.out_plane())
        .zip(x.par_chunks(g.in_plane()))
        .for_each(|(y, xs)| {
            let owned;
            let col: &[T] = if g.is_pointwise() {
                xs
            } else {
                let mut buf = vec![T::zero(); g.in_channels * g.kh * g.kw * p];
                im2col(
                    xs,
                    g.in_channels,
                    (g.in_h, g.in_w),
                    (g.kh, g.kw),
                    g.stride,
                    g.padding,
                    (g.out_h, g.out_w),
                    &mut buf,
                );
                owned = buf;
                &owned
            };
            for grp in 0..g.groups {
                T::gemm(
                    og,
                    kg,
                    p,
                    T::one(),
                    &weight[grp * og * kg..],
                    (kg as isize, 1),
                    &col[grp * kg * p..],
                    (p as isize, 1),
                    T::zero(),
                    &mut y[grp * og * p..],
                    (p as isize, 1),
                );
            }
            if let Some(b) = bias {
                for (o, &bv) in b.iter().enumerate() {
                    y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    out
}

/// Gradients of [`conv2d_forward`]: `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let p = g.positions();
    let (kg, og) = (g.k_g(), g.cout_g());
    let rows = g.in_channels * g.kh * g.kw;

    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = x
        .par_chunks(g.in_plane())
        .zip(dy.par_chunks(g.out_plane()))
        .map(|(xs, dys)| {
            let dx = want_dx.then(|| {
                let mut dcol = vec![T::zero(); rows * p];
                for grp in 0..g.groups {
                    T::gemm(
                        kg,
                        og,
                        p,
                        T::one(),
                        &weight[grp * og * kg..],
                        (1, kg as isize),
                        &dys[grp * og * p..],
                        (p as isize, 1),
                        T::zero(),
                        &mut dcol[grp * kg * p..],
                        (p as isize, 1),
                    );
                }
                if g.is_pointwise() {
                    dcol
                } else {
                    let mut dx = vec![T::zero(); g.in_plane()];
                    col2im(
                        &dcol,
                        g.in_channels,
                        (g.in_h, g.in_w),
                        (g.kh, g.kw),
                        g.stride,
                        g.padding,
                        (g.out_h, g.out_w),
                        &mut dx,
                    );
                    dx
                }
            });
            let dw = want_dw.then(|| {
                let owned;
                let col: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    let mut buf = vec![T::zero(); rows * p];
                    im2col(
                        xs,
                        g.in_channels,
                        (g.in_h, g.in_w),
                        (g.kh, g.kw),
                        g.stride,
                        g.padding,
                        (g.out_h, g.out_w),
                        &mut buf,
                    );
                    owned = buf;
                    &owned
                };
                let mut dw = vec![T::zero(); g.weight_len()];
                for grp in 0..g.groups {
                    T::gemm(
                        og,
                        p,
                        kg,
                        T::one(),
                        &dys[grp * og * p..],
                        (p as isize, 1),
                        &col[grp * kg * p..],
                        (1, p as isize),
                        T::zero(),
                        &mut dw[grp * og * kg..],
                        (kg as isize, 1),
                    );
                }
                dw
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = want_dx.then(|| Vec::with_capacity(g.batch * g.in_plane()));
    let mut dw_all = want_dw.then(|| vec![T::zero(); g.weight_len()]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        }
    }

    let mut db = vec![T::zero(); g.out_channels];
    for dys in dy.chunks(g.out_plane()) {
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dys[o * p..(o + 1) * p].iter().copied().sum::<T>();
        }
    }
    (dx_all, dw_all, db)
}

/// Geometry of a transposed convolution, expressed through the convolution it is the adjoint of.
///
/// `conv` describes the forward convolution mapping the (larger) output of the transposed
/// convolution back onto its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvGeom {
    pub conv: ConvGeom,
}

impl DeconvGeom {
    /// `input` is `[N, C_in, H, W]`, weight `[C_in, C_out, kh, kw]`.
    pub fn new(
        input: [usize; 4],
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, in_channels, h, w] = input;
        let extent = |len: usize, k: usize| -> Option<usize> {
            ((len - 1) * stride + k).checked_sub(2 * padding).filter(|&e| e >= 1)
        };
        let (Some(out_h), Some(out_w)) = (extent(h, kernel.0), extent(w, kernel.1)) else {
            return Err(Error::shape(format!(
                "transposed convolution of {h}x{w} with kernel {}x{}, stride {stride}, padding {padding} has empty output",
                kernel.0, kernel.1
            )));
        };
        if stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        let conv = ConvGeom::new(
            [batch, out_channels, out_h, out_w],
            in_channels,
            kernel,
            stride,
            padding,
            1,
        )?;
        debug_assert_eq!((conv.out_h, conv.out_w), (h, w));
        Ok(Self { conv })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        let c = &self.conv;
        [c.batch, c.in_channels, c.in_h, c.in_w]
    }
}

/// Transposed convolution; `weight` is `[C_in, C_out, kh, kw]`.
pub fn conv_transpose2d_forward<T: Real>(
    d: &DeconvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let g = &d.conv;
    let (cin, rows, p) = (g.out_channels, g.in_channels * g.kh * g.kw, g.positions());
    let mut out = vec![T::zero(); g.batch * g.in_plane()];
    out.par_chunks_mut(g.in_plane())
        .zip(x.par_chunks(g.out_plane()))
        .for_each(|(y, xs)| {
            let mut col = vec![T::zero(); rows * p];
            T::gemm(
                rows,
                cin,
                p,
                T::one(),
                weight,
                (1, rows as isize),
                xs,
                (p as isize, 1),
                T::zero(),
                &mut col,
                (p as isize, 1),
            );
            col2im(
                &col,
                g.in_channels,
                (g.in_h, g.in_w),
                (g.kh, g.kw),
                g.stride,
                g.padding,
                (g.out_h, g.out_w),
                y,
            );
            if let Some(b) = bias {
                let plane = g.in_h * g.in_w;
                for (o, &bv) in b.iter().enumerate() {
                    y[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    out
}

/// Gradients of [`conv_transpose2d_forward`]: `(dx, dweight, dbias)`.
pub fn conv_transpose2d_backward<T: Real>(
    d: &DeconvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let g = &d.conv;
    let (cin, rows, p) = (g.out_channels, g.in_channels * g.kh * g.kw, g.positions());
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = x
        .par_chunks(g.out_plane())
        .zip(dy.par_chunks(g.in_plane()))
        .map(|(xs, dys)| {
            let mut dcol = vec![T::zero(); rows * p];
            im2col(
                dys,
                g.in_channels,
                (g.in_h, g.in_w),
                (g.kh, g.kw),
                g.stride,
                g.padding,
                (g.out_h, g.out_w),
                &mut dcol,
            );
            let dx = want_dx.then(|| {
                let mut dx = vec![T::zero(); cin * p];
                T::gemm(
                    cin,
                    rows,
                    p,
                    T::one(),
                    weight,
                    (rows as isize, 1),
                    &dcol,
                    (p as isize, 1),
                    T::zero(),
                    &mut dx,
                    (p as isize, 1),
                );
                dx
            });
            let dw = want_dw.then(|| {
                let mut dw = vec![T::zero(); cin * rows];
                T::gemm(
                    cin,
                    p,
                    rows,
                    T::one(),
                    xs,
                    (p as isize, 1),
                    &dcol,
                    (1, p as isize),
                    T::zero(),
                    &mut dw,
                    (rows as isize, 1),
                );
                dw
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = want_dx.then(|| Vec::with_capacity(x.len()));
    let mut dw_all = want_dw.then(|| vec![T::zero(); cin * rows]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        }
    }
    let plane = g.in_h * g.in_w;
    let mut db = vec![T::zero(); g.in_channels];
    for dys in dy.chunks(g.in_plane()) {
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dys[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
    }
    (dx_all, dw_all, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as an independent oracle.
    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (cg, og) = (g.in_channels / g.groups, g.out_channels / g.groups);
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                let grp = o / og;
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..cg {
                            let ci = grp * cg + c;
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * g.in_channels + ci) * g.in_h + iy as usize) * g.in_w
                                        + ix as usize];
                                    let wv = w[((o * cg + c) * g.kh + ki) * g.kw + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((n * g.out_channels + o) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn grouped_conv_matches_naive_oracle() {
        let g = ConvGeom::new([2, 4, 8, 8], 8, (3, 3), 1, 1, 4).unwrap();
        let x = pseudo_random(2 * 4 * 64, 1);
        let w = pseudo_random(g.weight_len(), 2);
        let fast = conv2d_forward(&g, &x, &w, None);
        let slow = naive_conv(&g, &x, &w);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "max err {err}");
    }

    #[test]
    fn strided_padded_conv_matches_naive_oracle() {
        let g = ConvGeom::new([1, 3, 9, 7], 5, (3, 2), 2, 1, 1).unwrap();
        let x = pseudo_random(3 * 63, 3);
        let w = pseudo_random(g.weight_len(), 4);
        let fast = conv2d_forward(&g, &x, &w, None);
        let slow = naive_conv(&g, &x, &w);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "max err {err}");
    }

    #[test]
    fn ones_kernel_sums_window() {
        let g = ConvGeom::new([1, 1, 3, 3], 1, (3, 3), 1, 0, 1).unwrap();
        let y = conv2d_forward(&g, &[1.0f64; 9], &[1.0; 9], None);
        assert_eq!(y, vec![9.0]);
    }

    #[test]
    fn stride_two_pointwise_picks_even_pixels() {
        let g = ConvGeom::new([1, 1, 4, 4], 1, (1, 1), 2, 0, 1).unwrap();
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let y = conv2d_forward(&g, &x, &[1.0], None);
        assert_eq!(y, vec![0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn bad_groups_is_config_error() {
        assert!(matches!(
            ConvGeom::new([1, 4, 4, 4], 6, (1, 1), 1, 0, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let d = DeconvGeom::new([1, 2, 5, 5], 3, (4, 4), 2, 1).unwrap();
        let g = d.conv;
        // conv maps [1,3,10,10] -> [1,2,5,5]
        let y_big = pseudo_random(g.batch * g.in_channels * g.in_h * g.in_w, 5);
        let x_small = pseudo_random(2 * 25, 6);
        let w = pseudo_random(g.weight_len(), 7);
        let conv_y = conv2d_forward(&g, &y_big, &w, None);
        let lhs: f64 = conv_y.iter().zip(&x_small).map(|(a, b)| a * b).sum();
        let deconv_x = conv_transpose2d_forward(&d, &x_small, &w, None);
        let rhs: f64 = deconv_x.iter().zip(&y_big).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn transposed_conv_extents() {
        let d = DeconvGeom::new([1, 1, 8, 8], 1, (4, 4), 2, 1).unwrap();
        assert_eq!(d.out_shape(), [1, 1, 16, 16]);
        let d = DeconvGeom::new([1, 1, 1, 1], 1, (2, 2), 2, 0).unwrap();
        let y = conv_transpose2d_forward(&d, &[2.0f64], &[1.0; 4], None);
        assert_eq!(y, vec![2.0; 4]);
        assert!(DeconvGeom::new([1, 1, 1, 1], 1, (1, 1), 1, 1).is_err());
    }
}
