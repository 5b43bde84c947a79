use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{strides, Tensor};

use super::elementwise::for_each_offset;
use super::{Graph, Op, Var};

fn check_axes(rank: usize, axes: &[usize]) -> Result<()> {
    for (k, &a) in axes.iter().enumerate() {
        if a >= rank {
            return Err(Error::shape(format!("axis {a} out of range for rank {rank}")));
        }
        if axes[..k].contains(&a) {
            return Err(Error::shape(format!("axis {a} listed twice")));
        }
    }
    Ok(())
}

/// Output shape (keepdim) and per-input-axis output strides (0 on reduced axes).
fn reduce_layout(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(k, &d)| if axes.contains(&k) { 1 } else { d })
        .collect();
    let ks = strides(&kept);
    let map = (0..shape.len())
        .map(|k| if axes.contains(&k) { 0 } else { ks[k] })
        .collect();
    (kept, map)
}

pub(super) fn reduce_backward<T: Real>(shape: &[usize], axes: &[usize], mean: bool, g: &[T]) -> Vec<T> {
    let (_, map) = reduce_layout(shape, axes);
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    let scale = if mean { T::one() / T::of(count as f64) } else { T::one() };
    let own = strides(shape);
    let mut dx = vec![T::zero(); shape.iter().product()];
    for_each_offset(shape, [&own, &map], |_, [i, o]| dx[i] = g[o] * scale);
    dx
}

pub(super) fn matmul_backward<T: Real>(
    (va, a): (Var, &Tensor<T>),
    (vb, b): (Var, &Tensor<T>),
    g: &[T],
    wants: &dyn Fn(Var) -> bool,
) -> Vec<(Var, Vec<T>)> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut res = Vec::new();
    if wants(va) {
        // dA = dC·Bᵀ
        let mut da = vec![T::zero(); m * k];
        T::gemm(m, n, k, T::one(), g, (n as isize, 1), b.data(), (1, n as isize), T::zero(), &mut da, (k as isize, 1));
        res.push((va, da));
    }
    if wants(vb) {
        // dB = Aᵀ·dC
        let mut db = vec![T::zero(); k * n];
        T::gemm(k, m, n, T::one(), a.data(), (1, k as isize), g, (n as isize, 1), T::zero(), &mut db, (n as isize, 1));
        res.push((vb, db));
    }
    res
}

/// Splits an axis into (outer, extent, inner) block sizes.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn concat_backward<T: Real>(shapes: &[&[usize]], axis: usize, g: &[T]) -> Vec<Vec<T>> {
    let (outer, _, inner) = split_axis(shapes[0], axis);
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut start = 0;
    shapes
        .iter()
        .map(|s| {
            let len = s[axis];
            let mut d = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                d.extend_from_slice(&g[base..base + len * inner]);
            }
            start += len;
            d
        })
        .collect()
}

pub(super) fn norm_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, axis: usize, g: &[T]) -> Vec<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut dx = vec![T::zero(); x.len()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let yi = y.data()[o * inner + i];
            if yi == T::zero() {
                continue;
            }
            let gi = g[o * inner + i] / yi;
            for k in 0..len {
                let idx = (o * len + k) * inner + i;
                dx[idx] = gi * xd[idx];
            }
        }
    }
    dx
}

impl<T: Real> Graph<T> {
    /// Sums over `axes`; reduced axes are dropped unless `keepdim`.
    pub fn sum(&self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, false, keepdim)
    }

    /// Averages over `axes`; reduced axes are dropped unless `keepdim`.
    pub fn mean(&self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, true, keepdim)
    }

    /// Averages over every element.
    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes, false)
    }

    fn reduce(&self, x: Var, axes: &[usize], mean: bool, keepdim: bool) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        check_axes(shape.len(), axes)?;
        let (kept, map) = reduce_layout(shape, axes);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let mut out = vec![T::zero(); kept.iter().product()];
        let own = strides(shape);
        let data = xv.data();
        for_each_offset(shape, [&own, &map], |_, [i, o]| out[o] += data[i]);
        if mean {
            let inv = T::one() / T::of(count as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let out_shape: Vec<usize> = if keepdim {
            kept
        } else {
            let s: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(k, _)| !axes.contains(k))
                .map(|(_, &d)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Reduce {
                x,
                axes: axes.to_vec(),
                mean,
            },
            rg,
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = (*self.value(x)).clone().reshape(shape)?;
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(y, Op::Reshape { x }, rg))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), (k as isize, 1), bv.data(), (n as isize, 1), T::zero(), &mut c, (n as isize, 1));
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], c)?, Op::MatMul { a, b }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for rank {}", first.len())));
        }
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "cannot concatenate {s:?} with {first:?} along axis {axis}"
                )));
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_requires_grad(inputs);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Euclidean norm along `axis` (dropped). The gradient is taken as 0 where the norm is 0.
    pub fn norm(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        check_axes(shape.len(), &[axis])?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let s: T = (0..len)
                    .map(|k| {
                        let v = xv.data()[(o * len + k) * inner + i];
                        v * v
                    })
                    .sum();
                out.push(s.sqrt());
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Norm { x, axis }, rg))
    }
}
