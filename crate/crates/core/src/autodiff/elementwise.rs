use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{strides, Tensor};

use super::{Graph, Op, Var};

/// Single-input elementwise operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Cosh,
    Tanh,
    Square,
    /// ln(cosh x), evaluated as |x| + ln(1 + e^(−2|x|)) − ln 2.
    LogCosh,
    Relu,
    LeakyRelu(f64),
    Scale(f64),
    AddScalar(f64),
}

/// Two-input elementwise operations with trailing-axis broadcasting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

pub(crate) fn log_cosh<T: Real>(x: T) -> T {
    let a = x.abs();
    a + (-(a + a)).exp().ln_1p() - T::of(std::f64::consts::LN_2)
}

fn apply_unary<T: Real>(kind: UnaryOp, x: T) -> T {
    match kind {
        UnaryOp::Neg => -x,
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Cosh => x.cosh(),
        UnaryOp::Tanh => x.tanh(),
        UnaryOp::Square => x * x,
        UnaryOp::LogCosh => log_cosh(x),
        UnaryOp::Relu => x.max(T::zero()),
        UnaryOp::LeakyRelu(slope) => {
            if x > T::zero() {
                x
            } else {
                x * T::of(slope)
            }
        }
        UnaryOp::Scale(c) => x * T::of(c),
        UnaryOp::AddScalar(c) => x + T::of(c),
    }
}

pub(super) fn unary_backward<T: Real>(kind: UnaryOp, x: &Tensor<T>, y: &Tensor<T>, g: &[T]) -> Vec<T> {
    let two = T::of(2.0);
    x.data()
        .iter()
        .zip(y.data())
        .zip(g)
        .map(|((&x, &y), &g)| {
            g * match kind {
                UnaryOp::Neg => -T::one(),
                UnaryOp::Exp => y,
                UnaryOp::Log => T::one() / x,
                UnaryOp::Sqrt => {
                    if y > T::zero() {
                        T::one() / (two * y)
                    } else {
                        T::zero()
                    }
                }
                UnaryOp::Cosh => x.sinh(),
                UnaryOp::Tanh => T::one() - y * y,
                UnaryOp::Square => two * x,
                UnaryOp::LogCosh => x.tanh(),
                UnaryOp::Relu => {
                    if x > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                UnaryOp::LeakyRelu(slope) => {
                    if x > T::zero() {
                        T::one()
                    } else {
                        T::of(slope)
                    }
                }
                UnaryOp::Scale(c) => T::of(c),
                UnaryOp::AddScalar(_) => T::one(),
            }
        })
        .collect()
}

/// Broadcast shape of two operands, aligning trailing axes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(format!("shapes {a:?} and {b:?} are not broadcast-compatible"))),
        })
        .collect()
}

/// Strides into an operand of shape `s` when iterating over `out` (0 on broadcast axes).
fn broadcast_strides(s: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(s);
    let offset = out.len() - s.len();
    (0..out.len())
        .map(|k| {
            if k < offset || s[k - offset] == 1 {
                0
            } else {
                own[k - offset]
            }
        })
        .collect()
}

/// Visits every index of `shape`, passing the flat offsets under each stride set.
pub(crate) fn for_each_offset<const K: usize>(
    shape: &[usize],
    stride_sets: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K]),
) {
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut offs = [0usize; K];
    for flat in 0..total {
        f(flat, offs);
        for axis in (0..shape.len()).rev() {
            idx[axis] += 1;
            for (o, s) in offs.iter_mut().zip(stride_sets.iter()) {
                *o += s[axis];
            }
            if idx[axis] < shape[axis] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(stride_sets.iter()) {
                *o -= s[axis] * shape[axis];
            }
            idx[axis] = 0;
        }
    }
}

fn apply_binary<T: Real>(kind: BinaryOp, a: T, b: T) -> T {
    match kind {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
    }
}

pub(super) fn binary_backward<T: Real>(
    kind: BinaryOp,
    (va, a): (Var, &Tensor<T>),
    (vb, b): (Var, &Tensor<T>),
    g: &[T],
    wants: &dyn Fn(Var) -> bool,
) -> Vec<(Var, Vec<T>)> {
    let out = broadcast_shape(a.shape(), b.shape()).expect("validated in forward");
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let (want_a, want_b) = (wants(va), wants(vb));
    let mut ga = vec![T::zero(); if want_a { a.len() } else { 0 }];
    let mut gb = vec![T::zero(); if want_b { b.len() } else { 0 }];
    let (ad, bd) = (a.data(), b.data());
    for_each_offset(&out, [&sa, &sb], |flat, [ia, ib]| {
        let gv = g[flat];
        let (x, y) = (ad[ia], bd[ib]);
        let (da, db) = match kind {
            BinaryOp::Add => (gv, gv),
            BinaryOp::Sub => (gv, -gv),
            BinaryOp::Mul => (gv * y, gv * x),
            BinaryOp::Div => (gv / y, -gv * x / (y * y)),
        };
        if want_a {
            ga[ia] += da;
        }
        if want_b {
            gb[ib] += db;
        }
    });
    let mut res = Vec::with_capacity(2);
    if want_a {
        res.push((va, ga));
    }
    if want_b {
        res.push((vb, gb));
    }
    res
}

impl<T: Real> Graph<T> {
    pub fn unary(&self, kind: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        match kind {
            UnaryOp::Log if xv.data().iter().any(|&v| !(v > T::zero())) => {
                return Err(Error::Domain("log requires strictly positive inputs".into()))
            }
            UnaryOp::Sqrt if xv.data().iter().any(|&v| v < T::zero()) => {
                return Err(Error::Domain("sqrt requires nonnegative inputs".into()))
            }
            _ => {}
        }
        let y = xv.map(|v| apply_unary(kind, v));
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(y, Op::Unary { kind, x }, rg))
    }

    fn infallible(&self, kind: UnaryOp, x: Var) -> Var {
        self.unary(kind, x).expect("operation has no domain restriction")
    }

    pub fn neg(&self, x: Var) -> Var {
        self.infallible(UnaryOp::Neg, x)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.infallible(UnaryOp::Exp, x)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn cosh(&self, x: Var) -> Var {
        self.infallible(UnaryOp::Cosh, x)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.infallible(UnaryOp::Tanh, x)
    }

    pub fn square(&self, x: Var) -> Var {
        self.infallible(UnaryOp::Square, x)
    }

    pub fn log_cosh(&self, x: Var) -> Var {
        self.infallible(UnaryOp::LogCosh, x)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.infallible(UnaryOp::Relu, x)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.infallible(UnaryOp::LeakyRelu(slope), x)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.infallible(UnaryOp::Scale(c), x)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.infallible(UnaryOp::AddScalar(c), x)
    }

    pub fn binary(&self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = broadcast_shape(av.shape(), bv.shape())?;
        let data = if av.shape() == bv.shape() {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| apply_binary(kind, x, y))
                .collect()
        } else {
            let sa = broadcast_strides(av.shape(), &out);
            let sb = broadcast_strides(bv.shape(), &out);
            let mut data = Vec::with_capacity(out.iter().product());
            let (ad, bd) = (av.data(), bv.data());
            for_each_offset(&out, [&sa, &sb], |_, [ia, ib]| {
                data.push(apply_binary(kind, ad[ia], bd[ib]));
            });
            data
        };
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::new(&out, data)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }
}
