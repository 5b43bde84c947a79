//! Convolutional capsule layers with routing by agreement and no squash nonlinearity.
//!
//! A capsule grid is stored as an NCHW tensor whose channel axis packs `types × dim`
//! (type-major), so the `(N, c·n, h, w)` and `(N, c, n, h, w)` views share one buffer.
//!
//! Predictions `û_{j|i}` come from a grouped convolution with one group per input
//! capsule type: group `i` maps the `n1` channels of type `i` to `c2·n2` channels,
//! i.e. a transformation `W_ij` shared across spatial positions. Routing then runs
//! independently at every output location.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::routing::RouteTrace;
use crate::layers::{Bound, Conv, ParamId, ParamStore, Section};
use crate::real::Real;
use crate::tensor::Tensor;

/// A `(N, types·dim, h, w)` view over a graph value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsuleGrid {
    pub var: Var,
    pub types: usize,
    pub dim: usize,
}

impl CapsuleGrid {
    pub fn new<T: Real>(g: &Graph<T>, var: Var, types: usize, dim: usize) -> Result<Self> {
        let shape = g.shape(var);
        if shape.len() != 4 || shape[1] != types * dim {
            return Err(Error::shape(format!(
                "capsule grid of {types} types x {dim} dims needs {} channels, got shape {shape:?}",
                types * dim
            )));
        }
        Ok(Self { var, types, dim })
    }

    /// `[N, types, dim, h, w]` copy of the capsule values.
    pub fn to_tensor5<T: Real>(&self, g: &Graph<T>) -> Tensor<T> {
        let v = g.value(self.var);
        let s = v.shape();
        (*v).clone()
            .reshape(&[s[0], self.types, self.dim, s[2], s[3]])
            .expect("channel extent is types·dim")
    }
}

/// Coupling coefficients of every routing iteration, each `[N, I, J, h, w]`.
#[derive(Debug, Clone)]
pub struct RoutingState<T> {
    pub couplings: Vec<Tensor<T>>,
    pub iterations: usize,
}

impl<T: Real> RoutingState<T> {
    fn from_trace(trace: RouteTrace<T>, n: usize, inputs: usize, outputs: usize, h: usize, w: usize) -> Self {
        let iterations = trace.couplings.len();
        let couplings = trace
            .couplings
            .into_iter()
            .map(|c| Tensor::new(&[n, inputs, outputs, h, w], c).expect("trace matches routing dims"))
            .collect();
        Self { couplings, iterations }
    }
}

/// Primary capsules: one convolution to `types·dim` channels viewed as capsules.
/// No routing and no squash.
pub fn primary_caps<T: Real>(
    g: &Graph<T>,
    x: Var,
    weight: Var,
    types: usize,
    dim: usize,
    stride: usize,
    padding: usize,
) -> Result<CapsuleGrid> {
    let y = g.conv2d(x, weight, None, stride, padding, 1)?;
    CapsuleGrid::new(g, y, types, dim)
}

/// Prediction vectors `û_{j|i}` as `[N, c1·c2·n2, h2, w2]` (the `(N, c1, c2, n2, h2, w2)`
/// layout flattened). `weight` is `[c1·c2·n2, n1, k, k]`.
pub fn caps_predictions<T: Real>(
    g: &Graph<T>,
    input: &CapsuleGrid,
    weight: Var,
    out_types: usize,
    out_dim: usize,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let ws = g.shape(weight);
    if ws.len() != 4 || ws[0] != input.types * out_types * out_dim || ws[1] != input.dim {
        return Err(Error::shape(format!(
            "prediction weight {ws:?} does not map {} types x {} dims to {out_types} x {out_dim}",
            input.types, input.dim
        )));
    }
    g.conv2d(input.var, weight, None, stride, padding, input.types)
}

/// Routes predictions `[N, c1·c2·n2, h, w]` to `c2` output capsule types for `iters` rounds.
pub fn dynamic_route<T: Real>(
    g: &Graph<T>,
    pred: Var,
    in_types: usize,
    out_types: usize,
    out_dim: usize,
    iters: usize,
) -> Result<(CapsuleGrid, RoutingState<T>)> {
    if iters < 1 {
        return Err(Error::config(format!("routing iterations must be >= 1, got {iters}")));
    }
    let s = g.shape(pred);
    let (out, trace) = g.dynamic_route(pred, in_types, out_types, out_dim, iters)?;
    let state = RoutingState::from_trace(trace, s[0], in_types, out_types, s[2], s[3]);
    Ok((CapsuleGrid::new(g, out, out_types, out_dim)?, state))
}

/// Hyperparameters of one capsule layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CapsSpec {
    pub types: usize,
    pub dim: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Routing iterations; 0 marks a primary (convolution-only) layer.
    pub iters: usize,
}

/// A capsule layer owning its parameters: primary when `spec.iters == 0`, routed otherwise.
#[derive(Debug, Clone)]
pub struct CapsLayer {
    pub spec: CapsSpec,
    pub in_types: usize,
    pub in_dim: usize,
    pub weight: ParamId,
}

impl CapsLayer {
    /// A primary layer reading a plain feature map with `in_channels` channels.
    pub fn primary<T: Real>(store: &mut ParamStore<T>, name: &str, in_channels: usize, spec: CapsSpec) -> Result<Self> {
        let conv = Conv::new(store, name, Section::Encoder, in_channels, spec.types * spec.dim, spec.kernel, spec.stride, false)?;
        Ok(Self {
            spec,
            in_types: 1,
            in_dim: in_channels,
            weight: conv.weight,
        })
    }

    /// A routed layer reading capsules of `in_types × in_dim`.
    pub fn routed<T: Real>(store: &mut ParamStore<T>, name: &str, in_types: usize, in_dim: usize, spec: CapsSpec) -> Result<Self> {
        if spec.iters == 0 {
            return Err(Error::config(format!("{name}: routed capsule layer needs iterations >= 1")));
        }
        let conv = Conv::grouped(
            store,
            name,
            Section::Encoder,
            in_types * in_dim,
            in_types * spec.types * spec.dim,
            spec.kernel,
            spec.stride,
            in_types,
            false,
        )?;
        Ok(Self {
            spec,
            in_types,
            in_dim,
            weight: conv.weight,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<CapsuleGrid> {
        let pad = self.spec.kernel / 2;
        if self.spec.iters == 0 {
            return primary_caps(g, x, p.var(self.weight), self.spec.types, self.spec.dim, self.spec.stride, pad);
        }
        let input = CapsuleGrid::new(g, x, self.in_types, self.in_dim)?;
        caps_layer(g, &input, p.var(self.weight), self.spec).map(|(grid, _)| grid)
    }
}

/// Predictions followed by routing.
pub fn caps_layer<T: Real>(
    g: &Graph<T>,
    input: &CapsuleGrid,
    weight: Var,
    spec: CapsSpec,
) -> Result<(CapsuleGrid, RoutingState<T>)> {
    let pred = caps_predictions(g, input, weight, spec.types, spec.dim, spec.stride, spec.kernel / 2)?;
    dynamic_route(g, pred, input.types, spec.types, spec.dim, spec.iters)
}
