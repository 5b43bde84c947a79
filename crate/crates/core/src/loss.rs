//! Flow losses on `[N, 2, H, W]` batches: endpoint error, a log-cosh magnitude term, and
//! a magnitude-weighted angular term.
//!
//! Every loss averages a per-pixel quantity over pixels and batch. The magnitude term is
//! `Σ_c logcosh(P_c − T_c)` per pixel; the angular term is
//! `(1 − P·T / (‖P‖‖T‖ + ε)) · ‖T‖`, which is exactly zero (with zero gradient) wherever
//! the target is zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.15;
pub const DEFAULT_EPS_ANG: f64 = 1e-8;

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub eps_ang: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, eps_ang: DEFAULT_EPS_ANG }
    }
}

impl LossConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        let cfg = Self { alpha, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.eps_ang > 0.0) {
            return Err(Error::config(format!(
                "loss needs alpha >= 0 and eps > 0, got alpha={} eps={}",
                self.alpha, self.eps_ang
            )));
        }
        Ok(())
    }
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Epe,
    Combined(LossConfig),
}

impl LossKind {
    pub fn combined(alpha: f64) -> Result<Self> {
        Ok(LossKind::Combined(LossConfig::new(alpha)?))
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, pred: Var, gt: Var) -> Result<Var> {
        match self {
            LossKind::Epe => epe(g, pred, gt),
            LossKind::Combined(cfg) => combined_loss(g, pred, gt, cfg),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Epe => write!(f, "epe"),
            LossKind::Combined(c) => write!(f, "combined:{}", c.alpha),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// `epe`, `combined` (default α) or `combined:<α>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "epe" => Ok(LossKind::Epe),
            None if s == "combined" => Ok(LossKind::Combined(LossConfig::default())),
            Some(("combined", a)) => {
                let alpha = a
                    .parse()
                    .map_err(|_| Error::config(format!("bad alpha {a:?} in loss {s:?}")))?;
                LossKind::combined(alpha)
            }
            _ => Err(Error::config(format!("unknown loss {s:?} (expected epe, combined or combined:<alpha>)"))),
        }
    }
}

fn check_pair<T: Real>(g: &Graph<T>, pred: Var, gt: Var) -> Result<()> {
    let (a, b) = (g.shape(pred), g.shape(gt));
    if a != b || a.len() != 4 || a[1] != 2 {
        return Err(Error::shape(format!(
            "flow loss needs matching [N, 2, H, W] shapes, got {a:?} and {b:?}"
        )));
    }
    Ok(())
}

/// Mean endpoint error.
pub fn epe<T: Real>(g: &Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    check_pair(g, pred, gt)?;
    let d = g.sub(pred, gt)?;
    let n = g.norm(d, 1)?;
    g.mean_all(n)
}

/// Mean over pixels of `logcosh(Δu) + logcosh(Δv)`.
pub fn l_mag<T: Real>(g: &Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    check_pair(g, pred, gt)?;
    let d = g.sub(pred, gt)?;
    let lc = g.log_cosh(d);
    let per_pixel = g.sum(lc, &[1], false)?;
    g.mean_all(per_pixel)
}

/// Mean over pixels of `(1 − cos∠(P, T)) · ‖T‖`. `gt` is treated as data.
pub fn l_ang<T: Real>(g: &Graph<T>, pred: Var, gt: Var, eps: f64) -> Result<Var> {
    check_pair(g, pred, gt)?;
    let tv = g.value(gt);
    let s = tv.shape().to_vec();
    let plane = s[2] * s[3];
    let mut tnorm = Vec::with_capacity(s[0] * plane);
    for sample in tv.data().chunks(2 * plane) {
        let (u, v) = sample.split_at(plane);
        tnorm.extend(u.iter().zip(v).map(|(&a, &b)| a.hypot(b)));
    }
    let tnorm = g.constant(Tensor::new(&[s[0], s[2], s[3]], tnorm)?);
    let gt_c = g.constant((*tv).clone());
    let pnorm = g.norm(pred, 1)?;
    let denom = g.add_scalar(g.mul(pnorm, tnorm)?, eps);
    let dot = g.sum(g.mul(pred, gt_c)?, &[1], false)?;
    let cos = g.div(dot, denom)?;
    let miss = g.add_scalar(g.neg(cos), 1.0);
    let weighted = g.mul(miss, tnorm)?;
    g.mean_all(weighted)
}

/// `l_mag + α·l_ang`.
pub fn combined_loss<T: Real>(g: &Graph<T>, pred: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let mag = l_mag(g, pred, gt)?;
    if cfg.alpha == 0.0 {
        return Ok(mag);
    }
    let ang = l_ang(g, pred, gt, cfg.eps_ang)?;
    g.add(mag, g.scale(ang, cfg.alpha))
}

/// Per-sample mean endpoint error of two `[N, 2, H, W]` tensors, without a graph.
pub fn epe_per_sample<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Vec<f64>> {
    let s = pred.shape();
    if s != gt.shape() || s.len() != 4 || s[1] != 2 {
        return Err(Error::shape(format!(
            "flow metric needs matching [N, 2, H, W] shapes, got {s:?} and {:?}",
            gt.shape()
        )));
    }
    let plane = s[2] * s[3];
    Ok(pred
        .data()
        .chunks(2 * plane)
        .zip(gt.data().chunks(2 * plane))
        .map(|(p, t)| {
            let sum: f64 = (0..plane)
                .map(|i| {
                    let du = p[i].to_f64().unwrap_or(f64::NAN) - t[i].to_f64().unwrap_or(f64::NAN);
                    let dv = p[plane + i].to_f64().unwrap_or(f64::NAN) - t[plane + i].to_f64().unwrap_or(f64::NAN);
                    du.hypot(dv)
                })
                .sum();
            sum / plane as f64
        })
        .collect())
}
