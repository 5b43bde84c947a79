//! Dense per-pixel displacement fields.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Horizontal (`u`) and vertical (`v`) displacement in pixels, row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("flow field extent {width}x{height} must be positive")));
        }
        let n = width * height;
        if u.len() != n || v.len() != n {
            return Err(Error::shape(format!(
                "flow planes of {} and {} values do not fit {width}x{height}",
                u.len(),
                v.len()
            )));
        }
        Ok(Self { width, height, u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height], vec![0.0; width * height])
    }

    /// Every pixel set to `(du, dv)`.
    pub fn constant(width: usize, height: usize, du: f32, dv: f32) -> Result<Self> {
        Self::new(width, height, vec![du; width * height], vec![dv; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn set(&mut self, x: usize, y: usize, (du, dv): (f32, f32)) {
        let i = y * self.width + x;
        self.u[i] = du;
        self.v[i] = dv;
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    fn norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.u.iter().zip(&self.v).map(|(&a, &b)| (a as f64).hypot(b as f64))
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        self.norms().sum::<f64>() / (self.width * self.height) as f64
    }

    /// Mean displacement `(ū, v̄)`.
    pub fn mean(&self) -> (f64, f64) {
        let n = (self.width * self.height) as f64;
        (
            self.u.iter().map(|&x| x as f64).sum::<f64>() / n,
            self.v.iter().map(|&x| x as f64).sum::<f64>() / n,
        )
    }

    /// Stacks fields of one size into `[N, 2, H, W]`.
    pub fn stack<T: Real>(fields: &[FlowField]) -> Result<Tensor<T>> {
        let first = fields.first().ok_or_else(|| Error::shape("cannot stack zero flow fields"))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(fields.len() * 2 * w * h);
        for f in fields {
            if (f.width, f.height) != (w, h) {
                return Err(Error::shape(format!(
                    "cannot stack {}x{} with {w}x{h}",
                    f.width, f.height
                )));
            }
            data.extend(f.u.iter().chain(&f.v).map(|&x| T::of(x as f64)));
        }
        Tensor::new(&[fields.len(), 2, h, w], data)
    }

    /// Splits `[N, 2, H, W]` into fields.
    pub fn unstack<T: Real>(t: &Tensor<T>) -> Result<Vec<FlowField>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::shape(format!("flow batch must be [N, 2, H, W], got {s:?}")));
        }
        let plane = s[2] * s[3];
        let conv = |x: &[T]| x.iter().map(|v| v.to_f64().unwrap_or(f64::NAN) as f32).collect::<Vec<f32>>();
        t.data()
            .chunks(2 * plane)
            .map(|c| FlowField::new(s[3], s[2], conv(&c[..plane]), conv(&c[plane..])))
            .collect()
    }
}
