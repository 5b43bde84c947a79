//! Central finite-difference checks of reverse-mode gradients (64-bit).

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{BatchNormMode, Graph, RunningStats, Var};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::Bound;
use crate::loss::{combined_loss, epe, l_ang, l_mag, LossConfig};
use crate::network::FlowModel;
use crate::tensor::{Init, Tensor};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;

/// Outcome of one check: `max |analytic - numeric| / max(|analytic|, |numeric|)` over the
/// probed coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

impl fmt::Display for GradCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} rel_err={:.3e} tol={:.0e} probes={} {}",
            self.name,
            self.rel_err,
            self.tolerance,
            self.probes,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Compares backward-pass gradients of `f` against central differences.
///
/// Non-scalar outputs are contracted with fixed random weights. At most `per_input`
/// coordinates of each input are probed (all of them when the input is smaller).
pub fn check(
    name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    per_input: usize,
    seed: u64,
    mut f: impl FnMut(&Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| if grads { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
        let mut out = f(&g, &vars)?;
        if g.value(out).len() != 1 {
            let shape = g.shape(out);
            let w = match &weights {
                Some(w) => w.clone(),
                None => {
                    let w = Tensor::create(&shape, Init::Uniform { low: -1.0, high: 1.0 }, seed ^ 0x9e37)?;
                    weights = Some(w.clone());
                    w
                }
            };
            let wv = g.constant(w);
            let prod = g.mul(out, wv)?;
            let axes: Vec<usize> = (0..shape.len()).collect();
            out = g.sum(prod, &axes, false)?;
        }
        let value = g.value(out).data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(out)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, t)| g.grad(v).map_or_else(|| Tensor::zeros(t.shape()), Ok))
            .collect::<Result<Vec<_>>>()?;
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = inputs.to_vec();
    let (mut max_diff, mut max_mag, mut probes) = (0.0f64, 0.0f64, 0);
    for i in 0..xs.len() {
        let n = xs[i].len();
        let coords: Vec<usize> = if n <= per_input { (0..n).collect() } else { sample(&mut rng, n, per_input).into_vec() };
        for c in coords {
            let orig = xs[i].data()[c];
            xs[i].data_mut()[c] = orig + STEP;
            let (plus, _) = eval(&xs, false)?;
            xs[i].data_mut()[c] = orig - STEP;
            let (minus, _) = eval(&xs, false)?;
            xs[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i].data()[c];
            max_diff = max_diff.max((a - numeric).abs());
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
            probes += 1;
        }
    }
    let rel_err = if max_mag == 0.0 { max_diff } else { max_diff / max_mag };
    if !rel_err.is_finite() {
        return Err(Error::Data(format!("{name}: non-finite gradient comparison")));
    }
    Ok(GradCheck { name: name.to_string(), rel_err, tolerance, probes })
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::Uniform { low: -1.0, high: 1.0 }, seed).expect("valid shape")
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::Uniform { low: 0.5, high: 2.0 }, seed).expect("valid shape")
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>>);

fn primitive_cases() -> Vec<Case> {
    let s = [2, 3, 4, 4];
    let mut v: Vec<Case> = Vec::new();
    macro_rules! unary {
        ($name:literal, $input:expr, $op:expr) => {
            v.push(($name, vec![$input], Box::new(move |g: &Graph<f64>, x: &[Var]| $op(g, x[0]))));
        };
    }
    unary!("neg", rand(&s, 1), |g: &Graph<f64>, x| Ok(g.neg(x)));
    unary!("exp", rand(&s, 2), |g: &Graph<f64>, x| Ok(g.exp(x)));
    unary!("log", positive(&s, 3), |g: &Graph<f64>, x| g.log(x));
    unary!("sqrt", positive(&s, 4), |g: &Graph<f64>, x| g.sqrt(x));
    unary!("cosh", rand(&s, 5), |g: &Graph<f64>, x| Ok(g.cosh(x)));
    unary!("tanh", rand(&s, 6), |g: &Graph<f64>, x| Ok(g.tanh(x)));
    unary!("square", rand(&s, 7), |g: &Graph<f64>, x| Ok(g.square(x)));
    unary!("log_cosh", rand(&s, 8), |g: &Graph<f64>, x| Ok(g.log_cosh(x)));
    unary!("relu", rand(&s, 9), |g: &Graph<f64>, x| Ok(g.relu(x)));
    unary!("leaky_relu", rand(&s, 10), |g: &Graph<f64>, x| Ok(g.leaky_relu(x, 0.1)));
    unary!("scale", rand(&s, 11), |g: &Graph<f64>, x| Ok(g.scale(x, -2.5)));
    unary!("add_scalar", rand(&s, 12), |g: &Graph<f64>, x| Ok(g.add_scalar(x, 0.75)));
    macro_rules! binary {
        ($name:literal, $a:expr, $b:expr, $op:ident) => {
            v.push(($name, vec![$a, $b], Box::new(|g: &Graph<f64>, x: &[Var]| g.$op(x[0], x[1]))));
        };
    }
    binary!("add", rand(&s, 13), rand(&[3, 1, 1], 14), add);
    binary!("sub", rand(&s, 15), rand(&[1, 4], 16), sub);
    binary!("mul", rand(&s, 17), rand(&s, 18), mul);
    binary!("div", rand(&s, 19), positive(&[2, 1, 4, 1], 20), div);
    binary!("matmul", rand(&[3, 5], 21), rand(&[5, 4], 22), matmul);
    v.push(("sum", vec![rand(&s, 23)], Box::new(|g, x| g.sum(x[0], &[1, 3], false))));
    v.push(("mean", vec![rand(&s, 24)], Box::new(|g, x| g.mean(x[0], &[0, 2], true))));
    v.push(("mean_all", vec![rand(&s, 25)], Box::new(|g, x| g.mean_all(x[0]))));
    v.push(("reshape", vec![rand(&s, 26)], Box::new(|g, x| g.reshape(x[0], &[6, 16]))));
    v.push((
        "concat",
        vec![rand(&s, 27), rand(&[2, 2, 4, 4], 28)],
        Box::new(|g, x| g.concat(&[x[0], x[1]], 1)),
    ));
    v.push(("norm", vec![rand(&s, 29)], Box::new(|g, x| g.norm(x[0], 1))));
    v.push(("softmax", vec![rand(&s, 30)], Box::new(|g, x| g.softmax(x[0], 1))));
    v.push((
        "softmax_cross_entropy",
        vec![rand(&[4, 5], 31)],
        Box::new(|g, x| g.softmax_cross_entropy(x[0], &[0, 3, 4, 1])),
    ));
    v.push((
        "conv2d",
        vec![rand(&s, 32), rand(&[4, 3, 3, 3], 33), rand(&[4], 34)],
        Box::new(|g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 1, 1)),
    ));
    v.push((
        "conv2d_strided_grouped",
        vec![rand(&[2, 4, 5, 5], 35), rand(&[6, 2, 3, 3], 36)],
        Box::new(|g, x| g.conv2d(x[0], x[1], None, 2, 1, 2)),
    ));
    v.push((
        "conv_transpose2d",
        vec![rand(&s, 37), rand(&[3, 2, 4, 4], 38), rand(&[2], 39)],
        Box::new(|g, x| g.conv_transpose2d(x[0], x[1], Some(x[2]), 2, 1)),
    ));
    v.push(("maxpool2d", vec![rand(&s, 40)], Box::new(|g, x| g.maxpool2d(x[0], 2, 2))));
    v.push((
        "batchnorm2d",
        vec![rand(&s, 41), positive(&[3], 42), rand(&[3], 43)],
        Box::new(|g, x| g.batchnorm2d(x[0], x[1], x[2], &mut RunningStats::new(3), BatchNormMode::Train)),
    ));
    v.push(("bilinear_resize", vec![rand(&s, 44)], Box::new(|g, x| g.bilinear_resize(x[0], 7, 3))));
    v.push((
        "dynamic_route",
        vec![rand(&[2, 3 * 2 * 4, 2, 2], 45)],
        Box::new(|g, x| Ok(g.dynamic_route(x[0], 3, 2, 4, 3)?.0)),
    ));
    let flow = [2, 2, 4, 4];
    v.push(("epe", vec![rand(&flow, 46), rand(&flow, 47)], Box::new(|g, x| epe(g, x[0], x[1]))));
    v.push(("l_mag", vec![rand(&flow, 48), rand(&flow, 49)], Box::new(|g, x| l_mag(g, x[0], x[1]))));
    // The angular term treats ground truth as data, so only the prediction is probed.
    let gt = rand(&flow, 51);
    v.push(("l_ang", vec![rand(&flow, 50)], Box::new(move |g, x| l_ang(g, x[0], g.constant(gt.clone()), 1e-8))));
    let gt = rand(&flow, 53);
    v.push((
        "combined_loss",
        vec![rand(&flow, 52)],
        Box::new(move |g, x| combined_loss(g, x[0], g.constant(gt.clone()), &LossConfig::new(0.15)?)),
    ));
    v
}

/// Checks every differentiable primitive and the loss functions.
pub fn check_primitives(seed: u64) -> Result<Vec<GradCheck>> {
    primitive_cases()
        .into_iter()
        .map(|(name, inputs, f)| check(name, &inputs, PRIMITIVE_TOLERANCE, 64, seed, |g, x| f(g, x)))
        .collect()
}

/// Checks a whole flow network with the combined loss, probing the input and every
/// parameter tensor.
pub fn check_flow_model(preset: &str, size: usize, per_input: usize, seed: u64) -> Result<GradCheck> {
    let cfg = ModelConfig::preset(preset)?;
    let mut model = FlowModel::<f64>::build(&cfg, seed)?;
    let x = Tensor::create(&[2, 6, size, size], Init::Uniform { low: -1.0, high: 1.0 }, seed + 1)?;
    let gt = Tensor::create(&[2, 2, size, size], Init::Uniform { low: -3.0, high: 3.0 }, seed + 2)?;
    let mut inputs = vec![x];
    inputs.extend(model.store().params().iter().map(|p| p.value.clone()));
    let loss = LossConfig::new(0.15)?;
    check(&format!("{preset}+combined_loss"), &inputs, MODEL_TOLERANCE, per_input, seed, |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let pred = model.forward_flow(g, &p, v[0])?;
        let t = g.constant(gt.clone());
        combined_loss(g, pred, t, &loss)
    })
}

/// Checks the motion classifier with cross-entropy.
pub fn check_classifier(per_input: usize, seed: u64) -> Result<GradCheck> {
    let model = Classifier::<f64>::build(&ClassifierConfig::new(8), 32, 32, seed)?;
    let x = Tensor::create(&[2, 2, 32, 32], Init::Uniform { low: -2.0, high: 2.0 }, seed + 1)?;
    let mut inputs = vec![x];
    inputs.extend(model.store().params().iter().map(|p| p.value.clone()));
    check("classifier+cross_entropy", &inputs, PRIMITIVE_TOLERANCE, per_input, seed, |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let logits = model.logits(g, &p, v[0])?;
        g.softmax_cross_entropy(logits, &[3, 6])
    })
}

/// The complete suite: primitives, the classifier, and the flowcaps-mini composition.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = check_primitives(seed)?;
    out.push(check_classifier(4, seed)?);
    out.push(check_flow_model("flowcaps-mini", 32, 3, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for c in check_primitives(7).unwrap() {
            assert!(c.passed(), "{c}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x * stop_gradient(x): the analytic gradient is half the true one.
        let x = rand(&[5], 3);
        let c = check("detached", &[x], 1e-4, 8, 0, |g, v| {
            let frozen = g.constant((*g.value(v[0])).clone());
            g.mul(v[0], frozen)
        })
        .unwrap();
        assert!(!c.passed());
    }
}
