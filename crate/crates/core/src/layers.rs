//! Named parameter storage and the small set of layers the networks are built from.

use crate::autodiff::{BatchNormMode, Graph, RunningStats, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Init, Tensor};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Which part of a network a parameter belongs to, for parameter-count breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Encoder,
    Contracting,
    Expanding,
    Head,
    Classifier,
}

impl Section {
    pub fn name(self) -> &'static str {
        match self {
            Section::Encoder => "encoder",
            Section::Contracting => "contracting",
            Section::Expanding => "expanding",
            Section::Head => "head",
            Section::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub section: Section,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct NamedStats<T> {
    name: String,
    stats: RunningStats<T>,
}

/// Trainable tensors plus batch-normalization running statistics, in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    stats: Vec<NamedStats<T>>,
    seed: u64,
}

/// Graph handles for every parameter of a store, valid for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    /// `seed` drives the initialization of every tensor added afterwards.
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            stats: Vec::new(),
            seed,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, section: Section, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        // every tensor gets its own stream so adding a layer never reshuffles the others
        let stream = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.params.len() as u64 + 1);
        let value = Tensor::create(shape, init, stream)?;
        self.params.push(Param { name, section, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> usize {
        self.stats.push(NamedStats {
            name: name.into(),
            stats: RunningStats::new(channels),
        });
        self.stats.len() - 1
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn stats_mut(&mut self, idx: usize) -> &mut RunningStats<T> {
        &mut self.stats[idx].stats
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_by_section(&self) -> Vec<(Section, usize)> {
        let mut out: Vec<(Section, usize)> = Vec::new();
        for p in &self.params {
            match out.iter_mut().find(|(s, _)| *s == p.section) {
                Some((_, n)) => *n += p.value.len(),
                None => out.push((p.section, p.value.len())),
            }
        }
        out
    }

    /// Registers every parameter on `g` as a gradient-requiring leaf.
    pub fn bind(&self, g: &Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.param(p.value.clone())).collect(),
        }
    }

    /// Binds every parameter as a constant, for inference without gradient tracking.
    pub fn bind_constant(&self, g: &Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect(),
        }
    }

    /// Gradients from the last backward pass, in parameter order. Parameters that did not
    /// influence the loss get zeros.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| {
                g.grad(v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()).expect("parameter shape is valid"))
            })
            .collect()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    /// Parameters and running statistics as named tensors (statistics last).
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> =
            self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for s in &self.stats {
            let c = s.stats.mean.len();
            out.push((
                format!("{}.running_mean", s.name),
                Tensor::new(&[c], s.stats.mean.clone()).expect("channel count >= 1"),
            ));
            out.push((
                format!("{}.running_var", s.name),
                Tensor::new(&[c], s.stats.var.clone()).expect("channel count >= 1"),
            ));
        }
        out
    }

    /// Restores tensors produced by [`ParamStore::state`]; names and shapes must match exactly.
    pub fn load_state(&mut self, state: &[(String, Tensor<T>)]) -> Result<()> {
        let expected = self.params.len() + 2 * self.stats.len();
        if state.len() != expected {
            return Err(Error::config(format!(
                "state holds {} tensors, model expects {expected}",
                state.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(state) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::config(format!(
                    "state tensor {name} {:?} does not match parameter {} {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        let rest = &state[self.params.len()..];
        for (s, pair) in self.stats.iter_mut().zip(rest.chunks(2)) {
            let (mean, var) = (&pair[0], &pair[1]);
            let c = s.stats.mean.len();
            if mean.0 != format!("{}.running_mean", s.name)
                || var.0 != format!("{}.running_var", s.name)
                || mean.1.len() != c
                || var.1.len() != c
            {
                return Err(Error::config(format!("running statistics mismatch for {}", s.name)));
            }
            s.stats.mean = mean.1.data().to_vec();
            s.stats.var = var.1.data().to_vec();
        }
        Ok(())
    }
}

/// A 2-D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        section: Section,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::grouped(store, name, section, in_ch, out_ch, kernel, stride, 1, bias)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn grouped<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        section: Section,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || !in_ch.is_multiple_of(groups) || !out_ch.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "{name}: groups={groups} must divide {in_ch} inputs and {out_ch} outputs"
            )));
        }
        let weight = store.add(
            format!("{name}.weight"),
            section,
            &[out_ch, in_ch / groups, kernel, kernel],
            Init::HeFanIn,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), section, &[out_ch], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            groups,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            self.stride,
            self.padding,
            self.groups,
        )
    }
}

/// A ×2 transposed convolution (kernel 4, stride 2, padding 1 for the default kernel).
#[derive(Debug, Clone)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Deconv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        section: Section,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel < 2 || !kernel.is_multiple_of(2) {
            return Err(Error::config(format!("{name}: upsampling kernel must be even and >= 2, got {kernel}")));
        }
        // fan-in of a stride-2 transposed convolution: each output sees in_ch·(k/2)² taps
        let fan_in = in_ch * (kernel / 2) * (kernel / 2);
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            section,
            &[in_ch, out_ch, kernel, kernel],
            Init::Normal { mean: 0.0, std },
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), section, &[out_ch], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: 2,
            padding: (kernel - 2) / 2,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, section: Section, channels: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), section, &[channels], Init::Constant(1.0))?;
        let beta = store.add(format!("{name}.beta"), section, &[channels], Init::Zeros)?;
        let stats = store.add_stats(name, channels);
        Ok(Self { gamma, beta, stats })
    }

    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        store: &mut ParamStore<T>,
        x: Var,
        mode: BatchNormMode,
    ) -> Result<Var> {
        g.batchnorm2d(x, p.var(self.gamma), p.var(self.beta), store.stats_mut(self.stats), mode)
    }
}

/// Fully connected layer, `[N, in] -> [N, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, section: Section, inputs: usize, outputs: usize) -> Result<Self> {
        let std = (2.0 / inputs as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            section,
            &[inputs, outputs],
            Init::Normal { mean: 0.0, std },
        )?;
        let bias = store.add(format!("{name}.bias"), section, &[outputs], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_count() {
        let mut s = ParamStore::<f32>::new(0);
        Conv::new(&mut s, "c", Section::Contracting, 8, 16, 3, 1, true).unwrap();
        assert_eq!(s.count(), 3 * 3 * 8 * 16 + 16);
        assert_eq!(s.count(), 1168);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new(0);
        s.add("a", Section::Head, &[2], Init::Zeros).unwrap();
        assert!(s.add("a", Section::Head, &[2], Init::Zeros).is_err());
    }

    #[test]
    fn state_round_trip() {
        let mut s = ParamStore::<f64>::new(3);
        Conv::new(&mut s, "c", Section::Encoder, 2, 4, 3, 1, true).unwrap();
        BatchNorm::new(&mut s, "bn", Section::Encoder, 4).unwrap();
        s.stats_mut(0).mean[1] = 0.5;
        let state = s.state();
        let mut t = ParamStore::<f64>::new(99);
        Conv::new(&mut t, "c", Section::Encoder, 2, 4, 3, 1, true).unwrap();
        BatchNorm::new(&mut t, "bn", Section::Encoder, 4).unwrap();
        assert_ne!(s, t);
        t.load_state(&state).unwrap();
        assert_eq!(s.state(), t.state());
    }
}
