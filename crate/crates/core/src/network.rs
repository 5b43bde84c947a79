//! Flow networks: a capsule or convolutional encoder followed by a ×2 upsampling decoder
//! with skip concatenation.
//!
//! Each decoder block concatenates the most recent encoder feature map at its resolution.
//! With `refine`, a flow estimate is also predicted at every level, upsampled, and fed to
//! the next level (the FlowNetS decoder); only the final estimate is returned.

use crate::autodiff::{BatchNormMode, Graph, Var};
use crate::capsule::{CapsLayer, CapsSpec};
use crate::config::{ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Bound, Conv, Deconv, ParamStore, Section};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum EncoderLayer {
    Conv { conv: Conv, bn: Option<BatchNorm> },
    Caps(CapsLayer),
}

#[derive(Debug, Clone)]
struct Level {
    deconv: Deconv,
    /// Index into the encoder feature list.
    skip: usize,
    /// Upsamples the previous level's flow (refine mode).
    upflow: Option<Deconv>,
    /// Flow prediction at this level's output (refine mode, all but the last level).
    predict: Option<Conv>,
}

/// A flow network with its parameters.
#[derive(Debug, Clone)]
pub struct FlowModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Vec<EncoderLayer>,
    bottleneck_predict: Option<Conv>,
    levels: Vec<Level>,
    head: Conv,
    mode: BatchNormMode,
}

/// Parameter count with a per-section breakdown.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub sections: Vec<(Section, usize)>,
}

impl std::fmt::Display for ParamCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (s, n) in &self.sections {
            writeln!(f, "{:<12} {n:>12}", s.name())?;
        }
        write!(f, "{:<12} {:>12}", "total", self.total)
    }
}

impl<T: Real> FlowModel<T> {
    /// Builds and initializes a network; identical seeds give bitwise-identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let last_caps = config.encoder.iter().rposition(Stage::is_capsule);
        let mut encoder = Vec::with_capacity(config.encoder.len());
        // (channels, cumulative stride) of every encoder output
        let mut feats: Vec<(usize, usize)> = Vec::new();
        let (mut ch, mut factor) = (config.in_channels, 1usize);
        let (mut caps_types, mut caps_dim) = (0, 0);
        for (i, stage) in config.encoder.iter().enumerate() {
            let section = if last_caps.is_some_and(|l| i <= l) {
                Section::Encoder
            } else {
                Section::Contracting
            };
            let name = format!("enc{i}");
            let layer = match *stage {
                Stage::Conv { out, kernel, stride, norm } => {
                    let conv = Conv::new(&mut store, &name, section, ch, out, kernel, stride, !norm)?;
                    let bn = if norm {
                        Some(BatchNorm::new(&mut store, &format!("{name}.bn"), section, out)?)
                    } else {
                        None
                    };
                    EncoderLayer::Conv { conv, bn }
                }
                Stage::PrimaryCaps { types, dim, kernel, stride } => {
                    let spec = CapsSpec { types, dim, kernel, stride, iters: 0 };
                    (caps_types, caps_dim) = (types, dim);
                    EncoderLayer::Caps(CapsLayer::primary(&mut store, &name, ch, spec)?)
                }
                Stage::Caps { types, dim, kernel, stride, iters } => {
                    let spec = CapsSpec { types, dim, kernel, stride, iters };
                    let layer = CapsLayer::routed(&mut store, &name, caps_types, caps_dim, spec)?;
                    (caps_types, caps_dim) = (types, dim);
                    EncoderLayer::Caps(layer)
                }
            };
            encoder.push(layer);
            ch = stage.out_channels();
            factor *= stage.stride();
            feats.push((ch, factor));
        }

        let head_in_flow = if config.refine { 2 } else { 0 };
        let bottleneck_predict = if config.refine {
            Some(Conv::new(&mut store, "predict0", Section::Expanding, ch, 2, config.head_kernel, 1, false)?)
        } else {
            None
        };
        let n_levels = config.expanding.len();
        let mut levels = Vec::with_capacity(n_levels);
        for (k, &width) in config.expanding.iter().enumerate() {
            let name = format!("dec{k}");
            let deconv = Deconv::new(&mut store, &name, Section::Expanding, ch, width, config.deconv_kernel, false)?;
            factor /= 2;
            let skip = feats.iter().rposition(|&(_, f)| f == factor).ok_or_else(|| {
                Error::config(format!(
                    "{}: decoder block {k} outputs at 1/{factor} resolution but no encoder stage matches it for the skip connection",
                    config.preset
                ))
            })?;
            let upflow = if config.refine {
                Some(Deconv::new(&mut store, &format!("{name}.upflow"), Section::Expanding, 2, 2, config.deconv_kernel, false)?)
            } else {
                None
            };
            ch = width + feats[skip].0 + head_in_flow;
            let predict = if config.refine && k + 1 < n_levels {
                Some(Conv::new(&mut store, &format!("predict{}", k + 1), Section::Expanding, ch, 2, config.head_kernel, 1, false)?)
            } else {
                None
            };
            levels.push(Level { deconv, skip, upflow, predict });
        }
        let head = Conv::new(&mut store, "head", Section::Head, ch, 2, config.head_kernel, 1, config.head_bias)?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            bottleneck_predict,
            levels,
            head,
            mode: BatchNormMode::Train,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn mode(&self) -> BatchNormMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BatchNormMode) {
        self.mode = mode;
    }

    pub fn count_params(&self) -> ParamCount {
        let mut sections = self.store.count_by_section();
        sections.sort_by_key(|(s, _)| *s);
        ParamCount { total: self.store.count(), sections }
    }

    /// Sets the final prediction head to zero.
    pub fn zero_head(&mut self) {
        let ids = [Some(self.head.weight), self.head.bias];
        for id in ids.into_iter().flatten() {
            self.store.get_mut(id).data_mut().fill(T::zero());
        }
    }

    pub fn bind(&self, g: &Graph<T>) -> Bound {
        self.store.bind(g)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.total_stride();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "expected frames [N, {}, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return Err(Error::shape(format!(
                "input extent {}x{} must be a multiple of {m} for preset {}",
                shape[2], shape[3], self.config.preset
            )));
        }
        Ok(())
    }

    /// Flow at the head's resolution, `[N, 2, H/f, W/f]` in units of that grid.
    pub fn forward_raw(&mut self, g: &Graph<T>, p: &Bound, frames: Var) -> Result<Var> {
        self.check_input(&g.shape(frames))?;
        let slope = self.config.leaky_slope;
        let mode = self.mode;
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut x = frames;
        for layer in &self.encoder {
            x = match layer {
                EncoderLayer::Conv { conv, bn } => {
                    let mut y = conv.forward(g, p, x)?;
                    if let Some(bn) = bn {
                        y = bn.forward(g, p, &mut self.store, y, mode)?;
                    }
                    g.leaky_relu(y, slope)
                }
                EncoderLayer::Caps(c) => c.forward(g, p, x)?.var,
            };
            feats.push(x);
        }
        let mut flow = match &self.bottleneck_predict {
            Some(c) => Some(c.forward(g, p, x)?),
            None => None,
        };
        for level in &self.levels {
            let up = g.leaky_relu(level.deconv.forward(g, p, x)?, slope);
            let mut parts = vec![feats[level.skip], up];
            if let (Some(upflow), Some(f)) = (&level.upflow, flow) {
                parts.push(upflow.forward(g, p, f)?);
            }
            x = g.concat(&parts, 1)?;
            if let Some(pred) = &level.predict {
                flow = Some(pred.forward(g, p, x)?);
            }
        }
        self.head.forward(g, p, x)
    }

    /// Full-resolution flow `[N, 2, H, W]` in pixels.
    pub fn forward_flow(&mut self, g: &Graph<T>, p: &Bound, frames: Var) -> Result<Var> {
        let s = g.shape(frames);
        let raw = self.forward_raw(g, p, frames)?;
        let f = self.config.output_factor();
        if f == 1 {
            return Ok(raw);
        }
        let up = g.bilinear_resize(raw, s[2], s[3])?;
        Ok(g.scale(up, f as f64))
    }

    /// Inference without gradient bookkeeping; uses the current mode.
    pub fn predict(&mut self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.bind_constant(&g);
        let x = g.constant(frames.clone());
        let y = self.forward_flow(&g, &p, x)?;
        Ok((*g.value(y)).clone())
    }

    /// Binds parameters as constants (no gradients tracked).
    pub fn bind_constant(&self, g: &Graph<T>) -> Bound {
        self.store.bind_constant(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn flowcaps_paper_count_breakdown() {
        let cfg = ModelConfig::preset("flowcaps-paper").unwrap();
        let m = FlowModel::<f32>::build(&cfg, 0).unwrap();
        let c = m.count_params();
        let get = |s: Section| c.sections.iter().find(|(x, _)| *x == s).unwrap().1;
        assert_eq!(get(Section::Encoder), 9_440 + 73_728 + 294_912 + 9_216);
        assert_eq!(get(Section::Contracting), 1_165_376);
        assert_eq!(get(Section::Expanding), 868_352);
        assert_eq!(get(Section::Head), 144 * 9 * 2 + 2);
        assert_eq!(c.total, 2_423_618);
    }

    #[test]
    fn mini_output_shape_and_zero_head() {
        let cfg = ModelConfig::preset("flowcaps-mini").unwrap();
        let mut m = FlowModel::<f32>::build(&cfg, 1).unwrap();
        m.zero_head();
        let x = Tensor::create(&[2, 6, 64, 64], Init::Uniform { low: -1.0, high: 1.0 }, 2).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 64, 64]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flownets_mini_runs() {
        let cfg = ModelConfig::preset("flownets-mini").unwrap();
        let mut m = FlowModel::<f32>::build(&cfg, 1).unwrap();
        let x = Tensor::create(&[2, 6, 32, 32], Init::Uniform { low: -1.0, high: 1.0 }, 3).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 32, 32]);
        assert!(y.is_finite());
    }

    #[test]
    fn indivisible_extent_names_multiple() {
        let cfg = ModelConfig::preset("flowcaps-mini").unwrap();
        let mut m = FlowModel::<f32>::build(&cfg, 1).unwrap();
        let x = Tensor::zeros(&[1, 6, 40, 40]).unwrap();
        let err = m.predict(&x).unwrap_err().to_string();
        assert!(err.contains("multiple of 16"), "{err}");
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::preset("flowcaps-mini").unwrap();
        let a = FlowModel::<f32>::build(&cfg, 9).unwrap();
        let b = FlowModel::<f32>::build(&cfg, 9).unwrap();
        let c = FlowModel::<f32>::build(&cfg, 10).unwrap();
        assert_eq!(a.store(), b.store());
        assert_ne!(a.store().params(), c.store().params());
    }

    #[test]
    fn missing_skip_resolution_is_config_error() {
        // full-resolution decoder output but no encoder stage at full resolution
        let mut cfg = ModelConfig::preset("flownets-mini").unwrap();
        cfg.encoder[0] = Stage::Conv { out: 16, kernel: 7, stride: 2, norm: true };
        cfg.encoder[8] = Stage::Conv { out: 128, kernel: 3, stride: 1, norm: true };
        let err = FlowModel::<f32>::build(&cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
