//! Network hyperparameters, named presets, and a line-oriented `key = value` text format.
//!
//! ```text
//! # flowcaps-mini
//! preset = flowcaps-mini
//! in_channels = 6
//! stage = conv 16 k7 s1 bias
//! stage = pcaps 16x4 k3 s2
//! stage = caps 8x4 k3 s1 r3
//! stage = conv 16 k3 s1 bn
//! expanding = 64 32 16 8
//! deconv_kernel = 4
//! head_kernel = 3
//! head_bias = true
//! refine = false
//! leaky_slope = 0.1
//! ```
//!
//! `stage` repeats, one line per encoder stage in order. Conv stages end in `bias` (plain
//! convolution with bias) or `bn` (batch-normalized, no bias); capsule stages are `pcaps`
//! (primary) or `caps` (routed, `r` iterations).

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered `key = value` pairs; keys may repeat.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvText {
    pub entries: Vec<(String, String)>,
}

impl KvText {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`, got {line:?}", no + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Format(format!("line {}: empty key", no + 1)));
            }
            entries.push((key.to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Last value for `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse_value<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.get(key)
            .map(|v| {
                v.parse::<V>()
                    .map_err(|_| Error::Format(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }
}

impl fmt::Display for KvText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// One encoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    Conv { out: usize, kernel: usize, stride: usize, norm: bool },
    PrimaryCaps { types: usize, dim: usize, kernel: usize, stride: usize },
    Caps { types: usize, dim: usize, kernel: usize, stride: usize, iters: usize },
}

impl Stage {
    pub fn stride(&self) -> usize {
        match *self {
            Stage::Conv { stride, .. } | Stage::PrimaryCaps { stride, .. } | Stage::Caps { stride, .. } => stride,
        }
    }

    pub fn kernel(&self) -> usize {
        match *self {
            Stage::Conv { kernel, .. } | Stage::PrimaryCaps { kernel, .. } | Stage::Caps { kernel, .. } => kernel,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            Stage::Conv { out, .. } => out,
            Stage::PrimaryCaps { types, dim, .. } | Stage::Caps { types, dim, .. } => types * dim,
        }
    }

    pub fn is_capsule(&self) -> bool {
        !matches!(self, Stage::Conv { .. })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Stage::Conv { out, kernel, stride, norm } => {
                write!(f, "conv {out} k{kernel} s{stride} {}", if norm { "bn" } else { "bias" })
            }
            Stage::PrimaryCaps { types, dim, kernel, stride } => write!(f, "pcaps {types}x{dim} k{kernel} s{stride}"),
            Stage::Caps { types, dim, kernel, stride, iters } => {
                write!(f, "caps {types}x{dim} k{kernel} s{stride} r{iters}")
            }
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed stage {s:?}"));
        let tok: Vec<&str> = s.split_whitespace().collect();
        let num = |t: &str, prefix: &str| -> Result<usize> {
            t.strip_prefix(prefix).and_then(|v| v.parse().ok()).ok_or_else(bad)
        };
        let caps_shape = |t: &str| -> Result<(usize, usize)> {
            let (a, b) = t.split_once('x').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        };
        match tok.as_slice() {
            ["conv", out, k, st, tail] => Ok(Stage::Conv {
                out: out.parse().map_err(|_| bad())?,
                kernel: num(k, "k")?,
                stride: num(st, "s")?,
                norm: match *tail {
                    "bn" => true,
                    "bias" => false,
                    _ => return Err(bad()),
                },
            }),
            ["pcaps", shape, k, st] => {
                let (types, dim) = caps_shape(shape)?;
                Ok(Stage::PrimaryCaps { types, dim, kernel: num(k, "k")?, stride: num(st, "s")? })
            }
            ["caps", shape, k, st, r] => {
                let (types, dim) = caps_shape(shape)?;
                Ok(Stage::Caps { types, dim, kernel: num(k, "k")?, stride: num(st, "s")?, iters: num(r, "r")? })
            }
            _ => Err(bad()),
        }
    }
}

/// Complete hyperparameter record of a flow network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub in_channels: usize,
    pub encoder: Vec<Stage>,
    /// Output widths of the ×2 upsampling blocks.
    pub expanding: Vec<usize>,
    pub deconv_kernel: usize,
    pub head_kernel: usize,
    pub head_bias: bool,
    /// Predict flow at every decoder level and feed it upward (FlowNetS-style).
    pub refine: bool,
    pub leaky_slope: f64,
}

pub const PRESETS: [&str; 4] = ["flowcaps-paper", "flowcaps-mini", "flownets-ref", "flownets-mini"];

fn conv(out: usize, kernel: usize, stride: usize, norm: bool) -> Stage {
    Stage::Conv { out, kernel, stride, norm }
}

fn contracting(widths: [usize; 7]) -> impl Iterator<Item = Stage> {
    widths
        .into_iter()
        .zip([1, 2, 1, 2, 1, 2, 1])
        .map(|(w, s)| conv(w, 3, s, true))
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = |preset: &str, encoder: Vec<Stage>, expanding: Vec<usize>, refine: bool| ModelConfig {
            preset: preset.to_string(),
            in_channels: 6,
            encoder,
            expanding,
            deconv_kernel: 4,
            head_kernel: 3,
            head_bias: !refine,
            refine,
            leaky_slope: 0.1,
        };
        let cfg = match name {
            "flowcaps-paper" => {
                let mut enc = vec![
                    conv(32, 7, 2, false),
                    Stage::PrimaryCaps { types: 32, dim: 8, kernel: 3, stride: 2 },
                    Stage::Caps { types: 16, dim: 8, kernel: 3, stride: 2, iters: 3 },
                    Stage::Caps { types: 1, dim: 8, kernel: 3, stride: 2, iters: 3 },
                ];
                enc.extend(contracting([32, 64, 64, 128, 128, 256, 256]));
                base(name, enc, vec![128, 64, 32, 16], false)
            }
            "flowcaps-mini" => {
                let mut enc = vec![
                    conv(16, 7, 1, false),
                    Stage::PrimaryCaps { types: 16, dim: 4, kernel: 3, stride: 2 },
                    Stage::Caps { types: 8, dim: 4, kernel: 3, stride: 1, iters: 3 },
                    Stage::Caps { types: 1, dim: 8, kernel: 3, stride: 1, iters: 3 },
                ];
                enc.extend(contracting([16, 32, 32, 64, 64, 128, 128]));
                base(name, enc, vec![64, 32, 16, 8], false)
            }
            "flownets-ref" => {
                let widths = [64, 128, 256, 256, 512, 512, 512, 512, 1024, 1024];
                let kernels = [7, 5, 5, 3, 3, 3, 3, 3, 3, 3];
                let strides = [2, 2, 2, 1, 2, 1, 2, 1, 2, 1];
                let enc = (0..10).map(|i| conv(widths[i], kernels[i], strides[i], false)).collect();
                base(name, enc, vec![512, 256, 128, 64], true)
            }
            "flownets-mini" => {
                let widths = [16, 32, 32, 32, 64, 64, 64, 64, 128, 128];
                let kernels = [7, 5, 3, 3, 3, 3, 3, 3, 3, 3];
                let strides = [1, 2, 1, 1, 2, 1, 2, 1, 2, 1];
                let enc = (0..10).map(|i| conv(widths[i], kernels[i], strides[i], true)).collect();
                base(name, enc, vec![64, 32, 16, 8], true)
            }
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Product of all encoder strides; input extents must be multiples of it.
    pub fn total_stride(&self) -> usize {
        self.encoder.iter().map(Stage::stride).product()
    }

    /// Ratio of input resolution to the resolution the head predicts at.
    pub fn output_factor(&self) -> usize {
        self.total_stride() >> self.expanding.len()
    }

    pub fn has_capsules(&self) -> bool {
        self.encoder.iter().any(Stage::is_capsule)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(format!("{}: {m}", self.preset)));
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        if self.encoder.is_empty() {
            return fail("encoder has no stages".into());
        }
        for (i, st) in self.encoder.iter().enumerate() {
            if st.stride() == 0 || st.kernel() % 2 == 0 || st.out_channels() == 0 {
                return fail(format!("stage {i} ({st}) needs an odd kernel, stride >= 1 and a nonzero width"));
            }
            match st {
                Stage::Caps { iters: 0, .. } => return fail(format!("stage {i}: routing needs r >= 1")),
                Stage::Caps { .. } if i == 0 || !self.encoder[i - 1].is_capsule() => {
                    return fail(format!("stage {i}: routed capsules must follow a capsule stage"))
                }
                _ => {}
            }
        }
        let stride = self.total_stride();
        if !stride.is_power_of_two() || self.encoder.iter().any(|s| s.stride() > 2) {
            return fail("encoder strides must each be 1 or 2".into());
        }
        if self.expanding.is_empty() || self.expanding.contains(&0) {
            return fail("expanding part needs at least one nonzero width".into());
        }
        if (1usize << self.expanding.len()) > stride {
            return fail(format!(
                "{} upsampling blocks overshoot a total encoder stride of {stride}",
                self.expanding.len()
            ));
        }
        if self.deconv_kernel < 2 || !self.deconv_kernel.is_multiple_of(2) || self.head_kernel.is_multiple_of(2) {
            return fail("deconv kernel must be even, head kernel odd".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        if self.has_capsules() {
            self.validate_capsule_layout()?;
        }
        Ok(())
    }

    /// Capsule encoder, seven batch-normalized contracting blocks downsampling at blocks
    /// 2, 4 and 6, four upsampling blocks, and a single 8-D output capsule type.
    fn validate_capsule_layout(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(format!("{}: {m}", self.preset)));
        let last_caps = self.encoder.iter().rposition(Stage::is_capsule).expect("has capsules");
        if !matches!(self.encoder[last_caps], Stage::Caps { types: 1, dim: 8, .. }) {
            return fail("the last capsule stage must be routed to 1 type of dimension 8");
        }
        let blocks = &self.encoder[last_caps + 1..];
        if blocks.len() != 7 {
            return fail("the contracting part must have exactly 7 blocks");
        }
        for (i, b) in blocks.iter().enumerate() {
            let want = if i % 2 == 1 { 2 } else { 1 };
            if !matches!(*b, Stage::Conv { norm: true, .. }) || b.stride() != want {
                return fail("contracting blocks must be batch-normalized and downsample at blocks 2, 4 and 6 only");
            }
        }
        if self.expanding.len() != 4 {
            return fail("the expanding part must have exactly 4 blocks");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::default();
        kv.push("preset", &self.preset);
        kv.push("in_channels", self.in_channels);
        for s in &self.encoder {
            kv.push("stage", s);
        }
        let widths: Vec<String> = self.expanding.iter().map(|w| w.to_string()).collect();
        kv.push("expanding", widths.join(" "));
        kv.push("deconv_kernel", self.deconv_kernel);
        kv.push("head_kernel", self.head_kernel);
        kv.push("head_bias", self.head_bias);
        kv.push("refine", self.refine);
        kv.push("leaky_slope", self.leaky_slope);
        kv
    }

    /// Reads a config from key-value text. A `preset` key supplies defaults that any other
    /// key overrides; `stage` lines, when present, replace the whole encoder.
    pub fn from_kv(kv: &KvText) -> Result<Self> {
        const KNOWN: [&str; 9] = [
            "preset",
            "in_channels",
            "stage",
            "expanding",
            "deconv_kernel",
            "head_kernel",
            "head_bias",
            "refine",
            "leaky_slope",
        ];
        if let Some(k) = kv.keys().find(|k| !KNOWN.contains(k)) {
            return Err(Error::Format(format!("unknown model config key {k:?}")));
        }
        let mut cfg = match kv.get("preset") {
            Some(p) if PRESETS.contains(&p) => Self::preset(p)?,
            Some(p) => Self::empty(p),
            None => return Err(Error::Format("model config needs a `preset` key".into())),
        };
        if let Some(v) = kv.parse_value("in_channels")? {
            cfg.in_channels = v;
        }
        let stages: Vec<Stage> = kv.all("stage").map(str::parse).collect::<Result<_>>()?;
        if !stages.is_empty() {
            cfg.encoder = stages;
        }
        if let Some(v) = kv.get("expanding") {
            cfg.expanding = v
                .split_whitespace()
                .map(|w| w.parse().map_err(|_| Error::Format(format!("expanding: bad width {w:?}"))))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = kv.parse_value("deconv_kernel")? {
            cfg.deconv_kernel = v;
        }
        if let Some(v) = kv.parse_value("head_kernel")? {
            cfg.head_kernel = v;
        }
        if let Some(v) = kv.parse_value("head_bias")? {
            cfg.head_bias = v;
        }
        if let Some(v) = kv.parse_value("refine")? {
            cfg.refine = v;
        }
        if let Some(v) = kv.parse_value("leaky_slope")? {
            cfg.leaky_slope = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn empty(name: &str) -> Self {
        Self {
            preset: name.to_string(),
            in_channels: 6,
            encoder: Vec::new(),
            expanding: Vec::new(),
            deconv_kernel: 4,
            head_kernel: 3,
            head_bias: true,
            refine: false,
            leaky_slope: 0.1,
        }
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{}: {} stages, stride {}, {} upsampling blocks, output 1/{}",
            self.preset,
            self.encoder.len(),
            self.total_stride(),
            self.expanding.len(),
            self.output_factor()
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            ModelConfig::preset(p).unwrap();
        }
        assert!(ModelConfig::preset("nope").is_err());
    }

    #[test]
    fn strides_and_output_factor() {
        let paper = ModelConfig::preset("flowcaps-paper").unwrap();
        assert_eq!((paper.total_stride(), paper.output_factor()), (128, 8));
        let mini = ModelConfig::preset("flowcaps-mini").unwrap();
        assert_eq!((mini.total_stride(), mini.output_factor()), (16, 1));
        let ref_ = ModelConfig::preset("flownets-ref").unwrap();
        assert_eq!((ref_.total_stride(), ref_.output_factor()), (64, 4));
        let nets = ModelConfig::preset("flownets-mini").unwrap();
        assert_eq!(nets.total_stride(), mini.total_stride());
    }

    #[test]
    fn kv_round_trip() {
        for p in PRESETS {
            let cfg = ModelConfig::preset(p).unwrap();
            let text = cfg.to_kv().to_string();
            let back = ModelConfig::from_kv(&KvText::parse(&text).unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn kv_override_and_comments() {
        let text = "preset = flowcaps-mini  # base\nleaky_slope = 0.2\n\n# done\n";
        let cfg = ModelConfig::from_kv(&KvText::parse(text).unwrap()).unwrap();
        assert_eq!(cfg.leaky_slope, 0.2);
        assert_eq!(cfg.encoder, ModelConfig::preset("flowcaps-mini").unwrap().encoder);
    }

    #[test]
    fn kv_rejects_unknown_keys_and_garbage() {
        assert!(ModelConfig::from_kv(&KvText::parse("preset = flowcaps-mini\nwidth = 3").unwrap()).is_err());
        assert!(KvText::parse("no equals sign").is_err());
        assert!("conv 16 k3".parse::<Stage>().is_err());
        assert!("caps 2y4 k3 s1 r3".parse::<Stage>().is_err());
    }

    #[test]
    fn capsule_layout_rules() {
        let mut cfg = ModelConfig::preset("flowcaps-paper").unwrap();
        cfg.expanding.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::preset("flowcaps-paper").unwrap();
        cfg.encoder[3] = Stage::Caps { types: 2, dim: 8, kernel: 3, stride: 2, iters: 3 };
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::preset("flowcaps-paper").unwrap();
        cfg.encoder.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn serde_json_round_trip() {
        let cfg = ModelConfig::preset("flowcaps-mini").unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
    }
}
