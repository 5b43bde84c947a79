//! Comparison protocols between a capsule flow network and a plain convolutional baseline.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::dataset::FlowData;
use crate::error::{Error, Result};
use crate::network::FlowModel;
use crate::real::Real;
use crate::synth::ShapeKind;
use crate::train::{evaluate, train_flow, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    /// Baseline preset (the `epe_flownets` column).
    pub baseline: String,
    /// Capsule preset (the `epe_flowcaps` column).
    pub capsule: String,
    pub seeds: Vec<u64>,
    /// Settings shared by every run; the seed is replaced per run.
    pub train: TrainOptions,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            baseline: "flownets-mini".into(),
            capsule: "flowcaps-mini".into(),
            seeds: vec![0, 1, 2],
            train: TrainOptions::default(),
        }
    }
}

impl ProtocolOptions {
    fn validate(&self) -> Result<(ModelConfig, ModelConfig)> {
        if self.seeds.is_empty() {
            return Err(Error::config("protocols need at least one seed"));
        }
        Ok((ModelConfig::preset(&self.baseline)?, ModelConfig::preset(&self.capsule)?))
    }
}

/// One trained model's test result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model: String,
    pub seed: u64,
    pub fraction: f64,
    pub train_samples: usize,
    pub test_epe: f64,
    pub epochs: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Default fraction grid: 0.5, 0.6, ..., 1.0.
pub fn default_fractions() -> Vec<f64> {
    (5..=10).map(|i| i as f64 / 10.0).collect()
}

/// Nested training subsets: the first `round(fraction * n)` samples of a seeded permutation.
pub fn fraction_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction {fraction} is outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok((0..n).collect());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(((fraction * n as f64).round() as usize).max(1));
    idx.sort_unstable();
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowDataRow {
    pub fraction: f64,
    pub epe_flownets: f64,
    pub epe_flowcaps: f64,
    /// `epe_flownets - epe_flowcaps`; positive when the capsule model is better.
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowDataReport {
    pub rows: Vec<LowDataRow>,
    pub runs: Vec<RunResult>,
}

impl LowDataReport {
    /// One row per fraction: `fraction,epe_flownets,epe_flowcaps,difference`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,epe_flownets,epe_flowcaps,difference\n");
        for r in &self.rows {
            let _ = writeln!(s, "{:.2},{:.6},{:.6},{:.6}", r.fraction, r.epe_flownets, r.epe_flowcaps, r.difference);
        }
        s
    }

    /// One row per (fraction, model), seed-averaged.
    pub fn long_csv(&self) -> String {
        let mut s = String::from("fraction,model,seeds,mean_test_epe\n");
        let mut keys: Vec<(u64, String)> = Vec::new();
        for r in &self.runs {
            let k = (r.fraction.to_bits(), r.model.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (f, m) in keys {
            let sel: Vec<f64> = self
                .runs
                .iter()
                .filter(|r| r.fraction.to_bits() == f && r.model == m)
                .map(|r| r.test_epe)
                .collect();
            let _ = writeln!(s, "{:.2},{m},{},{:.6}", f64::from_bits(f), sel.len(), mean(sel.iter().copied()));
        }
        s
    }
}

fn train_one<T: Real>(
    cfg: &ModelConfig,
    train: &FlowData<T>,
    test: &FlowData<T>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(FlowModel<T>, crate::train::TrainOutcome<T>)> {
    let mut model = FlowModel::build(cfg, seed)?;
    let out = train_flow(&mut model, train, test, TrainOptions { seed, ..opts.clone() })?;
    Ok((model, out))
}

/// Trains both models on nested fractions of the training split and tabulates test EPE.
pub fn protocol_low_data<T: Real>(
    train: &FlowData<T>,
    test: &FlowData<T>,
    fractions: &[f64],
    opts: &ProtocolOptions,
    mut log: impl FnMut(&RunResult),
) -> Result<LowDataReport> {
    let (base, caps) = opts.validate()?;
    if fractions.is_empty() {
        return Err(Error::config("no training fractions given"));
    }
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &fraction in fractions {
        let mut per_model = [Vec::new(), Vec::new()];
        for &seed in &opts.seeds {
            let idx = fraction_indices(train.len(), fraction, seed)?;
            let subset = train.subset(&idx)?;
            for (k, cfg) in [&base, &caps].into_iter().enumerate() {
                let (_, out) = train_one(cfg, &subset, test, &opts.train, seed)?;
                let r = RunResult {
                    model: cfg.preset.clone(),
                    seed,
                    fraction,
                    train_samples: subset.len(),
                    test_epe: out.best_epe(),
                    epochs: out.record.rows.len(),
                };
                log(&r);
                per_model[k].push(r.test_epe);
                runs.push(r);
            }
        }
        let (nets, capsm) = (mean(per_model[0].iter().copied()), mean(per_model[1].iter().copied()));
        rows.push(LowDataRow { fraction, epe_flownets: nets, epe_flowcaps: capsm, difference: nets - capsm });
    }
    Ok(LowDataReport { rows, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub shape: ShapeKind,
    pub held_out: bool,
    pub epe_flownets: f64,
    pub epe_flowcaps: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub held_out: Vec<ShapeKind>,
    pub rows: Vec<OodRow>,
    /// Seed-averaged EPE on in-domain and held-out test samples, per model.
    pub in_domain_flownets: f64,
    pub held_out_flownets: f64,
    pub in_domain_flowcaps: f64,
    pub held_out_flowcaps: f64,
    /// Number of held-out samples that reached a training batch (always zero on success).
    pub held_out_seen: usize,
    pub runs: Vec<RunResult>,
}

impl OodReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("shape,domain,epe_flownets,epe_flowcaps,difference\n");
        for r in &self.rows {
            let d = if r.held_out { "held_out" } else { "in_domain" };
            let _ = writeln!(s, "{},{d},{:.6},{:.6},{:.6}", r.shape.name(), r.epe_flownets, r.epe_flowcaps, r.difference);
        }
        for (d, n, c) in [
            ("in_domain", self.in_domain_flownets, self.in_domain_flowcaps),
            ("held_out", self.held_out_flownets, self.held_out_flowcaps),
        ] {
            let _ = writeln!(s, "all,{d},{n:.6},{c:.6},{:.6}", n - c);
        }
        s
    }

    /// Held-out over in-domain EPE of the capsule model.
    pub fn flowcaps_ratio(&self) -> f64 {
        self.held_out_flowcaps / self.in_domain_flowcaps
    }
}

/// Trains on in-domain shapes only and compares EPE on in-domain and held-out test shapes.
pub fn protocol_ood<T: Real>(
    train: &FlowData<T>,
    test: &FlowData<T>,
    held_out: &[ShapeKind],
    opts: &ProtocolOptions,
    mut log: impl FnMut(&RunResult),
) -> Result<OodReport> {
    let (base, caps) = opts.validate()?;
    if held_out.is_empty() {
        return Err(Error::config("the out-of-domain protocol needs at least one held-out shape"));
    }
    let train_in = train.filter_shapes(|s| !held_out.contains(&s))?;
    let test_in = test.filter_shapes(|s| !held_out.contains(&s))?;
    let test_out = test.filter_shapes(|s| held_out.contains(&s))?;
    if test_out.is_empty() || test_in.is_empty() {
        return Err(Error::Data("test split lacks in-domain or held-out samples".into()));
    }
    let shapes: Vec<ShapeKind> = ShapeKind::ALL.into_iter().filter(|s| test.shapes.contains(s)).collect();
    // per_shape[model][shape] accumulates EPE across seeds.
    let mut per_shape = vec![vec![Vec::new(); shapes.len()]; 2];
    let mut domain = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
    let mut runs = Vec::new();
    let mut held_out_seen = 0;
    for &seed in &opts.seeds {
        for (k, cfg) in [&base, &caps].into_iter().enumerate() {
            let (mut model, out) = train_one(cfg, &train_in, &test_in, &opts.train, seed)?;
            held_out_seen += out.seen_shapes.iter().filter(|s| held_out.contains(s)).count();
            let report = evaluate(&mut model, test, 16)?;
            for g in &report.per_shape {
                if let Some(i) = shapes.iter().position(|s| s.name() == g.group) {
                    per_shape[k][i].push(g.mean_epe);
                }
            }
            let split = |out: bool| {
                mean(test.shapes.iter().zip(&report.per_sample).filter(|(s, _)| held_out.contains(s) == out).map(|(_, &e)| e))
            };
            domain[k][0].push(split(false));
            domain[k][1].push(split(true));
            let r = RunResult {
                model: cfg.preset.clone(),
                seed,
                fraction: 1.0,
                train_samples: train_in.len(),
                test_epe: out.best_epe(),
                epochs: out.record.rows.len(),
            };
            log(&r);
            runs.push(r);
        }
    }
    if held_out_seen > 0 {
        return Err(Error::Data(format!("{held_out_seen} held-out shape classes reached a training batch")));
    }
    let rows = shapes
        .iter()
        .enumerate()
        .map(|(i, &shape)| {
            let n = mean(per_shape[0][i].iter().copied());
            let c = mean(per_shape[1][i].iter().copied());
            OodRow { shape, held_out: held_out.contains(&shape), epe_flownets: n, epe_flowcaps: c, difference: n - c }
        })
        .collect();
    let m = |v: &Vec<f64>| mean(v.iter().copied());
    Ok(OodReport {
        held_out: held_out.to_vec(),
        rows,
        in_domain_flownets: m(&domain[0][0]),
        held_out_flownets: m(&domain[0][1]),
        in_domain_flowcaps: m(&domain[1][0]),
        held_out_flowcaps: m(&domain[1][1]),
        held_out_seen,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_samples, Normalization, SceneSpec, Split};

    #[test]
    fn fractions_are_nested_and_full_at_one() {
        assert_eq!(fraction_indices(10, 1.0, 3).unwrap(), (0..10).collect::<Vec<_>>());
        let half = fraction_indices(10, 0.5, 3).unwrap();
        assert_eq!(half.len(), 5);
        let more = fraction_indices(10, 0.8, 3).unwrap();
        assert!(half.iter().all(|i| more.contains(i)));
        assert!(fraction_indices(10, 0.0, 3).is_err());
        assert!(fraction_indices(10, 1.5, 3).is_err());
        assert_eq!(default_fractions(), vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
    }

    fn tiny() -> (FlowData<f32>, FlowData<f32>, ProtocolOptions) {
        let mut spec = SceneSpec::with_size(32);
        spec.held_out = vec![ShapeKind::Ring];
        let s = gen_samples(&spec, 8, 16, 4).unwrap();
        let opts = ProtocolOptions {
            seeds: vec![1],
            train: TrainOptions { epochs: 1, batch: 4, ..TrainOptions::default() },
            ..ProtocolOptions::default()
        };
        (
            FlowData::from_samples(&s, Split::Train, Normalization::Symmetric).unwrap(),
            FlowData::from_samples(&s, Split::Test, Normalization::Symmetric).unwrap(),
            opts,
        )
    }

    #[test]
    fn low_data_table_shape() {
        let (train, test, opts) = tiny();
        let r = protocol_low_data(&train, &test, &[0.5, 1.0], &opts, |_| {}).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.runs.len(), 4);
        assert_eq!(r.long_csv().lines().count(), 1 + 2 * 2);
        assert!(r.to_csv().starts_with("fraction,epe_flownets,epe_flowcaps,difference\n0.50,"));
        assert_eq!(r.runs[2].train_samples, train.len());
    }

    #[test]
    fn ood_keeps_held_out_shapes_out_of_training() {
        let (train, test, opts) = tiny();
        assert!(!train.shapes.contains(&ShapeKind::Ring));
        assert!(test.shapes.contains(&ShapeKind::Ring));
        let r = protocol_ood(&train, &test, &[ShapeKind::Ring], &opts, |_| {}).unwrap();
        assert_eq!(r.held_out_seen, 0);
        assert!(r.rows.iter().any(|row| row.held_out && row.shape == ShapeKind::Ring));
        assert!(r.to_csv().contains("all,held_out,"));
        assert!(protocol_ood(&train, &test, &[], &opts, |_| {}).is_err());
        let no_rings = test.filter_shapes(|s| s != ShapeKind::Ring).unwrap();
        assert!(matches!(protocol_ood(&train, &no_rings, &[ShapeKind::Ring], &opts, |_| {}), Err(Error::Data(_))));
    }
}
