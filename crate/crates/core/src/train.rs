//! Flow training, evaluation, and run records.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, Graph};
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::dataset::FlowData;
use crate::error::{Error, Result};
use crate::loss::{epe_per_sample, LossKind};
use crate::network::FlowModel;
use crate::optim::{AdamConfig, AdamState};
use crate::real::Real;
use crate::synth::{ShapeKind, NUM_CLASSES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this many epochs without a new best test EPE.
    pub patience: Option<usize>,
    /// Stop as soon as the test EPE reaches this value.
    pub target_epe: Option<f64>,
    /// Random horizontal flips of training pairs.
    pub flip: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            loss: LossKind::Epe,
            epochs: 30,
            batch: 8,
            seed: 0,
            adam: AdamConfig::default(),
            patience: Some(5),
            target_epe: None,
            flip: false,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::config(format!("batch size {} is below 2 (batch normalization needs two samples)", self.batch)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        Ok(())
    }
}

/// One row of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_epe: f64,
    pub seconds: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub rows: Vec<EpochRecord>,
}

impl TrainRecord {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.rows.iter().min_by(|a, b| a.test_epe.total_cmp(&b.test_epe))
    }
}

/// Mean EPE of a group of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEpe {
    pub group: String,
    pub count: usize,
    pub mean_epe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_epe: f64,
    pub per_class: Vec<GroupEpe>,
    pub per_shape: Vec<GroupEpe>,
    pub per_sample: Vec<f64>,
}

impl EvalReport {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("group,count,mean_epe\n");
        for g in self.per_class.iter().chain(&self.per_shape) {
            let _ = writeln!(s, "{},{},{:.6}", g.group, g.count, g.mean_epe);
        }
        let _ = writeln!(s, "all,{},{:.6}", self.per_sample.len(), self.mean_epe);
        s
    }
}

fn group_means(keys: impl Iterator<Item = String>, epe: &[f64]) -> Vec<GroupEpe> {
    let mut groups: Vec<GroupEpe> = Vec::new();
    for (k, &e) in keys.zip(epe) {
        match groups.iter_mut().find(|g| g.group == k) {
            Some(g) => {
                g.mean_epe += e;
                g.count += 1;
            }
            None => groups.push(GroupEpe { group: k, count: 1, mean_epe: e }),
        }
    }
    for g in &mut groups {
        g.mean_epe /= g.count as f64;
    }
    groups.sort_by(|a, b| a.group.cmp(&b.group));
    groups
}

/// Evaluates an arbitrary predictor, batch by batch. `predict` receives inputs and the
/// ground truth (the latter only so test stubs can act as oracles).
pub fn evaluate_with<T: Real>(
    data: &FlowData<T>,
    batch: usize,
    mut predict: impl FnMut(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut per_sample = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, gt, _) = data.batch(chunk)?;
        let pred = predict(&x, &gt)?;
        per_sample.extend(epe_per_sample(&pred, &gt)?);
    }
    let mean_epe = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let per_class = group_means(data.labels.iter().map(|l| format!("class{l}")), &per_sample);
    let per_shape = group_means(data.shapes.iter().map(|s| s.name().to_string()), &per_sample);
    Ok(EvalReport { mean_epe, per_class, per_shape, per_sample })
}

/// Test EPE in inference mode. Parameters and running statistics are left untouched.
pub fn evaluate<T: Real>(model: &mut FlowModel<T>, data: &FlowData<T>, batch: usize) -> Result<EvalReport> {
    let mode = model.mode();
    model.set_mode(BatchNormMode::Eval);
    let out = evaluate_with(data, batch, |x, _| model.predict(x));
    model.set_mode(mode);
    out
}

/// Mirrors pairs and flows left-right (negating `u`).
fn flip_batch<T: Real>(x: &mut Tensor<T>, f: &mut Tensor<T>, which: &[bool]) {
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let flip_planes = |data: &mut [T], planes: usize, negate_first: bool| {
        for p in 0..planes {
            for row in data[p * h * w..(p + 1) * h * w].chunks_mut(w) {
                row.reverse();
                if negate_first && p == 0 {
                    row.iter_mut().for_each(|v| *v = -*v);
                }
            }
        }
    };
    for (n, &yes) in which.iter().enumerate() {
        if yes {
            flip_planes(&mut x.data_mut()[n * 6 * h * w..(n + 1) * 6 * h * w], 6, false);
            flip_planes(&mut f.data_mut()[n * 2 * h * w..(n + 1) * 2 * h * w], 2, true);
        }
    }
}

/// Optimizer state and bookkeeping for one flow-training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub opts: TrainOptions,
    pub adam: AdamState<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_test_epe: Option<f64>,
    /// Shapes of every sample fed to the optimizer so far.
    pub seen_shapes: BTreeSet<ShapeKind>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: &FlowModel<T>, opts: TrainOptions) -> Result<Self> {
        opts.validate()?;
        let adam = AdamState::new(opts.adam, model.store().params().iter().map(|p| p.value.shape()))?;
        Ok(Self { opts, adam, epoch: 0, best_test_epe: None, seen_shapes: BTreeSet::new() })
    }

    /// Restores model tensors and optimizer state from a checkpoint.
    pub fn resume(model: &mut FlowModel<T>, ckpt: &Checkpoint<T>, opts: TrainOptions) -> Result<Self> {
        let cfg: ModelConfig = ckpt.model_as()?;
        if &cfg != model.config() {
            return Err(Error::config(format!(
                "checkpoint holds preset {} with a different architecture",
                cfg.preset
            )));
        }
        model.store_mut().load_state(&ckpt.state)?;
        let mut t = Self::new(model, opts)?;
        if let Some(a) = &ckpt.adam {
            if a.m.len() != t.adam.m.len() {
                return Err(Error::config("optimizer state does not match the model"));
            }
            t.adam = a.clone();
            t.adam.config = t.opts.adam;
        }
        t.epoch = ckpt.epoch;
        t.best_test_epe = ckpt.best_test_epe;
        Ok(t)
    }

    pub fn checkpoint(&self, model: &FlowModel<T>) -> Checkpoint<T> {
        Checkpoint {
            model: serde_json::to_value(model.config()).expect("config serializes"),
            training: serde_json::to_value(&self.opts).expect("options serialize"),
            seed: self.opts.seed,
            epoch: self.epoch,
            best_test_epe: self.best_test_epe,
            state: model.store().state(),
            adam: Some(self.adam.clone()),
        }
    }

    /// Sample order of `epoch`, a function of the seed and epoch only.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// One optimizer step on a batch; returns the training loss.
    pub fn step(&mut self, model: &mut FlowModel<T>, x: Tensor<T>, gt: Tensor<T>) -> Result<f64> {
        model.set_mode(BatchNormMode::Train);
        let g = Graph::new();
        let p = model.bind(&g);
        let xv = g.constant(x);
        let gv = g.constant(gt);
        let pred = model.forward_flow(&g, &p, xv)?;
        let loss = self.opts.loss.apply(&g, pred, gv)?;
        let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::Diverged { epoch: self.epoch + 1 });
        }
        g.backward(loss)?;
        let grads = model.store().grads(&g, &p);
        self.adam.step(model.store_mut().values_mut(), &grads)?;
        Ok(value)
    }

    /// Batches of the next epoch (a trailing batch of one sample is dropped).
    pub fn epoch_batches(&self, n: usize) -> Vec<Vec<usize>> {
        self.epoch_order(n, self.epoch)
            .chunks(self.opts.batch)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Runs one epoch; returns the mean training loss.
    pub fn run_epoch(&mut self, model: &mut FlowModel<T>, data: &FlowData<T>) -> Result<f64> {
        let batches = self.epoch_batches(data.len());
        if batches.is_empty() {
            return Err(Error::Data(format!("{} training samples cannot form a batch of two", data.len())));
        }
        let mut flip_rng = ChaCha8Rng::seed_from_u64(self.opts.seed ^ 0x5eed_f11b);
        flip_rng.set_stream(self.epoch as u64);
        let mut total = 0.0;
        for b in &batches {
            let (mut x, mut gt, _) = data.batch(b)?;
            if self.opts.flip {
                let which: Vec<bool> = b.iter().map(|_| flip_rng.random()).collect();
                flip_batch(&mut x, &mut gt, &which);
            }
            self.seen_shapes.extend(b.iter().map(|&i| data.shapes[i]));
            total += self.step(model, x, gt)?;
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }
}

/// Result of [`train_flow`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub record: TrainRecord,
    /// Parameters of the epoch with the lowest test EPE.
    pub best: Checkpoint<T>,
    /// State after the final epoch, for resuming.
    pub last: Checkpoint<T>,
    pub seen_shapes: BTreeSet<ShapeKind>,
}

impl<T> TrainOutcome<T> {
    pub fn best_epe(&self) -> f64 {
        self.best.best_test_epe.unwrap_or(f64::INFINITY)
    }
}

/// Trains with the per-epoch test EPE as the selection metric; on return the model holds
/// the best epoch's parameters.
pub fn train_flow<T: Real>(
    model: &mut FlowModel<T>,
    train: &FlowData<T>,
    test: &FlowData<T>,
    opts: TrainOptions,
) -> Result<TrainOutcome<T>> {
    let trainer = Trainer::new(model, opts)?;
    continue_training(model, trainer, train, test, |_| {})
}

/// Continues a run; `on_epoch` sees each log row as it is produced.
pub fn continue_training<T: Real>(
    model: &mut FlowModel<T>,
    mut trainer: Trainer<T>,
    train: &FlowData<T>,
    test: &FlowData<T>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("training needs nonempty train and test splits".into()));
    }
    let mut record = TrainRecord::default();
    let mut best = trainer.checkpoint(model);
    let mut since_best = 0;
    while trainer.epoch < trainer.opts.epochs {
        let t0 = Instant::now();
        let train_loss = trainer.run_epoch(model, train)?;
        let test_epe = evaluate(model, test, 16)?.mean_epe;
        let row = EpochRecord {
            epoch: trainer.epoch,
            train_loss,
            test_epe,
            seconds: t0.elapsed().as_secs_f64(),
            seed: trainer.opts.seed,
        };
        on_epoch(&row);
        record.rows.push(row);
        if trainer.best_test_epe.is_none_or(|b| test_epe < b) {
            trainer.best_test_epe = Some(test_epe);
            best = trainer.checkpoint(model);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if trainer.opts.target_epe.is_some_and(|t| test_epe <= t) {
            break;
        }
        if trainer.opts.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    let mut last = trainer.checkpoint(model);
    last.best_test_epe = trainer.best_test_epe;
    best.best_test_epe = trainer.best_test_epe;
    model.store_mut().load_state(&best.state)?;
    Ok(TrainOutcome { record, best, last, seen_shapes: trainer.seen_shapes })
}

/// Rebuilds a flow model from a checkpoint.
pub fn model_from_checkpoint<T: Real>(ckpt: &Checkpoint<T>) -> Result<FlowModel<T>> {
    let cfg: ModelConfig = ckpt.model_as()?;
    let mut model = FlowModel::build(&cfg, ckpt.seed)?;
    model.store_mut().load_state(&ckpt.state)?;
    model.set_mode(BatchNormMode::Eval);
    Ok(model)
}

/// Labels in `0..NUM_CLASSES` present in a dataset, for report completeness checks.
pub fn label_counts<T: Real>(data: &FlowData<T>) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    for &l in &data.labels {
        c[l] += 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_samples, Normalization, SceneSpec, Split};

    fn data(n_train: usize, n_test: usize) -> (FlowData<f32>, FlowData<f32>) {
        let s = gen_samples(&SceneSpec::with_size(32), n_train, n_test, 3).unwrap();
        (
            FlowData::from_samples(&s, Split::Train, Normalization::Symmetric).unwrap(),
            FlowData::from_samples(&s, Split::Test, Normalization::Symmetric).unwrap(),
        )
    }

    #[test]
    fn oracle_and_zero_predictors() {
        let (_, test) = data(2, 12);
        let oracle = evaluate_with(&test, 5, |_, gt| Ok(gt.clone())).unwrap();
        assert_eq!(oracle.mean_epe, 0.0);
        let zero = evaluate_with(&test, 5, |_, gt| Tensor::zeros(gt.shape())).unwrap();
        assert!((zero.mean_epe - test.zero_flow_epe()).abs() < 1e-9);
        let weighted: f64 = zero.per_class.iter().map(|g| g.mean_epe * g.count as f64).sum::<f64>() / test.len() as f64;
        assert!((weighted - zero.mean_epe).abs() < 1e-12);
    }

    #[test]
    fn smoke_epoch_is_finite_and_deterministic() {
        let (train, test) = data(8, 4);
        let cfg = ModelConfig::preset("flowcaps-mini").unwrap();
        let opts = TrainOptions { epochs: 1, batch: 4, seed: 5, ..TrainOptions::default() };
        let run = || {
            let mut m = FlowModel::<f32>::build(&cfg, 5).unwrap();
            train_flow(&mut m, &train, &test, opts.clone()).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.record.rows[0].train_loss.is_finite());
        assert_eq!(a.record.rows[0].train_loss, b.record.rows[0].train_loss);
        assert_eq!(a.best.state, b.best.state);
    }

    #[test]
    fn evaluate_leaves_model_untouched() {
        let (_, test) = data(2, 4);
        let cfg = ModelConfig::preset("flowcaps-mini").unwrap();
        let mut m = FlowModel::<f32>::build(&cfg, 1).unwrap();
        let before = m.store().clone();
        evaluate(&mut m, &test, 2).unwrap();
        assert_eq!(m.store(), &before);
        assert_eq!(m.mode(), BatchNormMode::Train);
    }

    #[test]
    fn flip_mirrors_and_negates_u() {
        let mut x = Tensor::<f32>::from_f64(&[1, 6, 1, 2], &[1., 2., 1., 2., 1., 2., 1., 2., 1., 2., 1., 2.]).unwrap();
        let mut f = Tensor::<f32>::from_f64(&[1, 2, 1, 2], &[3., 4., 5., 6.]).unwrap();
        flip_batch(&mut x, &mut f, &[true]);
        assert_eq!(&x.data()[..2], &[2., 1.]);
        assert_eq!(f.data(), &[-4., -3., 6., 5.]);
    }

    #[test]
    fn batch_of_one_rejected() {
        let cfg = ModelConfig::preset("flowcaps-mini").unwrap();
        let m = FlowModel::<f32>::build(&cfg, 1).unwrap();
        assert!(Trainer::new(&m, TrainOptions { batch: 1, ..TrainOptions::default() }).is_err());
    }

    fn step_trace(seed: u64, steps: usize) -> Vec<f64> {
        let s = gen_samples(&SceneSpec::with_size(32), 8, 0, 3).unwrap();
        let train = FlowData::<f64>::from_samples(&s, Split::Train, Normalization::Symmetric).unwrap();
        let cfg = ModelConfig::preset("flowcaps-mini").unwrap();
        let mut m = FlowModel::<f64>::build(&cfg, seed).unwrap();
        let mut t = Trainer::new(&m, TrainOptions { batch: 2, seed, ..TrainOptions::default() }).unwrap();
        let mut out = Vec::new();
        while out.len() < steps {
            for b in t.epoch_batches(train.len()) {
                if out.len() == steps {
                    break;
                }
                let (x, gt, _) = train.batch(&b).unwrap();
                out.push(t.step(&mut m, x, gt).unwrap());
            }
            t.epoch += 1;
        }
        out
    }

    #[test]
    fn ten_step_trace_is_bitwise_reproducible() {
        let a = step_trace(9, 10);
        assert_eq!(a, step_trace(9, 10));
        assert_ne!(a, step_trace(10, 10));
    }

    #[test]
    fn resume_reproduces_the_next_step() {
        let (train, _) = data(6, 1);
        let cfg = ModelConfig::preset("flowcaps-mini").unwrap();
        let opts = TrainOptions { batch: 2, seed: 4, ..TrainOptions::default() };
        let mut a = FlowModel::<f32>::build(&cfg, 4).unwrap();
        let mut ta = Trainer::new(&a, opts.clone()).unwrap();
        ta.run_epoch(&mut a, &train).unwrap();
        let bytes = ta.checkpoint(&a).to_bytes();
        let next = ta.epoch_batches(train.len())[0].clone();
        let (x, gt, _) = train.batch(&next).unwrap();
        let want = ta.step(&mut a, x.clone(), gt.clone()).unwrap();

        let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        let mut b = FlowModel::<f32>::build(&cfg, 99).unwrap();
        let mut tb = Trainer::resume(&mut b, &ckpt, opts).unwrap();
        assert_eq!(tb.epoch, 1);
        assert_eq!(tb.epoch_batches(train.len())[0], next);
        let got = tb.step(&mut b, x, gt).unwrap();
        assert_eq!(got.to_bits(), want.to_bits());
        assert_eq!(a.store().state(), b.store().state());
    }

    #[test]
    fn overfits_one_batch() {
        let samples = gen_samples(&SceneSpec::with_size(32), 2, 0, 3).unwrap();
        let train = FlowData::<f32>::from_samples(&samples, Split::Train, Normalization::Symmetric).unwrap();
        let cfg = ModelConfig::preset("flowcaps-mini").unwrap();
        let mut m = FlowModel::<f32>::build(&cfg, 2).unwrap();
        let mut t = Trainer::new(&m, TrainOptions { batch: 2, ..TrainOptions::default() }).unwrap();
        let (x, gt, _) = train.batch(&[0, 1]).unwrap();
        let losses: Vec<f64> = (0..80).map(|_| t.step(&mut m, x.clone(), gt.clone()).unwrap()).collect();
        assert!(losses[..50].windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
        // Reaches a quarter of the start by step 50 and a tenth by step 80.
        assert!(losses[49] < 0.25 * losses[0], "{losses:?}");
        assert!(losses[79] < 0.1 * losses[0], "{losses:?}");
    }

    #[test]
    fn record_csv_header() {
        let r = TrainRecord {
            rows: vec![EpochRecord { epoch: 1, train_loss: 0.5, test_epe: 0.25, seconds: 1.0, seed: 3 }],
        };
        assert_eq!(r.to_csv(), "epoch,train_loss,test_epe,seconds,seed\n1,0.5,0.25,1.0,3\n");
    }
}
