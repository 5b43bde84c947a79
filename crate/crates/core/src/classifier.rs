//! Shallow CNN that classifies motion direction from a two-channel flow field.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::FlowData;
use crate::error::{Error, Result};
use crate::layers::{Bound, Conv, Dense, ParamStore, Section};
use crate::network::FlowModel;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    /// Output channels of the 3×3 conv blocks, each followed by a 2×2 max pool.
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub classes: usize,
}

impl ClassifierConfig {
    pub const BLOCKS: usize = 5;

    pub fn new(classes: usize) -> Self {
        Self { in_channels: 2, widths: vec![16, 32, 64, 64, 64], hidden: 32, classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != Self::BLOCKS {
            return Err(Error::config(format!("classifier needs exactly {} conv blocks, got {}", Self::BLOCKS, self.widths.len())));
        }
        if self.classes == 0 || self.hidden == 0 || self.widths.contains(&0) {
            return Err(Error::config("classifier widths and class count must be positive"));
        }
        Ok(())
    }

    /// Side length divisor imposed by the pooling stack.
    pub fn divisor(&self) -> usize {
        1 << self.widths.len()
    }
}

#[derive(Debug, Clone)]
pub struct Classifier<T> {
    config: ClassifierConfig,
    store: ParamStore<T>,
    convs: Vec<Conv>,
    hidden: Dense,
    output: Dense,
    /// Spatial extent the dense layers were built for.
    extent: (usize, usize),
}

impl<T: Real> Classifier<T> {
    pub fn build(config: &ClassifierConfig, height: usize, width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.divisor();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::config(format!("classifier input {height}x{width} is not a multiple of {d}")));
        }
        let mut store = ParamStore::new(seed);
        let mut convs = Vec::new();
        let mut c = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv::new(&mut store, &format!("cls.conv{i}"), Section::Classifier, c, w, 3, 1, true)?);
            c = w;
        }
        let flat = c * (height / d) * (width / d);
        let hidden = Dense::new(&mut store, "cls.fc0", Section::Classifier, flat, config.hidden)?;
        let output = Dense::new(&mut store, "cls.fc1", Section::Classifier, config.hidden, config.classes)?;
        Ok(Self {
            config: config.clone(),
            store,
            convs,
            hidden,
            output,
            extent: (height, width),
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    /// Unnormalized class scores `[N, classes]`.
    pub fn logits(&self, g: &Graph<T>, p: &Bound, flows: Var) -> Result<Var> {
        let s = g.shape(flows);
        if s.len() != 4 || s[1] != self.config.in_channels || (s[2], s[3]) != self.extent {
            return Err(Error::shape(format!(
                "classifier expects [N, {}, {}, {}], got {s:?}",
                self.config.in_channels, self.extent.0, self.extent.1
            )));
        }
        let mut x = flows;
        for conv in &self.convs {
            x = conv.forward(g, p, x)?;
            x = g.relu(x);
            x = g.maxpool2d(x, 2, 2)?;
        }
        let s = g.shape(x);
        x = g.reshape(x, &[s[0], s[1] * s[2] * s[3]])?;
        x = g.relu(self.hidden.forward(g, p, x)?);
        self.output.forward(g, p, x)
    }

    /// Class probabilities `[N, classes]`.
    pub fn probabilities(&self, flows: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.store.bind_constant(&g);
        let x = g.constant(flows.clone());
        let l = self.logits(&g, &p, x)?;
        let y = g.softmax(l, 1)?;
        Ok((*g.value(y)).clone())
    }

    pub fn predict(&self, flows: &Tensor<T>) -> Result<Vec<usize>> {
        let probs = self.probabilities(flows)?;
        let k = self.config.classes;
        Ok(probs
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map_or(0, |(i, _)| i)
            })
            .collect())
    }
}

/// Description stored in classifier checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub classifier: ClassifierConfig,
    pub height: usize,
    pub width: usize,
    /// Where training flows came from: `gt` or a flow checkpoint path.
    pub source: String,
}

impl<T: Real> Classifier<T> {
    pub fn to_checkpoint(&self, seed: u64, epochs: usize, source: &str) -> Checkpoint<T> {
        let meta = ClassifierMeta {
            classifier: self.config.clone(),
            height: self.extent.0,
            width: self.extent.1,
            source: source.to_string(),
        };
        Checkpoint {
            model: serde_json::to_value(meta).expect("classifier description serializes"),
            training: serde_json::Value::Null,
            seed,
            epoch: epochs,
            best_test_epe: None,
            state: self.store.state(),
            adam: None,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<(Self, ClassifierMeta)> {
        let meta: ClassifierMeta = ckpt.model_as()?;
        let mut model = Self::build(&meta.classifier, meta.height, meta.width, ckpt.seed)?;
        model.store.load_state(&ckpt.state)?;
        Ok((model, meta))
    }
}

/// Flow fields with class labels, the classifier's dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFlows<T> {
    height: usize,
    width: usize,
    flows: Vec<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> LabeledFlows<T> {
    pub fn from_ground_truth(data: &FlowData<T>) -> Result<Self> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let (_, f, labels) = data.batch(&idx)?;
        Ok(Self { height: data.height(), width: data.width(), flows: f.into_data(), labels })
    }

    /// Flows predicted by a flow network (in inference mode) for every sample.
    pub fn from_predictions(model: &mut FlowModel<T>, data: &FlowData<T>, batch: usize) -> Result<Self> {
        let mode = model.mode();
        model.set_mode(BatchNormMode::Eval);
        let mut flows = Vec::new();
        let idx: Vec<usize> = (0..data.len()).collect();
        let result = idx.chunks(batch.max(1)).try_for_each(|chunk| {
            let (x, _, _) = data.batch(chunk)?;
            flows.extend_from_slice(model.predict(&x)?.data());
            Ok::<_, Error>(())
        });
        model.set_mode(mode);
        result?;
        Ok(Self { height: data.height(), width: data.width(), flows, labels: data.labels.clone() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let p = 2 * self.height * self.width;
        let mut f = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of range ({})", self.len())));
            }
            f.extend_from_slice(&self.flows[i * p..(i + 1) * p]);
        }
        Ok((Tensor::new(&[idx.len(), 2, self.height, self.width], f)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        Self { epochs: 50, batch: 16, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
    pub seed: u64,
}

pub fn epochs_csv(rows: &[ClassifierEpoch]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Top-1 accuracy with a confusion matrix (rows: true class, columns: predicted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl ClassifierReport {
    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|i| confusion[i][i]).sum();
        let accuracy = if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 };
        Self { accuracy, confusion }
    }

    pub fn to_csv(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::from("true");
        for j in 0..k {
            let _ = write!(s, ",pred{j}");
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{i}");
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "accuracy,{:.6}", self.accuracy);
        s
    }
}

pub fn evaluate_classifier<T: Real>(model: &Classifier<T>, data: &LabeledFlows<T>) -> Result<ClassifierReport> {
    let mut predicted = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let (x, _) = data.batch(chunk)?;
        predicted.extend(model.predict(&x)?);
    }
    Ok(ClassifierReport::from_predictions(model.config.classes, &data.labels, &predicted))
}

/// Cross-entropy training with Adam; returns the per-epoch log.
pub fn train_classifier<T: Real>(
    model: &mut Classifier<T>,
    train: &LabeledFlows<T>,
    test: &LabeledFlows<T>,
    opts: &ClassifierOptions,
) -> Result<Vec<ClassifierEpoch>> {
    if train.is_empty() {
        return Err(Error::Data("classifier training set is empty".into()));
    }
    if opts.batch == 0 || !(opts.lr > 0.0) {
        return Err(Error::config("classifier batch and learning rate must be positive"));
    }
    let adam_cfg = crate::optim::AdamConfig { lr: opts.lr, ..Default::default() };
    let mut adam = crate::optim::AdamState::new(adam_cfg, model.store.params().iter().map(|p| p.value.shape()))?;
    let mut rows = Vec::new();
    for epoch in 1..=opts.epochs {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch) {
            let (x, labels) = train.batch(chunk)?;
            let g = Graph::new();
            let p = model.store.bind(&g);
            let xv = g.constant(x);
            let logits = model.logits(&g, &p, xv)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            g.backward(loss)?;
            let grads = model.store.grads(&g, &p);
            adam.step(model.store.values_mut(), &grads)?;
            total += value;
            batches += 1;
        }
        let test_accuracy = if test.is_empty() { f64::NAN } else { evaluate_classifier(model, test)?.accuracy };
        rows.push(ClassifierEpoch {
            epoch,
            train_loss: total / batches as f64,
            test_accuracy,
            seconds: t0.elapsed().as_secs_f64(),
            seed: opts.seed,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_closed_form() {
        let cfg = ClassifierConfig::new(8);
        let m = Classifier::<f32>::build(&cfg, 64, 64, 0).unwrap();
        let mut want = 0;
        let mut c = 2;
        for w in [16, 32, 64, 64, 64] {
            want += 9 * c * w + w;
            c = w;
        }
        want += (64 * 2 * 2) * 32 + 32 + 32 * 8 + 8;
        assert_eq!(m.count_params(), want);
        assert_eq!(want, 105_784);
    }

    #[test]
    fn extent_rules() {
        let cfg = ClassifierConfig::new(8);
        assert!(Classifier::<f32>::build(&cfg, 48, 64, 0).is_err());
        let bad = ClassifierConfig { widths: vec![16; 4], ..cfg };
        assert!(Classifier::<f32>::build(&bad, 64, 64, 0).is_err());
    }

    #[test]
    fn softmax_rows_are_simplex() {
        let m = Classifier::<f64>::build(&ClassifierConfig::new(8), 32, 32, 1).unwrap();
        let x = Tensor::create(&[3, 2, 32, 32], crate::tensor::Init::Normal { mean: 0.0, std: 2.0 }, 4).unwrap();
        let p = m.probabilities(&x).unwrap();
        assert_eq!(p.shape(), &[3, 8]);
        for row in p.data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn confusion_identities() {
        let truth = [0, 1, 2, 2, 1, 0, 0];
        let r = ClassifierReport::from_predictions(3, &truth, &truth);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![3, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
        let pred = [0, 2, 2, 1, 1, 0, 1];
        let r = ClassifierReport::from_predictions(3, &truth, &pred);
        let trace: usize = (0..3).map(|i| r.confusion[i][i]).sum();
        assert_eq!(r.accuracy, trace as f64 / 7.0);
        for (i, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&t| t == i).count());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Classifier::<f32>::build(&ClassifierConfig::new(8), 32, 32, 3).unwrap();
        let c = Checkpoint::<f32>::from_bytes(&m.to_checkpoint(3, 1, "gt").to_bytes()).unwrap();
        let (back, meta) = Classifier::<f32>::from_checkpoint(&c).unwrap();
        assert_eq!(meta.source, "gt");
        assert_eq!(back.store().state(), m.store().state());
    }

    #[test]
    fn single_class_is_trivial() {
        let mut m = Classifier::<f32>::build(&ClassifierConfig::new(1), 32, 32, 0).unwrap();
        let data = LabeledFlows { height: 32, width: 32, flows: vec![0.5; 4 * 2 * 32 * 32], labels: vec![0; 4] };
        let opts = ClassifierOptions { epochs: 1, batch: 2, ..Default::default() };
        let log = train_classifier(&mut m, &data, &data, &opts).unwrap();
        assert_eq!(log[0].test_accuracy, 1.0);
    }
}
