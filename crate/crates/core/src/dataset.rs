//! In-memory flow datasets assembled from a manifest or from generated samples.

use crate::error::{Error, Result};
use crate::field::FlowField;
use crate::real::Real;
use crate::synth::{load_batch, push_pair, Manifest, Normalization, Sample, ShapeKind, Split};
use crate::tensor::Tensor;

/// Network inputs, ground-truth flows, labels and shape tags of a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowData<T> {
    height: usize,
    width: usize,
    inputs: Vec<T>,
    flows: Vec<T>,
    pub labels: Vec<usize>,
    pub shapes: Vec<ShapeKind>,
    /// Sample identifiers from the source manifest.
    pub ids: Vec<usize>,
}

impl<T: Real> FlowData<T> {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            inputs: Vec::new(),
            flows: Vec::new(),
            labels: Vec::new(),
            shapes: Vec::new(),
            ids: Vec::new(),
        }
    }

    /// Loads one split of a dataset from disk.
    pub fn from_manifest(manifest: &Manifest, split: Split, norm: Normalization) -> Result<Self> {
        let idx = manifest.indices(split);
        let mut out = Self::empty(manifest.spec.height, manifest.spec.width);
        for chunk in idx.chunks(64) {
            let (x, f, labels) = load_batch::<T>(manifest, chunk, norm)?;
            out.inputs.extend_from_slice(x.data());
            out.flows.extend_from_slice(f.data());
            out.labels.extend(labels);
            out.shapes.extend(chunk.iter().map(|&i| manifest.samples[i].shape));
            out.ids.extend(chunk.iter().map(|&i| manifest.samples[i].id));
        }
        Ok(out)
    }

    /// Builds a dataset from generated samples of one split.
    pub fn from_samples(samples: &[(Sample, Split)], split: Split, norm: Normalization) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("no samples".into()))?;
        let mut out = Self::empty(first.0.frame1.height, first.0.frame1.width);
        for (id, (s, sp)) in samples.iter().enumerate() {
            if *sp == split {
                out.push(s, id, norm)?;
            }
        }
        Ok(out)
    }

    pub fn push(&mut self, s: &Sample, id: usize, norm: Normalization) -> Result<()> {
        if (s.frame1.height, s.frame1.width) != (self.height, self.width) {
            return Err(Error::shape("sample size differs from the dataset"));
        }
        push_pair(&s.frame1, &s.frame2, norm, &mut self.inputs)?;
        self.flows.extend(s.flow.u().iter().chain(s.flow.v()).map(|&x| T::of(x as f64)));
        self.labels.push(s.label);
        self.shapes.push(s.shape);
        self.ids.push(id);
        Ok(())
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

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Inputs `[N, 6, H, W]`, flows `[N, 2, H, W]` and labels for the listed samples.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
        let p = self.plane();
        let mut x = Vec::with_capacity(idx.len() * 6 * p);
        let mut f = Vec::with_capacity(idx.len() * 2 * p);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of range ({})", self.len())));
            }
            x.extend_from_slice(&self.inputs[i * 6 * p..(i + 1) * 6 * p]);
            f.extend_from_slice(&self.flows[i * 2 * p..(i + 1) * 2 * p]);
        }
        let n = idx.len();
        Ok((
            Tensor::new(&[n, 6, self.height, self.width], x)?,
            Tensor::new(&[n, 2, self.height, self.width], f)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Ground-truth flow of one sample.
    pub fn flow(&self, i: usize) -> FlowField {
        let p = self.plane();
        let conv = |s: &[T]| s.iter().map(|v| v.to_f64().unwrap_or(f64::NAN) as f32).collect();
        let base = i * 2 * p;
        FlowField::new(
            self.width,
            self.height,
            conv(&self.flows[base..base + p]),
            conv(&self.flows[base + p..base + 2 * p]),
        )
        .expect("stored flows match the dataset extent")
    }

    /// A new dataset holding the listed samples, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Ok(Self::empty(self.height, self.width));
        }
        let (x, f, labels) = self.batch(idx)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            inputs: x.into_data(),
            flows: f.into_data(),
            labels,
            shapes: idx.iter().map(|&i| self.shapes[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        })
    }

    /// Samples whose shape satisfies `keep`.
    pub fn filter_shapes(&self, keep: impl Fn(ShapeKind) -> bool) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.shapes[i])).collect();
        self.subset(&idx)
    }

    /// EPE of predicting zero motion: the mean ground-truth flow magnitude.
    pub fn zero_flow_epe(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let p = self.plane();
        let total: f64 = self
            .flows
            .chunks(2 * p)
            .map(|s| {
                (0..p)
                    .map(|i| {
                        let (u, v) = (s[i].to_f64().unwrap_or(0.0), s[p + i].to_f64().unwrap_or(0.0));
                        u.hypot(v)
                    })
                    .sum::<f64>()
            })
            .sum();
        total / (self.len() * p) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_samples, SceneSpec};

    #[test]
    fn batches_and_baseline() {
        let samples = gen_samples(&SceneSpec::with_size(32), 8, 2, 1).unwrap();
        let train = FlowData::<f32>::from_samples(&samples, Split::Train, Normalization::Symmetric).unwrap();
        let test = FlowData::<f32>::from_samples(&samples, Split::Test, Normalization::Symmetric).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(test.ids, vec![8, 9]);
        let (x, f, l) = train.batch(&[3, 1]).unwrap();
        assert_eq!(x.shape(), &[2, 6, 32, 32]);
        assert_eq!(f.shape(), &[2, 2, 32, 32]);
        assert_eq!(l, vec![samples[3].0.label, samples[1].0.label]);
        assert_eq!(train.flow(3), samples[3].0.flow);
        let want: f64 = samples[..8].iter().map(|(s, _)| s.flow.mean_norm()).sum::<f64>() / 8.0;
        assert!((train.zero_flow_epe() - want).abs() < 1e-12);
        assert!(train.batch(&[8]).is_err());
    }
}
