//! Seeded synthetic classification tasks: Gaussian clusters around random
//! class prototypes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Kind, Meta};
use crate::tensor::{ParamSet, Tensor};

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_id: String,
    pub input_dim: usize,
    pub num_classes: usize,
    pub prototype_seed: u64,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl SyntheticTaskSpec {
    pub fn new(task_id: impl Into<String>, prototype_seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task_id: task_id.into(),
            input_dim: 16,
            num_classes: 8,
            prototype_seed,
            noise_sigma: 0.3,
            train_size: 2048,
            test_size: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(format!("{}: {msg}", self.task_id)));
        if self.task_id.is_empty() {
            return bad("empty task id");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and nonnegative");
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("split sizes must be positive");
        }
        Ok(())
    }

    /// Class prototypes, `num_classes x input_dim`, row-major.
    pub fn prototypes(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        (0..self.num_classes * self.input_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

/// Inputs (`len x dim`, row-major) with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    dim: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl SampleBatch {
    pub fn new(dim: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<SampleBatch> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if dim == 0 || inputs.len() != dim * labels.len() {
            return Err(Error::InvalidShape {
                shape: vec![labels.len(), dim],
                len: inputs.len(),
            });
        }
        Ok(SampleBatch {
            dim,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, indices: &[usize]) -> Result<SampleBatch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        SampleBatch::new(self.dim, inputs, labels)
    }

    pub fn single(&self, i: usize) -> SampleBatch {
        SampleBatch {
            dim: self.dim,
            inputs: self.input(i).to_vec(),
            labels: vec![self.labels[i]],
        }
    }

    /// The first `count` samples after a seeded shuffle.
    pub fn sample_subset(&self, count: usize, seed: u64) -> Result<SampleBatch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(count.min(self.len()));
        self.select(&order)
    }

    pub fn concat(batches: &[&SampleBatch]) -> Result<SampleBatch> {
        let first = batches.first().ok_or(Error::EmptyBatch)?;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            if b.dim != first.dim {
                return Err(Error::ShapeMismatch {
                    left: vec![first.dim],
                    right: vec![b.dim],
                });
            }
            inputs.extend_from_slice(&b.inputs);
            labels.extend_from_slice(&b.labels);
        }
        SampleBatch::new(first.dim, inputs, labels)
    }
}

fn draw_split(
    spec: &SyntheticTaskSpec,
    prototypes: &[f64],
    size: usize,
    stream: u64,
) -> SampleBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
    rng.set_stream(stream);
    let d = spec.input_dim;
    let mut inputs = Vec::with_capacity(size * d);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let label = i % spec.num_classes;
        let proto = &prototypes[label * d..(label + 1) * d];
        for &center in proto {
            let noise: f64 = StandardNormal.sample(&mut rng);
            inputs.push(center + spec.noise_sigma * noise);
        }
        labels.push(label);
    }
    SampleBatch {
        dim: d,
        inputs,
        labels,
    }
}

/// Generates balanced train and test splits with independent noise streams.
pub fn gen_task(spec: &SyntheticTaskSpec) -> Result<(SampleBatch, SampleBatch)> {
    spec.validate()?;
    let prototypes = spec.prototypes();
    Ok((
        draw_split(spec, &prototypes, spec.train_size, TRAIN_STREAM),
        draw_split(spec, &prototypes, spec.test_size, TEST_STREAM),
    ))
}

fn batch_tensors(ps: &mut ParamSet, prefix: &str, batch: &SampleBatch) -> Result<()> {
    ps.insert(
        format!("{prefix}.inputs"),
        Tensor::from_f64(vec![batch.len(), batch.dim], batch.inputs.clone())?,
    )?;
    ps.insert(
        format!("{prefix}.labels"),
        Tensor::from_f64(
            vec![batch.len()],
            batch.labels.iter().map(|&l| l as f64).collect(),
        )?,
    )
}

/// Packs a task's splits into a dataset container body.
pub fn fixture_params(train: &SampleBatch, test: &SampleBatch) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    batch_tensors(&mut ps, "train", train)?;
    batch_tensors(&mut ps, "test", test)?;
    Ok(ps)
}

pub fn fixture_meta(task_id: &str, num_classes: usize) -> Meta {
    Meta::new(Kind::Dataset)
        .with_task(task_id)
        .with_extra("num_classes", num_classes.to_string())
}

/// Reads one split (`"train"` or `"test"`) back from a dataset container.
pub fn fixture_split(ps: &ParamSet, split: &str) -> Result<SampleBatch> {
    let missing = |name: String| Error::InvalidSpec(format!("dataset fixture lacks `{name}`"));
    let inputs = ps
        .get(&format!("{split}.inputs"))
        .ok_or_else(|| missing(format!("{split}.inputs")))?;
    let labels = ps
        .get(&format!("{split}.labels"))
        .ok_or_else(|| missing(format!("{split}.labels")))?;
    if inputs.shape().len() != 2 || labels.shape() != [inputs.shape()[0]] {
        return Err(Error::InvalidSpec(format!("malformed `{split}` split")));
    }
    let labels = labels
        .to_f64_vec()
        .into_iter()
        .map(|l| {
            if l >= 0.0 && l.fract() == 0.0 {
                Ok(l as usize)
            } else {
                Err(Error::InvalidSpec(format!(
                    "label {l} is not a class index"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    SampleBatch::new(inputs.shape()[1], inputs.to_f64_vec(), labels)
}
