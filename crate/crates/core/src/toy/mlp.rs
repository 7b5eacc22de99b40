//! Two-layer ReLU perceptron with a softmax cross-entropy head, written out
//! by hand: forward pass, exact backward pass and plain SGD.
//!
//! Parameters live in a [`ParamSet`] with four float64 tensors:
//! `layer1.weight` (d x h), `layer1.bias` (h), `layer2.weight` (h x C) and
//! `layer2.bias` (C). Inputs are row vectors, so `hidden = relu(x W1 + b1)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use crate::toy::data::SampleBatch;

pub const W1: &str = "layer1.weight";
pub const B1: &str = "layer1.bias";
pub const W2: &str = "layer2.weight";
pub const B2: &str = "layer2.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpShape {
    pub fn new(input_dim: usize, hidden: usize, classes: usize) -> MlpShape {
        MlpShape {
            input_dim,
            hidden,
            classes,
        }
    }

    /// He-normal first layer, scaled-normal head, zero biases.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        let MlpShape {
            input_dim: d,
            hidden: h,
            classes: c,
        } = *self;
        if d == 0 || h == 0 || c < 2 {
            return Err(Error::InvalidSpec(format!("bad MLP shape {self:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let mut ps = ParamSet::new();
        ps.insert(
            W1,
            Tensor::from_f64(vec![d, h], draw(d * h, (2.0 / d as f64).sqrt()))?,
        )?;
        ps.insert(B1, Tensor::from_f64(vec![h], vec![0.0; h])?)?;
        ps.insert(
            W2,
            Tensor::from_f64(vec![h, c], draw(h * c, (1.0 / h as f64).sqrt()))?,
        )?;
        ps.insert(B2, Tensor::from_f64(vec![c], vec![0.0; c])?)?;
        Ok(ps)
    }

    /// Recovers the shape from a parameter set, validating the fixed schema.
    pub fn of(params: &ParamSet) -> Result<MlpShape> {
        let get = |name: &str| {
            params
                .get(name)
                .ok_or_else(|| Error::SchemaMismatch(format!("missing `{name}`")))
        };
        let w1 = get(W1)?;
        let w2 = get(W2)?;
        if params.len() != 4 || w1.shape().len() != 2 || w2.shape().len() != 2 {
            return Err(Error::SchemaMismatch("not a two-layer MLP".into()));
        }
        let shape = MlpShape::new(w1.shape()[0], w1.shape()[1], w2.shape()[1]);
        let expect = [
            (W1, vec![shape.input_dim, shape.hidden]),
            (B1, vec![shape.hidden]),
            (W2, vec![shape.hidden, shape.classes]),
            (B2, vec![shape.classes]),
        ];
        for (name, dims) in expect {
            let t = get(name)?;
            if t.shape() != dims.as_slice() {
                return Err(Error::ShapeMismatch {
                    left: dims,
                    right: t.shape().to_vec(),
                });
            }
            if t.as_slice::<f64>().is_none() {
                return Err(Error::DtypeMismatch {
                    left: "F64".into(),
                    right: t.dtype().to_string(),
                });
            }
        }
        Ok(shape)
    }
}

struct View<'a> {
    shape: MlpShape,
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

impl<'a> View<'a> {
    fn new(params: &'a ParamSet, batch: &SampleBatch) -> Result<View<'a>> {
        let shape = MlpShape::of(params)?;
        if batch.dim() != shape.input_dim {
            return Err(Error::ShapeMismatch {
                left: vec![shape.input_dim],
                right: vec![batch.dim()],
            });
        }
        if let Some(&bad) = batch.labels().iter().find(|&&l| l >= shape.classes) {
            return Err(Error::InvalidSpec(format!(
                "label {bad} out of range for {} classes",
                shape.classes
            )));
        }
        let f = |name: &str| {
            params
                .get(name)
                .and_then(Tensor::as_slice::<f64>)
                .expect("validated")
        };
        Ok(View {
            shape,
            w1: f(W1),
            b1: f(B1),
            w2: f(W2),
            b2: f(B2),
        })
    }

    /// Pre-activations of the hidden layer and logits for one input.
    fn forward_one(&self, x: &[f64], pre: &mut [f64], logits: &mut [f64]) {
        let MlpShape {
            hidden: h,
            classes: c,
            ..
        } = self.shape;
        pre.copy_from_slice(self.b1);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.w1[i * h..(i + 1) * h];
            for (p, &w) in pre.iter_mut().zip(row) {
                *p += xi * w;
            }
        }
        logits.copy_from_slice(self.b2);
        for (j, &pj) in pre.iter().enumerate() {
            let a = relu(pj);
            if a == 0.0 {
                continue;
            }
            let row = &self.w2[j * c..(j + 1) * c];
            for (z, &w) in logits.iter_mut().zip(row) {
                *z += a * w;
            }
        }
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Numerically stable `log(sum(exp(z)))`.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy over `logits` (`n x C`, row-major).
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let total: f64 = logits
        .chunks_exact(classes)
        .zip(labels)
        .map(|(z, &y)| log_sum_exp(z) - z[y])
        .sum();
    total / labels.len() as f64
}

/// Softmax of one logit row.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| (v - lse).exp()).collect()
}

/// Mean loss and the `n x C` logit matrix.
pub fn forward_loss(params: &ParamSet, batch: &SampleBatch) -> Result<(f64, Vec<f64>)> {
    let view = View::new(params, batch)?;
    let MlpShape {
        hidden: h,
        classes: c,
        ..
    } = view.shape;
    let mut pre = vec![0.0; h];
    let mut logits = vec![0.0; batch.len() * c];
    for (i, out) in logits.chunks_exact_mut(c).enumerate() {
        view.forward_one(batch.input(i), &mut pre, out);
    }
    Ok((cross_entropy(&logits, batch.labels(), c), logits))
}

/// Exact gradient of the mean loss, plus the loss itself.
pub fn loss_and_grad(params: &ParamSet, batch: &SampleBatch) -> Result<(f64, ParamSet)> {
    let view = View::new(params, batch)?;
    let MlpShape {
        input_dim: d,
        hidden: h,
        classes: c,
    } = view.shape;
    let n = batch.len() as f64;
    let mut gw1 = vec![0.0; d * h];
    let mut gb1 = vec![0.0; h];
    let mut gw2 = vec![0.0; h * c];
    let mut gb2 = vec![0.0; c];
    let mut pre = vec![0.0; h];
    let mut logits = vec![0.0; c];
    let mut dpre = vec![0.0; h];
    let mut loss = 0.0;

    for (i, &y) in batch.labels().iter().enumerate() {
        let x = batch.input(i);
        view.forward_one(x, &mut pre, &mut logits);
        loss += log_sum_exp(&logits) - logits[y];

        let mut dz = softmax(&logits);
        dz[y] -= 1.0;
        dz.iter_mut().for_each(|v| *v /= n);

        for (g, &v) in gb2.iter_mut().zip(&dz) {
            *g += v;
        }
        for j in 0..h {
            let a = relu(pre[j]);
            let w_row = &view.w2[j * c..(j + 1) * c];
            let g_row = &mut gw2[j * c..(j + 1) * c];
            let mut back = 0.0;
            for k in 0..c {
                g_row[k] += a * dz[k];
                back += w_row[k] * dz[k];
            }
            // ReLU subgradient at zero is zero.
            dpre[j] = if pre[j] > 0.0 { back } else { 0.0 };
        }
        for (g, &v) in gb1.iter_mut().zip(&dpre) {
            *g += v;
        }
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (g, &v) in gw1[r * h..(r + 1) * h].iter_mut().zip(&dpre) {
                *g += xr * v;
            }
        }
    }

    let mut grad = ParamSet::new();
    grad.insert(W1, Tensor::from_f64(vec![d, h], gw1)?)?;
    grad.insert(B1, Tensor::from_f64(vec![h], gb1)?)?;
    grad.insert(W2, Tensor::from_f64(vec![h, c], gw2)?)?;
    grad.insert(B2, Tensor::from_f64(vec![c], gb2)?)?;
    Ok((loss / n, grad))
}

pub fn backward(params: &ParamSet, batch: &SampleBatch) -> Result<ParamSet> {
    loss_and_grad(params, batch).map(|(_, g)| g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> SgdConfig {
        SgdConfig {
            steps: 300,
            lr: 0.05,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Minibatch SGD. Each epoch visits a fresh seeded permutation of the data.
pub fn sgd_finetune(init: &ParamSet, train: &SampleBatch, cfg: &SgdConfig) -> Result<ParamSet> {
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::InvalidHyper(format!("learning rate {}", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidHyper("batch size 0".into()));
    }
    MlpShape::of(init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut params = init.clone();
    let mut indices = Vec::with_capacity(cfg.batch_size);

    for _ in 0..cfg.steps {
        indices.clear();
        while indices.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let batch = train.select(&indices)?;
        let grad = backward(&params, &batch)?;
        params = params.zip_map(&grad, |_, p, g| {
            let (w, dw) = (p.as_slice::<f64>().unwrap(), g.as_slice::<f64>().unwrap());
            Ok(p.with_values(
                w.iter()
                    .zip(dw)
                    .map(|(&w, &dw)| w - cfg.lr * dw)
                    .collect::<Vec<f64>>(),
            ))
        })?;
    }
    Ok(params)
}

/// Fraction of samples whose argmax logit (lowest index on ties) is the label.
pub fn evaluate(params: &ParamSet, test: &SampleBatch) -> Result<f64> {
    let (_, logits) = forward_loss(params, test)?;
    let classes = MlpShape::of(params)?.classes;
    let correct = logits
        .chunks_exact(classes)
        .zip(test.labels())
        .filter(|(z, &y)| argmax(z) == y)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::data::{gen_task, SyntheticTaskSpec};

    fn fixture() -> (ParamSet, SampleBatch) {
        let mut ps = ParamSet::new();
        ps.insert(
            W1,
            Tensor::from_f64(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
        )
        .unwrap();
        ps.insert(B1, Tensor::from_f64(vec![2], vec![0.1, -0.2]).unwrap())
            .unwrap();
        ps.insert(
            W2,
            Tensor::from_f64(vec![2, 2], vec![1.0, 0.0, -1.0, 0.5]).unwrap(),
        )
        .unwrap();
        ps.insert(B2, Tensor::from_f64(vec![2], vec![0.0, 0.3]).unwrap())
            .unwrap();
        (ps, SampleBatch::new(2, vec![1.0, 2.0], vec![1]).unwrap())
    }

    #[test]
    fn hand_fixture_matches_scalar_evaluation() {
        let (ps, batch) = fixture();
        let (loss, logits) = forward_loss(&ps, &batch).unwrap();
        // pre = (0.1 + 1 + 1, -0.2 - 1 + 4) = (2.1, 2.8); both active.
        // z0 = 2.1 - 2.8 = -0.7, z1 = 0.3 + 2.8 * 0.5 = 1.7.
        assert!((logits[0] + 0.7).abs() < 1e-12);
        assert!((logits[1] - 1.7).abs() < 1e-12);
        let expected = (1.0 + (-2.4f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let shape = MlpShape::new(4, 3, 8);
        let zeroed = shape
            .init(1)
            .unwrap()
            .map(|_, t| Ok(t.with_values(vec![0.0f64; t.len()])))
            .unwrap();
        let batch = SampleBatch::new(4, vec![0.3, -1.0, 2.0, 0.5], vec![5]).unwrap();
        let (loss, _) = forward_loss(&zeroed, &batch).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_input_has_zero_first_layer_weight_gradient() {
        let params = MlpShape::new(3, 5, 4).init(2).unwrap();
        let batch = SampleBatch::new(3, vec![0.0; 3], vec![2]).unwrap();
        let grad = backward(&params, &batch).unwrap();
        assert!(grad.get(W1).unwrap().to_f64_vec().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_steps_is_identity_and_training_is_deterministic() {
        let task = SyntheticTaskSpec::new("t", 9);
        let (train, _) = gen_task(&task).unwrap();
        let init = MlpShape::new(16, 8, 8).init(3).unwrap();
        let none = SgdConfig {
            steps: 0,
            ..SgdConfig::default()
        };
        assert_eq!(sgd_finetune(&init, &train, &none).unwrap(), init);
        let cfg = SgdConfig {
            steps: 20,
            seed: 4,
            ..SgdConfig::default()
        };
        let a = sgd_finetune(&init, &train, &cfg).unwrap();
        let b = sgd_finetune(&init, &train, &cfg).unwrap();
        assert_eq!(a.content_digest(), b.content_digest());
        assert_ne!(a, init);
    }

    #[test]
    fn constant_prediction_scores_class_frequency() {
        let shape = MlpShape::new(2, 2, 3);
        let mut ps = shape
            .init(0)
            .unwrap()
            .map(|_, t| Ok(t.with_values(vec![0.0f64; t.len()])))
            .unwrap();
        ps.insert(B2, Tensor::from_f64(vec![3], vec![0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let batch = SampleBatch::new(2, vec![0.5; 10], vec![1, 0, 1, 2, 0]).unwrap();
        assert_eq!(evaluate(&ps, &batch).unwrap(), 0.4);
    }

    #[test]
    fn untrained_models_average_chance() {
        // One init maps the 8 prototype clusters to classes arbitrarily, so a
        // single draw is noisy; the mean over inits estimates chance.
        let (_, test) = gen_task(&SyntheticTaskSpec::new("t", 11)).unwrap();
        let draws = 64;
        let mean = (0..draws)
            .map(|s| evaluate(&MlpShape::new(16, 32, 8).init(s).unwrap(), &test).unwrap())
            .sum::<f64>()
            / draws as f64;
        assert!((mean - 1.0 / 8.0).abs() < 0.05, "mean accuracy {mean}");
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }

    #[test]
    fn schema_is_checked() {
        let (mut ps, batch) = fixture();
        ps.insert("extra", Tensor::from_f64(vec![1], vec![0.0]).unwrap())
            .unwrap();
        assert!(matches!(
            forward_loss(&ps, &batch),
            Err(Error::SchemaMismatch(_))
        ));
        let (ps, _) = fixture();
        let wide = SampleBatch::new(3, vec![0.0; 3], vec![0]).unwrap();
        assert!(matches!(
            forward_loss(&ps, &wide),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
