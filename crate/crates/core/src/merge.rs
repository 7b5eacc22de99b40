//! Task vectors and the merge operators built on them.
//!
//! STA fusion adds every importance-filtered task vector to the pretrained
//! base with coefficient 1; STA forgetting subtracts one filtered vector from
//! a model. The baselines are weight averaging, task arithmetic (fusion with
//! `lambda`, forgetting with `gamma`), TIES and DARE.
//!
//! Task vectors are summed left to right in the order given, so float32
//! merges are reproducible bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{ImportanceMap, Metric};
use crate::mask::{apply_mask, cross_masks, cross_threshold, forget_mask, MaskSet};
use crate::store::{Kind, Meta};
use crate::tensor::{check_p, ew_binary, BinaryOp, DType, Element, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub delta: ParamSet,
    pub task_id: String,
    /// Content digest of the pretrained parameters the delta was taken from.
    pub base_digest: String,
    /// Fraction of exactly-zero entries.
    pub sparsity: f64,
}

impl TaskVector {
    pub fn from_parts(delta: ParamSet, task_id: String, base_digest: String) -> TaskVector {
        let sparsity = delta.zero_fraction();
        TaskVector {
            delta,
            task_id,
            base_digest,
            sparsity,
        }
    }

    pub fn meta(&self) -> Meta {
        Meta::new(Kind::TaskVec)
            .with_task(self.task_id.clone())
            .with_base(self.base_digest.clone())
            .with_extra("sparsity", self.sparsity.to_string())
    }

    pub fn from_container(delta: ParamSet, meta: &Meta) -> Result<TaskVector> {
        if meta.kind != Kind::TaskVec {
            return Err(Error::InvalidMeta(format!(
                "expected a task vector container, found `{}`",
                meta.kind
            )));
        }
        Ok(TaskVector::from_parts(
            delta,
            meta.task_id.clone(),
            meta.base_digest.clone(),
        ))
    }
}

/// `fine - pre`, tagged with the content digest of `pre`.
pub fn task_vector(fine: &ParamSet, pre: &ParamSet, task_id: &str) -> Result<TaskVector> {
    let delta = fine.binary(pre, BinaryOp::Sub)?;
    Ok(TaskVector::from_parts(
        delta,
        task_id.to_owned(),
        pre.content_digest(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub p: f64,
    pub lambda: f64,
    pub gamma: f64,
    #[serde(with = "metric_serde")]
    pub metric: Metric,
    pub ties_trim_ratio: f64,
    pub dare_drop_rate: f64,
    pub seed: u64,
    pub importance_samples: usize,
}

impl Default for MergeConfig {
    fn default() -> MergeConfig {
        MergeConfig {
            p: 0.7,
            lambda: 0.4,
            gamma: 1.0,
            metric: Metric::Lp,
            ties_trim_ratio: 0.8,
            dare_drop_rate: 0.9,
            seed: 0,
            importance_samples: 32,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        for (name, v) in [
            ("ties_trim_ratio", self.ties_trim_ratio),
            ("dare_drop_rate", self.dare_drop_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidHyper(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.lambda.is_finite() && self.gamma.is_finite()) {
            return Err(Error::InvalidHyper(
                "lambda and gamma must be finite".into(),
            ));
        }
        if self.metric.needs_samples() && self.importance_samples == 0 {
            return Err(Error::InvalidHyper(
                "importance_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

mod metric_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::importance::Metric;

    pub fn serialize<S: Serializer>(m: &Metric, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(m.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Metric, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Errors unless every task vector was taken against `pre`.
fn check_bases(pre: &ParamSet, deltas: &[TaskVector]) -> Result<()> {
    let digest = pre.content_digest();
    for tv in deltas {
        if tv.base_digest != digest {
            return Err(Error::BaseMismatch(digest, tv.base_digest.clone()));
        }
    }
    for tv in deltas {
        pre.check_compatible(&tv.delta)?;
    }
    Ok(())
}

fn sum_deltas<'a>(
    pre: &ParamSet,
    deltas: impl IntoIterator<Item = &'a ParamSet>,
) -> Result<ParamSet> {
    deltas
        .into_iter()
        .try_fold(pre.zeros_like(), |acc, d| acc.binary(d, BinaryOp::Add))
}

/// `pre + sum_i (M_i ⊙ delta_i)` for externally supplied masks.
pub fn fuse_with_masks(pre: &ParamSet, deltas: &[TaskVector], masks: &MaskSet) -> Result<ParamSet> {
    if masks.masks.len() != deltas.len() {
        return Err(Error::SchemaMismatch(format!(
            "{} masks for {} task vectors",
            masks.masks.len(),
            deltas.len()
        )));
    }
    check_bases(pre, deltas)?;
    let filtered = deltas
        .iter()
        .zip(&masks.masks)
        .map(|(tv, m)| apply_mask(tv, &m.mask))
        .collect::<Result<Vec<_>>>()?;
    pre.binary(
        &sum_deltas(pre, filtered.iter().map(|tv| &tv.delta))?,
        BinaryOp::Add,
    )
}

/// STA fusion, also returning the masks that were applied.
pub fn sta_fuse_with_masks(
    pre: &ParamSet,
    deltas: &[TaskVector],
    ims: &[ImportanceMap],
    cfg: &MergeConfig,
) -> Result<(ParamSet, MaskSet)> {
    if deltas.len() < 2 {
        return Err(Error::TooFewTasks(deltas.len()));
    }
    if ims.len() != deltas.len() {
        return Err(Error::SchemaMismatch(format!(
            "{} importance maps for {} task vectors",
            ims.len(),
            deltas.len()
        )));
    }
    check_bases(pre, deltas)?;
    for (tv, im) in deltas.iter().zip(ims) {
        if tv.task_id != im.task_id {
            return Err(Error::SchemaMismatch(format!(
                "importance for `{}` paired with task vector `{}`",
                im.task_id, tv.task_id
            )));
        }
        if !im.normalized {
            return Err(Error::NotNormalized(im.task_id.clone()));
        }
    }
    let thresholds = cross_threshold(ims, cfg.p)?;
    let masks = cross_masks(ims, &thresholds)?;
    let fused = fuse_with_masks(pre, deltas, &masks)?;
    Ok((fused, masks))
}

/// `pre + sum_i M_i ⊙ delta_i` with cross-task quantile masks; no scaling.
pub fn sta_fuse(
    pre: &ParamSet,
    deltas: &[TaskVector],
    ims: &[ImportanceMap],
    cfg: &MergeConfig,
) -> Result<ParamSet> {
    sta_fuse_with_masks(pre, deltas, ims, cfg).map(|(fused, _)| fused)
}

/// STA forgetting, also returning the applied mask.
pub fn sta_forget_with_mask(
    model: &ParamSet,
    delta: &TaskVector,
    im: &ImportanceMap,
    cfg: &MergeConfig,
) -> Result<(ParamSet, MaskSet)> {
    model.check_compatible(&delta.delta)?;
    model.check_compatible(&im.scores)?;
    let masks = forget_mask(im, cfg.p)?;
    let filtered = apply_mask(delta, &masks.masks[0].mask)?;
    Ok((model.binary(&filtered.delta, BinaryOp::Sub)?, masks))
}

/// `model - M ⊙ delta` with a per-layer quantile mask; no scaling.
pub fn sta_forget(
    model: &ParamSet,
    delta: &TaskVector,
    im: &ImportanceMap,
    cfg: &MergeConfig,
) -> Result<ParamSet> {
    sta_forget_with_mask(model, delta, im, cfg).map(|(out, _)| out)
}

/// Typed per-position combination of N same-shape columns.
trait ColumnOp {
    fn apply<T: Element>(&self, columns: &[&[T]]) -> Vec<T>;
}

fn combine_tensors(tensors: &[&Tensor], op: &impl ColumnOp) -> Result<Tensor> {
    let first = tensors[0];
    for t in tensors {
        first.check_same_shape(t)?;
        if t.dtype() != first.dtype() {
            return Err(Error::DtypeMismatch {
                left: first.dtype().to_string(),
                right: t.dtype().to_string(),
            });
        }
    }
    fn typed<T: Element>(tensors: &[&Tensor], op: &impl ColumnOp) -> Vec<T> {
        let cols: Vec<&[T]> = tensors
            .iter()
            .map(|t| t.as_slice::<T>().expect("dtype checked"))
            .collect();
        op.apply(&cols)
    }
    Ok(match first.dtype() {
        DType::F32 => first.with_values(typed::<f32>(tensors, op)),
        DType::F64 => first.with_values(typed::<f64>(tensors, op)),
    })
}

fn combine_sets(sets: &[&ParamSet], op: &impl ColumnOp) -> Result<ParamSet> {
    let first = sets[0];
    for s in sets {
        first.check_compatible(s)?;
    }
    first.map(|name, _| {
        let tensors: Vec<&Tensor> = sets
            .iter()
            .map(|s| s.get(name).expect("compatible"))
            .collect();
        combine_tensors(&tensors, op)
    })
}

struct Mean;

impl ColumnOp for Mean {
    fn apply<T: Element>(&self, columns: &[&[T]]) -> Vec<T> {
        let n = T::from(columns.len()).expect("task count fits");
        (0..columns[0].len())
            .map(|i| columns.iter().fold(T::zero(), |acc, c| acc + c[i]) / n)
            .collect()
    }
}

/// Elementwise arithmetic mean of N >= 2 models.
pub fn baseline_average(models: &[ParamSet]) -> Result<ParamSet> {
    if models.len() < 2 {
        return Err(Error::TooFewTasks(models.len()));
    }
    combine_sets(&models.iter().collect::<Vec<_>>(), &Mean)
}

/// `pre + lambda * sum_i delta_i`.
pub fn baseline_task_arithmetic(
    pre: &ParamSet,
    deltas: &[TaskVector],
    lambda: f64,
) -> Result<ParamSet> {
    check_bases(pre, deltas)?;
    let sum = sum_deltas(pre, deltas.iter().map(|tv| &tv.delta))?;
    pre.binary(&sum.scale(lambda), BinaryOp::Add)
}

/// `model - gamma * delta`.
pub fn baseline_ta_forget(model: &ParamSet, delta: &TaskVector, gamma: f64) -> Result<ParamSet> {
    model.binary(&delta.delta.scale(gamma), BinaryOp::Sub)
}

/// Keeps the largest-magnitude `(1 - trim_ratio)` share of a whole task
/// vector (ties at the cut are kept) and zeroes the rest.
pub fn ties_trim(delta: &ParamSet, trim_ratio: f64) -> Result<ParamSet> {
    if !(0.0..=1.0).contains(&trim_ratio) {
        return Err(Error::InvalidHyper(format!("trim ratio {trim_ratio}")));
    }
    let mut magnitudes: Vec<f64> = delta
        .iter()
        .flat_map(|(_, t)| t.to_f64_vec())
        .map(f64::abs)
        .collect();
    let total = magnitudes.len();
    let keep = total - ((trim_ratio * total as f64).round() as usize).min(total);
    if keep == 0 {
        return Ok(delta.zeros_like());
    }
    magnitudes.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let cut = magnitudes[keep - 1];
    delta.map(|_, t| {
        let keep_mask = t.map_f64(|x| if x.abs() >= cut { 1.0 } else { 0.0 });
        ew_binary(t, &keep_mask, BinaryOp::Mul)
    })
}

/// Elected-sign disjoint mean over trimmed columns.
struct DisjointMean;

impl ColumnOp for DisjointMean {
    fn apply<T: Element>(&self, columns: &[&[T]]) -> Vec<T> {
        (0..columns[0].len())
            .map(|i| {
                let mass = columns.iter().fold(T::zero(), |acc, c| acc + c[i]);
                // A zero total elects the positive sign.
                let positive = mass >= T::zero();
                let (sum, count) = columns
                    .iter()
                    .map(|c| c[i])
                    .filter(|&v| v != T::zero() && (v > T::zero()) == positive)
                    .fold((T::zero(), 0usize), |(s, n), v| (s + v, n + 1));
                if count == 0 {
                    T::zero()
                } else {
                    sum / T::from(count).expect("task count fits")
                }
            })
            .collect()
    }
}

/// TIES merge of the task vectors: trim, elect sign, disjoint mean.
pub fn ties_merge_deltas(deltas: &[TaskVector], trim_ratio: f64) -> Result<ParamSet> {
    let trimmed = deltas
        .iter()
        .map(|tv| ties_trim(&tv.delta, trim_ratio))
        .collect::<Result<Vec<_>>>()?;
    combine_sets(&trimmed.iter().collect::<Vec<_>>(), &DisjointMean)
}

/// `pre + lambda * ties_merge(deltas)`.
pub fn baseline_ties(
    pre: &ParamSet,
    deltas: &[TaskVector],
    trim_ratio: f64,
    lambda: f64,
) -> Result<ParamSet> {
    if deltas.len() < 2 {
        return Err(Error::TooFewTasks(deltas.len()));
    }
    check_bases(pre, deltas)?;
    let merged = ties_merge_deltas(deltas, trim_ratio)?;
    pre.binary(&merged.scale(lambda), BinaryOp::Add)
}

/// Drops each entry independently with probability `drop_rate` and rescales
/// survivors by `1 / (1 - drop_rate)`.
pub fn baseline_dare(delta: &TaskVector, drop_rate: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::InvalidRate(drop_rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_scale = 1.0 / (1.0 - drop_rate);
    let out = delta.delta.map(|_, t| {
        let mask = t.map_f64(|_| {
            if rng.random::<f64>() < drop_rate {
                0.0
            } else {
                keep_scale
            }
        });
        ew_binary(t, &mask, BinaryOp::Mul)
    })?;
    Ok(TaskVector::from_parts(
        out,
        delta.task_id.clone(),
        delta.base_digest.clone(),
    ))
}
