//! Per-parameter importance scores.
//!
//! Three metrics are supported:
//!
//! - `LP` (loss preservation): `sum_j |theta * g_j|`, where `g_j` is the
//!   gradient of the loss on sample `j` with respect to that scalar. To first
//!   order this is the change in loss when the parameter is zeroed.
//! - `Amp`: `theta^2`.
//! - `Mixed`: the LP sum multiplied by `theta^2`.
//!
//! Scores are compared across tasks only after per-layer min-max
//! normalization into `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::store::{Kind, Meta};
use crate::tensor::{reduce_minmax_slice, with_slice, with_slice_pair, Element, ParamSet, Tensor};
use crate::toy::{backward, SampleBatch};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Metric {
    #[default]
    Lp,
    Amp,
    Mixed,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Lp => "LP",
            Metric::Amp => "Amp",
            Metric::Mixed => "Mixed",
        }
    }

    pub fn needs_samples(self) -> bool {
        !matches!(self, Metric::Amp)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Metric> {
        match s.to_ascii_lowercase().as_str() {
            "lp" => Ok(Metric::Lp),
            "amp" => Ok(Metric::Amp),
            "mixed" => Ok(Metric::Mixed),
            _ => Err(Error::UnknownMetric(s.to_owned())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    pub scores: ParamSet,
    pub metric: Metric,
    pub normalized: bool,
    pub task_id: String,
    pub sample_count: usize,
}

impl ImportanceMap {
    pub fn schema_digest(&self) -> String {
        self.scores.schema_digest()
    }

    pub fn meta(&self) -> Meta {
        Meta::new(Kind::Importance)
            .with_task(self.task_id.clone())
            .with_metric(self.metric.as_str())
            .with_extra("normalized", self.normalized.to_string())
            .with_extra("sample_count", self.sample_count.to_string())
    }

    pub fn from_container(scores: ParamSet, meta: &Meta) -> Result<ImportanceMap> {
        if meta.kind != Kind::Importance {
            return Err(Error::InvalidMeta(format!(
                "expected an importance container, found `{}`",
                meta.kind
            )));
        }
        let metric = meta
            .metric
            .as_deref()
            .ok_or_else(|| Error::InvalidMeta("importance metric missing".into()))?
            .parse()?;
        let normalized = match meta.extra("normalized") {
            Some("true") => true,
            Some("false") | None => false,
            Some(other) => return Err(Error::InvalidMeta(format!("normalized = `{other}`"))),
        };
        let sample_count = meta
            .extra("sample_count")
            .map(str::parse)
            .transpose()
            .map_err(|_| Error::InvalidMeta("sample_count is not an integer".into()))?
            .unwrap_or(0);
        let im = ImportanceMap {
            scores,
            metric,
            normalized,
            task_id: meta.task_id.clone(),
            sample_count,
        };
        im.check_invariants()?;
        Ok(im)
    }

    fn check_invariants(&self) -> Result<()> {
        for (name, t) in &self.scores {
            let (lo, hi) = with_slice!(t, v => {
                let (lo, hi) = reduce_minmax_slice(v)?;
                (lo.to_f64_exact(), hi.to_f64_exact())
            });
            if lo < 0.0 || (self.normalized && hi > 1.0) {
                return Err(Error::InvalidMeta(format!(
                    "importance `{name}` out of range [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

fn abs_product_sum<T: Element>(acc: &Tensor, w: &[T], g: &[T]) -> Vec<T> {
    let a = acc
        .as_slice::<T>()
        .expect("accumulator shares the parameter dtype");
    a.iter()
        .zip(w)
        .zip(g)
        .map(|((&s, &w), &g)| s + (w * g).abs())
        .collect()
}

/// `acc += |theta * g|`, elementwise, in the tensors' dtype.
fn accumulate_abs_product(acc: &Tensor, theta: &Tensor, grad: &Tensor) -> Result<Tensor> {
    theta.check_same_shape(grad)?;
    with_slice_pair!(theta, grad, (w, g) => Ok(acc.with_values(abs_product_sum(acc, w, g))))
}

/// LP importance from an iterator of per-sample gradients, summed in order.
pub fn lp_from_gradients<I>(
    params: &ParamSet,
    task_id: &str,
    per_sample_grads: I,
) -> Result<ImportanceMap>
where
    I: IntoIterator<Item = Result<ParamSet>>,
{
    let mut scores = params.zeros_like();
    let mut count = 0usize;
    for grad in per_sample_grads {
        let grad = grad?;
        params.check_compatible(&grad)?;
        scores = scores.map(|name, acc| {
            let theta = params.get(name).expect("compatible");
            accumulate_abs_product(acc, theta, grad.get(name).expect("compatible"))
        })?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(ImportanceMap {
        scores,
        metric: Metric::Lp,
        normalized: false,
        task_id: task_id.to_owned(),
        sample_count: count,
    })
}

/// LP importance of a toy MLP, one backward pass per sample.
pub fn lp_importance(
    params: &ParamSet,
    samples: &SampleBatch,
    task_id: &str,
) -> Result<ImportanceMap> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    lp_from_gradients(
        params,
        task_id,
        (0..samples.len()).map(|j| backward(params, &samples.single(j))),
    )
}

pub fn amp_importance(params: &ParamSet, task_id: &str) -> ImportanceMap {
    let scores = params
        .map(|_, t| Ok(with_slice!(t, v => t.with_values(v.iter().map(|&x| x * x).collect()))))
        .expect("squaring is infallible");
    ImportanceMap {
        scores,
        metric: Metric::Amp,
        normalized: false,
        task_id: task_id.to_owned(),
        sample_count: 0,
    }
}

/// `LP * theta^2`: the per-sample LP sum first, then the amplitude factor.
pub fn mixed_importance(
    params: &ParamSet,
    samples: &SampleBatch,
    task_id: &str,
) -> Result<ImportanceMap> {
    mixed_from_lp(lp_importance(params, samples, task_id)?, params)
}

pub fn mixed_from_lp(lp: ImportanceMap, params: &ParamSet) -> Result<ImportanceMap> {
    let amp = amp_importance(params, &lp.task_id);
    let scores = lp
        .scores
        .binary(&amp.scores, crate::tensor::BinaryOp::Mul)?;
    Ok(ImportanceMap {
        scores,
        metric: Metric::Mixed,
        ..lp
    })
}

/// Dispatches on `metric`; `samples` is ignored for `Amp`.
pub fn compute(
    metric: Metric,
    params: &ParamSet,
    samples: Option<&SampleBatch>,
    task_id: &str,
) -> Result<ImportanceMap> {
    match (metric, samples) {
        (Metric::Amp, _) => Ok(amp_importance(params, task_id)),
        (Metric::Lp, Some(s)) => lp_importance(params, s, task_id),
        (Metric::Mixed, Some(s)) => mixed_importance(params, s, task_id),
        (_, None) => Err(Error::EmptyBatch),
    }
}

fn normalize_slice<T: Element>(v: &[T]) -> Result<Vec<T>> {
    let (lo, hi) = reduce_minmax_slice(v)?;
    if hi == lo {
        let half = T::from(0.5).expect("representable");
        return Ok(vec![half; v.len()]);
    }
    let range = hi - lo;
    Ok(v.iter().map(|&x| (x - lo) / range).collect())
}

/// Min-max normalizes every tensor into `[0, 1]`; constant tensors become 0.5.
pub fn normalize_per_layer(im: &ImportanceMap) -> Result<ImportanceMap> {
    if im.normalized {
        return Err(Error::AlreadyNormalized(im.task_id.clone()));
    }
    let scores = im.scores.map(|name, t| {
        with_slice!(t, v => normalize_slice(v).map(|out| t.with_values(out)))
            .map_err(|_| Error::EmptyLayer(name.to_owned()))
    })?;
    Ok(ImportanceMap {
        scores,
        normalized: true,
        ..im.clone()
    })
}
