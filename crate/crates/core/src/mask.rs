//! Threshold matrices and binary masks over normalized importance.
//!
//! Fusion thresholds are computed per element position across the N task
//! importance maps; forgetting thresholds are one quantile per layer of a
//! single map. A task keeps an entry only when its importance is strictly
//! greater than the threshold, so ties are dropped.

use std::fmt::Write as _;

use num_traits::Zero;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::merge::TaskVector;
use crate::store::{Kind, Meta};
use crate::tensor::{
    check_p, quantile_sorted, with_slice, with_slice_pair, Element, ParamSet, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    CrossTask,
    PerLayer,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::CrossTask => "cross_task",
            MaskMode::PerLayer => "per_layer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdMap {
    pub thresholds: ParamSet,
    pub mode: MaskMode,
    pub p: f64,
}

impl ThresholdMap {
    pub fn meta(&self) -> Meta {
        Meta::new(Kind::Threshold)
            .with_extra("mode", self.mode.as_str())
            .with_extra("p", self.p.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskMask {
    pub task_id: String,
    pub mask: ParamSet,
}

impl TaskMask {
    pub fn meta(&self, set: &MaskSet) -> Meta {
        Meta::new(Kind::Mask)
            .with_task(self.task_id.clone())
            .with_extra("mode", set.mode.as_str())
            .with_extra("p", set.p.to_string())
    }
}

/// One mask per input importance map, in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<TaskMask>,
    pub p: f64,
    pub mode: MaskMode,
}

fn check_maps(ims: &[ImportanceMap]) -> Result<()> {
    let first = ims.first().ok_or(Error::TooFewTasks(0))?;
    for im in ims {
        if !im.normalized {
            return Err(Error::NotNormalized(im.task_id.clone()));
        }
        first.scores.check_compatible(&im.scores)?;
    }
    Ok(())
}

fn cross_quantile<T: Element>(first: &[T], tensors: &[&Tensor], p: f64) -> Vec<T> {
    let columns: Vec<&[T]> = tensors
        .iter()
        .map(|t| t.as_slice::<T>().expect("compatible maps share a dtype"))
        .collect();
    (0..first.len())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(columns.len()),
            |buf, pos| {
                buf.clear();
                buf.extend(columns.iter().map(|c| c[pos]));
                buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                quantile_sorted(buf, p).expect("non-empty, p checked")
            },
        )
        .collect()
}

/// Elementwise `p`-quantile across the N normalized importance maps.
pub fn cross_threshold(ims: &[ImportanceMap], p: f64) -> Result<ThresholdMap> {
    if ims.len() < 2 {
        return Err(Error::TooFewTasks(ims.len()));
    }
    check_p(p)?;
    check_maps(ims)?;
    let thresholds = ims[0].scores.map(|name, first| {
        let tensors: Vec<&Tensor> = ims
            .iter()
            .map(|im| im.scores.get(name).expect("checked"))
            .collect();
        Ok(with_slice!(first, v => first.with_values(cross_quantile(v, &tensors, p))))
    })?;
    Ok(ThresholdMap {
        thresholds,
        mode: MaskMode::CrossTask,
        p,
    })
}

fn above<T: Element>(scores: &[T], thresholds: &[T]) -> Vec<T> {
    scores
        .iter()
        .zip(thresholds)
        .map(|(&x, &th)| if x > th { T::one() } else { T::zero() })
        .collect()
}

fn indicator_above(scores: &Tensor, threshold: &Tensor) -> Result<Tensor> {
    scores.check_same_shape(threshold)?;
    with_slice_pair!(scores, threshold, (s, t) => Ok(scores.with_values(above(s, t))))
}

/// `M_i = 1` exactly where `I_i > T` (strict).
pub fn cross_masks(ims: &[ImportanceMap], thresholds: &ThresholdMap) -> Result<MaskSet> {
    let masks = ims
        .iter()
        .map(|im| {
            let mask = im
                .scores
                .zip_map(&thresholds.thresholds, |_, s, t| indicator_above(s, t))?;
            Ok(TaskMask {
                task_id: im.task_id.clone(),
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet {
        masks,
        p: thresholds.p,
        mode: thresholds.mode,
    })
}

/// One `p`-quantile per layer over that layer's own importance values.
pub fn forget_threshold(im: &ImportanceMap, p: f64) -> Result<ThresholdMap> {
    check_p(p)?;
    if !im.normalized {
        return Err(Error::NotNormalized(im.task_id.clone()));
    }
    let thresholds = im.scores.map(|name, t| {
        if t.is_empty() {
            return Err(Error::EmptyLayer(name.to_owned()));
        }
        with_slice!(t, v => {
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let q = quantile_sorted(&sorted, p)?;
            Ok(t.with_values(vec![q; v.len()]))
        })
    })?;
    Ok(ThresholdMap {
        thresholds,
        mode: MaskMode::PerLayer,
        p,
    })
}

/// The single forgetting mask for one importance map.
pub fn forget_mask(im: &ImportanceMap, p: f64) -> Result<MaskSet> {
    let thresholds = forget_threshold(im, p)?;
    cross_masks(std::slice::from_ref(im), &thresholds)
}

/// `delta' = M ⊙ delta`, recording the achieved sparsity.
pub fn apply_mask(delta: &TaskVector, mask: &ParamSet) -> Result<TaskVector> {
    let filtered = delta.delta.zip_map(mask, |_, d, m| {
        crate::tensor::ew_binary(d, m, crate::tensor::BinaryOp::Mul)
    })?;
    Ok(TaskVector::from_parts(
        filtered,
        delta.task_id.clone(),
        delta.base_digest.clone(),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionRow {
    pub task_id: String,
    pub tensor: String,
    pub kept: usize,
    pub total: usize,
}

impl SelectionRow {
    pub fn kept_fraction(&self) -> f64 {
        self.kept as f64 / self.total as f64
    }
}

fn count_ones(t: &Tensor) -> usize {
    with_slice!(t, v => v.iter().filter(|x| !x.is_zero()).count())
}

/// Kept fraction per task and tensor.
pub fn selection_stats(masks: &MaskSet) -> Vec<SelectionRow> {
    masks
        .masks
        .iter()
        .flat_map(|tm| {
            tm.mask.iter().map(move |(name, t)| SelectionRow {
                task_id: tm.task_id.clone(),
                tensor: name.clone(),
                kept: count_ones(t),
                total: t.len(),
            })
        })
        .collect()
}

pub const SELECTION_CSV_HEADER: &str = "task_id,tensor,kept_fraction";

pub fn selection_csv(rows: &[SelectionRow]) -> String {
    let mut out = String::from(SELECTION_CSV_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            row.task_id,
            row.tensor,
            row.kept_fraction()
        );
    }
    out
}
