//! Dense tensors, named parameter sets and the elementwise / order-statistic
//! primitives the merge pipeline is built from.
//!
//! Tensors are row-major flat buffers. Every operation here is pure and keeps
//! the dtype of its inputs: float32 checkpoints are merged in float32.

use std::collections::btree_map;
use std::collections::BTreeMap;
use std::fmt;

use num_traits::{Float, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Floating-point element types a [`Tensor`] can hold.
pub trait Element: Float + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn slice(storage: &Storage) -> Option<&[Self]>;
    fn wrap(values: Vec<Self>) -> Storage;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn to_f64_exact(self) -> f64;
    fn from_f64_round(v: f64) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn slice(storage: &Storage) -> Option<&[f32]> {
        match storage {
            Storage::F32(v) => Some(v),
            Storage::F64(_) => None,
        }
    }

    fn wrap(values: Vec<f32>) -> Storage {
        Storage::F32(values)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }

    fn to_f64_exact(self) -> f64 {
        f64::from(self)
    }

    fn from_f64_round(v: f64) -> f32 {
        v as f32
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn slice(storage: &Storage) -> Option<&[f64]> {
        match storage {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    fn wrap(values: Vec<f64>) -> Storage {
        Storage::F64(values)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }

    fn to_f64_exact(self) -> f64 {
        self
    }

    fn from_f64_round(v: f64) -> f64 {
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs `$body` with `$v` bound to the typed slice of a tensor's storage.
macro_rules! with_slice {
    ($tensor:expr, $v:ident => $body:expr) => {
        match $tensor.storage() {
            $crate::tensor::Storage::F32($v) => $body,
            $crate::tensor::Storage::F64($v) => $body,
        }
    };
}

/// Runs `$body` with typed slices of two same-dtype tensors, or returns
/// `DtypeMismatch`.
macro_rules! with_slice_pair {
    ($a:expr, $b:expr, ($x:ident, $y:ident) => $body:expr) => {
        match ($a.storage(), $b.storage()) {
            ($crate::tensor::Storage::F32($x), $crate::tensor::Storage::F32($y)) => $body,
            ($crate::tensor::Storage::F64($x), $crate::tensor::Storage::F64($y)) => $body,
            _ => {
                return Err($crate::error::Error::DtypeMismatch {
                    left: $a.dtype().to_string(),
                    right: $b.dtype().to_string(),
                })
            }
        }
    };
}

pub(crate) use with_slice;
pub(crate) use with_slice_pair;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Storage) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec<T: Element>(shape: Vec<usize>, values: Vec<T>) -> Result<Tensor> {
        Tensor::new(shape, T::wrap(values))
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec(shape, values)
    }

    pub fn from_f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Tensor> {
        Tensor::from_vec(shape, values)
    }

    /// Same shape and dtype as `self`, new values. Caller guarantees the length.
    pub(crate) fn with_values<T: Element>(&self, values: Vec<T>) -> Tensor {
        debug_assert_eq!(values.len(), self.len());
        Tensor {
            shape: self.shape.clone(),
            data: T::wrap(values),
        }
    }

    pub fn full(shape: Vec<usize>, dtype: DType, value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        match dtype {
            DType::F32 => Tensor::from_vec(shape, vec![value as f32; n]),
            DType::F64 => Tensor::from_vec(shape, vec![value; n]),
        }
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Result<Tensor> {
        Tensor::full(shape, dtype, 0.0)
    }

    pub fn zeros_like(&self) -> Tensor {
        self.full_like(0.0)
    }

    pub fn full_like(&self, value: f64) -> Tensor {
        with_slice!(self, v => self.with_values(filled(v.len(), value, v)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn storage(&self) -> &Storage {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice<T: Element>(&self) -> Option<&[T]> {
        T::slice(&self.data)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        with_slice!(self, v => v.iter().map(|&x| x.to_f64_exact()).collect())
    }

    pub fn get_f64(&self, index: usize) -> f64 {
        with_slice!(self, v => v[index].to_f64_exact())
    }

    pub fn all_finite(&self) -> bool {
        with_slice!(self, v => v.iter().all(|x| x.is_finite()))
    }

    /// Applies `f` elementwise in f64 and casts back to the tensor's dtype.
    pub fn map_f64(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        with_slice!(self, v => self.with_values(map_via_f64(v, &mut f)))
    }

    /// Fraction of exactly-zero elements.
    pub fn zero_fraction(&self) -> f64 {
        let zeros = with_slice!(self, v => v.iter().filter(|x| x.is_zero()).count());
        zeros as f64 / self.len() as f64
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

fn filled<T: Element>(len: usize, value: f64, _like: &[T]) -> Vec<T> {
    vec![T::from_f64_round(value); len]
}

fn map_via_f64<T: Element>(v: &[T], f: &mut impl FnMut(f64) -> f64) -> Vec<T> {
    v.iter()
        .map(|&x| T::from_f64_round(f(x.to_f64_exact())))
        .collect()
}

fn scale_slice<T: Element>(v: &[T], factor: f64) -> Vec<T> {
    let c = T::from_f64_round(factor);
    v.iter().map(|&x| x * c).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

pub fn ew_binary(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    a.check_same_shape(b)?;
    with_slice_pair!(a, b, (x, y) => Ok(a.with_values(
        x.iter().zip(y.iter()).map(|(&l, &r)| op.apply(l, r)).collect(),
    )))
}

/// Scales every element by `factor`, computed in the tensor's dtype.
pub fn scale(t: &Tensor, factor: f64) -> Tensor {
    with_slice!(t, v => t.with_values(scale_slice(v, factor)))
}

pub fn reduce_minmax_slice<T: Element>(values: &[T]) -> Result<(T, T)> {
    let (&first, rest) = values.split_first().ok_or(Error::EmptyTensor)?;
    Ok(rest.iter().fold((first, first), |(lo, hi), &x| {
        (if x < lo { x } else { lo }, if x > hi { x } else { hi })
    }))
}

pub fn reduce_minmax(t: &Tensor) -> Result<(f64, f64)> {
    with_slice!(t, v => {
        let (lo, hi) = reduce_minmax_slice(v)?;
        Ok((lo.to_f64_exact(), hi.to_f64_exact()))
    })
}

pub(crate) fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidP(p));
    }
    Ok(())
}

/// Interpolated quantile of an ascending-sorted slice.
///
/// With `N` values, the 1-indexed fractional rank is `L = 1 + (N - 1) p`; the
/// result interpolates linearly between the order statistics at `floor(L)`
/// and `floor(L) + 1`. The result is clamped to that bracket so it stays
/// monotone in `p` under rounding.
pub fn quantile_sorted<T: Element>(sorted: &[T], p: f64) -> Result<T> {
    check_p(p)?;
    let n = sorted.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let rank = 1.0 + (n - 1) as f64 * p;
    let k = (rank.floor() as usize).clamp(1, n);
    let frac = rank - k as f64;
    let lower = sorted[k - 1];
    if frac == 0.0 || k == n {
        return Ok(lower);
    }
    let upper = sorted[k];
    let step = T::from_f64_round(frac);
    let value = lower + (upper - lower) * step;
    Ok(value.max(lower).min(upper))
}

/// Interpolated `p`-quantile of unsorted values (stable ascending sort first).
pub fn quantile_interpolated<T: Element>(values: &[T], p: f64) -> Result<T> {
    check_p(p)?;
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    quantile_sorted(&sorted, p)
}

/// Ordered map of named tensors sharing one architecture.
///
/// Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name == crate::store::META_KEY {
            return Err(Error::InvalidMeta(format!("invalid tensor name `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn schema_digest(&self) -> String {
        crate::store::schema_digest(self)
    }

    pub fn content_digest(&self) -> String {
        crate::store::content_digest(self)
    }

    /// Errors unless both sets share names, shapes and dtypes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} tensors vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(other.entries.iter()) {
            if na != nb || ta.shape() != tb.shape() || ta.dtype() != tb.dtype() {
                return Err(Error::SchemaMismatch(format!(
                    "`{na}` {:?} {} vs `{nb}` {:?} {}",
                    ta.shape(),
                    ta.dtype(),
                    tb.shape(),
                    tb.dtype()
                )));
            }
        }
        Ok(())
    }

    pub fn is_compatible(&self, other: &ParamSet) -> bool {
        self.check_compatible(other).is_ok()
    }

    /// Applies `f` to every tensor, keeping names.
    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<ParamSet> {
        let mut entries = BTreeMap::new();
        for (name, t) in &self.entries {
            entries.insert(name.clone(), f(name, t)?);
        }
        Ok(ParamSet { entries })
    }

    /// Pairs tensors of two compatible sets by name.
    pub fn zip_map(
        &self,
        other: &ParamSet,
        mut f: impl FnMut(&str, &Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<ParamSet> {
        self.check_compatible(other)?;
        self.map(|name, t| f(name, t, &other.entries[name]))
    }

    pub fn binary(&self, other: &ParamSet, op: BinaryOp) -> Result<ParamSet> {
        self.zip_map(other, |_, a, b| ew_binary(a, b, op))
    }

    pub fn scale(&self, factor: f64) -> ParamSet {
        self.map(|_, t| Ok(scale(t, factor)))
            .expect("scale is infallible")
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|_, t| Ok(t.zeros_like()))
            .expect("zeros_like is infallible")
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Fraction of exactly-zero elements over the whole set.
    pub fn zero_fraction(&self) -> f64 {
        let total = self.num_elements();
        if total == 0 {
            return 0.0;
        }
        let zeros: f64 = self
            .entries
            .values()
            .map(|t| t.zero_fraction() * t.len() as f64)
            .sum();
        (zeros / total as f64).clamp(0.0, 1.0)
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> ParamSet {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}
