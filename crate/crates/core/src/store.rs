//! `.tnsr` container: a single-file binary format for parameter sets, task
//! vectors, importance maps, masks and dataset fixtures.
//!
//! Layout:
//!
//! ```text
//! [u64 little-endian header length N][N bytes UTF-8 JSON header][payload]
//! ```
//!
//! The header is a JSON object with one entry per tensor,
//! `{"dtype": "F32"|"F64", "shape": [..], "data_offsets": [begin, end]}`,
//! plus the reserved `__meta__` object carrying `kind`, `task_id`,
//! `base_digest`, `metric` and any extra string fields (for example `recipe`
//! or `sparsity`). Keys are written in lexicographic order with no
//! whitespace, so identical inputs always produce identical bytes. Offsets
//! are relative to the start of the payload, ascend in name order and tile it
//! exactly. Payload values are little-endian IEEE-754.
//!
//! Digests are SHA-256, hex encoded:
//!
//! - schema digest: over one line `name \0 dtype \0 d0,d1,.. \n` per tensor
//!   in name order;
//! - content digest: over `vecforge-content-v1\n`, the schema lines, then the
//!   raw payload bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use num_traits::{One, Zero};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{with_slice, DType, Element, ParamSet, Storage, Tensor};

pub const META_KEY: &str = "__meta__";
pub const FILE_EXTENSION: &str = "tnsr";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Params,
    TaskVec,
    Importance,
    Mask,
    Threshold,
    Dataset,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Params => "params",
            Kind::TaskVec => "taskvec",
            Kind::Importance => "importance",
            Kind::Mask => "mask",
            Kind::Threshold => "threshold",
            Kind::Dataset => "dataset",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        Some(match s {
            "params" => Kind::Params,
            "taskvec" => Kind::TaskVec,
            "importance" => Kind::Importance,
            "mask" => Kind::Mask,
            "threshold" => Kind::Threshold,
            "dataset" => Kind::Dataset,
            _ => return None,
        })
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const RESERVED_META: [&str; 4] = ["kind", "task_id", "base_digest", "metric"];

/// Contents of the `__meta__` header entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Meta {
    pub kind: Kind,
    pub task_id: String,
    pub base_digest: String,
    pub metric: Option<String>,
    pub extra: BTreeMap<String, String>,
}

impl Meta {
    pub fn new(kind: Kind) -> Meta {
        Meta {
            kind,
            task_id: String::new(),
            base_digest: String::new(),
            metric: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_task(mut self, task_id: impl Into<String>) -> Meta {
        self.task_id = task_id.into();
        self
    }

    pub fn with_base(mut self, base_digest: impl Into<String>) -> Meta {
        self.base_digest = base_digest.into();
        self
    }

    pub fn with_metric(mut self, metric: impl Into<String>) -> Meta {
        self.metric = Some(metric.into());
        self
    }

    pub fn with_extra(mut self, key: impl Into<String>, value: impl Into<String>) -> Meta {
        self.extra.insert(key.into(), value.into());
        self
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra.get(key).map(String::as_str)
    }

    fn validate(&self) -> Result<()> {
        if self.kind == Kind::TaskVec && (self.task_id.is_empty() || self.base_digest.is_empty()) {
            return Err(Error::InvalidMeta(
                "task vectors require task_id and base_digest".into(),
            ));
        }
        if let Some(key) = self
            .extra
            .keys()
            .find(|k| RESERVED_META.contains(&k.as_str()))
        {
            return Err(Error::InvalidMeta(format!("extra key `{key}` is reserved")));
        }
        Ok(())
    }

    fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert("kind".into(), json!(self.kind.as_str()));
        map.insert("task_id".into(), json!(self.task_id));
        map.insert("base_digest".into(), json!(self.base_digest));
        map.insert(
            "metric".into(),
            self.metric.as_ref().map_or(Value::Null, |m| json!(m)),
        );
        for (k, v) in &self.extra {
            map.insert(k.clone(), json!(v));
        }
        Value::Object(map)
    }

    fn from_json(value: &Value) -> Result<Meta> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::CorruptHeader("`__meta__` is not an object".into()))?;
        let string = |key: &str| -> Result<String> {
            obj.get(key)
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| Error::CorruptHeader(format!("`__meta__.{key}` missing")))
        };
        let kind_str = string("kind")?;
        let kind = Kind::parse(&kind_str)
            .ok_or_else(|| Error::CorruptHeader(format!("unknown kind `{kind_str}`")))?;
        let metric = match obj.get("metric") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(Error::CorruptHeader("`__meta__.metric` malformed".into())),
        };
        let mut extra = BTreeMap::new();
        for (k, v) in obj {
            if RESERVED_META.contains(&k.as_str()) {
                continue;
            }
            let v = v
                .as_str()
                .ok_or_else(|| Error::CorruptHeader(format!("`__meta__.{k}` is not a string")))?;
            extra.insert(k.clone(), v.to_owned());
        }
        Ok(Meta {
            kind,
            task_id: string("task_id")?,
            base_digest: string("base_digest")?,
            metric,
            extra,
        })
    }
}

fn schema_lines(ps: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in ps {
        out.extend_from_slice(name.as_bytes());
        out.push(0);
        out.extend_from_slice(t.dtype().as_str().as_bytes());
        out.push(0);
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        out.extend_from_slice(dims.join(",").as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn schema_digest(ps: &ParamSet) -> String {
    hex::encode(Sha256::digest(schema_lines(ps)))
}

pub fn content_digest(ps: &ParamSet) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"vecforge-content-v1\n");
    hasher.update(schema_lines(ps));
    for (_, t) in ps {
        hasher.update(tensor_bytes(t));
    }
    hex::encode(hasher.finalize())
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * t.dtype().size());
    with_slice!(t, v => v.iter().for_each(|&x| x.write_le(&mut out)));
    out
}

fn is_binary_mask(t: &Tensor) -> bool {
    with_slice!(t, v => v.iter().all(|x| x.is_zero() || x.is_one()))
}

fn validate_values(ps: &ParamSet, kind: Kind) -> Result<()> {
    for (name, t) in ps {
        if !t.all_finite() {
            return Err(Error::NonFiniteValue(name.clone()));
        }
        if kind == Kind::Mask && !is_binary_mask(t) {
            return Err(Error::InvalidMask(name.clone()));
        }
    }
    Ok(())
}

/// Serializes a parameter set and its meta into container bytes.
pub fn save(ps: &ParamSet, meta: &Meta) -> Result<Vec<u8>> {
    meta.validate()?;
    validate_values(ps, meta.kind)?;

    let mut header = Map::new();
    let mut payload = Vec::new();
    for (name, t) in ps {
        let begin = payload.len();
        payload.extend_from_slice(&tensor_bytes(t));
        header.insert(
            name.clone(),
            json!({
                "dtype": t.dtype().as_str(),
                "shape": t.shape(),
                "data_offsets": [begin, payload.len()],
            }),
        );
    }
    header.insert(META_KEY.into(), meta.to_json());
    let header = serde_json::to_vec(&Value::Object(header))
        .map_err(|e| Error::InvalidMeta(e.to_string()))?;

    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

struct EntryHeader {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_entry(name: &str, value: &Value) -> Result<EntryHeader> {
    let corrupt = |what: &str| Error::CorruptHeader(format!("`{name}`: {what}"));
    let obj = value.as_object().ok_or_else(|| corrupt("not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .and_then(DType::parse)
        .ok_or_else(|| corrupt("bad dtype"))?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| corrupt("bad shape"))?
        .iter()
        .map(|d| d.as_u64().filter(|&d| d > 0).map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| corrupt("bad shape"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| corrupt("bad data_offsets"))?;
    let begin = offsets[0]
        .as_u64()
        .ok_or_else(|| corrupt("bad data_offsets"))? as usize;
    let end = offsets[1]
        .as_u64()
        .ok_or_else(|| corrupt("bad data_offsets"))? as usize;
    if end < begin {
        return Err(Error::OffsetOverlap(name.to_owned()));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt("shape overflows"))?;
    if end - begin != count.saturating_mul(dtype.size()) {
        return Err(corrupt("byte length does not match shape and dtype"));
    }
    Ok(EntryHeader {
        name: name.to_owned(),
        dtype,
        shape,
        begin,
        end,
    })
}

fn decode<T: Element>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(T::DTYPE.size())
        .map(T::read_le)
        .collect()
}

/// Parses container bytes, verifying offsets, sizes and finiteness.
pub fn load(bytes: &[u8]) -> Result<(ParamSet, Meta)> {
    if bytes.len() < 8 {
        return Err(Error::CorruptHeader("missing length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(Error::CorruptHeader(format!(
            "header length {header_len} exceeds {available} available bytes"
        )));
    }
    let header_end = 8 + header_len as usize;
    let header: Value = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let header = header
        .as_object()
        .ok_or_else(|| Error::CorruptHeader("header is not an object".into()))?;
    let meta = Meta::from_json(
        header
            .get(META_KEY)
            .ok_or_else(|| Error::CorruptHeader("`__meta__` missing".into()))?,
    )?;

    // serde_json maps iterate in key order, which is the tiling order.
    let mut entries = Vec::with_capacity(header.len());
    for (name, value) in header {
        if name != META_KEY {
            entries.push(parse_entry(name, value)?);
        }
    }
    let mut cursor = 0usize;
    for e in &entries {
        if e.begin != cursor {
            return Err(Error::OffsetOverlap(e.name.clone()));
        }
        cursor = e.end;
    }
    let payload = &bytes[header_end..];
    if payload.len() < cursor {
        return Err(Error::TruncatedPayload {
            expected: cursor,
            found: payload.len(),
        });
    }
    if payload.len() > cursor {
        return Err(Error::CorruptHeader(format!(
            "{} trailing payload bytes",
            payload.len() - cursor
        )));
    }

    let mut ps = ParamSet::new();
    for e in entries {
        let raw = &payload[e.begin..e.end];
        let storage = match e.dtype {
            DType::F32 => Storage::F32(decode(raw)),
            DType::F64 => Storage::F64(decode(raw)),
        };
        let t = Tensor::new(e.shape, storage)?;
        ps.insert(e.name, t)
            .map_err(|err| Error::CorruptHeader(err.to_string()))?;
    }
    validate_values(&ps, meta.kind)?;
    Ok((ps, meta))
}

/// Writes `bytes` to `path` through a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidMeta(format!("no file name in {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_file(path: &Path, ps: &ParamSet, meta: &Meta) -> Result<()> {
    write_atomic(path, &save(ps, meta)?)
}

pub fn load_file(path: &Path) -> Result<(ParamSet, Meta)> {
    load(&fs::read(path)?)
}
