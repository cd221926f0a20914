//! Stream payloads, metadata values, and the binary frame codec used to move
//! data units between processes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// A metadata or record value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

pub type Metadata = BTreeMap<String, Value>;

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            Value::Float(f) if f.fract() == 0.0 && f.is_finite() => Some(*f as i64),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => write!(f, "null"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => write!(f, "{s}"),
            other => write!(f, "{}", serde_json::to_string(other).unwrap_or_default()),
        }
    }
}

/// Reference to bytes held in a content-addressed blob store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlobRef {
    /// Lowercase hex SHA-256 of the stored bytes.
    pub digest: String,
    pub len: u64,
}

/// The closed set of payload kinds a stream can carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Payload {
    Scalar(f64),
    Array(Vec<f64>),
    Record(BTreeMap<String, Value>),
    Blob(BlobRef),
}

impl Payload {
    /// Content digest over the canonical binary encoding.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        encode_payload(&mut buf, self);
        hex::encode(Sha256::digest(&buf))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Payload::Scalar(_) => "scalar",
            Payload::Array(_) => "array",
            Payload::Record(_) => "record",
            Payload::Blob(_) => "blob",
        }
    }

    fn numbers(&self) -> &[f64] {
        match self {
            Payload::Scalar(x) => std::slice::from_ref(x),
            Payload::Array(v) => v,
            _ => &[],
        }
    }

    /// Maximum over numeric contents. NaN anywhere makes the result NaN.
    pub fn max(&self) -> Option<f64> {
        let xs = self.numbers();
        if xs.is_empty() {
            return None;
        }
        Some(xs.iter().copied().fold(f64::NEG_INFINITY, |acc, x| {
            if acc.is_nan() || x.is_nan() {
                f64::NAN
            } else {
                acc.max(x)
            }
        }))
    }

    pub fn min(&self) -> Option<f64> {
        let xs = self.numbers();
        if xs.is_empty() {
            return None;
        }
        Some(xs.iter().copied().fold(f64::INFINITY, |acc, x| {
            if acc.is_nan() || x.is_nan() {
                f64::NAN
            } else {
                acc.min(x)
            }
        }))
    }

    pub fn mean(&self) -> Option<f64> {
        let xs = self.numbers();
        if xs.is_empty() {
            return None;
        }
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::Scalar(_) => 1,
            Payload::Array(v) => v.len(),
            Payload::Record(r) => r.len(),
            Payload::Blob(b) => b.len as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One item on a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataUnit {
    pub payload: Payload,
    #[serde(default)]
    pub metadata: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prov_id: Option<String>,
    #[serde(default)]
    pub seq: u64,
}

impl DataUnit {
    pub fn new(payload: Payload) -> Self {
        DataUnit { payload, metadata: Metadata::new(), prov_id: None, seq: 0 }
    }

    pub fn with_metadata(payload: Payload, metadata: Metadata) -> Self {
        DataUnit { payload, metadata, prov_id: None, seq: 0 }
    }

    pub fn scalar(x: f64) -> Self {
        Self::new(Payload::Scalar(x))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown tag {tag} at byte {at}")]
    BadTag { tag: u8, at: usize },
    #[error("invalid utf-8 string at byte {0}")]
    BadUtf8(usize),
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn encode_value(buf: &mut Vec<u8>, v: &Value) {
    match v {
        Value::Null => buf.push(0),
        Value::Bool(b) => {
            buf.push(1);
            buf.push(*b as u8);
        }
        Value::Int(i) => {
            buf.push(2);
            buf.extend_from_slice(&i.to_le_bytes());
        }
        Value::Float(f) => {
            buf.push(3);
            buf.extend_from_slice(&f.to_le_bytes());
        }
        Value::Str(s) => {
            buf.push(4);
            put_str(buf, s);
        }
        Value::List(items) => {
            buf.push(5);
            buf.extend_from_slice(&(items.len() as u32).to_le_bytes());
            for item in items {
                encode_value(buf, item);
            }
        }
        Value::Map(m) => {
            buf.push(6);
            encode_map(buf, m);
        }
    }
}

fn encode_map(buf: &mut Vec<u8>, m: &BTreeMap<String, Value>) {
    buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
    for (k, v) in m {
        put_str(buf, k);
        encode_value(buf, v);
    }
}

fn encode_payload(buf: &mut Vec<u8>, p: &Payload) {
    match p {
        Payload::Scalar(x) => {
            buf.push(0);
            buf.extend_from_slice(&x.to_le_bytes());
        }
        Payload::Array(xs) => {
            buf.push(1);
            buf.extend_from_slice(&(xs.len() as u64).to_le_bytes());
            for x in xs {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::Record(m) => {
            buf.push(2);
            encode_map(buf, m);
        }
        Payload::Blob(b) => {
            buf.push(3);
            put_str(buf, &b.digest);
            buf.extend_from_slice(&b.len.to_le_bytes());
        }
    }
}

/// Canonical binary encoding of a payload alone; its SHA-256 is [`Payload::digest`].
pub fn encode_payload_bytes(p: &Payload) -> Vec<u8> {
    let mut buf = Vec::new();
    encode_payload(&mut buf, p);
    buf
}

pub fn decode_payload_bytes(bytes: &[u8]) -> Result<Payload, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let p = r.payload()?;
    if r.pos != bytes.len() {
        return Err(WireError::Trailing(bytes.len() - r.pos));
    }
    Ok(p)
}

/// Canonical binary encoding of a data unit (without the length prefix).
pub fn encode_unit(unit: &DataUnit) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64);
    encode_payload(&mut buf, &unit.payload);
    encode_map(&mut buf, &unit.metadata);
    match &unit.prov_id {
        Some(id) => {
            buf.push(1);
            put_str(&mut buf, id);
        }
        None => buf.push(0),
    }
    buf.extend_from_slice(&unit.seq.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::BadUtf8(at))
    }

    fn value(&mut self) -> Result<Value, WireError> {
        let at = self.pos;
        Ok(match self.u8()? {
            0 => Value::Null,
            1 => Value::Bool(self.u8()? != 0),
            2 => Value::Int(self.u64()? as i64),
            3 => Value::Float(self.f64()?),
            4 => Value::Str(self.string()?),
            5 => {
                let n = self.u32()? as usize;
                let mut items = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    items.push(self.value()?);
                }
                Value::List(items)
            }
            6 => Value::Map(self.map()?),
            tag => return Err(WireError::BadTag { tag, at }),
        })
    }

    fn map(&mut self) -> Result<BTreeMap<String, Value>, WireError> {
        let n = self.u32()? as usize;
        let mut m = BTreeMap::new();
        for _ in 0..n {
            let k = self.string()?;
            let v = self.value()?;
            m.insert(k, v);
        }
        Ok(m)
    }

    fn payload(&mut self) -> Result<Payload, WireError> {
        let at = self.pos;
        Ok(match self.u8()? {
            0 => Payload::Scalar(self.f64()?),
            1 => {
                let n = self.u64()? as usize;
                if self.buf.len() - self.pos < n.saturating_mul(8) {
                    return Err(WireError::Truncated(self.pos));
                }
                let mut xs = Vec::with_capacity(n);
                for _ in 0..n {
                    xs.push(self.f64()?);
                }
                Payload::Array(xs)
            }
            2 => Payload::Record(self.map()?),
            3 => {
                let digest = self.string()?;
                let len = self.u64()?;
                Payload::Blob(BlobRef { digest, len })
            }
            tag => return Err(WireError::BadTag { tag, at }),
        })
    }
}

pub fn decode_unit(bytes: &[u8]) -> Result<DataUnit, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let payload = r.payload()?;
    let metadata = r.map()?;
    let prov_id = match r.u8()? {
        0 => None,
        _ => Some(r.string()?),
    };
    let seq = r.u64()?;
    if r.pos != bytes.len() {
        return Err(WireError::Trailing(bytes.len() - r.pos));
    }
    Ok(DataUnit { payload, metadata, prov_id, seq })
}

/// Encode a float64 array as little-endian bytes (blob store layout).
pub fn f64s_to_bytes(xs: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}
