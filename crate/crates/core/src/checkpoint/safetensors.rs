//! Reader and writer for the safetensors container.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of UTF-8
//! JSON mapping tensor names to `{dtype, shape, data_offsets}`, then the
//! raw data region. Offsets are relative to the first byte after the
//! header. Parsing validates every offset against the data region and
//! keeps a shared handle to the file bytes; tensor payloads are only
//! decoded when a caller asks for them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use serde_json::Value;

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

/// Element type of a stored tensor.
///
/// Only the three floating formats can be widened to working precision.
/// The remaining standard safetensors dtypes are recognised so that real
/// checkpoints carrying integer or boolean buffers still parse; decoding
/// them is an [`Error::UnsupportedDtype`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dtype {
    F32,
    F16,
    BF16,
    Bool,
    U8,
    I8,
    F8E5M2,
    F8E4M3,
    I16,
    U16,
    I32,
    U32,
    F64,
    I64,
    U64,
}

impl Dtype {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "F32" => Dtype::F32,
            "F16" => Dtype::F16,
            "BF16" => Dtype::BF16,
            "BOOL" => Dtype::Bool,
            "U8" => Dtype::U8,
            "I8" => Dtype::I8,
            "F8_E5M2" => Dtype::F8E5M2,
            "F8_E4M3" => Dtype::F8E4M3,
            "I16" => Dtype::I16,
            "U16" => Dtype::U16,
            "I32" => Dtype::I32,
            "U32" => Dtype::U32,
            "F64" => Dtype::F64,
            "I64" => Dtype::I64,
            "U64" => Dtype::U64,
            other => return Err(Error::UnsupportedDtype(other.to_string())),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::Bool => "BOOL",
            Dtype::U8 => "U8",
            Dtype::I8 => "I8",
            Dtype::F8E5M2 => "F8_E5M2",
            Dtype::F8E4M3 => "F8_E4M3",
            Dtype::I16 => "I16",
            Dtype::U16 => "U16",
            Dtype::I32 => "I32",
            Dtype::U32 => "U32",
            Dtype::F64 => "F64",
            Dtype::I64 => "I64",
            Dtype::U64 => "U64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::Bool | Dtype::U8 | Dtype::I8 | Dtype::F8E5M2 | Dtype::F8E4M3 => 1,
            Dtype::F16 | Dtype::BF16 | Dtype::I16 | Dtype::U16 => 2,
            Dtype::F32 | Dtype::I32 | Dtype::U32 => 4,
            Dtype::F64 | Dtype::I64 | Dtype::U64 => 8,
        }
    }

    /// Whether payloads of this type widen exactly to `f32`.
    pub fn is_float_working(self) -> bool {
        matches!(self, Dtype::F32 | Dtype::F16 | Dtype::BF16)
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Header record for one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// `[begin, end)` relative to the data region.
    pub data_offsets: (usize, usize),
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Borrowed view of one tensor's bytes.
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a> {
    pub name: &'a str,
    pub info: &'a TensorInfo,
    pub bytes: &'a [u8],
}

impl TensorView<'_> {
    pub fn dtype(&self) -> Dtype {
        self.info.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.info.shape
    }

    /// Decode to `f32`. Half-precision payloads widen exactly.
    pub fn to_f32(&self) -> Result<Vec<f32>> {
        decode_f32(self.info.dtype, self.bytes)
    }
}

pub(crate) fn decode_f32(dtype: Dtype, bytes: &[u8]) -> Result<Vec<f32>> {
    match dtype {
        Dtype::F32 => Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()),
        Dtype::F16 => Ok(bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect()),
        Dtype::BF16 => Ok(bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect()),
        other => Err(Error::UnsupportedDtype(other.as_str().to_string())),
    }
}

/// Parsed safetensors file. Immutable; cheap to clone.
#[derive(Debug, Clone)]
pub struct TensorStore {
    bytes: Arc<Vec<u8>>,
    data_start: usize,
    entries: BTreeMap<String, TensorInfo>,
    metadata: Option<BTreeMap<String, String>>,
}

/// Header entries in file order, rejecting duplicate keys.
struct HeaderEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out: Vec<(String, Value)> = Vec::new();
                let mut seen = std::collections::HashSet::new();
                while let Some((key, value)) = map.next_entry::<String, Value>()? {
                    if !seen.insert(key.clone()) {
                        return Err(serde::de::Error::custom(format!("duplicate tensor name `{key}`")));
                    }
                    out.push((key, value));
                }
                Ok(HeaderEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

impl TensorStore {
    /// Read and parse a file from disk.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(bytes)
    }

    /// Parse an in-memory file.
    pub fn parse(bytes: Vec<u8>) -> Result<Self> {
        Self::parse_shared(Arc::new(bytes))
    }

    pub fn parse_shared(bytes: Arc<Vec<u8>>) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(0, format!("truncated header length: file has {} bytes", bytes.len())));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(Error::format(
                8,
                format!("truncated header: declared length {header_len} exceeds the {available} bytes after the length field"),
            ));
        }
        let header_len = header_len as usize;
        let data_start = 8 + header_len;
        let header = std::str::from_utf8(&bytes[8..data_start])
            .map_err(|e| Error::format(8 + e.valid_up_to() as u64, "header is not valid UTF-8"))?;
        let HeaderEntries(raw) = serde_json::from_str(header)
            .map_err(|e| Error::format(8, format!("header JSON: {e}")))?;

        let data_len = bytes.len() - data_start;
        let mut entries = BTreeMap::new();
        let mut metadata = None;
        for (name, value) in raw {
            if name == METADATA_KEY {
                metadata = Some(parse_metadata(value)?);
                continue;
            }
            let info = parse_entry(&name, value, data_start, data_len)?;
            entries.insert(name, info);
        }

        let mut spans: Vec<(&str, usize, usize)> =
            entries.iter().map(|(n, i)| (n.as_str(), i.data_offsets.0, i.data_offsets.1)).collect();
        spans.sort_by_key(|&(_, b, e)| (b, e));
        for pair in spans.windows(2) {
            let (prev, _, prev_end) = pair[0];
            let (cur, cur_begin, cur_end) = pair[1];
            if cur_begin < prev_end && cur_end > cur_begin {
                return Err(Error::format(
                    (data_start + cur_begin) as u64,
                    format!("data of `{cur}` overlaps `{prev}`"),
                ));
            }
        }

        Ok(Self { bytes, data_start, entries, metadata })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.entries.get(name)
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn get(&self, name: &str) -> Option<TensorView<'_>> {
        let (key, info) = self.entries.get_key_value(name)?;
        let (b, e) = info.data_offsets;
        Some(TensorView { name: key, info, bytes: &self.bytes[self.data_start + b..self.data_start + e] })
    }

    pub fn tensors(&self) -> impl Iterator<Item = TensorView<'_>> {
        self.entries.keys().map(|n| self.get(n).expect("present"))
    }

    /// Re-encode the store. Tensors are laid out contiguously in name order.
    pub fn serialize(&self) -> Vec<u8> {
        let mut writer = SafetensorsWriter::new();
        if let Some(meta) = &self.metadata {
            for (k, v) in meta {
                writer.metadata(k, v);
            }
        }
        for view in self.tensors() {
            writer
                .add_raw(view.name, view.dtype(), view.shape().to_vec(), view.bytes.to_vec())
                .expect("store invariants guarantee consistent sizes");
        }
        writer.finish()
    }
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = value else {
        return Err(Error::format(8, "__metadata__ must be an object"));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            _ => Err(Error::format(8, format!("__metadata__ value for `{k}` is not a string"))),
        })
        .collect()
}

fn parse_entry(name: &str, value: Value, data_start: usize, data_len: usize) -> Result<TensorInfo> {
    let bad = |msg: String| Error::format(8, format!("tensor `{name}`: {msg}"));
    let Value::Object(obj) = value else {
        return Err(bad("entry is not an object".into()));
    };
    let dtype = match obj.get("dtype") {
        Some(Value::String(s)) => Dtype::parse(s)?,
        _ => return Err(bad("missing dtype".into())),
    };
    let shape: Vec<usize> = match obj.get("shape") {
        Some(Value::Array(dims)) => dims
            .iter()
            .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()).ok_or_else(|| bad("shape entries must be non-negative integers".into())))
            .collect::<Result<_>>()?,
        _ => return Err(bad("missing shape".into())),
    };
    // Scalars are stored as rank-1 tensors of length one.
    let shape = if shape.is_empty() { vec![1] } else { shape };
    let (begin, end) = match obj.get("data_offsets") {
        Some(Value::Array(o)) if o.len() == 2 => {
            let b = o[0].as_u64().ok_or_else(|| bad("data_offsets must be integers".into()))?;
            let e = o[1].as_u64().ok_or_else(|| bad("data_offsets must be integers".into()))?;
            (b, e)
        }
        _ => return Err(bad("data_offsets must be a pair".into())),
    };
    if end < begin {
        return Err(Error::format(
            data_start as u64 + begin,
            format!("tensor `{name}`: data_offsets end {end} precedes begin {begin}"),
        ));
    }
    if end > data_len as u64 {
        return Err(Error::format(
            data_start as u64 + end,
            format!("tensor `{name}`: data_offsets end {end} exceeds data region of {data_len} bytes"),
        ));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("shape product overflows".into()))?;
    let expected = numel.checked_mul(dtype.size()).ok_or_else(|| bad("byte size overflows".into()))?;
    let (begin, end) = (begin as usize, end as usize);
    if end - begin != expected {
        return Err(Error::format(
            (data_start + begin) as u64,
            format!("tensor `{name}`: {} bytes stored but shape {:?} of {} needs {expected}", end - begin, shape, dtype),
        ));
    }
    Ok(TensorInfo { dtype, shape, data_offsets: (begin, end) })
}

/// Builds a safetensors file from named tensors.
#[derive(Debug, Default)]
pub struct SafetensorsWriter {
    tensors: BTreeMap<String, (Dtype, Vec<usize>, Vec<u8>)>,
    metadata: BTreeMap<String, String>,
}

impl SafetensorsWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn metadata(&mut self, key: &str, value: &str) -> &mut Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn add_raw(&mut self, name: &str, dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) -> Result<&mut Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel * dtype.size() != bytes.len() {
            return Err(Error::Shape(format!(
                "tensor `{name}`: {} bytes do not match shape {shape:?} of {dtype}",
                bytes.len()
            )));
        }
        if name == METADATA_KEY || self.tensors.contains_key(name) {
            return Err(Error::Input(format!("duplicate or reserved tensor name `{name}`")));
        }
        self.tensors.insert(name.to_string(), (dtype, shape, bytes));
        Ok(self)
    }

    pub fn add_f32(&mut self, name: &str, shape: Vec<usize>, values: &[f32]) -> Result<&mut Self> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.add_raw(name, Dtype::F32, shape, bytes)
    }

    pub fn finish(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            let meta = self.metadata.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        let mut offset = 0usize;
        for (name, (dtype, shape, bytes)) in &self.tensors {
            let entry = serde_json::json!({
                "dtype": dtype.as_str(),
                "shape": shape,
                "data_offsets": [offset, offset + bytes.len()],
            });
            header.insert(name.clone(), entry);
            offset += bytes.len();
        }
        let mut header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
        while header.len() % 8 != 0 {
            header.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, bytes) in self.tensors.values() {
            out.extend_from_slice(bytes);
        }
        out
    }
}
