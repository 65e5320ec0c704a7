//! Activation data model and the ACTV container.
//!
//! Layout of an ACTV file:
//!
//! ```text
//! offset 0    8 bytes   magic "ACTV0001"
//! offset 8    u32 LE    header length n
//! offset 12   n bytes   UTF-8 JSON header
//! offset 12+n           payload: one contiguous little-endian f32 block per
//!                       stream, at the byte offsets listed in the header
//!                       (relative to the start of the payload)
//! ```
//!
//! Activation streams (`K`, `Q`, `V`) are laid out `[L][H][T][d_h]`; weight
//! streams (`W_K`, `W_Q`, `W_V`) are laid out `[L][H][m][d_h]`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"ACTV0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stream {
    K,
    Q,
    V,
    #[serde(rename = "W_K")]
    WK,
    #[serde(rename = "W_Q")]
    WQ,
    #[serde(rename = "W_V")]
    WV,
}

impl Stream {
    pub const ACTIVATIONS: [Stream; 3] = [Stream::K, Stream::Q, Stream::V];

    pub fn is_weight(self) -> bool {
        matches!(self, Stream::WK | Stream::WQ | Stream::WV)
    }

    /// The projection-weight stream that produces this activation stream.
    pub fn weight_stream(self) -> Stream {
        match self {
            Stream::K | Stream::WK => Stream::WK,
            Stream::Q | Stream::WQ => Stream::WQ,
            Stream::V | Stream::WV => Stream::WV,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::K => "K",
            Stream::Q => "Q",
            Stream::V => "V",
            Stream::WK => "W_K",
            Stream::WQ => "W_Q",
            Stream::WV => "W_V",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" | "k" => Ok(Stream::K),
            "Q" | "q" => Ok(Stream::Q),
            "V" | "v" => Ok(Stream::V),
            "W_K" => Ok(Stream::WK),
            "W_Q" => Ok(Stream::WQ),
            "W_V" => Ok(Stream::WV),
            other => Err(Error::InvalidArgument(format!("unknown stream {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Toy,
    Synthetic,
    Extracted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_name: String,
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub token_count: usize,
    pub dtype: Dtype,
    pub source: SourceKind,
    /// Whether captured Q/K states are taken after rotary position embedding.
    pub post_rope: bool,
    /// Written by extractors for grouped-query models; must equal
    /// `heads_per_layer` for the toolkit to accept the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_heads_per_layer: Option<usize>,
}

impl ModelMeta {
    pub fn new(
        model_name: impl Into<String>,
        num_layers: usize,
        heads_per_layer: usize,
        head_dim: usize,
        embed_dim: usize,
        token_count: usize,
        source: SourceKind,
    ) -> Self {
        Self {
            model_name: model_name.into(),
            num_layers,
            heads_per_layer,
            head_dim,
            embed_dim,
            token_count,
            dtype: Dtype::F32,
            source,
            post_rope: false,
            kv_heads_per_layer: None,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("heads_per_layer", self.heads_per_layer),
            ("head_dim", self.head_dim),
            ("token_count", self.token_count),
        ] {
            if v == 0 {
                return Err(format!("{name} must be >= 1"));
            }
        }
        if self.embed_dim < self.head_dim {
            return Err(format!(
                "embed_dim {} smaller than head_dim {}",
                self.embed_dim, self.head_dim
            ));
        }
        if let Some(kv) = self.kv_heads_per_layer {
            if kv != self.heads_per_layer {
                return Err(format!(
                    "grouped KV heads ({kv} per layer) do not match heads_per_layer {}; \
                     expand or regroup heads before analysis",
                    self.heads_per_layer
                ));
            }
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.num_layers)
            .flat_map(move |layer| (0..self.heads_per_layer).map(move |head| HeadId { layer, head }))
    }

    /// Rows per head block: `T` for activation streams, `m` for weights.
    pub fn rows_for(&self, stream: Stream) -> usize {
        if stream.is_weight() {
            self.embed_dim
        } else {
            self.token_count
        }
    }

    pub fn stream_len(&self, stream: Stream) -> usize {
        self.num_heads() * self.rows_for(stream) * self.head_dim
    }

    pub fn head_index(&self, id: HeadId) -> Result<usize> {
        if id.layer >= self.num_layers || id.head >= self.heads_per_layer {
            return Err(Error::UnknownHead(id));
        }
        Ok(id.layer * self.heads_per_layer + id.head)
    }
}

/// A `(layer, head)` pair. Ordered by layer, then head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Token activations for one or more streams. All streams share one token
/// axis, so row `i` of every head block refers to the same input token.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    meta: ModelMeta,
    tensors: BTreeMap<Stream, Vec<f32>>,
}

impl ActivationSet {
    pub fn new(meta: ModelMeta, tensors: BTreeMap<Stream, Vec<f32>>) -> Result<Self> {
        meta.validate().map_err(Error::InvalidArgument)?;
        for (&stream, data) in &tensors {
            if stream.is_weight() {
                return Err(Error::InvalidArgument(format!(
                    "{stream} is a weight stream, not an activation stream"
                )));
            }
            if data.len() != meta.stream_len(stream) {
                return Err(Error::InvalidShape(format!(
                    "stream {stream}: expected {} values, got {}",
                    meta.stream_len(stream),
                    data.len()
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput("activation payload"));
            }
        }
        Ok(Self { meta, tensors })
    }

    /// Assembles a set from per-head `T x d_h` matrices given in
    /// `(layer, head)` order for each stream.
    pub fn from_head_matrices(meta: ModelMeta, streams: Vec<(Stream, Vec<Matrix>)>) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (stream, heads) in streams {
            if heads.len() != meta.num_heads() {
                return Err(Error::InvalidShape(format!(
                    "stream {stream}: expected {} heads, got {}",
                    meta.num_heads(),
                    heads.len()
                )));
            }
            let mut data = Vec::with_capacity(meta.stream_len(stream));
            for h in &heads {
                if h.shape() != (meta.token_count, meta.head_dim) {
                    return Err(Error::InvalidShape(format!(
                        "head block {}x{} does not match T={} d_h={}",
                        h.rows(),
                        h.cols(),
                        meta.token_count,
                        meta.head_dim
                    )));
                }
                data.extend(h.data().iter().map(|&v| v as f32));
            }
            tensors.insert(stream, data);
        }
        Self::new(meta, tensors)
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn streams(&self) -> impl Iterator<Item = Stream> + '_ {
        self.tensors.keys().copied()
    }

    pub fn has_stream(&self, stream: Stream) -> bool {
        self.tensors.contains_key(&stream)
    }

    pub fn raw(&self, stream: Stream) -> Result<&[f32]> {
        self.tensors
            .get(&stream)
            .map(Vec::as_slice)
            .ok_or(Error::MissingStream(stream))
    }

    pub fn head_slice(&self, stream: Stream, id: HeadId) -> Result<&[f32]> {
        let data = self.raw(stream)?;
        let idx = self.meta.head_index(id)?;
        let block = self.meta.token_count * self.meta.head_dim;
        Ok(&data[idx * block..(idx + 1) * block])
    }

    /// One head's activations as a `T x d_h` matrix in f64.
    pub fn head_matrix(&self, stream: Stream, id: HeadId) -> Result<Matrix> {
        let s = self.head_slice(stream, id)?;
        Matrix::new(
            self.meta.token_count,
            self.meta.head_dim,
            s.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Column-wise concatenation of several heads, in the given order.
    pub fn concat_heads(&self, stream: Stream, ids: &[HeadId]) -> Result<Matrix> {
        let blocks = ids
            .iter()
            .map(|&id| self.head_matrix(stream, id))
            .collect::<Result<Vec<_>>>()?;
        Matrix::hcat(&blocks.iter().collect::<Vec<_>>())
    }

    /// Keeps only the listed token rows (in the given order) in every head of
    /// every stream.
    pub fn select_tokens(&self, idx: &[usize]) -> Result<Self> {
        let t = self.meta.token_count;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
            return Err(Error::InvalidArgument(format!(
                "token index {bad} out of range for T={t}"
            )));
        }
        let dh = self.meta.head_dim;
        let mut meta = self.meta.clone();
        meta.token_count = idx.len();
        let tensors = self
            .tensors
            .iter()
            .map(|(&s, data)| {
                let mut out = Vec::with_capacity(self.meta.num_heads() * idx.len() * dh);
                for block in data.chunks_exact(t * dh) {
                    for &i in idx {
                        out.extend_from_slice(&block[i * dh..(i + 1) * dh]);
                    }
                }
                (s, out)
            })
            .collect();
        Self::new(meta, tensors)
    }

    /// Restricts the set to a subset of streams.
    pub fn with_streams(&self, streams: &[Stream]) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for &s in streams {
            tensors.insert(s, self.raw(s)?.to_vec());
        }
        Self::new(self.meta.clone(), tensors)
    }
}

/// Per-head projection weights (`m x d_h` blocks) for one or more of
/// `W_K`/`W_Q`/`W_V`, as dumped by an extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    meta: ModelMeta,
    tensors: BTreeMap<Stream, Vec<f32>>,
}

impl WeightSet {
    pub fn new(meta: ModelMeta, tensors: BTreeMap<Stream, Vec<f32>>) -> Result<Self> {
        meta.validate().map_err(Error::InvalidArgument)?;
        for (&stream, data) in &tensors {
            if !stream.is_weight() {
                return Err(Error::InvalidArgument(format!(
                    "{stream} is not a weight stream"
                )));
            }
            if data.len() != meta.stream_len(stream) {
                return Err(Error::InvalidShape(format!(
                    "stream {stream}: expected {} values, got {}",
                    meta.stream_len(stream),
                    data.len()
                )));
            }
        }
        Ok(Self { meta, tensors })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn has_stream(&self, stream: Stream) -> bool {
        self.tensors.contains_key(&stream.weight_stream())
    }

    /// Projection of one head as an `m x d_h` matrix.
    pub fn head_projection(&self, stream: Stream, id: HeadId) -> Result<Matrix> {
        let ws = stream.weight_stream();
        let data = self.tensors.get(&ws).ok_or(Error::MissingStream(ws))?;
        let idx = self.meta.head_index(id)?;
        let block = self.meta.embed_dim * self.meta.head_dim;
        Matrix::new(
            self.meta.embed_dim,
            self.meta.head_dim,
            data[idx * block..(idx + 1) * block]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StreamEntry {
    stream: Stream,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: ModelMeta,
    streams: Vec<StreamEntry>,
}

fn encode_container(meta: &ModelMeta, tensors: &BTreeMap<Stream, Vec<f32>>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (&stream, data) in tensors {
        let nbytes = (data.len() * 4) as u64;
        entries.push(StreamEntry {
            stream,
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        streams: entries,
    })?;
    let hlen = u32::try_from(header.len())
        .map_err(|_| Error::Format("header longer than u32::MAX bytes".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(&header);
    for data in tensors.values() {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_container(bytes: &[u8]) -> Result<(ModelMeta, BTreeMap<Stream, Vec<f32>>)> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the 12-byte preamble",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + hlen;
    if bytes.len() < payload_start {
        return Err(Error::Format(format!(
            "header declares {hlen} bytes but file ends at offset {}",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| Error::Format(format!("header JSON: {e}")))?;
    header.meta.validate().map_err(Error::Format)?;
    let payload = &bytes[payload_start..];

    let mut tensors = BTreeMap::new();
    let mut declared = 0u64;
    for entry in &header.streams {
        let expected = (header.meta.stream_len(entry.stream) * 4) as u64;
        if entry.nbytes != expected {
            return Err(Error::Format(format!(
                "stream {} declares {} bytes but meta implies {expected}",
                entry.stream, entry.nbytes
            )));
        }
        let end = entry.offset + entry.nbytes;
        if end > payload.len() as u64 {
            return Err(Error::Format(format!(
                "truncated payload: stream {} needs bytes up to file offset {} but file ends at offset {}",
                entry.stream,
                payload_start as u64 + end,
                bytes.len()
            )));
        }
        let raw = &payload[entry.offset as usize..end as usize];
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite value in stream {} at file offset {}",
                entry.stream,
                payload_start as u64 + entry.offset + 4 * pos as u64
            )));
        }
        if tensors.insert(entry.stream, values).is_some() {
            return Err(Error::Format(format!("stream {} listed twice", entry.stream)));
        }
        declared += entry.nbytes;
    }
    if declared != payload.len() as u64 {
        return Err(Error::Format(format!(
            "payload is {} bytes but header declares {declared}",
            payload.len()
        )));
    }
    Ok((header.meta, tensors))
}

pub fn encode_actv(set: &ActivationSet) -> Result<Vec<u8>> {
    encode_container(&set.meta, &set.tensors)
}

pub fn decode_actv(bytes: &[u8]) -> Result<ActivationSet> {
    let (meta, mut tensors) = decode_container(bytes)?;
    tensors.retain(|s, _| !s.is_weight());
    ActivationSet::new(meta, tensors).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_actv(set: &ActivationSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_actv(set)?)?;
    Ok(())
}

pub fn read_actv(path: impl AsRef<Path>) -> Result<ActivationSet> {
    decode_actv(&fs::read(path)?)
}

pub fn write_weights(ws: &WeightSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_container(&ws.meta, &ws.tensors)?)?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<WeightSet> {
    let (meta, mut tensors) = decode_container(&fs::read(path)?)?;
    tensors.retain(|s, _| s.is_weight());
    if tensors.is_empty() {
        return Err(Error::Format("file carries no W_K/W_Q/W_V streams".into()));
    }
    WeightSet::new(meta, tensors).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_set() -> ActivationSet {
        let meta = ModelMeta::new("unit", 1, 2, 4, 8, 3, SourceKind::Synthetic);
        let n = meta.stream_len(Stream::K);
        let k: Vec<f32> = (0..n).map(|i| i as f32 * 0.25 - 1.0).collect();
        let v: Vec<f32> = (0..n).map(|i| (i as f32).sin()).collect();
        ActivationSet::new(meta, BTreeMap::from([(Stream::K, k), (Stream::V, v)])).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let set = small_set();
        let bytes = encode_actv(&set).unwrap();
        let back = decode_actv(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(encode_actv(&back).unwrap(), bytes);
        assert_eq!(&bytes[..8], b"ACTV0001");
    }

    #[test]
    fn zero_heads_rejected() {
        let set = small_set();
        let bytes = encode_actv(&set).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap();
        let patched = header.replace("\"heads_per_layer\":2", "\"heads_per_layer\":0");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[12 + hlen..]);
        let err = decode_actv(&out).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("heads_per_layer")), "{err}");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = encode_actv(&small_set()).unwrap();
        let short = &bytes[..bytes.len() - 4];
        let err = decode_actv(short).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format(_)));
        assert!(msg.contains("truncated"), "{msg}");
        assert!(msg.contains(&format!("file ends at offset {}", short.len())), "{msg}");
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = encode_actv(&small_set()).unwrap();
        let mut wrong = bytes.clone();
        wrong[7] = b'2';
        assert!(matches!(decode_actv(&wrong), Err(Error::Format(_))));
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode_actv(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn grouped_kv_heads_rejected() {
        let mut set = small_set();
        set.meta.kv_heads_per_layer = Some(1);
        let bytes = encode_container(&set.meta, &set.tensors).unwrap();
        let err = decode_actv(&bytes).unwrap_err();
        assert!(err.to_string().contains("grouped KV heads"), "{err}");
    }

    #[test]
    fn select_tokens_keeps_alignment() {
        let set = small_set();
        let sub = set.select_tokens(&[2, 0]).unwrap();
        for id in set.meta().heads() {
            let full = set.head_matrix(Stream::V, id).unwrap();
            let part = sub.head_matrix(Stream::V, id).unwrap();
            assert_eq!(part.row(0), full.row(2));
            assert_eq!(part.row(1), full.row(0));
        }
    }

    #[test]
    fn weight_container_round_trip() {
        let meta = ModelMeta::new("w", 2, 2, 2, 4, 1, SourceKind::Extracted);
        let n = meta.stream_len(Stream::WK);
        let ws = WeightSet::new(
            meta,
            BTreeMap::from([(Stream::WK, (0..n).map(|i| i as f32).collect())]),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.actv");
        write_weights(&ws, &p).unwrap();
        let back = read_weights(&p).unwrap();
        assert_eq!(back, ws);
        let w = back.head_projection(Stream::K, HeadId::new(1, 0)).unwrap();
        assert_eq!(w.shape(), (4, 2));
        assert_eq!(w.get(0, 0), 16.0);
    }
}
