//! Dense vector storage, the `.wcpe` file format, and the similarity kernels
//! shared by every downstream score.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "WCPEMB01"                      8-byte magic, last two bytes are the version
//! dim: u32
//! count: u64
//! count x (id_len: u16, id: [u8; id_len] UTF-8)
//! count x dim x f32               row-major payload
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"WCPEMB01";
const MAGIC_PREFIX: &[u8; 6] = b"WCPEMB";
const HEADER_LEN: u64 = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("format error at byte {offset}: {kind}")]
    Format { offset: u64, kind: FormatErrorKind },
    #[error("invalid matrix: {0}")]
    Invalid(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding for `{0}` not found")]
    MissingId(String),
    #[error("embedding service transport error (retriable): {0}")]
    Transport(String),
    #[error("embedding service returned an invalid response: {0}")]
    Service(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion(String),
    Truncated { needed: u64, available: u64 },
    InvalidUtf8,
    DuplicateId(String),
    NonFinite { row: u64 },
    TrailingBytes(u64),
    ZeroDimension,
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatErrorKind::BadMagic => write!(f, "bad magic"),
            FormatErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version `{v}`"),
            FormatErrorKind::Truncated { needed, available } => {
                write!(f, "truncated payload (needed {needed} bytes, {available} available)")
            }
            FormatErrorKind::InvalidUtf8 => write!(f, "id is not valid UTF-8"),
            FormatErrorKind::DuplicateId(id) => write!(f, "duplicate id `{id}`"),
            FormatErrorKind::NonFinite { row } => write!(f, "non-finite value in row {row}"),
            FormatErrorKind::TrailingBytes(n) => write!(f, "{n} trailing bytes after payload"),
            FormatErrorKind::ZeroDimension => write!(f, "dimension must be at least 1"),
        }
    }
}

/// ID-indexed dense vectors. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::Invalid("dim must be at least 1".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(EmbeddingError::Invalid(format!(
                "{} ids with dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::Invalid(format!("non-finite value in row {}", pos / dim)));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(EmbeddingError::Invalid(format!("duplicate id `{id}`")));
            }
        }
        Ok(EmbeddingMatrix {
            dim,
            ids,
            data,
            index,
        })
    }

    /// Build from `(id, vector)` rows; every vector must have length `dim`.
    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, v) in rows {
            let id = id.into();
            if v.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            ids.push(id);
            data.extend(v);
        }
        Self::new(dim, ids, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn require(&self, id: &str) -> Result<&[f32], EmbeddingError> {
        self.get(id).ok_or_else(|| EmbeddingError::MissingId(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), self.row(i)))
    }

    /// Serialize to the `.wcpe` byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>, EmbeddingError> {
        let id_bytes: usize = self.ids.iter().map(|id| 2 + id.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN as usize + id_bytes + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        let dim = u32::try_from(self.dim)
            .map_err(|_| EmbeddingError::Invalid("dim exceeds u32".into()))?;
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            let len = u16::try_from(id.len()).map_err(|_| {
                EmbeddingError::Invalid(format!(
                    "id longer than 65535 bytes: `{}…`",
                    id.chars().take(32).collect::<String>()
                ))
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parse the `.wcpe` byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if &magic[..6] != MAGIC_PREFIX {
            return Err(format_err(0, FormatErrorKind::BadMagic));
        }
        if magic[6..] != MAGIC[6..] {
            return Err(format_err(
                6,
                FormatErrorKind::UnsupportedVersion(String::from_utf8_lossy(&magic[6..]).into_owned()),
            ));
        }
        let dim = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(format_err(8, FormatErrorKind::ZeroDimension));
        }
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap());

        let mut ids = Vec::new();
        let mut index = HashMap::new();
        for i in 0..count {
            let at = r.pos;
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let raw = r.take(len)?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| format_err(at + 2, FormatErrorKind::InvalidUtf8))?
                .to_string();
            if index.insert(id.clone(), i as usize).is_some() {
                return Err(format_err(at, FormatErrorKind::DuplicateId(id)));
            }
            ids.push(id);
        }

        let row_bytes = dim as u64 * 4;
        let mut data = Vec::with_capacity((count as usize).saturating_mul(dim).min(1 << 28));
        for row in 0..count {
            let at = r.pos;
            let raw = r.take(row_bytes as usize)?;
            for chunk in raw.chunks_exact(4) {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(format_err(at, FormatErrorKind::NonFinite { row }));
                }
                data.push(v);
            }
        }
        if r.pos < bytes.len() as u64 {
            return Err(format_err(
                r.pos,
                FormatErrorKind::TrailingBytes(bytes.len() as u64 - r.pos),
            ));
        }
        Ok(EmbeddingMatrix {
            dim,
            ids,
            data,
            index,
        })
    }
}

fn format_err(offset: u64, kind: FormatErrorKind) -> EmbeddingError {
    EmbeddingError::Format { offset, kind }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbeddingError> {
        let start = self.pos as usize;
        let available = self.bytes.len() - start;
        if available < n {
            return Err(format_err(
                self.pos,
                FormatErrorKind::Truncated {
                    needed: n as u64,
                    available: available as u64,
                },
            ));
        }
        self.pos += n as u64;
        Ok(&self.bytes[start..start + n])
    }
}

pub fn store_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<(), EmbeddingError> {
    let io = |source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = m.to_bytes()?;
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbeddingError> {
    let bytes = fs::read(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    EmbeddingMatrix::from_bytes(&bytes)
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Cosine similarity with 64-bit accumulation, clamped to [-1, 1].
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbeddingError::Domain("cosine of a zero-norm vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Temperature softmax with max-subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>, EmbeddingError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(EmbeddingError::Domain(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(EmbeddingError::Domain("softmax logits must be finite".into()));
    }
    if logits.is_empty() {
        return Ok(Vec::new());
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

// ---------------------------------------------------------------------------
// Service interface

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedItem {
    pub id: String,
    /// Text to encode, or the corpus-relative image path.
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub kind: EmbedKind,
    pub items: Vec<EmbedItem>,
}

/// Response body of the embedding service, also the JSON dump format that
/// `embed-import` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f32>>,
}

impl EmbedResponse {
    /// Rows in id order.
    pub fn into_matrix(self) -> Result<EmbeddingMatrix, EmbeddingError> {
        let dim = self.dim;
        EmbeddingMatrix::from_rows(dim, self.vectors)
    }
}

/// POST a request to an embedding service and collect the vectors.
///
/// Every requested id must come back. When `expected_dim` is given (the
/// dimension of an existing store), a different dimension is terminal.
pub fn fetch_embeddings(
    endpoint: &str,
    request: &EmbedRequest,
    expected_dim: Option<usize>,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(120))
        .build()
        .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
    let resp = client
        .post(endpoint)
        .json(request)
        .send()
        .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
    let status = resp.status();
    if status.is_server_error() {
        return Err(EmbeddingError::Transport(format!("service answered {status}")));
    }
    if !status.is_success() {
        return Err(EmbeddingError::Service(format!("service answered {status}")));
    }
    let body: EmbedResponse = resp
        .json()
        .map_err(|e| EmbeddingError::Service(format!("bad response body: {e}")))?;
    if let Some(expected) = expected_dim {
        if body.dim != expected {
            return Err(EmbeddingError::DimensionMismatch {
                expected,
                actual: body.dim,
            });
        }
    }
    for item in &request.items {
        if !body.vectors.contains_key(&item.id) {
            return Err(EmbeddingError::Service(format!("no vector returned for `{}`", item.id)));
        }
    }
    // Keep request order so identical requests give identical files.
    let mut vectors = body.vectors;
    let dim = body.dim;
    let rows: Vec<(String, Vec<f32>)> = request
        .items
        .iter()
        .filter_map(|item| vectors.remove(&item.id).map(|v| (item.id.clone(), v)))
        .collect();
    EmbeddingMatrix::from_rows(dim, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(2, vec![("a", vec![1.0, 0.0]), ("b", vec![0.5, -2.0]), ("c", vec![0.0, 3.0])])
            .unwrap()
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f32, -1.2, 4.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(EmbeddingError::Domain(_))));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(EmbeddingError::DimensionMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.7, 0.7, 0.7], 0.3).unwrap();
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[std::f64::consts::LN_2, 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
        assert!(softmax(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn softmax_flattens_monotonically_with_temperature() {
        let mut last = 1.0;
        for t in [0.5, 1.0, 2.0, 5.0, 10.0, 100.0, 1e4] {
            let p = softmax(&[5.0, 0.0], t).unwrap();
            assert!(p[0] < last);
            assert!(p[0] > 0.5);
            last = p[0];
        }
        assert!((last - 0.5).abs() < 1e-3);
    }

    #[test]
    fn round_trip_bytes() {
        let m = small();
        let back = EmbeddingMatrix::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("b").unwrap(), &[0.5, -2.0]);
    }

    #[test]
    fn empty_matrix_is_valid() {
        let m = EmbeddingMatrix::new(512, vec![], vec![]).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(bytes.len(), 20);
        let back = EmbeddingMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back.dim(), 512);
        assert!(back.is_empty());
    }

    #[test]
    fn truncated_payload_reports_offset_of_missing_row() {
        let m = small();
        let bytes = m.to_bytes().unwrap();
        // header 20 + ids 3 * (2 + 1) = 29, rows of 8 bytes; drop the third row.
        let cut = &bytes[..29 + 16];
        match EmbeddingMatrix::from_bytes(cut) {
            Err(EmbeddingError::Format { offset, kind: FormatErrorKind::Truncated { .. } }) => {
                assert_eq!(offset, 45)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_version_duplicates_and_trailing() {
        let mut bytes = small().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes),
            Err(EmbeddingError::Format { offset: 0, kind: FormatErrorKind::BadMagic })
        ));

        let mut bytes = small().to_bytes().unwrap();
        bytes[7] = b'2';
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes),
            Err(EmbeddingError::Format { offset: 6, kind: FormatErrorKind::UnsupportedVersion(_) })
        ));

        let mut bytes = small().to_bytes().unwrap();
        // Rename id "b" (at offset 23..26) to "a".
        bytes[25] = b'a';
        match EmbeddingMatrix::from_bytes(&bytes) {
            Err(EmbeddingError::Format { offset, kind: FormatErrorKind::DuplicateId(id) }) => {
                assert_eq!(offset, 23);
                assert_eq!(id, "a");
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut bytes = small().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes),
            Err(EmbeddingError::Format { offset: 53, kind: FormatErrorKind::TrailingBytes(1) })
        ));
    }

    #[test]
    fn rejects_invalid_matrices() {
        assert!(EmbeddingMatrix::new(0, vec![], vec![]).is_err());
        assert!(EmbeddingMatrix::new(2, vec!["a".into()], vec![1.0]).is_err());
        assert!(EmbeddingMatrix::new(1, vec!["a".into(), "a".into()], vec![1.0, 2.0]).is_err());
        assert!(EmbeddingMatrix::new(1, vec!["a".into()], vec![f32::NAN]).is_err());
    }

    #[test]
    fn service_dump_parses_into_sorted_rows() {
        let json = r#"{"dim":2,"vectors":{"z":[1,2],"a":[3,4]}}"#;
        let m = serde_json::from_str::<EmbedResponse>(json).unwrap().into_matrix().unwrap();
        assert_eq!(m.ids(), &["a".to_string(), "z".to_string()]);
        let bad = r#"{"dim":3,"vectors":{"a":[3,4]}}"#;
        assert!(serde_json::from_str::<EmbedResponse>(bad).unwrap().into_matrix().is_err());
    }
}
