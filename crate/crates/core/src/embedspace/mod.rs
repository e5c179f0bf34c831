//! Embedding storage, similarity functions and exact nearest-neighbour search.

mod bm25;
mod index;
mod remote;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bm25::{bm25_score, tokenize, Bm25Index, Bm25Params};
pub use index::{brute_force_knn, build_index, CosineIndex, NeighborCluster, NeighborSearch};
pub use remote::HttpEmbedder;

use crate::corpus::Example;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector{}", .0.as_deref().map(|id| format!(" for {id:?}")).unwrap_or_default())]
    ZeroVector(Option<String>),
    #[error("non-finite entry in vector {0:?}")]
    NonFinite(String),
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("embedding matrix is empty")]
    EmptyMatrix,
    #[error("no embedding for id {0:?}")]
    UnknownId(String),
    #[error("asked for {requested} neighbours but only {available} other items exist")]
    NotEnoughNeighbors { requested: usize, available: usize },
    #[error("neighbour count must be at least 1")]
    InvalidK,
    #[error("BM25 parameters were not fitted on a corpus")]
    UnfittedParams,
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding endpoint: {0}")]
    Remote(String),
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

/// Which text of an example is embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedOn {
    /// Input and output concatenated.
    #[default]
    Z,
    Input,
}

impl std::str::FromStr for EmbedOn {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "z" => Ok(EmbedOn::Z),
            "input" => Ok(EmbedOn::Input),
            _ => Err(format!("unknown embedding text {s:?} (expected z or input)")),
        }
    }
}

impl EmbedOn {
    pub fn text(self, ex: &Example) -> String {
        match self {
            EmbedOn::Z => format!("{}\n{}", ex.input_text, ex.output_text),
            EmbedOn::Input => ex.input_text.clone(),
        }
    }
}

/// Cosine similarity `a·b / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector(None));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Dense row-major vectors keyed by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
    by_id: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(EmbedError::Manifest("dim must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(EmbedError::DimensionMismatch { expected: ids.len() * dim, got: data.len() });
        }
        let mut by_id = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if by_id.insert(id.clone(), i).is_some() {
                return Err(EmbedError::DuplicateId(id.clone()));
            }
            if data[i * dim..(i + 1) * dim].iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::NonFinite(id.clone()));
            }
        }
        Ok(Self { ids, dim, data, normalized: false, by_id })
    }

    pub fn from_rows<I, S>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (id, v) in rows {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(EmbedError::DimensionMismatch { expected: d, got: v.len() });
            }
            ids.push(id.into());
            data.extend(v);
        }
        match dim {
            Some(d) => Self::new(ids, d, data),
            None => Err(EmbedError::EmptyMatrix),
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
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

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn row_at(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row_at(i))
    }

    pub fn try_row(&self, id: &str) -> Result<&[f32]> {
        self.row(id).ok_or_else(|| EmbedError::UnknownId(id.to_string()))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize(&mut self) -> Result<()> {
        for i in 0..self.ids.len() {
            let row = &mut self.data[i * self.dim..(i + 1) * self.dim];
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(EmbedError::ZeroVector(Some(self.ids[i].clone())));
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        self.normalized = true;
        Ok(())
    }

    /// Rows for `ids`, in that order.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            data.extend_from_slice(self.try_row(id.as_ref())?);
        }
        let mut out = Self::new(ids.iter().map(|s| s.as_ref().to_string()).collect(), self.dim, data)?;
        out.normalized = self.normalized;
        Ok(out)
    }

    pub fn from_jsonl_reader<R: BufRead>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            vector: Vec<f32>,
        }
        let mut rows = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let parse = |message: String| EmbedError::Parse { line: i + 1, message };
            let line = line.map_err(|e| parse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Line = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
            if let Some((_, first)) = rows.first() {
                let first: &Vec<f32> = first;
                if first.len() != rec.vector.len() {
                    return Err(parse(format!("vector has dim {}, expected {}", rec.vector.len(), first.len())));
                }
            }
            rows.push((rec.id, rec.vector));
        }
        Self::from_rows(rows)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| EmbedError::Io { path: path.into(), source })?;
        Self::from_jsonl_reader(BufReader::new(file))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            vector: &'a [f32],
        }
        for (i, id) in self.ids.iter().enumerate() {
            serde_json::to_writer(&mut w, &Line { id, vector: self.row_at(i) })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let io_err = |source| EmbedError::Io { path: path.into(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        self.write_jsonl(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    /// Reads little-endian f32 rows plus a `{dim, ids}` manifest.
    pub fn load_packed(rows_path: &Path, manifest_path: &Path) -> Result<Self> {
        let manifest_text = std::fs::read_to_string(manifest_path)
            .map_err(|source| EmbedError::Io { path: manifest_path.into(), source })?;
        let manifest: PackedManifest =
            serde_json::from_str(&manifest_text).map_err(|e| EmbedError::Manifest(e.to_string()))?;
        let mut bytes = Vec::new();
        File::open(rows_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| EmbedError::Io { path: rows_path.into(), source })?;
        let expected = manifest.ids.len() * manifest.dim * 4;
        if bytes.len() != expected {
            return Err(EmbedError::Manifest(format!(
                "{} holds {} bytes, manifest implies {expected}",
                rows_path.display(),
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(manifest.ids, manifest.dim, data)
    }

    pub fn save_packed(&self, rows_path: &Path, manifest_path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(rows_path, bytes).map_err(|source| EmbedError::Io { path: rows_path.into(), source })?;
        let manifest = PackedManifest { dim: self.dim, ids: self.ids.clone() };
        let text = serde_json::to_string(&manifest).expect("manifest serializes");
        std::fs::write(manifest_path, text).map_err(|source| EmbedError::Io { path: manifest_path.into(), source })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PackedManifest {
    dim: usize,
    ids: Vec<String>,
}
