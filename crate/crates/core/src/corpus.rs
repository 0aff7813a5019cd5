//! Per-checkpoint embedding stores.
//!
//! Each fine-tuned checkpoint encodes the same image corpus into its own
//! [`EmbeddingMatrix`]. Matrices are persisted one file per checkpoint in a
//! small little-endian binary format, and can be ingested from a
//! line-delimited JSON interchange format:
//!
//! ```text
//! {"model_id":"epoch10","epoch":10,"dim":4}
//! {"id":"img-0001","vec":[0.1,0.2,0.3,0.4]}
//! ```
//!
//! A [`ModelSet`] groups the matrices of every checkpoint, ordered by
//! training epoch. The position of a matrix in that order is its ensemble
//! index, which drives the epoch weighting used by the ranker.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic bytes at the start of every store file ("ENCB").
pub const STORE_MAGIC: [u8; 4] = *b"ENCB";
/// Current store format version.
pub const STORE_VERSION: u16 = 1;
/// File extension used for binary stores.
pub const STORE_EXTENSION: &str = "encb";

const FLAG_NORMALIZED: u16 = 0b1;
const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate item id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: non-finite value in vector for {id:?}")]
    NonFinite { line: usize, id: String },
    #[error("line {line}: zero-norm vector for {id:?}")]
    ZeroNorm { line: usize, id: String },
    #[error("empty input: missing header line")]
    MissingHeader,
    #[error("bad magic: expected ENCB, found {0:02X?}")]
    BadMagic([u8; 4]),
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated store: {0}")]
    Truncated(&'static str),
    #[error("count mismatch: header declares {declared} records, {trailing} trailing bytes remain")]
    CountMismatch { declared: u64, trailing: usize },
    #[error("invalid utf-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("invalid matrix: {0}")]
    Invalid(String),
    #[error("model set is empty")]
    EmptyModelSet,
    #[error("dimension mismatch: {model_a} has dim {dim_a}, {model_b} has dim {dim_b}")]
    ModelDimMismatch {
        model_a: String,
        dim_a: usize,
        model_b: String,
        dim_b: usize,
    },
    #[error("item sets differ: {model_a} and {model_b} (e.g. {sample:?} is missing from {missing_from})")]
    ItemSetMismatch {
        model_a: String,
        model_b: String,
        sample: String,
        missing_from: String,
    },
    #[error("duplicate epoch {epoch} ({model_a} and {model_b})")]
    DuplicateEpoch {
        epoch: u32,
        model_a: String,
        model_b: String,
    },
    #[error("duplicate model id {0:?}")]
    DuplicateModelId(String),
    #[error("no store files (*.{STORE_EXTENSION}) found in {0}")]
    NoStores(PathBuf),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One checkpoint's embeddings of the image corpus.
///
/// Vectors are stored row-major in a single buffer. The matrix is immutable
/// once built; every constructor validates the invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    model_id: String,
    epoch: u32,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    normalized: bool,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from raw rows without touching the values.
    ///
    /// When `normalized` is set, every row must already have unit norm.
    pub fn new(
        model_id: impl Into<String>,
        epoch: u32,
        dim: usize,
        ids: Vec<String>,
        data: Vec<f32>,
        normalized: bool,
    ) -> Result<Self> {
        let model_id = model_id.into();
        if dim == 0 {
            return Err(CorpusError::Invalid("dim must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(CorpusError::Invalid(format!(
                "{} ids but {} values for dim {dim}",
                ids.len(),
                data.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(CorpusError::Invalid(format!("duplicate item id {id:?}")));
            }
            let v = &data[row * dim..(row + 1) * dim];
            if v.iter().any(|x| !x.is_finite()) {
                return Err(CorpusError::Invalid(format!("non-finite value for {id:?}")));
            }
            if normalized && (l2_norm(v) - 1.0).abs() > NORM_TOLERANCE {
                return Err(CorpusError::Invalid(format!(
                    "vector for {id:?} is flagged normalized but has norm {}",
                    l2_norm(v)
                )));
            }
        }
        Ok(Self {
            model_id,
            epoch,
            dim,
            ids,
            data,
            normalized,
            index,
        })
    }

    /// Builds a matrix and L2-normalizes every row. Zero rows are rejected.
    pub fn from_rows_normalized(
        model_id: impl Into<String>,
        epoch: u32,
        dim: usize,
        rows: Vec<(String, Vec<f32>)>,
    ) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, mut v) in rows {
            if v.len() != dim {
                return Err(CorpusError::Invalid(format!(
                    "{id:?} has {} components, expected {dim}",
                    v.len()
                )));
            }
            if !normalize_in_place(&mut v) {
                return Err(CorpusError::Invalid(format!("zero or non-finite vector for {id:?}")));
            }
            ids.push(id);
            data.extend_from_slice(&v);
        }
        Self::new(model_id, epoch, dim, ids, data, true)
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
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

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Row-major vector buffer (`len() * dim()` values).
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn vector_of(&self, id: &str) -> Option<&[f32]> {
        self.row_of(id).map(|row| self.vector(row))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim))
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Scales `v` to unit length. Returns false for zero or non-finite norms.
pub(crate) fn normalize_in_place(v: &mut [f32]) -> bool {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct TextHeader {
    model_id: String,
    epoch: u32,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TextRecord {
    id: String,
    vec: Vec<f64>,
}

/// Parses the line-delimited text format and L2-normalizes every vector.
///
/// `model_id` and `epoch` override the header values when given. Blank lines
/// are skipped; line numbers in errors are 1-based physical lines.
pub fn ingest_text(path: &Path, model_id: Option<&str>, epoch: Option<u32>) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(io_err(path))?;
    ingest_reader(BufReader::new(file), model_id, epoch).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn ingest_reader<R: BufRead>(
    reader: R,
    model_id: Option<&str>,
    epoch: Option<u32>,
) -> Result<EmbeddingMatrix> {
    let mut header: Option<TextHeader> = None;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut seen = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err(Path::new("<reader>")))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some(h) = header.as_ref() else {
            let h: TextHeader = serde_json::from_str(trimmed).map_err(|e| CorpusError::Syntax {
                line: line_no,
                message: format!("bad header: {e}"),
            })?;
            if h.dim == 0 {
                return Err(CorpusError::Syntax {
                    line: line_no,
                    message: "dim must be positive".into(),
                });
            }
            header = Some(h);
            continue;
        };
        let rec: TextRecord = serde_json::from_str(trimmed).map_err(|e| CorpusError::Syntax {
            line: line_no,
            message: format!("bad record: {e}"),
        })?;
        if rec.vec.len() != h.dim {
            return Err(CorpusError::DimensionMismatch {
                line: line_no,
                expected: h.dim,
                found: rec.vec.len(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: rec.id,
            });
        }
        let mut v: Vec<f32> = rec.vec.iter().map(|&x| x as f32).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CorpusError::NonFinite {
                line: line_no,
                id: rec.id,
            });
        }
        if !normalize_in_place(&mut v) {
            return Err(CorpusError::ZeroNorm {
                line: line_no,
                id: rec.id,
            });
        }
        ids.push(rec.id);
        data.extend_from_slice(&v);
    }

    let h = header.ok_or(CorpusError::MissingHeader)?;
    let model_id = model_id.map_or(h.model_id, str::to_owned);
    EmbeddingMatrix::new(model_id, epoch.unwrap_or(h.epoch), h.dim, ids, data, true)
}

/// Writes the matrix in the line-delimited text format.
pub fn write_text(matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = TextHeader {
        model_id: matrix.model_id.clone(),
        epoch: matrix.epoch,
        dim: matrix.dim,
    };
    let write = |w: &mut BufWriter<File>, s: String| writeln!(w, "{s}").map_err(io_err(path));
    write(&mut w, serde_json::to_string(&header).expect("header serializes"))?;
    for (id, v) in matrix.iter() {
        let rec = TextRecord {
            id: id.to_owned(),
            vec: v.iter().map(|&x| f64::from(x)).collect(),
        };
        write(&mut w, serde_json::to_string(&rec).expect("record serializes"))?;
    }
    w.flush().map_err(io_err(path))
}

/// Encodes a matrix into the binary store layout.
pub fn encode_store(matrix: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let model_id = matrix.model_id.as_bytes();
    let model_len = u16::try_from(model_id.len())
        .map_err(|_| CorpusError::Invalid("model_id longer than 65535 bytes".into()))?;
    let dim = u32::try_from(matrix.dim).map_err(|_| CorpusError::Invalid("dim exceeds u32".into()))?;
    let mut out = Vec::with_capacity(
        4 + 2 + 2 + 4 + 8 + 2 + model_id.len() + 4 + matrix.len() * (2 + 16 + 4 * matrix.dim),
    );
    out.extend_from_slice(&STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    let flags = if matrix.normalized { FLAG_NORMALIZED } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(matrix.len() as u64).to_le_bytes());
    out.extend_from_slice(&model_len.to_le_bytes());
    out.extend_from_slice(model_id);
    out.extend_from_slice(&matrix.epoch.to_le_bytes());
    for (id, v) in matrix.iter() {
        let id_len = u16::try_from(id.len())
            .map_err(|_| CorpusError::Invalid(format!("item id {id:?} longer than 65535 bytes")))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CorpusError::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(CorpusError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn str(&mut self, n: usize, what: &'static str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| CorpusError::InvalidUtf8(what))
    }
}

/// Decodes the binary store layout.
pub fn decode_store(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = c.array("magic")?;
    if magic != STORE_MAGIC {
        return Err(CorpusError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(c.array("version")?);
    if version != STORE_VERSION {
        return Err(CorpusError::UnsupportedVersion(version));
    }
    let flags = u16::from_le_bytes(c.array("flags")?);
    let dim = u32::from_le_bytes(c.array("dim")?) as usize;
    let count = u64::from_le_bytes(c.array("count")?);
    let model_len = u16::from_le_bytes(c.array("model_id length")?) as usize;
    let model_id = c.str(model_len, "model_id")?.to_owned();
    let epoch = u32::from_le_bytes(c.array("epoch")?);

    let remaining = bytes.len() - c.pos;
    // every record needs at least its id length plus the vector
    let min_record = 2 + 4 * dim;
    if (count as u128) * (min_record as u128) > remaining as u128 {
        return Err(CorpusError::Truncated("records"));
    }
    let count_usize = count as usize;
    let mut ids = Vec::with_capacity(count_usize);
    let mut data = Vec::with_capacity(count_usize * dim);
    for _ in 0..count_usize {
        let id_len = u16::from_le_bytes(c.array("id length")?) as usize;
        ids.push(c.str(id_len, "item id")?.to_owned());
        let raw = c.take(4 * dim, "vector")?;
        data.extend(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
    }
    if c.pos != bytes.len() {
        return Err(CorpusError::CountMismatch {
            declared: count,
            trailing: bytes.len() - c.pos,
        });
    }
    EmbeddingMatrix::new(model_id, epoch, dim, ids, data, flags & FLAG_NORMALIZED != 0)
}

pub fn write_store(matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let bytes = encode_store(matrix)?;
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn read_store(path: &Path) -> Result<EmbeddingMatrix> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_store(&bytes)
}

/// The ensemble of checkpoints, ordered by ascending epoch.
#[derive(Debug, Clone)]
pub struct ModelSet {
    models: Vec<EmbeddingMatrix>,
}

impl ModelSet {
    /// Sorts the matrices by epoch and checks that they describe one corpus.
    pub fn new(mut models: Vec<EmbeddingMatrix>) -> Result<Self> {
        if models.is_empty() {
            return Err(CorpusError::EmptyModelSet);
        }
        models.sort_by_key(EmbeddingMatrix::epoch);
        let first = &models[0];
        let mut model_ids = HashSet::new();
        model_ids.insert(first.model_id.clone());
        for pair in models.windows(2) {
            if pair[0].epoch == pair[1].epoch {
                return Err(CorpusError::DuplicateEpoch {
                    epoch: pair[0].epoch,
                    model_a: pair[0].model_id.clone(),
                    model_b: pair[1].model_id.clone(),
                });
            }
        }
        for m in &models[1..] {
            if !model_ids.insert(m.model_id.clone()) {
                return Err(CorpusError::DuplicateModelId(m.model_id.clone()));
            }
            if m.dim != first.dim {
                return Err(CorpusError::ModelDimMismatch {
                    model_a: first.model_id.clone(),
                    dim_a: first.dim,
                    model_b: m.model_id.clone(),
                    dim_b: m.dim,
                });
            }
            let mismatch = |a: &EmbeddingMatrix, b: &EmbeddingMatrix| {
                a.ids.iter().find(|id| b.row_of(id).is_none()).map(|id| {
                    CorpusError::ItemSetMismatch {
                        model_a: first.model_id.clone(),
                        model_b: m.model_id.clone(),
                        sample: id.clone(),
                        missing_from: b.model_id.clone(),
                    }
                })
            };
            if let Some(err) = mismatch(first, m).or_else(|| mismatch(m, first)) {
                return Err(err);
            }
        }
        Ok(Self { models })
    }

    /// Reads every store and builds the set.
    pub fn open(paths: &[PathBuf]) -> Result<Self> {
        let models = paths
            .iter()
            .map(|p| read_store(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(models)
    }

    /// Opens every `*.encb` file directly inside `dir`.
    pub fn open_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == STORE_EXTENSION))
            .collect();
        if paths.is_empty() {
            return Err(CorpusError::NoStores(dir.to_path_buf()));
        }
        paths.sort();
        Self::open(&paths)
    }

    /// Number of checkpoints (z).
    pub fn z(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim
    }

    pub fn corpus_size(&self) -> usize {
        self.models[0].len()
    }

    pub fn models(&self) -> &[EmbeddingMatrix] {
        &self.models
    }

    pub fn model(&self, index: usize) -> &EmbeddingMatrix {
        &self.models[index]
    }

    pub fn index_of(&self, model_id: &str) -> Option<usize> {
        self.models.iter().position(|m| m.model_id == model_id)
    }

    pub fn contains_item(&self, id: &str) -> bool {
        self.models[0].row_of(id).is_some()
    }
}

/// Opens a model set from explicit store paths (see [`ModelSet::open`]).
pub fn open_model_set(paths: &[PathBuf]) -> Result<ModelSet> {
    ModelSet::open(paths)
}
