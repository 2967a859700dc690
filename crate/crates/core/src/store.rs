//! Embedding matrices, corpora, class sets and query sets, plus the on-disk
//! formats they are loaded from.
//!
//! Embedding file layout (all integers and floats little-endian):
//!
//! ```text
//! "XMEB" | version: u32 = 1 | dim: u32 | count: u64 | count * dim f32, row-major
//! ```
//!
//! Metadata is JSONL, one object per matrix row, joined to the matrices by
//! line order. Vectors are stored as the exporter produced them and are
//! renormalized here when the declared space asks for unit norms.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: [u8; 4] = *b"XMEB";
pub const MATRIX_VERSION: u32 = 1;
pub const MATRIX_HEADER_LEN: usize = 20;

/// Rows whose norm is below this cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Rows already within this distance of unit norm are left untouched, so
/// that a normalized matrix survives save/load bit-for-bit.
pub const UNIT_NORM_SLACK: f64 = 1e-6;

/// A named vector space, one per encoder role.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddingSpace {
    pub name: String,
    pub dim: usize,
    #[serde(default = "default_normalized")]
    pub normalized: bool,
}

fn default_normalized() -> bool {
    true
}

impl EmbeddingSpace {
    pub fn new(name: impl Into<String>, dim: usize, normalized: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig(
                "embedding space dim must be >= 1".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            dim,
            normalized,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    space: EmbeddingSpace,
    count: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Wraps row-major `data`. Rows are renormalized if the space is normalized.
    pub fn new(space: EmbeddingSpace, data: Vec<f32>) -> Result<Self> {
        if space.dim == 0 {
            return Err(Error::InvalidConfig(
                "embedding space dim must be >= 1".into(),
            ));
        }
        if !data.len().is_multiple_of(space.dim) {
            return Err(Error::DimMismatch {
                expected: space.dim,
                found: data.len() % space.dim,
            });
        }
        let count = data.len() / space.dim;
        let mut m = Self { space, count, data };
        m.validate_rows()?;
        Ok(m)
    }

    pub fn from_rows<R: AsRef<[f32]>>(space: EmbeddingSpace, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * space.dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != space.dim {
                return Err(Error::DimMismatch {
                    expected: space.dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(space, data)
    }

    fn validate_rows(&mut self) -> Result<()> {
        let dim = self.space.dim;
        let normalize = self.space.normalized;
        for (i, row) in self.data.chunks_exact_mut(dim).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { row: i });
            }
            if normalize {
                normalize_row(row).ok_or(Error::ZeroVector { row: i })?;
            }
        }
        Ok(())
    }

    pub fn space(&self) -> &EmbeddingSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.space.dim;
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.space.dim)
    }
}

/// Scales `row` to unit L2 norm unless it is already within
/// [`UNIT_NORM_SLACK`]. Returns `None` for (near-)zero rows.
pub fn normalize_row(row: &mut [f32]) -> Option<()> {
    let norm = l2_norm(row);
    if norm < MIN_ROW_NORM {
        return None;
    }
    if (norm - 1.0).abs() > UNIT_NORM_SLACK {
        for x in row.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
    Some(())
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixHeader {
    pub dim: u32,
    pub count: u64,
}

impl MatrixHeader {
    /// Total file length implied by the header, or `None` on overflow.
    pub fn file_len(&self) -> Option<u64> {
        (self.dim as u64)
            .checked_mul(self.count)?
            .checked_mul(4)?
            .checked_add(MATRIX_HEADER_LEN as u64)
    }
}

pub fn read_header(bytes: &[u8]) -> Result<MatrixHeader> {
    if bytes.len() < 4 || bytes[..4] != MATRIX_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < MATRIX_HEADER_LEN {
        return Err(Error::TruncatedFile {
            expected: MATRIX_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "XMEB",
            version,
        });
    }
    Ok(MatrixHeader {
        dim: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
        count: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
    })
}

/// Decodes an embedding file image against the space it is expected to hold.
pub fn decode_matrix(bytes: &[u8], expected: &EmbeddingSpace) -> Result<EmbeddingMatrix> {
    let header = read_header(bytes)?;
    if header.dim as usize != expected.dim {
        return Err(Error::DimMismatch {
            expected: expected.dim,
            found: header.dim as usize,
        });
    }
    let actual = bytes.len() as u64;
    match header.file_len() {
        Some(len) if len == actual => {}
        len => {
            return Err(Error::TruncatedFile {
                expected: len.unwrap_or(u64::MAX),
                actual,
            })
        }
    }
    let data = bytes[MATRIX_HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(expected.clone(), data)
}

pub fn write_matrix<W: Write>(matrix: &EmbeddingMatrix, mut w: W) -> std::io::Result<()> {
    w.write_all(&MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(matrix.dim() as u32).to_le_bytes())?;
    w.write_all(&(matrix.count() as u64).to_le_bytes())?;
    for x in matrix.as_slice() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()
}

pub fn encode_matrix(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + matrix.as_slice().len() * 4);
    write_matrix(matrix, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn load_matrix(path: &Path, expected: &EmbeddingSpace) -> Result<EmbeddingMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, expected)
}

pub fn save_matrix(matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_matrix(matrix, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// One line of a metadata JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataLine {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
}

/// Parses metadata JSONL. With `require_caption`, every line must carry a
/// non-empty caption (corpus files); query files omit it.
pub fn parse_metadata<R: BufRead>(reader: R, require_caption: bool) -> Result<Vec<MetadataLine>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::MalformedMetadata {
            line: lineno,
            reason: e.to_string(),
        })?;
        let rec: MetadataLine =
            serde_json::from_str(&line).map_err(|e| Error::MalformedMetadata {
                line: lineno,
                reason: e.to_string(),
            })?;
        if require_caption && rec.caption.as_deref().is_none_or(str::is_empty) {
            return Err(Error::MalformedMetadata {
                line: lineno,
                reason: "missing or empty caption".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

fn read_metadata_file(path: &Path, require_caption: bool) -> Result<Vec<MetadataLine>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_metadata(BufReader::new(file), require_caption)
}

pub fn write_metadata<W: Write>(lines: &[MetadataLine], mut w: W) -> Result<()> {
    for line in lines {
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n").map_err(|e| Error::io("<metadata>", e))?;
    }
    w.flush().map_err(|e| Error::io("<metadata>", e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub id: u64,
    pub caption: String,
    pub row_index: usize,
}

/// External image-text pairs with one matrix per embedding space.
#[derive(Debug, Clone)]
pub struct Corpus {
    records: Vec<CorpusRecord>,
    matrices: BTreeMap<String, EmbeddingMatrix>,
}

impl Corpus {
    /// Joins `(id, caption)` pairs to matrix rows by position.
    pub fn new(
        entries: Vec<(u64, String)>,
        matrices: impl IntoIterator<Item = EmbeddingMatrix>,
    ) -> Result<Self> {
        let matrices = collect_matrices(matrices)?;
        check_counts(&matrices, entries.len(), "metadata")?;
        let mut seen = HashSet::with_capacity(entries.len());
        let mut records = Vec::with_capacity(entries.len());
        for (row_index, (id, caption)) in entries.into_iter().enumerate() {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
            if caption.is_empty() {
                return Err(Error::MalformedMetadata {
                    line: row_index + 1,
                    reason: "missing or empty caption".into(),
                });
            }
            records.push(CorpusRecord {
                id,
                caption,
                row_index,
            });
        }
        Ok(Self { records, matrices })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn record(&self, row: usize) -> &CorpusRecord {
        &self.records[row]
    }

    pub fn matrix(&self, space: &str) -> Result<&EmbeddingMatrix> {
        self.matrices
            .get(space)
            .ok_or_else(|| Error::MissingSpace(space.to_owned()))
    }

    pub fn spaces(&self) -> impl Iterator<Item = &str> {
        self.matrices.keys().map(String::as_str)
    }
}

fn collect_matrices(
    matrices: impl IntoIterator<Item = EmbeddingMatrix>,
) -> Result<BTreeMap<String, EmbeddingMatrix>> {
    let mut out = BTreeMap::new();
    for m in matrices {
        let name = m.space().name.clone();
        if out.insert(name.clone(), m).is_some() {
            return Err(Error::InvalidConfig(format!(
                "space {name:?} attached twice"
            )));
        }
    }
    Ok(out)
}

fn check_counts(
    matrices: &BTreeMap<String, EmbeddingMatrix>,
    expected: usize,
    what: &str,
) -> Result<()> {
    // All matrices must agree with each other first, then with the metadata.
    let mut iter = matrices.values();
    if let Some(first) = iter.next() {
        for m in iter {
            if m.count() != first.count() {
                return Err(Error::CountMismatch {
                    what: format!("matrix {:?}", m.space().name),
                    expected: first.count(),
                    found: m.count(),
                });
            }
        }
        if first.count() != expected {
            return Err(Error::CountMismatch {
                what: what.to_owned(),
                expected: first.count(),
                found: expected,
            });
        }
    }
    Ok(())
}

fn load_matrices(matrix_paths: &[(EmbeddingSpace, PathBuf)]) -> Result<Vec<EmbeddingMatrix>> {
    matrix_paths
        .iter()
        .map(|(space, path)| load_matrix(path, space))
        .collect()
}

pub fn load_corpus(
    matrix_paths: &[(EmbeddingSpace, PathBuf)],
    metadata_path: &Path,
) -> Result<Corpus> {
    let matrices = load_matrices(matrix_paths)?;
    let lines = read_metadata_file(metadata_path, true)?;
    let entries = lines
        .into_iter()
        .map(|l| (l.id, l.caption.unwrap_or_default()))
        .collect();
    Corpus::new(entries, matrices)
}

/// Query images embedded in each space the pipeline needs, plus optional labels.
#[derive(Debug, Clone)]
pub struct QuerySet {
    ids: Vec<u64>,
    labels: Option<Vec<u32>>,
    matrices: BTreeMap<String, EmbeddingMatrix>,
}

impl QuerySet {
    pub fn new(
        ids: Vec<u64>,
        labels: Option<Vec<u32>>,
        matrices: impl IntoIterator<Item = EmbeddingMatrix>,
    ) -> Result<Self> {
        let matrices = collect_matrices(matrices)?;
        check_counts(&matrices, ids.len(), "query metadata")?;
        if let Some(labels) = &labels {
            if labels.len() != ids.len() {
                return Err(Error::CountMismatch {
                    what: "labels".into(),
                    expected: ids.len(),
                    found: labels.len(),
                });
            }
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::DuplicateId(*dup));
        }
        Ok(Self {
            ids,
            labels,
            matrices,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn matrix(&self, space: &str) -> Result<&EmbeddingMatrix> {
        self.matrices
            .get(space)
            .ok_or_else(|| Error::MissingSpace(space.to_owned()))
    }

    pub fn embedding(&self, space: &str, i: usize) -> Result<&[f32]> {
        Ok(self.matrix(space)?.row(i))
    }
}

pub fn load_queries(
    matrix_paths: &[(EmbeddingSpace, PathBuf)],
    metadata_path: &Path,
) -> Result<QuerySet> {
    let matrices = load_matrices(matrix_paths)?;
    let lines = read_metadata_file(metadata_path, false)?;
    let labelled = lines.iter().filter(|l| l.label.is_some()).count();
    let labels = if labelled == 0 {
        None
    } else if labelled == lines.len() {
        Some(lines.iter().map(|l| l.label.unwrap()).collect())
    } else {
        let line = lines.iter().position(|l| l.label.is_none()).unwrap() + 1;
        return Err(Error::MalformedMetadata {
            line,
            reason: "label present on some lines but not this one".into(),
        });
    };
    QuerySet::new(lines.into_iter().map(|l| l.id).collect(), labels, matrices)
}

/// Class labels with per-space prompt embeddings.
#[derive(Debug, Clone)]
pub struct ClassSet {
    labels: Vec<String>,
    embeddings: BTreeMap<String, EmbeddingMatrix>,
}

impl ClassSet {
    pub fn new(
        labels: Vec<String>,
        embeddings: impl IntoIterator<Item = EmbeddingMatrix>,
    ) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::TooFewClasses(labels.len()));
        }
        let embeddings = collect_matrices(embeddings)?;
        for m in embeddings.values() {
            if m.count() != labels.len() {
                return Err(Error::CountMismatch {
                    what: format!("class embeddings {:?}", m.space().name),
                    expected: labels.len(),
                    found: m.count(),
                });
            }
        }
        Ok(Self { labels, embeddings })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn embeddings(&self, space: &str) -> Result<&EmbeddingMatrix> {
        self.embeddings
            .get(space)
            .ok_or_else(|| Error::MissingSpace(space.to_owned()))
    }

    /// Loads a class-set JSON file, resolving embedding paths relative to it.
    /// Every referenced space must appear in `spaces`.
    pub fn load(path: &Path, spaces: &[EmbeddingSpace]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = ClassSetFile::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let mut matrices = Vec::with_capacity(file.embeddings.len());
        for (name, rel) in &file.embeddings {
            let space = spaces
                .iter()
                .find(|s| &s.name == name)
                .ok_or_else(|| Error::MissingSpace(name.clone()))?;
            matrices.push(load_matrix(&base.join(rel), space)?);
        }
        Self::new(file.labels, matrices)
    }
}

/// The JSON document describing a class set; embedding paths are unresolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSetFile {
    pub labels: Vec<String>,
    pub embeddings: BTreeMap<String, String>,
}

impl ClassSetFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: Self =
            serde_json::from_str(text).map_err(|e| Error::MalformedClassSet(e.to_string()))?;
        if file.labels.len() < 2 {
            return Err(Error::TooFewClasses(file.labels.len()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = file.labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::MalformedClassSet(format!("duplicate label {dup:?}")));
        }
        Ok(file)
    }
}
