//! Gallery records, ingestion and persistence.
//!
//! A gallery directory holds three files:
//!
//! - `manifest.jsonl`: one JSON object per record (`id`, `caption`, optional
//!   `aes`/`rel` scores, optional assigned `rel_level`/`aes_level`).
//! - `embeddings.bin`: the binary embedding matrix, rows in manifest order.
//! - `schemes.json`: the fitted level schemes, present only once levels are assigned.
//!
//! The embedding file layout is `QCQC` magic, `u32` version (1), `u64` row
//! count, `u32` dimension, then `n * d` little-endian `f32` values, row-major.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::num::{dot_f64, norm_f64, Scalar};
use crate::LevelScheme;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"QCQC";
pub const EMBEDDING_VERSION: u32 = 1;

/// Largest norm deviation that is silently corrected on ingestion.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;
/// Norm deviation every stored embedding satisfies.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
/// Below this norm a row is treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const SCHEMES_FILE: &str = "schemes.json";

#[derive(Debug, Error)]
pub enum GalleryError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?} has a zero embedding")]
    ZeroVector { id: String },
    #[error("record {id:?} embedding norm {norm} is outside the renormalization tolerance")]
    NormOutOfTolerance { id: String, norm: f64 },
    #[error("manifest has {manifest} records but the embedding file has {embeddings} rows")]
    RowCountMismatch { manifest: usize, embeddings: usize },
    #[error("record {id:?} has invalid {field} score {value}")]
    InvalidScore {
        id: String,
        field: &'static str,
        value: f64,
    },
    #[error("embedding file format error: {0}")]
    Format(String),
    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u32),
    #[error("gallery is empty")]
    Empty,
    #[error("invalid schemes file: {0}")]
    Schemes(String),
}

impl GalleryError {
    fn io(path: &Path, source: io::Error) -> Self {
        GalleryError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One image: caption, unit-norm embedding and (optional) quality scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryRecord {
    pub id: String,
    pub caption: String,
    pub embedding: Vec<f32>,
    pub aes_score: Option<f64>,
    pub rel_score: Option<f64>,
    pub rel_level: Option<usize>,
    pub aes_level: Option<usize>,
}

impl GalleryRecord {
    pub fn new(id: impl Into<String>, caption: impl Into<String>, embedding: Vec<f32>) -> Self {
        GalleryRecord {
            id: id.into(),
            caption: caption.into(),
            embedding,
            aes_score: None,
            rel_score: None,
            rel_level: None,
            aes_level: None,
        }
    }

    pub fn with_scores(mut self, aes: f64, rel: f64) -> Self {
        self.aes_score = Some(aes);
        self.rel_score = Some(rel);
        self
    }

    pub fn is_scored(&self) -> bool {
        self.aes_score.is_some() && self.rel_score.is_some()
    }

    /// Both level indices, when assigned.
    pub fn levels(&self) -> Option<(usize, usize)> {
        Some((self.rel_level?, self.aes_level?))
    }
}

/// An immutable, validated collection of records sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    records: Vec<GalleryRecord>,
    dim: usize,
    rel_scheme: Option<LevelScheme>,
    aes_scheme: Option<LevelScheme>,
}

impl Gallery {
    /// Validates records without touching embedding values: every embedding
    /// must already be unit norm within [`UNIT_NORM_TOLERANCE`].
    pub fn new(records: Vec<GalleryRecord>) -> Result<Self, GalleryError> {
        let first = records.first().ok_or(GalleryError::Empty)?;
        let dim = first.embedding.len();
        let mut seen = HashSet::with_capacity(records.len());
        for record in &records {
            if record.embedding.len() != dim {
                return Err(GalleryError::DimensionMismatch {
                    expected: dim,
                    found: record.embedding.len(),
                });
            }
            if !seen.insert(record.id.as_str()) {
                return Err(GalleryError::DuplicateId(record.id.clone()));
            }
            validate_scores(record)?;
            let norm = norm_f64(&record.embedding);
            if norm < ZERO_NORM {
                return Err(GalleryError::ZeroVector {
                    id: record.id.clone(),
                });
            }
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(GalleryError::NormOutOfTolerance {
                    id: record.id.clone(),
                    norm,
                });
            }
        }
        Ok(Gallery {
            records,
            dim,
            rel_scheme: None,
            aes_scheme: None,
        })
    }

    /// Like [`Gallery::new`] but first renormalizes near-unit embeddings.
    pub fn from_raw(mut records: Vec<GalleryRecord>) -> Result<Self, GalleryError> {
        for record in &mut records {
            normalize_embedding(&record.id, &mut record.embedding)?;
        }
        Gallery::new(records)
    }

    pub fn records(&self) -> &[GalleryRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &GalleryRecord {
        &self.records[index]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rel_scheme(&self) -> Option<&LevelScheme> {
        self.rel_scheme.as_ref()
    }

    pub fn aes_scheme(&self) -> Option<&LevelScheme> {
        self.aes_scheme.as_ref()
    }

    /// Both schemes, when levels have been assigned.
    pub fn schemes(&self) -> Option<(&LevelScheme, &LevelScheme)> {
        Some((self.rel_scheme.as_ref()?, self.aes_scheme.as_ref()?))
    }

    pub fn has_levels(&self) -> bool {
        self.schemes().is_some()
    }

    pub fn embeddings(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.records.iter().map(|r| r.embedding.as_slice())
    }

    pub(crate) fn with_levels(
        mut self,
        levels: Vec<(Option<usize>, Option<usize>)>,
        rel_scheme: LevelScheme,
        aes_scheme: LevelScheme,
    ) -> Self {
        for (record, (rel, aes)) in self.records.iter_mut().zip(levels) {
            record.rel_level = rel;
            record.aes_level = aes;
        }
        self.rel_scheme = Some(rel_scheme);
        self.aes_scheme = Some(aes_scheme);
        self
    }

    /// SHA-256 over every field that influences retrieval or evaluation.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.dim as u64).to_le_bytes());
        for record in &self.records {
            hasher.update(record.id.as_bytes());
            hasher.update([0u8]);
            hasher.update(record.caption.as_bytes());
            hasher.update([0u8]);
            for v in &record.embedding {
                hasher.update(v.to_le_bytes());
            }
            for score in [record.aes_score, record.rel_score] {
                hasher.update(score.unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn validate_scores(record: &GalleryRecord) -> Result<(), GalleryError> {
    if let Some(aes) = record.aes_score {
        if !aes.is_finite() {
            return Err(GalleryError::InvalidScore {
                id: record.id.clone(),
                field: "aes",
                value: aes,
            });
        }
    }
    if let Some(rel) = record.rel_score {
        if !(-1.0..=1.0).contains(&rel) {
            return Err(GalleryError::InvalidScore {
                id: record.id.clone(),
                field: "rel",
                value: rel,
            });
        }
    }
    Ok(())
}

/// Renormalizes `embedding` in place when its norm is within
/// [`RENORMALIZE_TOLERANCE`] of one; rejects anything further away.
pub fn normalize_embedding(id: &str, embedding: &mut [f32]) -> Result<(), GalleryError> {
    let norm = norm_f64(embedding);
    if norm < ZERO_NORM {
        return Err(GalleryError::ZeroVector { id: id.to_string() });
    }
    let deviation = (norm - 1.0).abs();
    if deviation > RENORMALIZE_TOLERANCE {
        return Err(GalleryError::NormOutOfTolerance {
            id: id.to_string(),
            norm,
        });
    }
    if deviation > UNIT_NORM_TOLERANCE {
        for v in embedding.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
    Ok(())
}

/// Cosine similarity of two unit vectors: their dot product, clamped to [-1, 1].
pub fn compute_relevance<T: Scalar>(image: &[T], text: &[T]) -> Result<f64, GalleryError> {
    if image.len() != text.len() {
        return Err(GalleryError::DimensionMismatch {
            expected: image.len(),
            found: text.len(),
        });
    }
    Ok(dot_f64(image, text).clamp(-1.0, 1.0))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aes: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rel_level: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aes_level: Option<usize>,
}

/// Contents of the schemes file: one scheme per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemePair {
    pub rel: LevelScheme,
    pub aes: LevelScheme,
}

/// Row-major embedding matrix as stored in the binary format.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn write_embeddings<W: Write>(
    mut writer: W,
    dim: usize,
    rows: &[&[f32]],
) -> io::Result<()> {
    writer.write_all(EMBEDDING_MAGIC)?;
    writer.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    writer.write_all(&(rows.len() as u64).to_le_bytes())?;
    writer.write_all(&(dim as u32).to_le_bytes())?;
    for row in rows {
        assert_eq!(row.len(), dim, "embedding row length must equal dim");
        for v in row.iter() {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()
}

pub fn read_embeddings<R: Read>(mut reader: R) -> Result<EmbeddingMatrix, GalleryError> {
    let truncated = |what: &str| GalleryError::Format(format!("truncated header: missing {what}"));
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| truncated("magic"))?;
    if &magic != EMBEDDING_MAGIC {
        return Err(GalleryError::Format(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    reader
        .read_exact(&mut u32buf)
        .map_err(|_| truncated("version"))?;
    let version = u32::from_le_bytes(u32buf);
    if version != EMBEDDING_VERSION {
        return Err(GalleryError::UnsupportedVersion(version));
    }
    reader
        .read_exact(&mut u64buf)
        .map_err(|_| truncated("row count"))?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    reader
        .read_exact(&mut u32buf)
        .map_err(|_| truncated("dimension"))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    if dim == 0 {
        return Err(GalleryError::Format("dimension is zero".into()));
    }
    let total = rows
        .checked_mul(dim)
        .ok_or_else(|| GalleryError::Format("n * d overflows".into()))?;
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| GalleryError::Format(e.to_string()))?;
    if bytes.len() != total * 4 {
        return Err(GalleryError::Format(format!(
            "expected {} payload bytes for {rows}x{dim}, found {}",
            total * 4,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(EmbeddingMatrix { rows, dim, values })
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestLine>, GalleryError> {
    let file = File::open(path).map_err(|e| GalleryError::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GalleryError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine =
            serde_json::from_str(&line).map_err(|e| GalleryError::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        lines.push(parsed);
    }
    Ok(lines)
}

fn read_embedding_file(path: &Path) -> Result<EmbeddingMatrix, GalleryError> {
    let file = File::open(path).map_err(|e| GalleryError::io(path, e))?;
    read_embeddings(BufReader::new(file))
}

fn assemble(
    manifest: Vec<ManifestLine>,
    matrix: &EmbeddingMatrix,
) -> Result<Vec<GalleryRecord>, GalleryError> {
    if manifest.len() != matrix.rows {
        return Err(GalleryError::RowCountMismatch {
            manifest: manifest.len(),
            embeddings: matrix.rows,
        });
    }
    Ok(manifest
        .into_iter()
        .enumerate()
        .map(|(i, line)| GalleryRecord {
            id: line.id,
            caption: line.caption,
            embedding: matrix.row(i).to_vec(),
            aes_score: line.aes,
            rel_score: line.rel,
            rel_level: line.rel_level,
            aes_level: line.aes_level,
        })
        .collect())
}

/// Reads a JSONL manifest and its embedding file into a validated gallery.
/// Level annotations in the manifest are ignored; levels come from
/// [`crate::quantile::assign_levels`].
pub fn ingest(manifest_path: &Path, embeddings_path: &Path) -> Result<Gallery, GalleryError> {
    let manifest = read_manifest(manifest_path)?;
    let matrix = read_embedding_file(embeddings_path)?;
    let mut records = assemble(manifest, &matrix)?;
    for record in &mut records {
        record.rel_level = None;
        record.aes_level = None;
    }
    Gallery::from_raw(records)
}

/// Writes the gallery directory; `load(save(g)) == g` bit for bit.
pub fn save(gallery: &Gallery, dir: &Path) -> Result<(), GalleryError> {
    std::fs::create_dir_all(dir).map_err(|e| GalleryError::io(dir, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let file = File::create(&manifest_path).map_err(|e| GalleryError::io(&manifest_path, e))?;
    let mut writer = BufWriter::new(file);
    for record in gallery.records() {
        let line = ManifestLine {
            id: record.id.clone(),
            caption: record.caption.clone(),
            aes: record.aes_score,
            rel: record.rel_score,
            rel_level: record.rel_level,
            aes_level: record.aes_level,
        };
        serde_json::to_writer(&mut writer, &line)
            .map_err(|e| GalleryError::io(&manifest_path, e.into()))?;
        writer
            .write_all(b"\n")
            .map_err(|e| GalleryError::io(&manifest_path, e))?;
    }
    writer
        .flush()
        .map_err(|e| GalleryError::io(&manifest_path, e))?;

    let emb_path = dir.join(EMBEDDINGS_FILE);
    let file = File::create(&emb_path).map_err(|e| GalleryError::io(&emb_path, e))?;
    let rows: Vec<&[f32]> = gallery.embeddings().collect();
    write_embeddings(BufWriter::new(file), gallery.dim(), &rows)
        .map_err(|e| GalleryError::io(&emb_path, e))?;

    let schemes_path = dir.join(SCHEMES_FILE);
    match gallery.schemes() {
        Some((rel, aes)) => {
            let body = serde_json::to_vec_pretty(&SchemePair {
                rel: rel.clone(),
                aes: aes.clone(),
            })
            .map_err(|e| GalleryError::io(&schemes_path, e.into()))?;
            std::fs::write(&schemes_path, body).map_err(|e| GalleryError::io(&schemes_path, e))?;
        }
        None => {
            if schemes_path.exists() {
                std::fs::remove_file(&schemes_path)
                    .map_err(|e| GalleryError::io(&schemes_path, e))?;
            }
        }
    }
    Ok(())
}

/// Loads a directory written by [`save`]. Stored embeddings are validated but
/// never rewritten.
pub fn load(dir: &Path) -> Result<Gallery, GalleryError> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let matrix = read_embedding_file(&dir.join(EMBEDDINGS_FILE))?;
    let records = assemble(manifest, &matrix)?;
    let mut gallery = Gallery::new(records)?;
    if gallery.dim != matrix.dim {
        return Err(GalleryError::DimensionMismatch {
            expected: matrix.dim,
            found: gallery.dim,
        });
    }

    let schemes_path = dir.join(SCHEMES_FILE);
    if schemes_path.exists() {
        let body =
            std::fs::read(&schemes_path).map_err(|e| GalleryError::io(&schemes_path, e))?;
        let schemes: SchemePair =
            serde_json::from_slice(&body).map_err(|e| GalleryError::Schemes(e.to_string()))?;
        for record in &gallery.records {
            let bad = |level: Option<usize>, scheme: &LevelScheme| {
                level.is_some_and(|l| l >= scheme.len())
            };
            if bad(record.rel_level, &schemes.rel) || bad(record.aes_level, &schemes.aes) {
                return Err(GalleryError::Schemes(format!(
                    "record {:?} has a level outside its scheme",
                    record.id
                )));
            }
        }
        gallery.rel_scheme = Some(schemes.rel);
        gallery.aes_scheme = Some(schemes.aes);
    }
    Ok(gallery)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, manifest: &str, dim: usize, rows: &[Vec<f32>]) {
        std::fs::write(dir.join("m.jsonl"), manifest).unwrap();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let file = File::create(dir.join("e.bin")).unwrap();
        write_embeddings(file, dim, &refs).unwrap();
    }

    fn ingest_fixture(dir: &Path) -> Result<Gallery, GalleryError> {
        ingest(&dir.join("m.jsonl"), &dir.join("e.bin"))
    }

    #[test]
    fn ingests_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = concat!(
            r#"{"id":"a","caption":"a dog","aes":5.0,"rel":0.3}"#,
            "\n",
            r#"{"id":"b","caption":"a cat","aes":4.0,"rel":0.2}"#,
            "\n",
            r#"{"id":"c","caption":"a cow"}"#,
            "\n"
        );
        let rows = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.6, 0.8],
        ];
        write_fixture(dir.path(), manifest, 4, &rows);
        let g = ingest_fixture(dir.path()).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.dim(), 4);
        assert_eq!(g.record(2).aes_score, None);
        assert!(!g.record(2).is_scored());
    }

    #[test]
    fn rejects_far_from_unit_norm() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            r#"{"id":"a","caption":"x"}"#,
            4,
            &[vec![2.0, 0.0, 0.0, 0.0]],
        );
        assert!(matches!(
            ingest_fixture(dir.path()),
            Err(GalleryError::NormOutOfTolerance { .. })
        ));
    }

    #[test]
    fn renormalizes_near_unit_vectors() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            r#"{"id":"a","caption":"x"}"#,
            2,
            &[vec![1.0005, 0.0]],
        );
        let g = ingest_fixture(dir.path()).unwrap();
        assert!((norm_f64(&g.record(0).embedding) - 1.0).abs() <= UNIT_NORM_TOLERANCE);
    }

    #[test]
    fn rejects_zero_vector() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), r#"{"id":"z","caption":"x"}"#, 2, &[vec![0.0, 0.0]]);
        assert!(matches!(
            ingest_fixture(dir.path()),
            Err(GalleryError::ZeroVector { .. })
        ));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = "{\"id\":\"a\",\"caption\":\"x\"}\n{\"id\":\"a\",\"caption\":\"y\"}\n";
        write_fixture(dir.path(), manifest, 2, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            ingest_fixture(dir.path()),
            Err(GalleryError::DuplicateId(id)) if id == "a"
        ));
    }

    #[test]
    fn reports_malformed_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = "{\"id\":\"a\",\"caption\":\"x\"}\n{\"id\":\"b\"\n";
        write_fixture(dir.path(), manifest, 2, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            ingest_fixture(dir.path()),
            Err(GalleryError::MalformedLine { line: 2, .. })
        ));
    }

    #[test]
    fn row_count_must_match_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "{\"id\":\"a\",\"caption\":\"x\"}\n", 2, &[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ]);
        assert!(matches!(
            ingest_fixture(dir.path()),
            Err(GalleryError::RowCountMismatch { manifest: 1, embeddings: 2 })
        ));
    }

    #[test]
    fn rejects_out_of_range_relevance() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            r#"{"id":"a","caption":"x","rel":1.5}"#,
            2,
            &[vec![1.0, 0.0]],
        );
        assert!(matches!(
            ingest_fixture(dir.path()),
            Err(GalleryError::InvalidScore { field: "rel", .. })
        ));
    }

    #[test]
    fn header_contract() {
        let mut bytes = Vec::new();
        write_embeddings(&mut bytes, 2, &[&[1.0, 0.0]]).unwrap();
        assert_eq!(&bytes[..4], b"QCQC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 20 + 8);

        let mut bad_magic = bytes.clone();
        bad_magic[..4].copy_from_slice(b"QCQD");
        assert!(matches!(
            read_embeddings(bad_magic.as_slice()),
            Err(GalleryError::Format(_))
        ));

        let mut bad_version = bytes.clone();
        bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            read_embeddings(bad_version.as_slice()),
            Err(GalleryError::UnsupportedVersion(99))
        ));

        assert!(matches!(
            read_embeddings(&bytes[..bytes.len() - 1]),
            Err(GalleryError::Format(_))
        ));
    }

    #[test]
    fn dimension_mismatch_between_records() {
        let records = vec![
            GalleryRecord::new("a", "x", vec![1.0, 0.0]),
            GalleryRecord::new("b", "y", vec![1.0, 0.0, 0.0]),
        ];
        assert!(matches!(
            Gallery::new(records),
            Err(GalleryError::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn relevance_examples() {
        let e1 = [1.0f32, 0.0];
        let e2 = [0.0f32, 1.0];
        assert_eq!(compute_relevance(&e1, &e1).unwrap(), 1.0);
        assert_eq!(compute_relevance(&e1, &e2).unwrap(), 0.0);
        let a = [0.6f64, 0.8];
        let b = [0.8f64, 0.6];
        // 0.6*0.8 + 0.8*0.6
        assert!((compute_relevance(&a, &b).unwrap() - 0.96).abs() < 1e-15);
        assert!(matches!(
            compute_relevance(&[1.0f32], &e1),
            Err(GalleryError::DimensionMismatch { .. })
        ));
    }
}
