//! Ingestion of embeddings, precomputed similarities and cohort manifests.
//!
//! File formats (UTF-8, LF line endings):
//!
//! * embeddings: one JSON object per line,
//!   `{"id": "...", "kind": "image"|"query", "dim": N, "vec": [f64, ...]}`
//! * similarities: one JSON object per line,
//!   `{"image_id": "...", "sims": {"<query id>": f64, ...}}`
//! * cohort manifest: `users.csv` (`user_id,label`) and `images.csv`
//!   (`image_id,user_id`).
//!
//! Embedding vectors are L2-normalized on ingestion. Zero vectors are
//! rejected, never repaired.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::TaskSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Image,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub kind: RecordKind,
    pub dim: usize,
    pub vec: Vec<f64>,
}

/// Raw (pre-softmax) similarity logits, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub image_ids: Vec<String>,
    pub query_ids: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(image_ids: Vec<String>, query_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != image_ids.len() * query_ids.len() {
            return Err(Error::DimensionMismatch {
                context: "similarity matrix".into(),
                expected: image_ids.len() * query_ids.len(),
                found: values.len(),
            });
        }
        Ok(Self {
            image_ids,
            query_ids,
            values,
        })
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.n_queries();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_queries() + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.image_ids
            .iter()
            .enumerate()
            .map(move |(i, id)| (id.as_str(), self.row(i)))
    }

    /// Reorders columns into schema order, dropping queries the schema does
    /// not use.
    pub fn to_schema_order(&self, schema: &TaskSchema) -> Result<SimilarityMatrix> {
        let index: HashMap<&str, usize> = self
            .query_ids
            .iter()
            .enumerate()
            .map(|(j, q)| (q.as_str(), j))
            .collect();
        let mut cols = Vec::with_capacity(schema.dimension);
        for q in schema.queries() {
            match index.get(q.id.as_str()) {
                Some(&j) => cols.push(j),
                None => {
                    return Err(Error::MissingQuery {
                        image_id: self.image_ids.first().cloned().unwrap_or_default(),
                        query_id: q.id.clone(),
                    })
                }
            }
        }
        let mut values = Vec::with_capacity(self.n_images() * cols.len());
        for i in 0..self.n_images() {
            let row = self.row(i);
            values.extend(cols.iter().map(|&j| row[j]));
        }
        SimilarityMatrix::new(self.image_ids.clone(), schema.query_ids(), values)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Scales `v` to unit L2 norm. Returns `None` for a zero vector.
pub fn l2_normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    parse_embeddings(open(path)?).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_embeddings<R: BufRead>(reader: R) -> Result<Vec<EmbeddingRecord>> {
    let mut records: Vec<EmbeddingRecord> = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<embeddings>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("line {line_no}");
        let raw: EmbeddingRecord =
            serde_json::from_str(&line).map_err(|e| Error::malformed(&loc, e.to_string()))?;
        if raw.vec.len() != raw.dim {
            return Err(Error::DimensionMismatch {
                context: format!("{loc}: record `{}`", raw.id),
                expected: raw.dim,
                found: raw.vec.len(),
            });
        }
        if raw.dim == 0 {
            return Err(Error::malformed(&loc, "dim must be positive"));
        }
        if let Some(first) = records.first() {
            if first.dim != raw.dim {
                return Err(Error::DimensionMismatch {
                    context: format!("{loc}: record `{}`", raw.id),
                    expected: first.dim,
                    found: raw.dim,
                });
            }
        }
        if raw.vec.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{loc}: record `{}`", raw.id),
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId {
                location: loc,
                id: raw.id,
            });
        }
        let vec = l2_normalize(&raw.vec).ok_or_else(|| Error::ZeroVector {
            line: line_no,
            id: raw.id.clone(),
        })?;
        records.push(EmbeddingRecord { vec, ..raw });
    }
    Ok(records)
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let mut out = create(path)?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Splits records by kind, preserving file order within each kind.
pub fn split_by_kind(records: Vec<EmbeddingRecord>) -> (Vec<EmbeddingRecord>, Vec<EmbeddingRecord>) {
    records.into_iter().partition(|r| r.kind == RecordKind::Image)
}

/// Dot products of unit vectors. Rows are computed in parallel; each entry
/// is the same left-to-right sum regardless of partitioning.
pub fn cosine_similarities(
    images: &[EmbeddingRecord],
    queries: &[EmbeddingRecord],
) -> Result<SimilarityMatrix> {
    if images.is_empty() {
        return Err(Error::EmptyInput("no image embeddings".into()));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("no query embeddings".into()));
    }
    let dim = images[0].dim;
    for r in images.iter().chain(queries) {
        if r.vec.len() != dim {
            return Err(Error::DimensionMismatch {
                context: format!("record `{}`", r.id),
                expected: dim,
                found: r.vec.len(),
            });
        }
    }
    let values: Vec<f64> = images
        .par_iter()
        .flat_map_iter(|img| {
            queries
                .iter()
                .map(move |q| img.vec.iter().zip(&q.vec).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect();
    SimilarityMatrix::new(
        images.iter().map(|r| r.id.clone()).collect(),
        queries.iter().map(|r| r.id.clone()).collect(),
        values,
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimilarityRow {
    image_id: String,
    sims: HashMap<String, f64>,
}

pub fn load_similarities(path: &Path, schema: &TaskSchema) -> Result<SimilarityMatrix> {
    parse_similarities(open(path)?, schema).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Reads a similarities file into a matrix in schema column order.
pub fn parse_similarities<R: BufRead>(reader: R, schema: &TaskSchema) -> Result<SimilarityMatrix> {
    let dim = schema.dimension;
    let mut image_ids = Vec::new();
    let mut seen = HashSet::new();
    let mut values = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<similarities>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("line {}", idx + 1);
        let row: SimilarityRow =
            serde_json::from_str(&line).map_err(|e| Error::malformed(&loc, e.to_string()))?;
        if !seen.insert(row.image_id.clone()) {
            return Err(Error::DuplicateId {
                location: loc,
                id: row.image_id,
            });
        }
        // check unknown ids in a stable order so the error is deterministic
        let mut keys: Vec<&String> = row.sims.keys().collect();
        keys.sort();
        if let Some(unknown) = keys.into_iter().find(|k| schema.column_of(k).is_none()) {
            return Err(Error::UnknownQuery {
                location: format!("{loc}: image `{}`", row.image_id),
                query_id: unknown.clone(),
            });
        }
        let mut buf = vec![0.0; dim];
        for (j, q) in schema.queries().enumerate() {
            let v = *row.sims.get(&q.id).ok_or_else(|| Error::MissingQuery {
                image_id: row.image_id.clone(),
                query_id: q.id.clone(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("{loc}: image `{}` query `{}`", row.image_id, q.id),
                });
            }
            buf[j] = v;
        }
        values.extend(buf);
        image_ids.push(row.image_id);
    }
    SimilarityMatrix::new(image_ids, schema.query_ids(), values)
}

/// Writes one JSON line per image with keys in column order. Floats use the
/// shortest representation that parses back to the same `f64`.
pub fn write_similarities<W: Write>(mut out: W, matrix: &SimilarityMatrix) -> std::io::Result<()> {
    for (id, row) in matrix.rows() {
        let mut line = String::with_capacity(32 + row.len() * 32);
        line.push_str("{\"image_id\":");
        line.push_str(&serde_json::to_string(id).expect("string serializes"));
        line.push_str(",\"sims\":{");
        for (j, (q, v)) in matrix.query_ids.iter().zip(row).enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&serde_json::to_string(q).expect("string serializes"));
            line.push(':');
            line.push_str(&serde_json::to_string(v).expect("finite float serializes"));
        }
        line.push_str("}}\n");
        out.write_all(line.as_bytes())?;
    }
    out.flush()
}

pub fn save_similarities(path: &Path, matrix: &SimilarityMatrix) -> Result<()> {
    write_similarities(create(path)?, matrix).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortUser {
    pub user_id: String,
    pub label: bool,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CohortManifest {
    pub users: Vec<CohortUser>,
    /// Human-readable notes on how the manifest was built or filtered.
    pub notes: Vec<String>,
}

impl CohortManifest {
    pub fn n_images(&self) -> usize {
        self.users.iter().map(|u| u.image_ids.len()).sum()
    }

    pub fn n_positive(&self) -> usize {
        self.users.iter().filter(|u| u.label).count()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct UserRow {
    user_id: String,
    label: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct ImageRow {
    image_id: String,
    user_id: String,
}

pub fn parse_label(raw: &str, location: &str) -> Result<bool> {
    match raw.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::malformed(
            location,
            format!("label must be 0 or 1, got `{other}`"),
        )),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn check_headers(rdr: &mut csv::Reader<File>, path: &Path, expected: &[&str]) -> Result<()> {
    let headers = rdr
        .headers()
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::malformed(
            format!("{}: header", path.display()),
            format!("expected `{}`", expected.join(",")),
        ));
    }
    Ok(())
}

/// Loads `users.csv` and `images.csv`. Users without any image are dropped
/// and noted.
pub fn load_manifest(users_csv: &Path, images_csv: &Path) -> Result<CohortManifest> {
    let mut rdr = csv_reader(users_csv)?;
    check_headers(&mut rdr, users_csv, &["user_id", "label"])?;
    let mut users = Vec::new();
    let mut index = HashMap::new();
    for (i, rec) in rdr.deserialize::<UserRow>().enumerate() {
        let loc = format!("{}: line {}", users_csv.display(), i + 2);
        let row = rec.map_err(|e| Error::malformed(&loc, e.to_string()))?;
        let label = parse_label(&row.label, &loc)?;
        if index.insert(row.user_id.clone(), users.len()).is_some() {
            return Err(Error::DuplicateId {
                location: loc,
                id: row.user_id,
            });
        }
        users.push(CohortUser {
            user_id: row.user_id,
            label,
            image_ids: Vec::new(),
        });
    }

    let mut rdr = csv_reader(images_csv)?;
    check_headers(&mut rdr, images_csv, &["image_id", "user_id"])?;
    let mut images = HashSet::new();
    for (i, rec) in rdr.deserialize::<ImageRow>().enumerate() {
        let loc = format!("{}: line {}", images_csv.display(), i + 2);
        let row = rec.map_err(|e| Error::malformed(&loc, e.to_string()))?;
        if !images.insert(row.image_id.clone()) {
            return Err(Error::DuplicateId {
                location: loc,
                id: row.image_id,
            });
        }
        let &u = index.get(&row.user_id).ok_or_else(|| Error::DanglingReference {
            location: loc.clone(),
            id: row.user_id.clone(),
        })?;
        users[u].image_ids.push(row.image_id);
    }

    let before = users.len();
    users.retain(|u| !u.image_ids.is_empty());
    let mut notes = Vec::new();
    if users.len() < before {
        notes.push(format!("dropped {} user(s) without images", before - users.len()));
    }
    Ok(CohortManifest { users, notes })
}

pub fn write_manifest(users_csv: &Path, images_csv: &Path, manifest: &CohortManifest) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(users_csv)?);
    let wrap = |p: &Path, e: csv::Error| Error::io(p, std::io::Error::other(e));
    for u in &manifest.users {
        w.serialize(UserRow {
            user_id: u.user_id.clone(),
            label: if u.label { "1" } else { "0" }.into(),
        })
        .map_err(|e| wrap(users_csv, e))?;
    }
    w.flush().map_err(|e| Error::io(users_csv, e))?;

    let mut w = csv::Writer::from_writer(create(images_csv)?);
    for u in &manifest.users {
        for img in &u.image_ids {
            w.serialize(ImageRow {
                image_id: img.clone(),
                user_id: u.user_id.clone(),
            })
            .map_err(|e| wrap(images_csv, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(images_csv, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageThreshold {
    AtLeast(usize),
    /// Lower median of the per-user image counts.
    Median,
}

impl std::str::FromStr for ImageThreshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("median") {
            return Ok(ImageThreshold::Median);
        }
        s.parse::<usize>()
            .map(ImageThreshold::AtLeast)
            .map_err(|_| Error::invalid(format!("image threshold must be a count or `median`, got `{s}`")))
    }
}

pub fn lower_median(values: &[usize]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    Some(sorted[(sorted.len() - 1) / 2])
}

/// Keeps users with at least `threshold` images, preserving order.
pub fn filter_min_images(manifest: &CohortManifest, threshold: ImageThreshold) -> Result<CohortManifest> {
    let counts: Vec<usize> = manifest.users.iter().map(|u| u.image_ids.len()).collect();
    let min = match threshold {
        ImageThreshold::AtLeast(0) => return Err(Error::invalid("image threshold must be at least 1")),
        ImageThreshold::AtLeast(n) => n,
        ImageThreshold::Median => {
            lower_median(&counts).ok_or_else(|| Error::EmptyInput("manifest has no users".into()))?
        }
    };
    let users: Vec<CohortUser> = manifest
        .users
        .iter()
        .filter(|u| u.image_ids.len() >= min)
        .cloned()
        .collect();
    if users.is_empty() {
        return Err(Error::EmptyCohort {
            before: manifest.users.len(),
            threshold: min,
        });
    }
    let mut notes = manifest.notes.clone();
    notes.push(format!(
        "kept {} of {} users with >= {min} images",
        users.len(),
        manifest.users.len()
    ));
    Ok(CohortManifest { users, notes })
}
