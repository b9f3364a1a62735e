//! Per-image probability features and per-user aggregation.
//!
//! Each task's logits go through a temperature-scaled softmax. Routed
//! clusters are applied only when their trigger query holds the strict
//! argmax of its source task; otherwise every query in the cluster is exactly
//! `0.0`. Exact ties route nowhere. Images are never dropped.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::embed_io::{parse_label, CohortManifest, EmbeddingRecord, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::schema::TaskSchema;

/// Conventional logit scale of contrastive vision-language models.
pub const DEFAULT_TEMPERATURE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub image_id: String,
    pub probs: Vec<f64>,
    /// Names of the routed clusters that fired for this image.
    pub fired_clusters: Vec<String>,
}

impl ImageFeatures {
    pub fn routed_cluster(&self) -> Option<&str> {
        self.fired_clusters.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserVector {
    pub user_id: String,
    pub label: bool,
    pub n_images: usize,
    pub mean_probs: Vec<f64>,
}

/// Softmax of `temperature * logits`, shifted by the maximum.
pub fn task_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax over zero logits".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "task logits".into(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| (temperature * (s - max)).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// True when `column` holds the strict maximum of `values` within `range`.
fn strict_argmax(values: &[f64], range: std::ops::Range<usize>, column: usize) -> bool {
    let winner = values[column];
    range.filter(|&j| j != column).all(|j| values[j] < winner)
}

/// Scores one image. `row` holds its logits in schema column order.
pub fn score_image(
    image_id: &str,
    row: &[f64],
    schema: &TaskSchema,
    temperature: f64,
) -> Result<ImageFeatures> {
    if row.len() != schema.dimension {
        return Err(Error::DimensionMismatch {
            context: format!("logits of image `{image_id}`"),
            expected: schema.dimension,
            found: row.len(),
        });
    }
    if let Some(j) = row.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("image `{image_id}` column {j}"),
        });
    }

    let mut applied: Vec<bool> = schema.clusters.iter().map(|c| !c.is_routed()).collect();
    let mut fired = Vec::new();
    for route in schema.routes() {
        let source = &schema.layout()[route.source_layout];
        if strict_argmax(row, source.columns.clone(), route.trigger_column) {
            applied[route.cluster] = true;
            fired.push(schema.clusters[route.cluster].name.clone());
        }
    }

    let mut probs = vec![0.0; schema.dimension];
    for layout in schema.layout() {
        if applied[layout.cluster] {
            let p = task_softmax(&row[layout.columns.clone()], temperature)?;
            probs[layout.columns.clone()].copy_from_slice(&p);
        }
    }
    Ok(ImageFeatures {
        image_id: image_id.to_string(),
        probs,
        fired_clusters: fired,
    })
}

/// Element-wise mean over `rows`, summed in list order.
fn mean_rows<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, context: &str) -> Result<Vec<f64>> {
    let n = rows.len();
    let mut acc: Option<Vec<f64>> = None;
    for row in rows {
        match &mut acc {
            None => acc = Some(row.to_vec()),
            Some(sum) => {
                if sum.len() != row.len() {
                    return Err(Error::DimensionMismatch {
                        context: context.to_string(),
                        expected: sum.len(),
                        found: row.len(),
                    });
                }
                sum.iter_mut().zip(row).for_each(|(s, x)| *s += x);
            }
        }
    }
    let sum = acc.ok_or_else(|| Error::EmptyInput(format!("{context}: no rows")))?;
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

pub fn aggregate_user(features: &[ImageFeatures], user_id: &str, label: bool) -> Result<UserVector> {
    let mean = mean_rows(
        features.iter().map(|f| f.probs.as_slice()),
        &format!("user `{user_id}`"),
    )?;
    Ok(UserVector {
        user_id: user_id.to_string(),
        label,
        n_images: features.len(),
        mean_probs: mean,
    })
}

/// Scores every manifest image and averages per user. Images in `sims` that
/// the manifest does not reference are ignored. Output follows manifest
/// order, so results do not depend on the rayon pool size.
pub fn extract(
    sims: &SimilarityMatrix,
    schema: &TaskSchema,
    temperature: f64,
    manifest: &CohortManifest,
) -> Result<(Vec<ImageFeatures>, Vec<UserVector>)> {
    if manifest.users.is_empty() || manifest.n_images() == 0 {
        return Err(Error::EmptyInput("manifest lists no images".into()));
    }
    let sims = if sims.query_ids == schema.query_ids() {
        std::borrow::Cow::Borrowed(sims)
    } else {
        std::borrow::Cow::Owned(sims.to_schema_order(schema)?)
    };
    let row_of: HashMap<&str, usize> = sims
        .image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let jobs: Vec<(&str, usize)> = manifest
        .users
        .iter()
        .flat_map(|u| u.image_ids.iter())
        .map(|img| {
            row_of
                .get(img.as_str())
                .map(|&r| (img.as_str(), r))
                .ok_or_else(|| Error::DanglingReference {
                    location: "similarities".into(),
                    id: img.clone(),
                })
        })
        .collect::<Result<_>>()?;

    let features: Vec<ImageFeatures> = jobs
        .par_iter()
        .map(|&(id, r)| score_image(id, sims.row(r), schema, temperature))
        .collect::<Result<_>>()?;

    let mut users = Vec::with_capacity(manifest.users.len());
    let mut offset = 0;
    for u in &manifest.users {
        let n = u.image_ids.len();
        users.push(aggregate_user(
            &features[offset..offset + n],
            &u.user_id,
            u.label,
        )?);
        offset += n;
    }
    Ok((features, users))
}

/// Mean image embedding per user; the dense-baseline counterpart of
/// [`extract`]. Column ids are `dim_0`, `dim_1`, ...
pub fn users_from_embeddings(
    manifest: &CohortManifest,
    images: &[EmbeddingRecord],
) -> Result<(Vec<String>, Vec<UserVector>)> {
    let by_id: HashMap<&str, &EmbeddingRecord> = images.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut users = Vec::with_capacity(manifest.users.len());
    for u in &manifest.users {
        let recs: Vec<&[f64]> =
            u.image_ids
                .iter()
                .map(|img| {
                    by_id.get(img.as_str()).map(|r| r.vec.as_slice()).ok_or_else(|| {
                        Error::DanglingReference {
                            location: "embeddings".into(),
                            id: img.clone(),
                        }
                    })
                })
                .collect::<Result<_>>()?;
        users.push(UserVector {
            user_id: u.user_id.clone(),
            label: u.label,
            n_images: recs.len(),
            mean_probs: mean_rows(recs.into_iter(), &format!("user `{}`", u.user_id))?,
        });
    }
    let dim = users.first().map_or(0, |u| u.mean_probs.len());
    Ok(((0..dim).map(|k| format!("dim_{k}")).collect(), users))
}

/// Regression design: one row per user, one column per feature id.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub y: Vec<bool>,
    pub column_ids: Vec<String>,
    pub row_ids: Vec<String>,
}

pub fn build_design_matrix(users: &[UserVector], column_ids: &[String]) -> Result<DesignMatrix> {
    if users.is_empty() {
        return Err(Error::EmptyInput("no users for design matrix".into()));
    }
    let d = column_ids.len();
    for u in users {
        if u.mean_probs.len() != d {
            return Err(Error::DimensionMismatch {
                context: format!("user `{}`", u.user_id),
                expected: d,
                found: u.mean_probs.len(),
            });
        }
    }
    let x = DMatrix::from_fn(users.len(), d, |i, j| users[i].mean_probs[j]);
    Ok(DesignMatrix {
        x,
        y: users.iter().map(|u| u.label).collect(),
        column_ids: column_ids.to_vec(),
        row_ids: users.iter().map(|u| u.user_id.clone()).collect(),
    })
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    out.write_all(body.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn image_features_csv(column_ids: &[String], features: &[ImageFeatures]) -> String {
    let mut s = String::from("image_id");
    for id in column_ids {
        s.push(',');
        s.push_str(id);
    }
    s.push('\n');
    for f in features {
        s.push_str(&f.image_id);
        for p in &f.probs {
            let _ = write!(s, ",{p:?}");
        }
        s.push('\n');
    }
    s
}

pub fn write_image_features(path: &Path, column_ids: &[String], features: &[ImageFeatures]) -> Result<()> {
    write_file(path, &image_features_csv(column_ids, features))
}

pub fn user_vectors_csv(column_ids: &[String], users: &[UserVector]) -> String {
    let mut s = String::from("user_id,label,n_images");
    for id in column_ids {
        s.push(',');
        s.push_str(id);
    }
    s.push('\n');
    for u in users {
        let _ = write!(s, "{},{},{}", u.user_id, u8::from(u.label), u.n_images);
        for p in &u.mean_probs {
            let _ = write!(s, ",{p:?}");
        }
        s.push('\n');
    }
    s
}

pub fn write_user_vectors(path: &Path, column_ids: &[String], users: &[UserVector]) -> Result<()> {
    write_file(path, &user_vectors_csv(column_ids, users))
}

/// Reads a user-vector CSV back into column ids and users.
pub fn load_user_vectors(path: &Path) -> Result<(Vec<String>, Vec<UserVector>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let loc = |line: usize| format!("{}: line {line}", path.display());
    let headers = rdr
        .headers()
        .map_err(|e| Error::malformed(loc(1), e.to_string()))?
        .clone();
    if headers.len() < 4 || &headers[0] != "user_id" || &headers[1] != "label" || &headers[2] != "n_images" {
        return Err(Error::malformed(
            loc(1),
            "expected header `user_id,label,n_images,<feature ids...>`",
        ));
    }
    let column_ids: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
    let mut users = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let at = loc(i + 2);
        let rec = rec.map_err(|e| Error::malformed(&at, e.to_string()))?;
        let label = parse_label(&rec[1], &at)?;
        let n_images: usize = rec[2]
            .parse()
            .map_err(|_| Error::malformed(&at, format!("bad n_images `{}`", &rec[2])))?;
        let mean_probs = rec
            .iter()
            .skip(3)
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::malformed(&at, format!("bad feature value `{v}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        users.push(UserVector {
            user_id: rec[0].to_string(),
            label,
            n_images,
            mean_probs,
        });
    }
    if users.is_empty() {
        return Err(Error::EmptyInput(format!("{}: no users", path.display())));
    }
    Ok((column_ids, users))
}
