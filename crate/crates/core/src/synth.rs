//! Deterministic synthetic cohorts with planted group differences.
//!
//! At the user-vector level each feature is drawn from its group's Gaussian
//! and clipped to `[0, 1]`. A shared per-user factor with loading `√ρ`
//! correlates the features that carry a planted difference, oriented so that
//! each pushes toward its group's side; marginals stay Gaussian. For every
//! two-query task of an unconditional cluster the non-primary feature is set
//! to `1 − primary`, so each pair sums to one.
//!
//! At the image-logit level every user first gets a user-level vector as
//! above. Each image then draws, per task, probabilities from a Dirichlet
//! centred on that user's (task-normalized) vector with concentration `κ`,
//! and emits `ln p` as its logits. Scoring those logits with temperature 1
//! recovers `p` exactly; routed tasks are then masked by the content argmax,
//! so routed user means are diluted by the fraction of routed images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed_io::{CohortManifest, CohortUser, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::features::UserVector;
use crate::schema::TaskSchema;

/// Floor applied before taking `ln p` of image probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub id: String,
    pub mean_pos: f64,
    pub sd_pos: f64,
    pub mean_neg: f64,
    pub sd_neg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageLevel {
    pub min_images: usize,
    pub max_images: usize,
    /// Dirichlet concentration; larger means images closer to the user mean.
    pub concentration: f64,
}

impl Default for ImageLevel {
    fn default() -> Self {
        Self {
            min_images: 10,
            max_images: 40,
            concentration: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    /// Loading² of the shared factor, in `[0, 1)`.
    #[serde(default)]
    pub correlation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<ImageLevel>,
    pub features: Vec<FeatureSpec>,
}

impl CohortSpec {
    /// Same spec with the negative group copied from the positive one.
    pub fn zero_effect(&self) -> CohortSpec {
        let mut spec = self.clone();
        for f in &mut spec.features {
            f.mean_neg = f.mean_pos;
            f.sd_neg = f.sd_pos;
        }
        spec
    }

    pub fn validate(&self, schema: &TaskSchema) -> Result<()> {
        if self.n_pos < 2 || self.n_neg < 2 {
            return Err(Error::invalid("each group needs at least 2 users"));
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return Err(Error::invalid(format!(
                "correlation must lie in [0, 1), got {}",
                self.correlation
            )));
        }
        let ids: Vec<&str> = self.features.iter().map(|f| f.id.as_str()).collect();
        let expected = schema.query_ids();
        if ids != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::invalid(
                "cohort features must list every schema query id once, in schema order",
            ));
        }
        for f in &self.features {
            for m in [f.mean_pos, f.mean_neg] {
                if !(0.0..=1.0).contains(&m) {
                    return Err(Error::invalid(format!(
                        "feature `{}`: mean {m} outside [0, 1]",
                        f.id
                    )));
                }
            }
            for s in [f.sd_pos, f.sd_neg] {
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(Error::invalid(format!("feature `{}`: sd {s} must be >= 0", f.id)));
                }
            }
        }
        if let Some(img) = &self.images {
            if img.min_images == 0 || img.min_images > img.max_images {
                return Err(Error::invalid("images per user must satisfy 1 <= min <= max"));
            }
            if !(img.concentration > 0.0 && img.concentration.is_finite()) {
                return Err(Error::invalid("Dirichlet concentration must be positive"));
            }
        }
        Ok(())
    }
}

fn feature(id: &str, pos: (f64, f64), neg: (f64, f64)) -> FeatureSpec {
    FeatureSpec {
        id: id.into(),
        mean_pos: pos.0,
        sd_pos: pos.1,
        mean_neg: neg.0,
        sd_neg: neg.1,
    }
}

/// Published group means and SDs (92 high-risk vs 749 other users) for the
/// eleven reported features, complements as one minus their partner, and
/// group-independent fillers for the remaining queries. Uses the built-in
/// schema's query ids.
pub fn table4_preset(seed: u64) -> CohortSpec {
    let features = vec![
        feature("content.person", (0.30, 0.08), (0.30, 0.08)),
        feature("content.people", (0.25, 0.07), (0.27, 0.09)),
        feature("content.animal", (0.05, 0.03), (0.05, 0.03)),
        feature("content.object", (0.20, 0.07), (0.20, 0.07)),
        feature("content.text", (0.20, 0.07), (0.20, 0.07)),
        feature("brightness.dark", (0.50, 0.15), (0.41, 0.18)),
        feature("brightness.bright", (0.50, 0.15), (0.59, 0.18)),
        feature("sentiment.negative", (0.42, 0.09), (0.34, 0.10)),
        feature("sentiment.positive", (0.58, 0.09), (0.66, 0.10)),
        feature("person.selfie", (0.66, 0.16), (0.58, 0.17)),
        feature("person.other", (0.34, 0.16), (0.42, 0.17)),
        feature("person.sad", (0.47, 0.10), (0.41, 0.11)),
        feature("person.happy", (0.53, 0.10), (0.59, 0.11)),
        feature("person.child", (0.56, 0.16), (0.49, 0.16)),
        feature("person.adult", (0.10, 0.05), (0.10, 0.05)),
        feature("person.old", (0.40, 0.12), (0.34, 0.11)),
        feature("people.selfie", (0.33, 0.07), (0.29, 0.08)),
        feature("people.other", (0.67, 0.07), (0.71, 0.08)),
        feature("people.happy", (0.70, 0.18), (0.59, 0.24)),
        feature("people.sad", (0.30, 0.18), (0.41, 0.24)),
        feature("people.family", (0.25, 0.09), (0.29, 0.10)),
        feature("people.friends", (0.27, 0.09), (0.23, 0.08)),
        feature("people.colleagues", (0.10, 0.05), (0.10, 0.05)),
        feature("people.couple", (0.15, 0.05), (0.15, 0.05)),
    ];
    CohortSpec {
        n_pos: 92,
        n_neg: 749,
        seed,
        correlation: 0.3,
        images: None,
        features,
    }
}

/// Columns of the non-primary member of each unconditional two-query task,
/// paired with the primary's column.
fn complement_columns(schema: &TaskSchema) -> Vec<(usize, usize)> {
    schema
        .layout()
        .iter()
        .filter(|l| !schema.clusters[l.cluster].is_routed() && l.columns.len() == 2)
        .map(|l| {
            let task = schema.task(l);
            let primary = task.queries.iter().position(|q| q.report_primary).unwrap_or(0);
            (l.columns.start + primary, l.columns.start + 1 - primary)
        })
        .collect()
}

fn user_ids(n: usize) -> Vec<String> {
    let width = n.to_string().len().max(4);
    (1..=n).map(|i| format!("u{i:0width$}")).collect()
}

/// Draws one user's feature vector; positives come first in the cohort.
fn draw_vector(rng: &mut ChaCha8Rng, spec: &CohortSpec, label: bool, pairs: &[(usize, usize)]) -> Vec<f64> {
    let shared: f64 = rng.sample(StandardNormal);
    let load = spec.correlation.sqrt();
    let mut v: Vec<f64> = spec
        .features
        .iter()
        .map(|f| {
            let own: f64 = rng.sample(StandardNormal);
            let sign = (f.mean_pos - f.mean_neg).signum() * f64::from(u8::from(f.mean_pos != f.mean_neg));
            let oriented = if label { sign } else { -sign };
            let z = oriented * load * shared + (1.0 - spec.correlation * sign * sign).sqrt() * own;
            let (m, s) = if label {
                (f.mean_pos, f.sd_pos)
            } else {
                (f.mean_neg, f.sd_neg)
            };
            (m + s * z).clamp(0.0, 1.0)
        })
        .collect();
    for &(primary, other) in pairs {
        v[other] = 1.0 - v[primary];
    }
    v
}

/// Per-user feature vectors in schema column order.
pub fn generate_user_vectors(spec: &CohortSpec, schema: &TaskSchema) -> Result<Vec<UserVector>> {
    spec.validate(schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pairs = complement_columns(schema);
    let ids = user_ids(spec.n_pos + spec.n_neg);
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, user_id)| {
            let label = i < spec.n_pos;
            UserVector {
                user_id,
                label,
                n_images: 1,
                mean_probs: draw_vector(&mut rng, spec, label, &pairs),
            }
        })
        .collect())
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: &[f64]) -> Vec<f64> {
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        vec![1.0 / alpha.len() as f64; alpha.len()]
    }
}

/// Image-level logits (`ln p`, score with temperature 1) and the manifest
/// tying images to users.
pub fn generate_image_logits(
    spec: &CohortSpec,
    schema: &TaskSchema,
) -> Result<(SimilarityMatrix, CohortManifest)> {
    spec.validate(schema)?;
    let level = spec
        .images
        .ok_or_else(|| Error::invalid("image-level generation needs an `images` section"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pairs = complement_columns(schema);
    let ids = user_ids(spec.n_pos + spec.n_neg);
    let mut image_ids = Vec::new();
    let mut values = Vec::new();
    let mut users = Vec::with_capacity(ids.len());
    for (i, user_id) in ids.into_iter().enumerate() {
        let label = i < spec.n_pos;
        let target = draw_vector(&mut rng, spec, label, &pairs);
        let n_img = rng.random_range(level.min_images..=level.max_images);
        let mut mine = Vec::with_capacity(n_img);
        for k in 0..n_img {
            let image_id = format!("{user_id}_{:03}", k + 1);
            for layout in schema.layout() {
                let sub = &target[layout.columns.clone()];
                let total: f64 = sub.iter().sum();
                let alpha: Vec<f64> = sub
                    .iter()
                    .map(|&p| {
                        let share = if total > 0.0 {
                            p / total
                        } else {
                            1.0 / sub.len() as f64
                        };
                        level.concentration * share.max(1e-3)
                    })
                    .collect();
                values.extend(
                    dirichlet(&mut rng, &alpha)
                        .into_iter()
                        .map(|p| p.max(PROB_FLOOR).ln()),
                );
            }
            mine.push(image_id.clone());
            image_ids.push(image_id);
        }
        users.push(CohortUser {
            user_id,
            label,
            image_ids: mine,
        });
    }
    let sims = SimilarityMatrix::new(image_ids, schema.query_ids(), values)?;
    let manifest = CohortManifest {
        users,
        notes: vec![format!("synthetic cohort, seed {}", spec.seed)],
    };
    Ok((sims, manifest))
}
