//! Repeated random-split evaluation: ROC/AUC, t-based confidence intervals
//! for the mean AUC, the binormal Cohen's d, and model comparison tests.
//!
//! # Split generator
//!
//! Run `r` (0-based), attempt `a` (0 for the first draw, incremented on each
//! redraw of a single-class test set) seeds a SplitMix64 generator with
//!
//! ```text
//! seed = master ^ (0x9E3779B97F4A7C15 * (r + 1)) ^ (0xD1B54A32D192ED03 * a)
//! ```
//!
//! using wrapping 64-bit multiplication. The permutation is a Fisher–Yates
//! shuffle of `0..n` running `i` from `n-1` down to `1`, with `j` drawn in
//! `0..=i` by Lemire's multiply-shift rejection method on `next_u64`. The
//! first `ceil(f * n)` permuted indices train the model and the rest test it.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit_irls, FitOptions};
use crate::special::{normal_cdf, normal_quantile, student_t_quantile, student_t_two_sided_p};
use crate::stats::welch_t;

pub const MAX_REDRAWS: usize = 1000;
const RUN_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
const ATTEMPT_MIX: u64 = 0xD1B5_4A32_D192_ED03;

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "scores vs labels".into(),
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "scores".into(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("AUC labels".into()));
    }
    Ok((n_pos, n_neg))
}

/// Area under the ROC curve by the rank-sum method, ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum of the positives keeps tied mid-ranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end; twice their mean is start + 1 + end
        let twice_mid = (start + 1 + end) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        start = end;
    }
    let np = n_pos as u64;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC operating points, one per distinct score from the highest down,
/// preceded by the (0, 0) corner at threshold +∞.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (n_pos, n_neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub master_seed: u64,
    pub n_repeats: usize,
    pub train_fraction: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            master_seed: 0,
            n_repeats: 1000,
            train_fraction: 0.7,
        }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.n_repeats == 0 {
            return Err(Error::invalid("at least one repeat is required"));
        }
        Ok(())
    }

    /// `ceil(f * n)`, kept inside `1..n` so both sides are non-empty.
    pub fn train_size(&self, n: usize) -> usize {
        let raw = (self.train_fraction * n as f64 - 1e-9).ceil();
        (raw.max(1.0) as usize).min(n.saturating_sub(1))
    }
}

pub fn split_seed(master_seed: u64, run: usize, attempt: usize) -> u64 {
    master_seed ^ RUN_MIX.wrapping_mul(run as u64 + 1) ^ ATTEMPT_MIX.wrapping_mul(attempt as u64)
}

/// Uniform integer in `0..bound` by Lemire's method.
fn bounded(rng: &mut SplitMix64, bound: u64) -> u64 {
    let mut m = u128::from(rng.next_u64()) * u128::from(bound);
    if (m as u64) < bound {
        let threshold = bound.wrapping_neg() % bound;
        while (m as u64) < threshold {
            m = u128::from(rng.next_u64()) * u128::from(bound);
        }
    }
    (m >> 64) as u64
}

pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = bounded(&mut rng, i as u64 + 1) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Train and test indices of one run, after redrawing single-class test
/// sets. Also returns the number of redraws.
pub fn split_indices(y: &[bool], plan: &SplitPlan, run: usize) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let n = y.len();
    let n_train = plan.train_size(n);
    for attempt in 0..=MAX_REDRAWS {
        let perm = permutation(n, split_seed(plan.master_seed, run, attempt));
        let test = &perm[n_train..];
        let pos = test.iter().filter(|&&i| y[i]).count();
        if pos > 0 && pos < test.len() {
            return Ok((perm[..n_train].to_vec(), test.to_vec(), attempt));
        }
    }
    Err(Error::RedrawLimit {
        run,
        attempts: MAX_REDRAWS,
    })
}

pub struct TrainOutcome {
    /// Higher means more likely positive.
    pub scores: Vec<f64>,
    pub converged: bool,
}

/// A fitting procedure used inside each split.
pub trait Trainer: Sync {
    fn fit_score(
        &self,
        x_train: &DMatrix<f64>,
        y_train: &[bool],
        x_test: &DMatrix<f64>,
    ) -> Result<TrainOutcome>;
}

/// Logistic regression scored by its linear predictor, which orders test
/// users exactly like the fitted probability without saturating to ties.
#[derive(Debug, Clone, Default)]
pub struct LogisticTrainer {
    pub options: FitOptions,
}

impl Trainer for LogisticTrainer {
    fn fit_score(
        &self,
        x_train: &DMatrix<f64>,
        y_train: &[bool],
        x_test: &DMatrix<f64>,
    ) -> Result<TrainOutcome> {
        let ids: Vec<String> = (0..x_train.ncols()).map(|j| j.to_string()).collect();
        let model = fit_irls(x_train, y_train, &ids, &self.options)?;
        Ok(TrainOutcome {
            scores: model.decision_function(x_test)?,
            converged: model.fit.converged,
        })
    }
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_name: String,
    pub plan: SplitPlan,
    pub n_users: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub mean_auc: f64,
    /// Absent for a single repeat.
    pub ci95: Option<(f64, f64)>,
    /// Absent when the mean AUC is 0 or 1.
    pub cohens_d: Option<f64>,
    pub n_skipped: usize,
    pub n_nonconverged: usize,
    pub aucs: Vec<f64>,
}

struct RunResult {
    auc: f64,
    redraws: usize,
    converged: bool,
}

fn validate_design(x: &DMatrix<f64>, y: &[bool]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "design rows vs labels".into(),
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if y.len() < 10 {
        return Err(Error::invalid(format!(
            "repeated splits need at least 10 users, got {}",
            y.len()
        )));
    }
    if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
        return Err(Error::SingleClass("cohort labels".into()));
    }
    Ok(())
}

/// Test labels and scores for a single run.
pub fn split_scores<T: Trainer>(
    x: &DMatrix<f64>,
    y: &[bool],
    plan: &SplitPlan,
    trainer: &T,
    run: usize,
) -> Result<(Vec<bool>, Vec<f64>, bool, usize)> {
    let (train, test, redraws) = split_indices(y, plan, run)?;
    let y_train: Vec<bool> = train.iter().map(|&i| y[i]).collect();
    let y_test: Vec<bool> = test.iter().map(|&i| y[i]).collect();
    let out = trainer.fit_score(&select_rows(x, &train), &y_train, &select_rows(x, &test))?;
    Ok((y_test, out.scores, out.converged, redraws))
}

/// Runs `plan.n_repeats` independent splits in parallel on the current
/// rayon pool. The result does not depend on the pool size.
pub fn repeated_splits<T: Trainer>(
    model_name: &str,
    x: &DMatrix<f64>,
    y: &[bool],
    plan: &SplitPlan,
    trainer: &T,
) -> Result<EvalReport> {
    plan.validate()?;
    validate_design(x, y)?;
    let results: Vec<Result<RunResult>> = (0..plan.n_repeats)
        .into_par_iter()
        .map(|run| {
            let (labels, scores, converged, redraws) = split_scores(x, y, plan, trainer, run)?;
            Ok(RunResult {
                auc: roc_auc(&scores, &labels)?,
                redraws,
                converged,
            })
        })
        .collect();
    let mut aucs = Vec::with_capacity(plan.n_repeats);
    let mut n_skipped = 0;
    let mut n_nonconverged = 0;
    for r in results {
        let r = r?;
        aucs.push(r.auc);
        n_skipped += r.redraws;
        n_nonconverged += usize::from(!r.converged);
    }
    let mean_auc = mean(&aucs);
    let ci95 = if aucs.len() >= 2 {
        let (_, lo, hi) = mean_ci_t(&aucs, 0.95)?;
        Some((lo, hi))
    } else {
        None
    };
    let train_size = plan.train_size(y.len());
    Ok(EvalReport {
        model_name: model_name.to_string(),
        plan: *plan,
        n_users: y.len(),
        train_size,
        test_size: y.len() - train_size,
        mean_auc,
        ci95,
        cohens_d: auc_to_cohens_d(mean_auc).ok(),
        n_skipped,
        n_nonconverged,
        aucs,
    })
}

/// Mean computed around the first element, so constant input is exact.
pub(crate) fn mean(v: &[f64]) -> f64 {
    let Some(&first) = v.first() else {
        return f64::NAN;
    };
    first + v.iter().map(|x| x - first).sum::<f64>() / v.len() as f64
}

/// Sample variance with denominator `n - 1`.
pub(crate) fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Mean and two-sided t interval `mean ± t_{(1+level)/2, m-1} · s/√m`.
pub fn mean_ci_t(values: &[f64], level: f64) -> Result<(f64, f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "a confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "confidence interval input".into(),
        });
    }
    let m = values.len() as f64;
    let mu = mean(values);
    let s = sample_variance(values).sqrt();
    let half = student_t_quantile((1.0 + level) / 2.0, m - 1.0) * s / m.sqrt();
    Ok((mu, mu - half, mu + half))
}

/// Binormal equal-variance effect size `d = √2 · Φ⁻¹(AUC)`.
pub fn auc_to_cohens_d(auc: f64) -> Result<f64> {
    if !(auc > 0.0 && auc < 1.0) {
        return Err(Error::invalid(format!(
            "AUC must lie strictly in (0, 1), got {auc}"
        )));
    }
    Ok(std::f64::consts::SQRT_2 * normal_quantile(auc))
}

pub fn cohens_d_to_auc(d: f64) -> f64 {
    normal_cdf(d / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonMode {
    #[default]
    Unpaired,
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mode: ComparisonMode,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub delta: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Welch two-sample t-test of `a` against `b`, or a paired t-test on the
/// run-wise differences.
pub fn compare_models_ttest(a: &[f64], b: &[f64], mode: ComparisonMode) -> Result<Comparison> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each AUC sample needs at least 2 values"));
    }
    let (mean_a, mean_b) = (mean(a), mean(b));
    let delta = mean_a - mean_b;
    let (t, df) = match mode {
        ComparisonMode::Unpaired => {
            let (va, vb) = (sample_variance(a), sample_variance(b));
            if va == 0.0 && vb == 0.0 {
                if delta != 0.0 {
                    return Err(Error::ZeroVariance);
                }
                (0.0, (a.len() + b.len() - 2) as f64)
            } else {
                welch_t(mean_a, va, a.len(), mean_b, vb, b.len())
            }
        }
        ComparisonMode::Paired => {
            if a.len() != b.len() {
                return Err(Error::DimensionMismatch {
                    context: "paired AUC samples".into(),
                    expected: a.len(),
                    found: b.len(),
                });
            }
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let md = mean(&d);
            let sd = sample_variance(&d).sqrt();
            let df = (d.len() - 1) as f64;
            if sd == 0.0 {
                if md != 0.0 {
                    return Err(Error::ZeroVariance);
                }
                (0.0, df)
            } else {
                (md / (sd / (d.len() as f64).sqrt()), df)
            }
        }
    };
    let p = if t == 0.0 {
        1.0
    } else {
        student_t_two_sided_p(t, df)
    };
    Ok(Comparison {
        mode,
        n_a: a.len(),
        n_b: b.len(),
        mean_a,
        mean_b,
        delta,
        t,
        df,
        p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            low: lo + k as f64 * width,
            high: if k + 1 == bins {
                hi.max(lo + width)
            } else {
                lo + (k + 1) as f64 * width
            },
            count,
        })
        .collect()
}
