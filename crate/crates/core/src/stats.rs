//! Full-sample inference over user vectors: per-feature two-group t-tests,
//! Benjamini–Hochberg FDR, complement pruning and a multiple logistic
//! regression over the surviving features.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{mean, sample_variance};
use crate::features::{build_design_matrix, UserVector};
use crate::glm::{fit_irls, wald_stats, FitOptions};
use crate::schema::TaskSchema;
use crate::special::student_t_two_sided_p;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTestMode {
    #[default]
    Pooled,
    Welch,
}

impl std::str::FromStr for TTestMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "welch" => Ok(Self::Welch),
            other => Err(Error::invalid(format!(
                "unknown t-test mode `{other}` (pooled|welch)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// Both groups had zero variance.
    pub degenerate: bool,
}

/// Student statistic with pooled variance and `n_a + n_b - 2` df.
pub fn pooled_t(mean_a: f64, var_a: f64, n_a: usize, mean_b: f64, var_b: f64, n_b: usize) -> (f64, f64) {
    let (na, nb) = (n_a as f64, n_b as f64);
    let df = na + nb - 2.0;
    let pooled = ((na - 1.0) * var_a + (nb - 1.0) * var_b) / df;
    let t = (mean_a - mean_b) / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    (t, df)
}

/// Welch statistic with Welch–Satterthwaite df.
pub fn welch_t(mean_a: f64, var_a: f64, n_a: usize, mean_b: f64, var_b: f64, n_b: usize) -> (f64, f64) {
    let (na, nb) = (n_a as f64, n_b as f64);
    let (ua, ub) = (var_a / na, var_b / nb);
    let t = (mean_a - mean_b) / (ua + ub).sqrt();
    let df = (ua + ub).powi(2) / (ua * ua / (na - 1.0) + ub * ub / (nb - 1.0));
    (t, df)
}

/// Two-sided two-sample t-test of `pos` against `neg`.
pub fn group_ttest(pos: &[f64], neg: &[f64], mode: TTestMode) -> Result<TTest> {
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::invalid(format!(
            "t-test groups need at least 2 values each, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "t-test input".into(),
        });
    }
    let (ma, mb) = (mean(pos), mean(neg));
    let (va, vb) = (sample_variance(pos), sample_variance(neg));
    if va == 0.0 && vb == 0.0 {
        let df = (pos.len() + neg.len() - 2) as f64;
        return Ok(if ma == mb {
            TTest {
                t: 0.0,
                df,
                p: 1.0,
                degenerate: true,
            }
        } else {
            TTest {
                t: (ma - mb).signum() * f64::INFINITY,
                df,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let (t, df) = match mode {
        TTestMode::Pooled => pooled_t(ma, va, pos.len(), mb, vb, neg.len()),
        TTestMode::Welch => welch_t(ma, va, pos.len(), mb, vb, neg.len()),
    };
    let p = if t == 0.0 {
        1.0
    } else {
        student_t_two_sided_p(t, df)
    };
    Ok(TTest {
        t,
        df,
        p,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub feature_id: String,
    pub mean_pos: f64,
    pub sd_pos: f64,
    pub n_pos: usize,
    pub mean_neg: f64,
    pub sd_neg: f64,
    pub n_neg: usize,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub degenerate: bool,
    pub significant_fdr: bool,
}

/// One t-test per column, positives against the rest, in column order.
pub fn compare_groups(
    users: &[UserVector],
    column_ids: &[String],
    mode: TTestMode,
) -> Result<Vec<GroupComparison>> {
    let design = build_design_matrix(users, column_ids)?;
    let pos_rows: Vec<usize> = (0..users.len()).filter(|&i| design.y[i]).collect();
    let neg_rows: Vec<usize> = (0..users.len()).filter(|&i| !design.y[i]).collect();
    column_ids
        .iter()
        .enumerate()
        .map(|(j, id)| {
            let pos: Vec<f64> = pos_rows.iter().map(|&i| design.x[(i, j)]).collect();
            let neg: Vec<f64> = neg_rows.iter().map(|&i| design.x[(i, j)]).collect();
            let test = group_ttest(&pos, &neg, mode)?;
            Ok(GroupComparison {
                feature_id: id.clone(),
                mean_pos: mean(&pos),
                sd_pos: sample_variance(&pos).sqrt(),
                n_pos: pos.len(),
                mean_neg: mean(&neg),
                sd_neg: sample_variance(&neg).sqrt(),
                n_neg: neg.len(),
                t: test.t,
                df: test.df,
                p: test.p,
                degenerate: test.degenerate,
                significant_fdr: false,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub alpha: f64,
    pub m: usize,
    pub rejected: Vec<bool>,
    pub n_rejected: usize,
    /// BH-adjusted p-values, in input order.
    pub q_values: Vec<f64>,
}

/// Benjamini–Hochberg step-up: with `p_(1) ≤ … ≤ p_(m)` (stable order),
/// reject the `k` smallest for the largest `k` with `p_(k) ≤ k·α/m`.
pub fn bh_fdr(p_values: &[f64], alpha: f64) -> Result<FdrResult> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("p-value {p} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("FDR level {alpha} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));

    let mut k_max = 0;
    if alpha > 0.0 {
        for (rank, &i) in order.iter().enumerate() {
            if p_values[i] <= (rank + 1) as f64 * alpha / m as f64 {
                k_max = rank + 1;
            }
        }
    }
    let mut rejected = vec![false; m];
    for &i in &order[..k_max] {
        rejected[i] = true;
    }

    let mut q_values = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p_values[i] * m as f64 / (rank + 1) as f64);
        q_values[i] = running;
    }
    Ok(FdrResult {
        alpha,
        m,
        rejected,
        n_rejected: k_max,
        q_values,
    })
}

/// Marks `significant_fdr` on every comparison.
pub fn apply_fdr(comparisons: &mut [GroupComparison], alpha: f64) -> Result<FdrResult> {
    let p: Vec<f64> = comparisons.iter().map(|c| c.p).collect();
    let fdr = bh_fdr(&p, alpha)?;
    for (c, &r) in comparisons.iter_mut().zip(&fdr.rejected) {
        c.significant_fdr = r;
    }
    Ok(fdr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub kept: Vec<GroupComparison>,
    pub dropped: Vec<String>,
}

/// Drops the non-primary query of every two-query task. Features of larger
/// tasks, or not in the schema, are kept.
pub fn prune_complements(comparisons: &[GroupComparison], schema: &TaskSchema) -> PruneResult {
    let secondary: Vec<&str> = schema
        .clusters
        .iter()
        .flat_map(|c| c.tasks.iter())
        .filter(|t| t.len() == 2)
        .flat_map(|t| t.queries.iter().filter(|q| !q.report_primary))
        .map(|q| q.id.as_str())
        .collect();
    let (kept, dropped): (Vec<_>, Vec<_>) = comparisons
        .iter()
        .cloned()
        .partition(|c| !secondary.contains(&c.feature_id.as_str()));
    PruneResult {
        kept,
        dropped: dropped.into_iter().map(|c| c.feature_id).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub feature_id: String,
    pub beta: f64,
    pub std_error: f64,
    pub wald_chi2: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTable {
    pub intercept: RegressionRow,
    pub rows: Vec<RegressionRow>,
    pub n: usize,
    pub log_likelihood: f64,
    pub iterations: usize,
}

/// Unpenalized logistic regression of the label on the selected columns.
pub fn full_sample_regression(
    users: &[UserVector],
    column_ids: &[String],
    selected: &[String],
) -> Result<RegressionTable> {
    if selected.len() < 2 {
        return Err(Error::invalid(format!(
            "regression needs at least 2 selected features, got {}",
            selected.len()
        )));
    }
    let idx = selected
        .iter()
        .map(|id| {
            column_ids
                .iter()
                .position(|c| c == id)
                .ok_or_else(|| Error::invalid(format!("selected feature `{id}` is not a column")))
        })
        .collect::<Result<Vec<_>>>()?;
    let full = build_design_matrix(users, column_ids)?;
    let x = full.x.select_columns(&idx);
    let model = fit_irls(&x, &full.y, selected, &FitOptions::default())?;
    if !model.fit.converged {
        return Err(Error::NotConverged {
            separation: model.fit.separation_detected,
        });
    }
    let model = model.with_standard_errors(&x)?;
    let wald = wald_stats(&model)?;
    let row = |id: &str, w: &crate::glm::WaldStat| RegressionRow {
        feature_id: id.to_string(),
        beta: w.estimate,
        std_error: w.std_error,
        wald_chi2: w.wald_chi2,
        p: w.p_value,
    };
    Ok(RegressionTable {
        intercept: row("(intercept)", &wald[0]),
        rows: selected
            .iter()
            .zip(&wald[1..])
            .map(|(id, w)| row(id, w))
            .collect(),
        n: users.len(),
        log_likelihood: model.fit.log_likelihood,
        iterations: model.fit.iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub mode: TTestMode,
    pub comparisons: Vec<GroupComparison>,
    pub fdr: FdrResult,
    pub pruned: PruneResult,
    pub regression: Option<RegressionTable>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

/// t-tests on every column, FDR over all of them, complement pruning, then
/// a regression on the significant survivors.
pub fn run_stats(
    users: &[UserVector],
    column_ids: &[String],
    schema: &TaskSchema,
    mode: TTestMode,
    alpha: f64,
) -> Result<StatsReport> {
    let mut comparisons = compare_groups(users, column_ids, mode)?;
    let fdr = apply_fdr(&mut comparisons, alpha)?;
    let pruned = prune_complements(&comparisons, schema);
    let selected: Vec<String> = pruned
        .kept
        .iter()
        .filter(|c| c.significant_fdr)
        .map(|c| c.feature_id.clone())
        .collect();
    let mut notes = Vec::new();
    let regression = if selected.len() >= 2 {
        Some(full_sample_regression(users, column_ids, &selected)?)
    } else {
        notes.push(format!(
            "regression skipped: {} significant feature(s) after pruning, need 2",
            selected.len()
        ));
        None
    };
    Ok(StatsReport {
        mode,
        comparisons,
        fdr,
        pruned,
        regression,
        notes,
    })
}

pub const TABLE_HEADER: &str =
    "feature_id,mean_pos,sd_pos,mean_neg,sd_neg,t,p,fdr_significant,beta,se,wald,p_wald";

/// One row per retained feature; regression columns are empty for features
/// outside the regression.
pub fn table_csv(report: &StatsReport) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for c in &report.pruned.kept {
        let _ = write!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            c.feature_id, c.mean_pos, c.sd_pos, c.mean_neg, c.sd_neg, c.t, c.p, c.significant_fdr
        );
        match report
            .regression
            .as_ref()
            .and_then(|r| r.rows.iter().find(|row| row.feature_id == c.feature_id))
        {
            Some(r) => {
                let _ = writeln!(s, ",{:?},{:?},{:?},{:?}", r.beta, r.std_error, r.wald_chi2, r.p);
            }
            None => s.push_str(",,,,\n"),
        }
    }
    s
}

pub fn write_table(path: &Path, report: &StatsReport) -> Result<()> {
    std::fs::write(path, table_csv(report)).map_err(|e| Error::io(path, e))
}
