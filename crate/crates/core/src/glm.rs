//! Binary logistic regression by Newton–IRLS.
//!
//! The fit maximizes the penalized log-likelihood
//!
//! ```text
//! ℓ(b0, β) = Σ [ yᵢ ηᵢ − log(1 + exp ηᵢ) ] − (λ/2) ‖β‖²,   ηᵢ = b0 + xᵢ·β
//! ```
//!
//! with the intercept `b0` never penalized. Each Newton step is followed by
//! step halving (up to 30 halvings) until the objective does not decrease
//! by more than rounding noise, so the accepted sequence is monotone.
//!
//! A fit is reported converged when the gradient ∞-norm is below `tol` *and*
//! the Newton step is small relative to the coefficients. The second
//! condition matters under separation: there the gradient vanishes while
//! the coefficients keep growing by O(1) per step. Unpenalized fits whose
//! linear predictor leaves |η| ≤ 30 are stopped and flagged as separated.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::chi2_1_sf;

/// Equilibrated condition numbers above this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

const MAX_HALVINGS: usize = 30;
const SEPARATION_ETA: f64 = 30.0;
/// Relative objective change treated as rounding noise by the line search.
pub const ROUNDING_SLACK: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub l2_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// z-score columns before fitting; coefficients are then on the
    /// standardized scale.
    pub standardize: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            l2_lambda: 0.0,
            max_iter: 100,
            tol: 1e-8,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    /// Unpenalized log-likelihood at the returned coefficients.
    pub log_likelihood: f64,
    pub separation_detected: bool,
    /// Penalized objective at the start and after every accepted step.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub advisory: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub column_ids: Vec<String>,
    pub l2_lambda: f64,
    /// Intercept first, then one per coefficient.
    pub standard_errors: Option<Vec<f64>>,
    pub fit: FitDiagnostics,
    pub scaling: Option<ColumnScaling>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldStat {
    pub estimate: f64,
    pub std_error: f64,
    pub wald_chi2: f64,
    pub p_value: f64,
}

/// Numerically stable `log(1 + exp(x))`.
fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Design with a leading column of ones.
fn augmented(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut xa = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    xa.columns_mut(1, x.ncols()).copy_from(x);
    xa
}

fn targets(y: &[bool]) -> DVector<f64> {
    DVector::from_iterator(y.len(), y.iter().map(|&b| f64::from(u8::from(b))))
}

/// Penalized log-likelihood at `params = (b0, β)` for an augmented design.
fn objective(xa: &DMatrix<f64>, y: &DVector<f64>, params: &DVector<f64>, lambda: f64) -> f64 {
    let eta = xa * params;
    let ll: f64 = eta
        .iter()
        .zip(y.iter())
        .map(|(&e, &t)| t * e - log1p_exp(e))
        .sum();
    ll - 0.5 * lambda * params.rows(1, params.len() - 1).norm_squared()
}

fn gradient(xa: &DMatrix<f64>, y: &DVector<f64>, params: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let eta = xa * params;
    let resid = DVector::from_iterator(y.len(), y.iter().zip(eta.iter()).map(|(&t, &e)| t - sigmoid(e)));
    let mut g = xa.tr_mul(&resid);
    for j in 1..g.len() {
        g[j] -= lambda * params[j];
    }
    g
}

/// Penalized log-likelihood for a raw (non-augmented) design.
pub fn penalized_log_likelihood(
    x: &DMatrix<f64>,
    y: &[bool],
    intercept: f64,
    beta: &[f64],
    lambda: f64,
) -> f64 {
    let params = DVector::from_iterator(
        beta.len() + 1,
        std::iter::once(intercept).chain(beta.iter().copied()),
    );
    objective(&augmented(x), &targets(y), &params, lambda)
}

/// Analytic gradient of [`penalized_log_likelihood`], intercept first.
pub fn penalized_gradient(
    x: &DMatrix<f64>,
    y: &[bool],
    intercept: f64,
    beta: &[f64],
    lambda: f64,
) -> Vec<f64> {
    let params = DVector::from_iterator(
        beta.len() + 1,
        std::iter::once(intercept).chain(beta.iter().copied()),
    );
    gradient(&augmented(x), &targets(y), &params, lambda)
        .iter()
        .copied()
        .collect()
}

/// `Xᵀ diag(w) X`.
fn weighted_gram(xa: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = xa.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w[i];
    }
    xa.tr_mul(&scaled)
}

/// Ratio of extreme eigenvalues after scaling to unit diagonal. Infinite
/// when a diagonal entry or the smallest eigenvalue is not positive.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 1.0;
    }
    let diag: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    if diag.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return f64::INFINITY;
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| m[(i, j)] / (diag[i] * diag[j]).sqrt());
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        f64::INFINITY
    } else {
        max / min
    }
}

fn scale_columns(x: &DMatrix<f64>, scaling: &ColumnScaling) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        (x[(i, j)] - scaling.means[j]) / scaling.sds[j]
    })
}

fn column_scaling(x: &DMatrix<f64>) -> ColumnScaling {
    let n = x.nrows() as f64;
    let (means, sds) = x
        .column_iter()
        .map(|c| {
            let m = c.sum() / n;
            let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0);
            let sd = var.sqrt();
            (m, if sd > 0.0 { sd } else { 1.0 })
        })
        .unzip();
    ColumnScaling { means, sds }
}

fn validate_inputs(x: &DMatrix<f64>, y: &[bool], column_ids: &[String], opts: &FitOptions) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "design rows vs outcomes".into(),
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if column_ids.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            context: "column ids".into(),
            expected: x.ncols(),
            found: column_ids.len(),
        });
    }
    if y.len() < 2 {
        return Err(Error::invalid(
            "logistic regression needs at least 2 observations",
        ));
    }
    if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
        return Err(Error::SingleClass("training outcomes".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "design matrix".into(),
        });
    }
    if !(opts.l2_lambda >= 0.0 && opts.l2_lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "l2 lambda must be >= 0, got {}",
            opts.l2_lambda
        )));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::invalid("tol must be positive and max_iter at least 1"));
    }
    Ok(())
}

/// Fits by Newton–IRLS. Under separation at λ = 0 the returned model is not
/// converged and has `separation_detected` set.
pub fn fit_irls(
    x: &DMatrix<f64>,
    y: &[bool],
    column_ids: &[String],
    opts: &FitOptions,
) -> Result<LogisticModel> {
    validate_inputs(x, y, column_ids, opts)?;
    let scaling = opts.standardize.then(|| column_scaling(x));
    let xa = match &scaling {
        Some(s) => augmented(&scale_columns(x, s)),
        None => augmented(x),
    };
    let t = targets(y);
    let lambda = opts.l2_lambda;
    let k = xa.ncols();

    if lambda == 0.0 {
        let cond = condition_estimate(&xa.tr_mul(&xa));
        if cond > SINGULAR_CONDITION {
            return Err(Error::Singular { condition: cond });
        }
    }

    let ybar = t.mean();
    let mut params = DVector::zeros(k);
    params[0] = (ybar / (1.0 - ybar)).ln();
    let mut obj = objective(&xa, &t, &params, lambda);
    if !obj.is_finite() {
        return Err(Error::Numerical("non-finite initial likelihood".into()));
    }
    let mut trace = vec![obj];
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;
    let mut advisory = None;
    let mut grad = gradient(&xa, &t, &params, lambda);

    while iterations < opts.max_iter {
        let eta = &xa * &params;
        if lambda == 0.0 && eta.amax() > SEPARATION_ETA {
            separated = true;
            break;
        }
        let w = DVector::from_iterator(
            eta.len(),
            eta.iter().map(|&e| {
                let p = sigmoid(e);
                p * (1.0 - p)
            }),
        );
        let mut hess = weighted_gram(&xa, &w);
        for j in 1..k {
            hess[(j, j)] += lambda;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None if lambda == 0.0 && w.min() < 1e-10 => {
                separated = true;
                break;
            }
            None => {
                return Err(Error::Singular {
                    condition: condition_estimate(&hess),
                })
            }
        };
        let gnorm = grad.amax();
        if gnorm <= opts.tol && step.amax() <= 1e-3 * params.amax().max(1.0) {
            converged = true;
            break;
        }

        // Near the optimum the objective is flat to rounding; a change
        // below `slack` is not evidence of a worse point.
        let slack = ROUNDING_SLACK * obj.abs().max(1.0);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &params + &step * scale;
            let cand_obj = objective(&xa, &t, &cand, lambda);
            if cand_obj.is_finite() && cand_obj >= obj - slack {
                accepted = Some((cand, cand_obj));
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((cand, cand_obj)) if cand != params => {
                params = cand;
                obj = cand_obj;
                trace.push(obj);
                grad = gradient(&xa, &t, &params, lambda);
            }
            _ => {
                // no ascent possible along the Newton direction
                converged = gnorm <= opts.tol;
                if !converged {
                    advisory = Some("line search stalled before the gradient tolerance was met".into());
                }
                break;
            }
        }
        if grad.amax() <= opts.tol && lambda > 0.0 {
            converged = true;
            break;
        }
    }

    if !converged && !separated && lambda == 0.0 && (&xa * &params).amax() > 0.5 * SEPARATION_ETA {
        separated = true;
    }
    if separated {
        advisory = Some(
            "fitted probabilities reached 0 or 1: the outcome is (quasi-)separable; \
             coefficients diverge, use a ridge penalty"
                .into(),
        );
    } else if !converged && advisory.is_none() {
        advisory = Some(format!("stopped after {} iterations", opts.max_iter));
    }

    if !params.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite coefficients".into()));
    }
    let unpenalized = objective(&xa, &t, &params, 0.0);
    if !unpenalized.is_finite() {
        return Err(Error::Numerical("non-finite likelihood".into()));
    }
    let fit = FitDiagnostics {
        converged,
        iterations,
        final_gradient_norm: grad.amax(),
        log_likelihood: unpenalized,
        separation_detected: separated,
        objective_trace: trace,
        advisory,
    };
    Ok(LogisticModel {
        intercept: params[0],
        coefficients: params.iter().skip(1).copied().collect(),
        column_ids: column_ids.to_vec(),
        l2_lambda: lambda,
        standard_errors: None,
        fit,
        scaling,
    })
}

impl LogisticModel {
    fn prepared(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.coefficients.len() {
            return Err(Error::DimensionMismatch {
                context: "model columns".into(),
                expected: self.coefficients.len(),
                found: x.ncols(),
            });
        }
        Ok(match &self.scaling {
            Some(s) => scale_columns(x, s),
            None => x.clone(),
        })
    }

    /// Linear predictor `b0 + xᵢ·β`.
    pub fn decision_function(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let z = self.prepared(x)?;
        let beta = DVector::from_column_slice(&self.coefficients);
        Ok((z * beta).iter().map(|e| e + self.intercept).collect())
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.decision_function(x)?.into_iter().map(sigmoid).collect())
    }

    pub fn with_standard_errors(mut self, x: &DMatrix<f64>) -> Result<Self> {
        self.standard_errors = Some(standard_errors(&self, x)?);
        Ok(self)
    }

    pub fn dump(&self) -> ModelDump {
        let se = self.standard_errors.as_deref();
        ModelDump {
            intercept: self.intercept,
            intercept_se: se.map(|s| s[0]),
            l2_lambda: self.l2_lambda,
            standardized: self.scaling.is_some(),
            coefficients: self
                .column_ids
                .iter()
                .zip(&self.coefficients)
                .enumerate()
                .map(|(j, (id, &beta))| CoefficientDump {
                    id: id.clone(),
                    beta,
                    se: se.map(|s| s[j + 1]),
                })
                .collect(),
            diagnostics: self.fit.clone(),
        }
    }
}

pub fn predict_proba(model: &LogisticModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    model.predict_proba(x)
}

/// Square roots of the diagonal of the inverse Fisher information at the
/// fitted probabilities. Intercept first.
pub fn standard_errors(model: &LogisticModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if model.l2_lambda != 0.0 {
        return Err(Error::PenalizedFit {
            lambda: model.l2_lambda,
        });
    }
    if !model.fit.converged {
        return Err(Error::NotConverged {
            separation: model.fit.separation_detected,
        });
    }
    let xa = augmented(&model.prepared(x)?);
    let eta = model.decision_function(x)?;
    let w = DVector::from_iterator(
        eta.len(),
        eta.iter().map(|&e| {
            let p = sigmoid(e);
            p * (1.0 - p)
        }),
    );
    let info = weighted_gram(&xa, &w);
    let cond = condition_estimate(&info);
    if cond > SINGULAR_CONDITION {
        return Err(Error::Singular { condition: cond });
    }
    let inv = info
        .cholesky()
        .ok_or(Error::Singular { condition: cond })?
        .inverse();
    Ok((0..inv.nrows()).map(|j| inv[(j, j)].sqrt()).collect())
}

/// Wald χ² and 1-df p-values, intercept first.
pub fn wald_stats(model: &LogisticModel) -> Result<Vec<WaldStat>> {
    let se = model
        .standard_errors
        .as_ref()
        .ok_or_else(|| Error::invalid("standard errors have not been computed"))?;
    Ok(std::iter::once(model.intercept)
        .chain(model.coefficients.iter().copied())
        .zip(se)
        .map(|(b, &s)| wald_stat(b, s))
        .collect())
}

pub fn wald_stat(estimate: f64, std_error: f64) -> WaldStat {
    let z = estimate / std_error;
    let wald = z * z;
    WaldStat {
        estimate,
        std_error,
        wald_chi2: wald,
        p_value: chi2_1_sf(wald),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientDump {
    pub id: String,
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
}

/// Stable-order serialization of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub intercept: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intercept_se: Option<f64>,
    pub l2_lambda: f64,
    pub standardized: bool,
    pub coefficients: Vec<CoefficientDump>,
    pub diagnostics: FitDiagnostics,
}
