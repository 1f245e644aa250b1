//! Prediction, pointwise intervals and evaluation metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::{row_tensor, Design, FunctionalDataset, TermState};
use crate::family::Family;
use crate::fit::{FitResult, PenalizedSystem};
use crate::linalg::SparseRows;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Link,
    Response,
}

/// Estimate of one term on a Cartesian grid of covariate coordinates × t,
/// stored with t varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEstimate {
    pub label: String,
    pub coords: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub level: f64,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl TermEstimate {
    /// Estimates as a `coords × t` matrix.
    pub fn estimate_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.coords.len(), self.t.len(), &self.estimate)
    }
}

/// Point estimates with pointwise bounds, one entry per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervals {
    pub level: f64,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Two-sided standard normal quantile `z_{1−α/2}` for `level = 1 − α`.
pub fn z_multiplier(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain { value: level, lower: 0.0, upper: 1.0 });
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + 0.5 * level))
}

fn bounds(estimate: Vec<f64>, var: &[f64], level: f64) -> Result<Intervals> {
    let z = z_multiplier(level)?;
    let se: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
    let lower = estimate.iter().zip(&se).map(|(e, s)| e - z * s).collect();
    let upper = estimate.iter().zip(&se).map(|(e, s)| e + z * s).collect();
    Ok(Intervals { level, estimate, se, lower, upper })
}

/// Linear predictor or mean for new data under the fitted term states.
///
/// Grouping levels absent from training contribute zero.
pub fn predict(fit: &FitResult, system: &PenalizedSystem, newdata: &FunctionalDataset, scale: Scale) -> Result<Vec<f64>> {
    predict_from_states(&system.design.states(), &fit.theta, &fit.family, newdata, scale)
}

/// [`predict`] from stored term states and coefficients, e.g. a fit read back from disk.
pub fn predict_from_states(
    states: &[TermState],
    theta: &DVector<f64>,
    family: &Family,
    newdata: &FunctionalDataset,
    scale: Scale,
) -> Result<Vec<f64>> {
    let design = Design::rebuild(states, newdata).map_err(|e| match e {
        Error::Data(m) | Error::Shape(m) => Error::Specification(format!("new data does not fit the model: {m}")),
        other => other,
    })?;
    let x = SparseRows::from_dense(&design.full_matrix());
    if x.ncols() != theta.len() {
        return Err(Error::Specification(format!(
            "new data produce {} coefficients, the fit has {}",
            x.ncols(),
            theta.len()
        )));
    }
    let eta = x.mul_vec(theta);
    Ok(match scale {
        Scale::Link => eta.iter().copied().collect(),
        Scale::Response => eta.iter().map(|&e| family.mean(e)).collect(),
    })
}

/// Pointwise intervals of η at the training observations.
pub fn eta_intervals(fit: &FitResult, system: &PenalizedSystem, level: f64) -> Result<Intervals> {
    let var = system.x.row_quadratic_forms(&fit.v);
    bounds(fit.eta.iter().copied().collect(), &var, level)
}

/// Pointwise intervals of one term's contribution at the training observations.
pub fn term_contribution(fit: &FitResult, system: &PenalizedSystem, label: &str, level: f64) -> Result<Intervals> {
    let (offset, block) = system.design.block(label)?;
    let k = block.dim();
    let theta = fit.theta.rows(offset, k);
    let v = fit.v.view((offset, offset), (k, k)).into_owned();
    let phi = SparseRows::from_dense(&block.phi);
    let estimate = phi.mul_vec(&theta.into_owned()).iter().copied().collect();
    bounds(estimate, &phi.row_quadratic_forms(&v), level)
}

/// Term estimate with pointwise intervals on `coords × t`.
///
/// The standard error at a grid point is `sqrt(φᵀ V_rr φ)` with `V_rr` the
/// term's block of the posterior covariance.
pub fn pointwise_ci(
    fit: &FitResult,
    system: &PenalizedSystem,
    label: &str,
    coords: &[Vec<f64>],
    t: &[f64],
    level: f64,
) -> Result<TermEstimate> {
    let (offset, block) = system.design.block(label)?;
    let k = block.dim();
    let bx = block.x_rows_at(coords)?;
    let bt = block.t_rows_at(t)?;
    let (m, q) = (coords.len(), t.len());
    let xs = DMatrix::from_fn(m * q, bx.ncols(), |r, c| bx[(r / q, c)]);
    let ts = DMatrix::from_fn(m * q, bt.ncols(), |r, c| bt[(r % q, c)]);
    let phi = row_tensor(&xs, &ts)?;
    if phi.ncols() != k {
        return Err(Error::Shape(format!("grid basis has {} columns, term {label} has {k}", phi.ncols())));
    }
    let theta = fit.theta.rows(offset, k);
    let v = fit.v.view((offset, offset), (k, k));
    let estimate: Vec<f64> = (&phi * theta).iter().copied().collect();
    let pv = &phi * v;
    let var: Vec<f64> = (0..m * q).map(|r| pv.row(r).dot(&phi.row(r))).collect();
    let iv = bounds(estimate, &var, level)?;
    Ok(TermEstimate {
        label: label.to_string(),
        coords: coords.to_vec(),
        t: t.to_vec(),
        level,
        estimate: iv.estimate,
        se: iv.se,
        lower: iv.lower,
        upper: iv.upper,
    })
}

fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("estimate is {:?}, truth is {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::Metric("empty evaluation grid".into()));
    }
    Ok(())
}

/// Sample standard deviation of each row.
fn row_sd(m: &DMatrix<f64>) -> Vec<f64> {
    let q = m.ncols() as f64;
    m.row_iter()
        .map(|r| {
            let mean = r.sum() / q;
            (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (q - 1.0)).sqrt()
        })
        .collect()
}

/// Relative root integrated mean squared error over curves (rows) × t (columns):
/// squared errors on each row are scaled by that row's variance of the truth.
pub fn rrimse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>, domain_length: f64) -> Result<f64> {
    check_same_shape(estimate, truth)?;
    if truth.ncols() < 2 {
        return Err(Error::Metric("need at least two t points per curve".into()));
    }
    let sd = row_sd(truth);
    let mut acc = 0.0;
    for (i, s) in sd.iter().enumerate() {
        if !(*s > 0.0) {
            return Err(Error::Metric(format!("truth is constant over t on curve {i}")));
        }
        let sse: f64 = (0..truth.ncols()).map(|l| (estimate[(i, l)] - truth[(i, l)]).powi(2)).sum();
        acc += sse / (s * s);
    }
    Ok((domain_length * acc / truth.len() as f64).sqrt())
}

/// Root integrated mean squared error without the per-curve scaling.
pub fn rimse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>, domain_length: f64) -> Result<f64> {
    check_same_shape(estimate, truth)?;
    let sse: f64 = estimate.iter().zip(truth.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((domain_length * sse / truth.len() as f64).sqrt())
}

/// Fraction of points whose truth lies inside `[lower, upper]`.
pub fn coverage(lower: &[f64], upper: &[f64], truth: &[f64]) -> Result<f64> {
    if lower.len() != truth.len() || upper.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} lower, {} upper bounds for {} truths",
            lower.len(),
            upper.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Metric("coverage of an empty grid".into()));
    }
    let hits = truth.iter().zip(lower.iter().zip(upper)).filter(|(t, (l, u))| *l <= *t && *t <= *u).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean squared difference between observed proportions and predicted probabilities.
pub fn brier(y: &[f64], trials: &[f64], prob: &[f64]) -> Result<f64> {
    if y.len() != trials.len() || y.len() != prob.len() {
        return Err(Error::Shape(format!("{} counts, {} trials, {} probabilities", y.len(), trials.len(), prob.len())));
    }
    if y.is_empty() {
        return Err(Error::Metric("Brier score of no observations".into()));
    }
    if let Some(m) = trials.iter().find(|m| !(**m > 0.0)) {
        return Err(Error::Domain { value: *m, lower: 0.0, upper: f64::INFINITY });
    }
    if let Some(p) = prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain { value: *p, lower: 0.0, upper: 1.0 });
    }
    let sum: f64 = y.iter().zip(trials).zip(prob).map(|((y, m), p)| (y / m - p).powi(2)).sum();
    Ok(sum / y.len() as f64)
}
