//! Generate → fit → score loop over simulation replicates.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate, SimReplicate, SimScenario};
use crate::fit::{optimize_outer, starting_nuisance, FitResult, OptimizerOptions, PenalizedSystem, SmoothingState};
use crate::inference::{coverage, eta_intervals, pointwise_ci, rimse, rrimse, term_contribution};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessOptions {
    /// Nominal level of the pointwise intervals.
    pub level: f64,
    pub optimizer: OptimizerOptions,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        Self { level: 0.95, optimizer: OptimizerOptions::default() }
    }
}

/// rRIMSE and coverage of one estimated quantity; NaN where undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub label: String,
    pub rrimse: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateScore {
    pub replicate: usize,
    pub seed: u64,
    pub rrimse_eta: f64,
    pub rimse_eta: f64,
    pub coverage_eta: f64,
    /// Term contributions at the observations.
    pub effects: Vec<Score>,
    /// Effects on the generator's evaluation grids (e.g. β(s, t)).
    pub surfaces: Vec<Score>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub nuisance: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

impl ReplicateScore {
    fn failed(replicate: usize, seed: u64, seconds: f64, e: &Error) -> Self {
        Self {
            replicate,
            seed,
            rrimse_eta: f64::NAN,
            rimse_eta: f64::NAN,
            coverage_eta: f64::NAN,
            effects: Vec::new(),
            surfaces: Vec::new(),
            converged: false,
            outer_iterations: 0,
            nuisance: f64::NAN,
            seconds,
            error: Some(e.to_string()),
        }
    }

    pub fn effect(&self, label: &str) -> Option<&Score> {
        self.effects.iter().find(|s| s.label == label)
    }

    pub fn surface(&self, label: &str) -> Option<&Score> {
        self.surfaces.iter().find(|s| s.label == label)
    }
}

/// Fits the scenario's model to a generated replicate with data-based starting values.
pub fn fit_replicate(rep: &SimReplicate, opts: &OptimizerOptions) -> Result<(PenalizedSystem, FitResult)> {
    let (terms, family) = rep.scenario.model()?;
    let family = family.with_nuisance(starting_nuisance(&family, &rep.dataset.y));
    let system = PenalizedSystem::from_data(&rep.dataset, &terms, family)?;
    let fit = optimize_outer(&system, &SmoothingState::initial(&system), opts)?;
    Ok((system, fit))
}

/// Scores of one fit against its replicate's truths.
#[derive(Debug, Clone, PartialEq)]
pub struct FitScores {
    pub rrimse_eta: f64,
    pub rimse_eta: f64,
    pub coverage_eta: f64,
    pub effects: Vec<Score>,
    pub surfaces: Vec<Score>,
}

/// Scores a fit against the replicate's truths.
pub fn score_fit(rep: &SimReplicate, system: &PenalizedSystem, fit: &FitResult, level: f64) -> Result<FitScores> {
    let (n, m) = rep.eta.shape();
    let eta_hat = DMatrix::from_row_slice(n, m, fit.eta.as_slice());
    let truth: Vec<f64> = rep.eta.transpose().iter().copied().collect();
    let iv = eta_intervals(fit, system, level)?;
    let rr = rrimse(&eta_hat, &rep.eta, 1.0)?;
    let ri = rimse(&eta_hat, &rep.eta, 1.0)?;
    let cov = coverage(&iv.lower, &iv.upper, &truth)?;
    let mut effects = Vec::new();
    for term in &rep.terms {
        if system.design.block(&term.label).is_err() {
            continue;
        }
        let ci = term_contribution(fit, system, &term.label, level)?;
        let est = DMatrix::from_row_slice(n, m, &ci.estimate);
        let t: Vec<f64> = term.values.transpose().iter().copied().collect();
        effects.push(Score {
            label: term.label.clone(),
            rrimse: rrimse(&est, &term.values, 1.0).unwrap_or(f64::NAN),
            coverage: coverage(&ci.lower, &ci.upper, &t)?,
        });
    }
    let mut surfaces = Vec::new();
    for s in &rep.surfaces {
        if system.design.block(&s.label).is_err() {
            continue;
        }
        let est = pointwise_ci(fit, system, &s.label, &s.coords, &s.t, level)?;
        let truth: Vec<f64> = s.values.transpose().iter().copied().collect();
        surfaces.push(Score {
            label: s.label.clone(),
            rrimse: rrimse(&est.estimate_matrix(), &s.values, 1.0).unwrap_or(f64::NAN),
            coverage: coverage(&est.lower, &est.upper, &truth)?,
        });
    }
    Ok(FitScores { rrimse_eta: rr, rimse_eta: ri, coverage_eta: cov, effects, surfaces })
}

/// One replicate; failures are recorded in the score rather than returned.
pub fn run_replicate(scenario: &SimScenario, replicate: usize, opts: &HarnessOptions) -> ReplicateScore {
    let seed = scenario.seed + replicate as u64;
    let start = Instant::now();
    let outcome = (|| {
        let rep = generate(&scenario.with_seed(seed))?;
        let (system, fit) = fit_replicate(&rep, &opts.optimizer)?;
        let scored = score_fit(&rep, &system, &fit, opts.level)?;
        Ok::<_, Error>((fit, scored))
    })();
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok((fit, scores)) => ReplicateScore {
            replicate,
            seed,
            rrimse_eta: scores.rrimse_eta,
            rimse_eta: scores.rimse_eta,
            coverage_eta: scores.coverage_eta,
            effects: scores.effects,
            surfaces: scores.surfaces,
            converged: fit.diagnostics.converged,
            outer_iterations: fit.diagnostics.outer_iterations,
            nuisance: if fit.family.has_free_nuisance() { fit.family.nuisance } else { f64::NAN },
            seconds,
            error: None,
        },
        Err(e) => ReplicateScore::failed(replicate, seed, seconds, &e),
    }
}

/// Replicates `0..replicates` with seeds `scenario.seed + r`, run in parallel.
pub fn run_study(scenario: &SimScenario, replicates: usize, opts: &HarnessOptions) -> Vec<ReplicateScore> {
    (0..replicates).into_par_iter().map(|r| run_replicate(scenario, r, opts)).collect()
}

/// Median and quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    /// Number of finite values summarized.
    pub count: usize,
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: impl IntoIterator<Item = f64>) -> Summary {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    Summary { median: quantile(&v, 0.5), q25: quantile(&v, 0.25), q75: quantile(&v, 0.75), count: v.len() }
}
