//! `gfamm fit`: fit a model from files and write the result.

use std::path::{Path, PathBuf};

use gfamm::design::{Design, DesignBlock, TermKind, TermState};
use gfamm::family::Family;
use gfamm::fit::{optimize_outer, FitDiagnostics, FitResult, PenalizedSystem, SmoothingState};
use gfamm::inference::pointwise_ci;
use serde::{Deserialize, Serialize};

use crate::config::{DataBindings, ModelConfig};
use crate::error::{CliError, Result};
use crate::io::{create_dir, fmt_float, read_json, read_long, resolve, write_csv, write_json};

pub const FIT_SCHEMA: &str = "gfamm-fit/1";

/// Points per axis of the default estimate grids.
const T_POINTS: usize = 50;
const X_POINTS: usize = 20;
const PAIR_POINTS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEdf {
    pub label: String,
    pub edf: f64,
}

/// Serialized fit: everything `predict` and `report` need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDocument {
    pub schema: String,
    /// Family with the estimated nuisance value.
    pub family: Family,
    pub terms: Vec<TermState>,
    /// Bindings with functional covariate paths made absolute.
    pub data: DataBindings,
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lambda_labels: Vec<String>,
    /// Estimated nuisance parameter, when it was free.
    pub nuisance: Option<f64>,
    pub edf: Vec<TermEdf>,
    pub laml: f64,
    pub deviance: f64,
    pub num_obs: usize,
    pub diagnostics: FitDiagnostics,
    /// Design-stage notes such as empty integration windows.
    pub design_messages: Vec<String>,
}

impl FitDocument {
    pub fn read(path: &Path) -> Result<Self> {
        let doc: Self = read_json(path)?;
        if doc.schema != FIT_SCHEMA {
            return Err(CliError::Input(format!(
                "{}: unsupported schema `{}` (expected `{FIT_SCHEMA}`)",
                path.display(),
                doc.schema
            )));
        }
        Ok(doc)
    }
}

pub struct FitArgs<'a> {
    pub data: &'a Path,
    pub config: &'a Path,
    pub out: &'a Path,
    pub fixed_lambda: Option<Vec<f64>>,
    pub level: Option<f64>,
}

/// Returns whether the outer optimization converged.
pub fn run(args: FitArgs) -> Result<bool> {
    let mut config: ModelConfig = read_json(args.config)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let (dataset, _) = read_long(args.data, &config.data, base, true)?;
    let mut family = config.family.to_family(&dataset.y)?;
    let design = Design::build(&dataset, &config.terms)?;
    if let Some(mut lambda) = args.fixed_lambda {
        let n: usize = design.blocks.iter().map(DesignBlock::num_penalties).sum();
        // one value beyond the penalties fixes the nuisance parameter too
        if lambda.len() == n + 1 && family.has_free_nuisance() {
            family = family.with_nuisance(lambda.pop().expect("non-empty")).fixed();
        }
        config.optimizer.fixed_lambda = Some(lambda);
    }
    let system = PenalizedSystem::new(design, dataset.y.clone(), family)?;
    let fit = optimize_outer(&system, &SmoothingState::initial(&system), &config.optimizer)?;
    let level = args.level.or(config.level).unwrap_or(0.95);

    create_dir(args.out)?;
    let mut bindings = config.data.clone();
    for source in bindings.functional.values_mut() {
        source.values = absolute(&resolve(base, &source.values));
        source.grid = absolute(&resolve(base, &source.grid));
    }
    let doc = document(&system, &fit, bindings);
    write_json(&args.out.join("fit.json"), &doc)?;
    write_fitted(&args.out.join("fitted.csv"), &dataset, &fit)?;
    let terms_dir = args.out.join("terms");
    create_dir(&terms_dir)?;
    for block in &system.design.blocks {
        write_term_estimate(&terms_dir, &system, &fit, block, level)?;
    }
    Ok(fit.diagnostics.converged)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn document(system: &PenalizedSystem, fit: &FitResult, data: DataBindings) -> FitDocument {
    FitDocument {
        schema: FIT_SCHEMA.into(),
        family: fit.family.clone(),
        terms: system.design.states(),
        data,
        theta: fit.theta.iter().copied().collect(),
        lambda: fit.lambda.clone(),
        lambda_labels: fit.lambda_labels.clone(),
        nuisance: system.family.has_free_nuisance().then_some(fit.family.nuisance),
        edf: system
            .design
            .blocks
            .iter()
            .zip(&fit.edf)
            .map(|(b, &edf)| TermEdf { label: b.label.clone(), edf })
            .collect(),
        laml: fit.laml,
        deviance: fit.deviance,
        num_obs: system.y.len(),
        diagnostics: fit.diagnostics.clone(),
        design_messages: system.design.diagnostics.clone(),
    }
}

fn write_fitted(path: &Path, ds: &gfamm::design::FunctionalDataset, fit: &FitResult) -> Result<()> {
    let header = ["curve", "t", "y", "eta_hat", "mu_hat"].map(String::from);
    let mu = fit.fitted_mean();
    let rows = (0..ds.num_obs()).map(|k| {
        vec![
            ds.curve_ids[ds.obs_curve[k]].to_string(),
            fmt_float(ds.t[k]),
            fmt_float(ds.y[k]),
            fmt_float(fit.eta[k]),
            fmt_float(mu[k]),
        ]
    });
    write_csv(path, &header, rows)
}

fn linspace(domain: [f64; 2], points: usize) -> Vec<f64> {
    (0..points).map(|k| domain[0] + (domain[1] - domain[0]) * k as f64 / (points - 1) as f64).collect()
}

fn x_domain(block: &DesignBlock, j: usize) -> Result<[f64; 2]> {
    block.state.spec.x_basis.get(j).and_then(|b| b.domain).ok_or_else(|| {
        CliError::Input(format!("term {}: covariate basis {j} has no domain", block.label))
    })
}

/// Default evaluation grid of a term.
pub struct TermGrid {
    pub coords: Vec<Vec<f64>>,
    /// Names of the coordinate columns.
    pub names: Vec<String>,
    pub t: Vec<f64>,
}

pub fn term_grid(block: &DesignBlock) -> Result<TermGrid> {
    let spec = &block.state.spec;
    let t = match (&spec.t_basis, spec.varies_over_t) {
        (Some(b), true) => linspace(b.domain.unwrap_or([0.0, 1.0]), T_POINTS),
        _ => vec![0.0],
    };
    let levels = || block.state.levels.iter().map(|&l| l as f64);
    let (coords, names): (Vec<Vec<f64>>, Vec<&str>) = match spec.kind {
        TermKind::Intercept => (vec![vec![]], vec![]),
        TermKind::LinearScalar => (vec![vec![1.0]], vec!["x"]),
        TermKind::Concurrent if spec.x_basis.is_empty() => (vec![vec![1.0]], vec!["x"]),
        TermKind::SmoothScalar | TermKind::Concurrent => {
            (linspace(x_domain(block, 0)?, X_POINTS).into_iter().map(|x| vec![x]).collect(), vec!["x"])
        }
        TermKind::FunctionalLinear => {
            (linspace(x_domain(block, 0)?, X_POINTS).into_iter().map(|s| vec![s]).collect(), vec!["s"])
        }
        TermKind::SmoothScalarInteraction => {
            let a = linspace(x_domain(block, 0)?, PAIR_POINTS);
            let b = linspace(x_domain(block, 1)?, PAIR_POINTS);
            (a.iter().flat_map(|&u| b.iter().map(move |&v| vec![u, v])).collect(), vec!["x1", "x2"])
        }
        TermKind::RandomIntercept | TermKind::SmoothCurveEffect => (levels().map(|l| vec![l]).collect(), vec!["level"]),
        TermKind::RandomSlope => (levels().map(|l| vec![l, 1.0]).collect(), vec!["level", "x"]),
    };
    Ok(TermGrid { coords, names: names.into_iter().map(String::from).collect(), t })
}

/// File-name-safe form of a term label.
pub fn file_stem(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write_term_estimate(dir: &Path, system: &PenalizedSystem, fit: &FitResult, block: &DesignBlock, level: f64) -> Result<()> {
    let TermGrid { coords, names, t } = term_grid(block)?;
    let est = pointwise_ci(fit, system, &block.label, &coords, &t, level)?;
    let mut header = names.clone();
    header.extend(["t", "estimate", "se", "lower", "upper"].map(String::from));
    let q = t.len();
    let rows = (0..coords.len() * q).map(|r| {
        let mut row: Vec<String> = coords[r / q].iter().map(|&c| fmt_float(c)).collect();
        row.push(fmt_float(t[r % q]));
        row.extend([est.estimate[r], est.se[r], est.lower[r], est.upper[r]].map(fmt_float));
        row
    });
    write_csv(&dir.join(format!("{}.csv", file_stem(&block.label))), &header, rows)
}
