//! Model and simulation configuration files.

use std::collections::BTreeMap;
use std::path::PathBuf;

use gfamm::design::TermSpec;
use gfamm::family::{Family, FamilyKind, Link};
use gfamm::fit::{starting_nuisance, OptimizerOptions};
use gfamm::simgen::SimScenario;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSource {
    /// Wide CSV keyed by curve.
    pub values: PathBuf,
    /// One-column CSV holding the evaluation grid `s`.
    pub grid: PathBuf,
}

/// Column names of the long-format data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataBindings {
    pub curve: String,
    pub t: String,
    pub y: String,
    /// Per-curve scalar covariates.
    pub scalar: Vec<String>,
    /// Per-curve integer grouping factors.
    pub factors: Vec<String>,
    pub functional: BTreeMap<String, FunctionalSource>,
}

impl Default for DataBindings {
    fn default() -> Self {
        Self {
            curve: "curve".into(),
            t: "t".into(),
            y: "y".into(),
            scalar: Vec::new(),
            factors: Vec::new(),
            functional: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub name: FamilyKind,
    #[serde(default)]
    pub link: Option<Link>,
    /// Variance, trials, dispersion, precision or scale; a data-based start when absent.
    #[serde(default)]
    pub nuisance: Option<f64>,
    #[serde(default = "default_true")]
    pub estimate_nuisance: bool,
    /// Degrees of freedom of the scaled t.
    #[serde(default)]
    pub df: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl FamilyConfig {
    pub fn to_family(&self, y: &[f64]) -> Result<Family> {
        let mut family = match self.name {
            FamilyKind::Gaussian => Family::gaussian(1.0),
            FamilyKind::Binomial => Family::binomial(self.nuisance.ok_or_else(|| {
                CliError::Input("binomial family needs `nuisance` (the number of trials)".into())
            })?),
            FamilyKind::Poisson => Family::poisson(),
            FamilyKind::NegativeBinomial => Family::negative_binomial(1.0),
            FamilyKind::Beta => Family::beta(1.0),
            FamilyKind::ScaledT => Family::scaled_t(self.df.unwrap_or(3.0), 1.0),
        };
        if let Some(link) = self.link {
            family.link = link;
        }
        if !self.estimate_nuisance {
            family = family.fixed();
        }
        let nuisance = self.nuisance.unwrap_or_else(|| starting_nuisance(&family, y));
        Ok(family.with_nuisance(nuisance))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: FamilyConfig,
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
    #[serde(default)]
    pub data: DataBindings,
    /// Level of the pointwise intervals in the term estimates.
    #[serde(default)]
    pub level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub scenario: SimScenario,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
    #[serde(default)]
    pub level: Option<f64>,
}
