//! Seeded generators for the synthetic studies and their true effects.
//!
//! True shapes (all on t ∈ [0, 1]):
//!
//! | study      | term        | truth |
//! |------------|-------------|-------|
//! | families   | intercept   | `c + 1.6 sin(2πt) + 0.8 cos(4πt)` (`c` = 1 for NB, 0 otherwise) |
//! | families   | smoo        | `0.8 cos(πx) cos(2πt)`, x ~ U(0, 1) |
//! | families   | te          | `0.8 sin(2πx₁) cos(πx₂)`, x₁, x₂ ~ U(0, 1) |
//! | families   | ff          | `∫ x(s) β(s, t) ds` with `β(s, t) = 2 sin(πt + πs/2)`, `x` from 10 cubic B-splines with N(0, 1) coefficients |
//! | binomial   | intercept   | `logit(lo) + (logit(hi) − logit(lo)) (1 − cos 2πt)/2` |
//! | binomial   | ri          | 9 cyclic cubic B-splines with Laplace(0, 0.35) coefficients |
//! | binomial   | day         | `sin(2πu) cos(2πt) + 0.5 cos(2πu) sin(4πt)`, u = day/(n − 1) |
//! | binomial   | ff.3, ff.6  | `∫_{t−w}^{t} ỹ(s) β(s, t) ds`, `β(s, t) = 8 (1 − (t − s)/w)(1 + 0.5 sin 2πt)` |
//! | goldsmith  | intercept   | `−0.5 + sin(2πt)` |
//! | goldsmith  | x           | `x · 0.3 exp(−(t − 0.5)²/(2 · 0.15²))`, x ~ N(0, 25) |
//! | goldsmith  | curve       | `ξ₁ √2 sin(2πt) + ξ₂ √2 cos(2πt)`, ξ ~ N(0, diag(1, 0.5)) |
//! | wang–shi   | intercept   | `sin³(2πt)` |
//! | wang–shi   | curve       | GP with kernel `v exp(−(t − t')²/(2ℓ²))` |
//!
//! The stored `smoo`, `te` and `day` truths are centered over the sampled curves at
//! each t and the intercept absorbs the shift, matching the model's
//! identifiability constraint; η is unaffected.

pub mod harness;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma, Normal, Poisson, StudentT};
use serde::{Deserialize, Serialize};

use crate::basis::{eval_basis, BasisSpec};
use crate::design::{quadrature_weights, FunctionalCovariate, FunctionalDataset, IntegrationWindow, TermKind, TermSpec};
use crate::family::{logistic, Family};
use crate::linalg::Cholesky;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Binomial41,
    Families42,
    Wangshi43,
    Goldsmith44,
}

/// One additive component of a simulation setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SettingTerm {
    Int,
    Ri,
    Day,
    Ff3,
    Ff6,
    Smoo,
    Te,
    Ff,
}

impl SettingTerm {
    pub fn name(self) -> &'static str {
        match self {
            SettingTerm::Int => "int",
            SettingTerm::Ri => "ri",
            SettingTerm::Day => "day",
            SettingTerm::Ff3 => "ff.3",
            SettingTerm::Ff6 => "ff.6",
            SettingTerm::Smoo => "smoo",
            SettingTerm::Te => "te",
            SettingTerm::Ff => "ff",
        }
    }
}

/// A setting such as `int`, `smoo` or `day+ff.6`; the functional intercept is always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Setting(pub Vec<SettingTerm>);

impl Setting {
    pub fn has(&self, term: SettingTerm) -> bool {
        self.0.contains(&term)
    }

    fn lag(&self) -> Option<f64> {
        if self.has(SettingTerm::Ff3) {
            Some(0.3)
        } else if self.has(SettingTerm::Ff6) {
            Some(0.6)
        } else {
            None
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|t| t.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut terms = s
            .split('+')
            .map(|p| match p.trim() {
                "int" => Ok(SettingTerm::Int),
                "ri" => Ok(SettingTerm::Ri),
                "day" => Ok(SettingTerm::Day),
                "ff.3" => Ok(SettingTerm::Ff3),
                "ff.6" => Ok(SettingTerm::Ff6),
                "smoo" => Ok(SettingTerm::Smoo),
                "te" => Ok(SettingTerm::Te),
                "ff" => Ok(SettingTerm::Ff),
                other => Err(Error::Specification(format!("unknown setting `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        terms.sort();
        terms.dedup();
        Ok(Setting(terms))
    }
}

impl TryFrom<String> for Setting {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimFamily {
    Gaussian,
    Beta,
    NegativeBinomial,
    #[serde(rename = "t3")]
    ScaledT3,
    Binomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Amplitude {
    Small,
    Intermediate,
    Large,
}

impl Amplitude {
    /// Range of `logit⁻¹(β₀(t))`.
    pub fn probability_range(self) -> (f64, f64) {
        match self {
            Amplitude::Small => (0.06, 0.13),
            Amplitude::Intermediate => (0.04, 0.19),
            Amplitude::Large => (0.02, 0.34),
        }
    }
}

/// Squared-exponential kernel; the length scale defaults to 0.2 of the domain length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpKernel {
    pub variance: f64,
    pub length_scale: f64,
}

impl Default for GpKernel {
    fn default() -> Self {
        Self { variance: 1.0, length_scale: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub study: Study,
    pub setting: Setting,
    pub family: SimFamily,
    #[serde(default)]
    pub snr: Option<f64>,
    pub n: usize,
    /// Number of equidistant grid points on [0, 1].
    pub grid_points: usize,
    #[serde(default)]
    pub trials: Option<u64>,
    #[serde(default)]
    pub amplitude: Option<Amplitude>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub kernel: Option<GpKernel>,
}

fn default_seed() -> u64 {
    1
}

impl SimScenario {
    pub fn families(family: SimFamily, setting: &str, snr: Option<f64>, n: usize, seed: u64) -> Result<Self> {
        let s = Self {
            study: Study::Families42,
            setting: setting.parse()?,
            family,
            snr,
            n,
            grid_points: 60,
            trials: None,
            amplitude: None,
            seed,
            kernel: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn binomial(setting: &str, amplitude: Amplitude, trials: u64, seed: u64) -> Result<Self> {
        let s = Self {
            study: Study::Binomial41,
            setting: setting.parse()?,
            family: SimFamily::Binomial,
            snr: None,
            n: 100,
            grid_points: 150,
            trials: Some(trials),
            amplitude: Some(amplitude),
            seed,
            kernel: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn goldsmith(n: usize, grid_points: usize, seed: u64) -> Self {
        Self {
            study: Study::Goldsmith44,
            setting: Setting(vec![SettingTerm::Int]),
            family: SimFamily::Binomial,
            snr: None,
            n,
            grid_points,
            trials: Some(1),
            amplitude: None,
            seed,
            kernel: None,
        }
    }

    pub fn wangshi(n: usize, grid_points: usize, seed: u64) -> Self {
        Self { study: Study::Wangshi43, kernel: Some(GpKernel::default()), ..Self::goldsmith(n, grid_points, seed) }
    }

    /// Same scenario with another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        use SettingTerm::*;
        let bad = |m: String| Err(Error::Specification(m));
        if self.n < 2 || self.grid_points < 4 {
            return bad(format!("need n ≥ 2 curves and ≥ 4 grid points, got n = {}, T = {}", self.n, self.grid_points));
        }
        let terms = &self.setting.0;
        match self.study {
            Study::Families42 => {
                let ok = terms.len() == 1 && matches!(terms[0], Int | Smoo | Te | Ff);
                if !ok {
                    return bad(format!("setting `{}` is not one of int, smoo, te, ff", self.setting));
                }
                match (self.family, self.snr) {
                    (SimFamily::NegativeBinomial, Some(_)) => {
                        return bad("negative binomial data take no SNR".into());
                    }
                    (SimFamily::NegativeBinomial, None) => {}
                    (SimFamily::Binomial, _) => return bad("binomial data belong to the binomial study".into()),
                    (_, Some(snr)) if snr > 0.0 && snr.is_finite() => {}
                    (_, snr) => return bad(format!("family {:?} needs a positive SNR, got {snr:?}", self.family)),
                }
            }
            Study::Binomial41 => {
                let ri_day = terms.iter().filter(|t| matches!(t, Ri | Day)).count();
                let lags = terms.iter().filter(|t| matches!(t, Ff3 | Ff6)).count();
                let others = terms.iter().filter(|t| !matches!(t, Int | Ri | Day | Ff3 | Ff6)).count();
                if others > 0 || ri_day > 1 || lags > 1 {
                    return bad(format!("unsupported binomial setting `{}`", self.setting));
                }
                if self.family != SimFamily::Binomial {
                    return bad("the binomial study draws binomial responses".into());
                }
                if self.trials.unwrap_or(0) == 0 {
                    return bad("binomial study needs a positive number of trials".into());
                }
                if self.amplitude.is_none() {
                    return bad("binomial study needs an amplitude class".into());
                }
            }
            Study::Goldsmith44 | Study::Wangshi43 => {
                if self.family != SimFamily::Binomial || self.trials != Some(1) {
                    return bad("this replication study draws binary responses".into());
                }
                if let Some(k) = self.kernel {
                    if !(k.variance > 0.0 && k.length_scale > 0.0) {
                        return bad(format!("kernel parameters must be positive, got {k:?}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// The fitted model matching the generating process, with term labels
    /// equal to the labels of the true terms.
    pub fn model(&self) -> Result<(Vec<TermSpec>, Family)> {
        self.validate()?;
        let cubic = |k: usize| BasisSpec::bspline(k, [0.0, 1.0]);
        let mut terms = Vec::new();
        match self.study {
            Study::Families42 => {
                terms.push(TermSpec::intercept(BasisSpec::cyclic(40, [0.0, 1.0])).labelled("intercept"));
                let t5 = cubic(5);
                for s in &self.setting.0 {
                    match s {
                        SettingTerm::Smoo => terms.push(
                            TermSpec::new(TermKind::SmoothScalar)
                                .covariate("x")
                                .x_basis(cubic(8).with_penalty_order(2))
                                .over_t(t5.clone())
                                .labelled("smoo"),
                        ),
                        SettingTerm::Te => terms.push(
                            TermSpec::new(TermKind::SmoothScalarInteraction)
                                .covariate("x1")
                                .covariate("x2")
                                .x_basis(cubic(7).with_penalty_order(2))
                                .x_basis(cubic(7).with_penalty_order(2))
                                .constant_in_t()
                                .labelled("te"),
                        ),
                        SettingTerm::Ff => terms.push(
                            TermSpec::new(TermKind::FunctionalLinear)
                                .covariate("x")
                                .x_basis(cubic(5))
                                .over_t(t5.clone())
                                .labelled("ff"),
                        ),
                        _ => {}
                    }
                }
                let family = match self.family {
                    SimFamily::Gaussian => Family::gaussian(1.0),
                    SimFamily::Beta => Family::beta(10.0),
                    SimFamily::NegativeBinomial => Family::negative_binomial(1.0),
                    SimFamily::ScaledT3 => Family::scaled_t(3.0, 1.0),
                    SimFamily::Binomial => unreachable!("rejected by validate"),
                };
                Ok((terms, family))
            }
            Study::Binomial41 => {
                terms.push(TermSpec::intercept(BasisSpec::cyclic(40, [0.0, 1.0])).labelled("intercept"));
                let t8 = cubic(8);
                if self.setting.has(SettingTerm::Ri) {
                    terms.push(
                        TermSpec::new(TermKind::RandomIntercept)
                            .over_t(BasisSpec::cyclic(9, [0.0, 1.0]))
                            .labelled("ri"),
                    );
                }
                if self.setting.has(SettingTerm::Day) {
                    terms.push(
                        TermSpec::new(TermKind::SmoothScalar)
                            .covariate("day")
                            .x_basis(BasisSpec::bspline(8, [0.0, (self.n - 1) as f64]).with_penalty_order(2))
                            .over_t(t8.clone())
                            .labelled("day"),
                    );
                }
                if let Some(w) = self.setting.lag() {
                    let label = if w < 0.5 { "ff.3" } else { "ff.6" };
                    terms.push(
                        TermSpec::new(TermKind::FunctionalLinear)
                            .covariate("ylag")
                            .x_basis(cubic(5).with_penalty_order(2))
                            .over_t(cubic(6).with_penalty_order(2))
                            .window(IntegrationWindow::lagged(w))
                            .labelled(label),
                    );
                }
                Ok((terms, Family::binomial(self.trials.unwrap_or(1) as f64)))
            }
            Study::Goldsmith44 => {
                let t10 = cubic(10);
                terms.push(TermSpec::intercept(t10.clone()).labelled("intercept"));
                terms.push(TermSpec::new(TermKind::LinearScalar).covariate("x").over_t(t10.clone()).labelled("x"));
                terms.push(TermSpec::new(TermKind::SmoothCurveEffect).over_t(t10).labelled("curve"));
                Ok((terms, Family::binomial(1.0)))
            }
            Study::Wangshi43 => {
                terms.push(TermSpec::intercept(cubic(10)).labelled("intercept"));
                terms.push(TermSpec::new(TermKind::SmoothCurveEffect).over_t(cubic(8)).labelled("curve"));
                Ok((terms, Family::binomial(1.0)))
            }
        }
    }
}

/// A true term evaluated at every curve and grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueTerm {
    pub label: String,
    /// `n × T`.
    pub values: DMatrix<f64>,
}

/// A true effect on a grid of covariate coordinates × t (rows × columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueSurface {
    pub label: String,
    pub coords: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReplicate {
    pub scenario: SimScenario,
    pub dataset: FunctionalDataset,
    /// True additive predictor, `n × T`; the sum of `terms` in order.
    pub eta: DMatrix<f64>,
    pub terms: Vec<TrueTerm>,
    pub surfaces: Vec<TrueSurface>,
    /// Generator parameters such as the Beta precision or the noise scale.
    pub metadata: BTreeMap<String, f64>,
}

impl SimReplicate {
    pub fn term(&self, label: &str) -> Option<&TrueTerm> {
        self.terms.iter().find(|t| t.label == label)
    }

    pub fn surface(&self, label: &str) -> Option<&TrueSurface> {
        self.surfaces.iter().find(|s| s.label == label)
    }
}

pub fn generate(scenario: &SimScenario) -> Result<SimReplicate> {
    scenario.validate()?;
    match scenario.study {
        Study::Families42 => gen_families(scenario),
        Study::Binomial41 => gen_binomial(scenario),
        Study::Goldsmith44 => gen_goldsmith(scenario.n, scenario.grid_points, scenario.seed),
        Study::Wangshi43 => {
            gen_wangshi(scenario.n, scenario.grid_points, scenario.kernel.unwrap_or_default(), scenario.seed)
        }
    }
}

pub fn grid(points: usize) -> Vec<f64> {
    (0..points).map(|l| l as f64 / (points - 1) as f64).collect()
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn laplace(rng: &mut impl Rng, scale: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite normal parameters")
}

fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Sums terms in order so that the stored η equals their sum exactly.
fn assemble(terms: &[TrueTerm], n: usize, m: usize) -> DMatrix<f64> {
    let mut eta = DMatrix::zeros(n, m);
    for t in terms {
        eta += &t.values;
    }
    eta
}

/// Beta parameters whose precision follows from an approximate signal-to-noise ratio.
///
/// `η` is first mapped linearly onto [−1.5, 1.5]; with `μ = logit⁻¹(η)`,
/// `φ = SNR · mean(μ(1 − μ)) / var(μ) − 1`, `α = φμ` and `β = φ − α`.
pub fn beta_params_from_snr(eta: &DMatrix<f64>, snr: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (a, b) = rescale_coefficients(eta)?;
    let mu = eta.map(|e| logistic(a + b * e));
    let phi = beta_precision(&mu, snr)?;
    let alpha = &mu * phi;
    let beta = alpha.map(|al| phi - al);
    Ok((alpha, beta))
}

/// `(a, b)` with `a + b·η` spanning [−1.5, 1.5].
fn rescale_coefficients(eta: &DMatrix<f64>) -> Result<(f64, f64)> {
    let (lo, hi) = (eta.min(), eta.max());
    if !(hi > lo) {
        return Err(Error::Generator("η is constant; cannot rescale it to [−1.5, 1.5]".into()));
    }
    let b = 3.0 / (hi - lo);
    Ok((-1.5 - b * lo, b))
}

fn beta_precision(mu: &DMatrix<f64>, snr: f64) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(Error::Domain { value: snr, lower: 0.0, upper: f64::INFINITY });
    }
    let n = mu.len() as f64;
    let m = mu.iter().map(|u| u * (1.0 - u)).sum::<f64>() / n;
    let v = sample_sd(mu.iter().copied()).powi(2);
    if !(v > 0.0) {
        return Err(Error::Generator("mean has zero variance; the Beta precision is undefined".into()));
    }
    let phi = snr * m / v - 1.0;
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(Error::Generator(format!("Beta precision {phi} is not positive")));
    }
    Ok(phi)
}

fn families_intercept(t: f64, offset: f64) -> f64 {
    offset + 1.6 * (2.0 * PI * t).sin() + 0.8 * (4.0 * PI * t).cos()
}

fn families_smoo(x: f64, t: f64) -> f64 {
    0.8 * (PI * x).cos() * (2.0 * PI * t).cos()
}

fn families_te(x1: f64, x2: f64) -> f64 {
    0.8 * (2.0 * PI * x1).sin() * (PI * x2).cos()
}

fn families_ff_beta(s: f64, t: f64) -> f64 {
    2.0 * (PI * t + 0.5 * PI * s).sin()
}

/// Beta / negative binomial / t(3) / gaussian data on 60-ish grid points.
/// Moves the per-t mean over curves of the scalar-covariate effects into the
/// intercept, so the stored truths satisfy the fitted model's sum-to-zero
/// constraint while η is unchanged.
fn center_scalar_effects(terms: &mut [TrueTerm], surfaces: &mut [TrueSurface]) {
    let (head, rest) = terms.split_at_mut(1);
    for term in rest.iter_mut().filter(|t| matches!(t.label.as_str(), "smoo" | "te" | "day")) {
        let n = term.values.nrows() as f64;
        let means: Vec<f64> = term.values.column_iter().map(|c| c.sum() / n).collect();
        for (l, m) in means.iter().enumerate() {
            term.values.column_mut(l).add_scalar_mut(-m);
            head[0].values.column_mut(l).add_scalar_mut(*m);
        }
        for surface in surfaces.iter_mut() {
            let sign = if surface.label == "intercept" {
                1.0
            } else if surface.label == term.label {
                -1.0
            } else {
                continue;
            };
            for (l, m) in means.iter().enumerate() {
                surface.values.column_mut(l).add_scalar_mut(sign * m);
            }
        }
    }
}

pub fn gen_families(scenario: &SimScenario) -> Result<SimReplicate> {
    scenario.validate()?;
    if scenario.study != Study::Families42 {
        return Err(Error::Specification(format!("{:?} is not the families study", scenario.study)));
    }
    let mut rng = rng_for(scenario.seed);
    let (n, m) = (scenario.n, scenario.grid_points);
    let tg = grid(m);
    let mut ds = FunctionalDataset::on_grid(&tg, &DMatrix::zeros(n, m));
    let offset = if scenario.family == SimFamily::NegativeBinomial { 1.0 } else { 0.0 };
    let mut terms = vec![TrueTerm {
        label: "intercept".into(),
        values: DMatrix::from_fn(n, m, |_, l| families_intercept(tg[l], offset)),
    }];
    let mut surfaces = vec![TrueSurface {
        label: "intercept".into(),
        coords: vec![vec![]],
        t: tg.clone(),
        values: DMatrix::from_fn(1, m, |_, l| families_intercept(tg[l], offset)),
    }];
    let coord_grid = grid(21);
    match scenario.setting.0[0] {
        SettingTerm::Smoo => {
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            terms.push(TrueTerm { label: "smoo".into(), values: DMatrix::from_fn(n, m, |i, l| families_smoo(x[i], tg[l])) });
            surfaces.push(TrueSurface {
                label: "smoo".into(),
                coords: coord_grid.iter().map(|&v| vec![v]).collect(),
                t: tg.clone(),
                values: DMatrix::from_fn(coord_grid.len(), m, |a, l| families_smoo(coord_grid[a], tg[l])),
            });
            ds.scalar_covariates.insert("x".into(), x);
        }
        SettingTerm::Te => {
            let x1: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let x2: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            terms.push(TrueTerm { label: "te".into(), values: DMatrix::from_fn(n, m, |i, _| families_te(x1[i], x2[i])) });
            ds.scalar_covariates.insert("x1".into(), x1);
            ds.scalar_covariates.insert("x2".into(), x2);
        }
        SettingTerm::Ff => {
            let xb = eval_basis(&BasisSpec::bspline(10, [0.0, 1.0]), &tg)?.values;
            let z = normal(0.0, 1.0);
            let coefs = DMatrix::from_fn(n, 10, |_, _| z.sample(&mut rng));
            let x = coefs * xb.transpose();
            let (w, _) = quadrature_weights(&tg, &tg, &IntegrationWindow::default())?;
            let beta = DMatrix::from_fn(m, m, |k, l| families_ff_beta(tg[k], tg[l]));
            // ∫ x_i(s) β(s, t_l) ds with the trapezoid weights the model uses
            let values = DMatrix::from_fn(n, m, |i, l| (0..m).map(|k| w[(l, k)] * x[(i, k)] * beta[(k, l)]).sum());
            terms.push(TrueTerm { label: "ff".into(), values });
            surfaces.push(TrueSurface {
                label: "ff".into(),
                coords: coord_grid.iter().map(|&v| vec![v]).collect(),
                t: tg.clone(),
                values: DMatrix::from_fn(coord_grid.len(), m, |a, l| families_ff_beta(coord_grid[a], tg[l])),
            });
            ds.functional_covariates.insert("x".into(), FunctionalCovariate { grid: tg.clone(), values: x });
        }
        _ => {}
    }
    center_scalar_effects(&mut terms, &mut surfaces);
    let mut metadata = BTreeMap::new();
    let eta;
    let y: DMatrix<f64>;
    match scenario.family {
        SimFamily::Beta => {
            let raw = assemble(&terms, n, m);
            let (a, b) = rescale_coefficients(&raw)?;
            for (r, term) in terms.iter_mut().enumerate() {
                term.values = term.values.map(|v| if r == 0 { a + b * v } else { b * v });
            }
            for s in &mut surfaces {
                let shift = if s.label == "intercept" { a } else { 0.0 };
                s.values = s.values.map(|v| shift + b * v);
            }
            eta = assemble(&terms, n, m);
            let mu = eta.map(logistic);
            let phi = beta_precision(&mu, scenario.snr.unwrap_or(1.0))?;
            metadata.insert("phi".into(), phi);
            y = DMatrix::from_fn(n, m, |i, l| {
                let al = phi * mu[(i, l)];
                let d = Beta::new(al, phi - al).map_err(|e| Error::Generator(e.to_string()));
                d.map(|d| d.sample(&mut rng).clamp(1e-10, 1.0 - 1e-10)).unwrap_or(f64::NAN)
            });
        }
        SimFamily::NegativeBinomial => {
            eta = assemble(&terms, n, m);
            let theta = 0.5;
            metadata.insert("theta".into(), theta);
            y = DMatrix::from_fn(n, m, |i, l| {
                let mu = eta[(i, l)].exp();
                let g = Gamma::new(theta, mu / theta).expect("positive gamma parameters").sample(&mut rng);
                if g > 0.0 {
                    Poisson::new(g).expect("positive rate").sample(&mut rng)
                } else {
                    0.0
                }
            });
        }
        SimFamily::ScaledT3 | SimFamily::Gaussian => {
            eta = assemble(&terms, n, m);
            let scale = sample_sd(eta.iter().copied()) / scenario.snr.unwrap_or(1.0);
            metadata.insert("scale".into(), scale);
            let t3 = StudentT::new(3.0).expect("positive df");
            let z = normal(0.0, 1.0);
            let gaussian = scenario.family == SimFamily::Gaussian;
            y = DMatrix::from_fn(n, m, |i, l| {
                let e = if gaussian { z.sample(&mut rng) } else { t3.sample(&mut rng) };
                eta[(i, l)] + scale * e
            });
        }
        SimFamily::Binomial => unreachable!("rejected by validate"),
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Generator("non-finite response draw".into()));
    }
    ds.y = y.transpose().iter().copied().collect();
    Ok(SimReplicate { scenario: scenario.clone(), dataset: ds, eta, terms, surfaces, metadata })
}

fn binomial_day(u: f64, t: f64) -> f64 {
    (2.0 * PI * u).sin() * (2.0 * PI * t).cos() + 0.5 * (2.0 * PI * u).cos() * (4.0 * PI * t).sin()
}

fn binomial_lag_beta(s: f64, t: f64, w: f64) -> f64 {
    8.0 * (1.0 - (t - s) / w) * (1.0 + 0.5 * (2.0 * PI * t).sin())
}

/// Binomial data with functional intercept, day-to-day effects and lagged
/// response effects; the lagged terms are built forward in t from the
/// already drawn, centered response proportions.
pub fn gen_binomial(scenario: &SimScenario) -> Result<SimReplicate> {
    scenario.validate()?;
    if scenario.study != Study::Binomial41 {
        return Err(Error::Specification(format!("{:?} is not the binomial study", scenario.study)));
    }
    let mut rng = rng_for(scenario.seed);
    let (n, m) = (scenario.n, scenario.grid_points);
    let trials = scenario.trials.unwrap_or(1);
    let tg = grid(m);
    let mut ds = FunctionalDataset::on_grid(&tg, &DMatrix::zeros(n, m));
    let (plo, phi) = scenario.amplitude.unwrap_or(Amplitude::Intermediate).probability_range();
    let (llo, lhi) = ((plo / (1.0 - plo)).ln(), (phi / (1.0 - phi)).ln());
    let b0 = |t: f64| llo + (lhi - llo) * 0.5 * (1.0 - (2.0 * PI * t).cos());
    let mut terms = vec![TrueTerm { label: "intercept".into(), values: DMatrix::from_fn(n, m, |_, l| b0(tg[l])) }];
    let mut surfaces = vec![TrueSurface {
        label: "intercept".into(),
        coords: vec![vec![]],
        t: tg.clone(),
        values: DMatrix::from_fn(1, m, |_, l| b0(tg[l])),
    }];
    if scenario.setting.has(SettingTerm::Ri) {
        let basis = eval_basis(&BasisSpec::cyclic(9, [0.0, 1.0]), &tg)?.values;
        let coefs = DMatrix::from_fn(n, 9, |_, _| laplace(&mut rng, 0.35));
        terms.push(TrueTerm { label: "ri".into(), values: coefs * basis.transpose() });
    }
    if scenario.setting.has(SettingTerm::Day) {
        let day: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let u = |i: usize| i as f64 / (n - 1) as f64;
        terms.push(TrueTerm { label: "day".into(), values: DMatrix::from_fn(n, m, |i, l| binomial_day(u(i), tg[l])) });
        let days: Vec<f64> = (0..11).map(|a| a as f64 * (n - 1) as f64 / 10.0).collect();
        surfaces.push(TrueSurface {
            label: "day".into(),
            coords: days.iter().map(|&d| vec![d]).collect(),
            t: tg.clone(),
            values: DMatrix::from_fn(days.len(), m, |a, l| binomial_day(days[a] / (n - 1) as f64, tg[l])),
        });
        ds.scalar_covariates.insert("day".into(), day);
        center_scalar_effects(&mut terms, &mut surfaces);
    }
    let base = assemble(&terms, n, m);
    let binom = |p: f64, rng: &mut ChaCha8Rng| -> f64 {
        Binomial::new(trials, p).expect("probability in [0, 1]").sample(rng) as f64
    };
    let mut y = DMatrix::zeros(n, m);
    let eta = match scenario.setting.lag() {
        None => {
            for l in 0..m {
                for i in 0..n {
                    y[(i, l)] = binom(logistic(base[(i, l)]), &mut rng);
                }
            }
            base
        }
        Some(w) => {
            let label = if w < 0.5 { "ff.3" } else { "ff.6" };
            let (weights, _) = quadrature_weights(&tg, &tg, &IntegrationWindow::lagged(w))?;
            let beta = DMatrix::from_fn(m, m, |k, l| binomial_lag_beta(tg[k], tg[l], w));
            let mut ytilde = DMatrix::zeros(n, m);
            let mut lag = DMatrix::zeros(n, m);
            for l in 0..m {
                for i in 0..n {
                    // the window [t − w, t) only reaches grid points already drawn
                    let v: f64 = (0..l).map(|k| weights[(l, k)] * ytilde[(i, k)] * beta[(k, l)]).sum();
                    lag[(i, l)] = v;
                    y[(i, l)] = binom(logistic(base[(i, l)] + v), &mut rng);
                }
                let mean = (0..n).map(|i| y[(i, l)]).sum::<f64>() / n as f64;
                for i in 0..n {
                    ytilde[(i, l)] = (y[(i, l)] - mean) / trials as f64;
                }
            }
            terms.push(TrueTerm { label: label.into(), values: lag });
            ds.functional_covariates.insert("ylag".into(), FunctionalCovariate { grid: tg.clone(), values: ytilde });
            assemble(&terms, n, m)
        }
    };
    ds.y = y.transpose().iter().copied().collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("trials".into(), trials as f64);
    Ok(SimReplicate { scenario: scenario.clone(), dataset: ds, eta, terms, surfaces, metadata })
}

fn goldsmith_intercept(t: f64) -> f64 {
    -0.5 + (2.0 * PI * t).sin()
}

fn goldsmith_slope(t: f64) -> f64 {
    0.3 * (-(t - 0.5).powi(2) / (2.0 * 0.15 * 0.15)).exp()
}

/// Binary data with a functional intercept, a functional linear effect of a
/// N(0, 25) covariate and curve effects from two trigonometric principal components.
pub fn gen_goldsmith(n: usize, grid_points: usize, seed: u64) -> Result<SimReplicate> {
    let scenario = SimScenario::goldsmith(n, grid_points, seed);
    scenario.validate()?;
    let mut rng = rng_for(seed);
    let tg = grid(grid_points);
    let m = grid_points;
    let x: Vec<f64> = {
        let d = normal(0.0, 5.0);
        (0..n).map(|_| d.sample(&mut rng)).collect()
    };
    let (d1, d2) = (normal(0.0, 1.0), normal(0.0, 0.5_f64.sqrt()));
    let scores: Vec<(f64, f64)> = (0..n).map(|_| (d1.sample(&mut rng), d2.sample(&mut rng))).collect();
    let fpc = |t: f64, (a, b): (f64, f64)| 2f64.sqrt() * (a * (2.0 * PI * t).sin() + b * (2.0 * PI * t).cos());
    let terms = vec![
        TrueTerm { label: "intercept".into(), values: DMatrix::from_fn(n, m, |_, l| goldsmith_intercept(tg[l])) },
        TrueTerm { label: "x".into(), values: DMatrix::from_fn(n, m, |i, l| x[i] * goldsmith_slope(tg[l])) },
        TrueTerm { label: "curve".into(), values: DMatrix::from_fn(n, m, |i, l| fpc(tg[l], scores[i])) },
    ];
    let surfaces = vec![
        TrueSurface {
            label: "intercept".into(),
            coords: vec![vec![]],
            t: tg.clone(),
            values: DMatrix::from_fn(1, m, |_, l| goldsmith_intercept(tg[l])),
        },
        TrueSurface {
            label: "x".into(),
            coords: vec![vec![1.0]],
            t: tg.clone(),
            values: DMatrix::from_fn(1, m, |_, l| goldsmith_slope(tg[l])),
        },
    ];
    let eta = assemble(&terms, n, m);
    let y = eta.map(|e| if rng.random::<f64>() < logistic(e) { 1.0 } else { 0.0 });
    let mut ds = FunctionalDataset::on_grid(&tg, &y);
    ds.scalar_covariates.insert("x".into(), x);
    Ok(SimReplicate { scenario, dataset: ds, eta, terms, surfaces, metadata: BTreeMap::new() })
}

/// Cholesky factor of a kernel matrix with increasing diagonal jitter.
fn jittered_cholesky(k: &DMatrix<f64>, variance: f64) -> Result<Cholesky> {
    let mut jitter = 1e-10 * variance;
    while jitter <= 1e-4 * variance {
        let mut kj = k.clone();
        for i in 0..k.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Ok(c) = Cholesky::new(&kj) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Generator("kernel matrix is not positive definite after jitter".into()))
}

/// Binary data with a cubed-sine intercept and Gaussian-process curve effects.
pub fn gen_wangshi(n: usize, grid_points: usize, kernel: GpKernel, seed: u64) -> Result<SimReplicate> {
    let scenario = SimScenario { kernel: Some(kernel), ..SimScenario::wangshi(n, grid_points, seed) };
    scenario.validate()?;
    let mut rng = rng_for(seed);
    let tg = grid(grid_points);
    let m = grid_points;
    let k = DMatrix::from_fn(m, m, |a, b| {
        kernel.variance * (-(tg[a] - tg[b]).powi(2) / (2.0 * kernel.length_scale.powi(2))).exp()
    });
    let chol = jittered_cholesky(&k, kernel.variance)?;
    let z = normal(0.0, 1.0);
    let draws = DMatrix::from_fn(n, m, |_, _| z.sample(&mut rng));
    let b = draws * chol.lower().transpose();
    let b0 = |t: f64| (2.0 * PI * t).sin().powi(3);
    let terms = vec![
        TrueTerm { label: "intercept".into(), values: DMatrix::from_fn(n, m, |_, l| b0(tg[l])) },
        TrueTerm { label: "curve".into(), values: b },
    ];
    let surfaces = vec![TrueSurface {
        label: "intercept".into(),
        coords: vec![vec![]],
        t: tg.clone(),
        values: DMatrix::from_fn(1, m, |_, l| b0(tg[l])),
    }];
    let eta = assemble(&terms, n, m);
    let y = eta.map(|e| if rng.random::<f64>() < logistic(e) { 1.0 } else { 0.0 });
    let ds = FunctionalDataset::on_grid(&tg, &y);
    let mut metadata = BTreeMap::new();
    metadata.insert("gp_variance".into(), kernel.variance);
    metadata.insert("gp_length_scale".into(), kernel.length_scale);
    Ok(SimReplicate { scenario, dataset: ds, eta, terms, surfaces, metadata })
}
