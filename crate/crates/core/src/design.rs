//! Functional data containers and the translation of term specifications into
//! design blocks.
//!
//! Every block is a row tensor product of a covariate marginal `Φ_x` and a
//! marginal over the functional argument `Φ_t`. Each marginal carries its own
//! list of penalty components; the block penalty is the Kronecker sum of the
//! marginal penalties.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{difference_penalty, eval_basis, BasisKind, BasisSpec, PenaltyMatrix};
use crate::error::{Error, Result};
use crate::linalg;

/// Name under which the curve identifiers act as a grouping factor.
pub const CURVE_FACTOR: &str = "curve";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalCovariate {
    pub grid: Vec<f64>,
    /// One row per curve, one column per grid point.
    pub values: DMatrix<f64>,
}

impl FunctionalCovariate {
    /// Linear interpolation of curve `i` at `s`.
    pub fn value_at(&self, i: usize, s: f64) -> Result<f64> {
        let g = &self.grid;
        let (lo, hi) = (g[0], g[g.len() - 1]);
        if !(s >= lo && s <= hi) {
            return Err(Error::Domain { value: s, lower: lo, upper: hi });
        }
        let k = g.partition_point(|&v| v <= s).clamp(1, g.len() - 1);
        let (a, b) = (g[k - 1], g[k]);
        let w = (s - a) / (b - a);
        Ok((1.0 - w) * self.values[(i, k - 1)] + w * self.values[(i, k)])
    }
}

/// Long-format functional observations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FunctionalDataset {
    /// External identifier of each curve.
    pub curve_ids: Vec<i64>,
    /// Curve index (into `curve_ids`) of each observation.
    pub obs_curve: Vec<usize>,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub scalar_covariates: BTreeMap<String, Vec<f64>>,
    pub functional_covariates: BTreeMap<String, FunctionalCovariate>,
    pub grouping_factors: BTreeMap<String, Vec<i64>>,
}

impl FunctionalDataset {
    /// Dataset with every curve observed on the same grid; `y` is curves × grid.
    pub fn on_grid(t_grid: &[f64], y: &DMatrix<f64>) -> Self {
        let (n, m) = y.shape();
        assert_eq!(m, t_grid.len(), "response columns must match the grid");
        let mut ds = Self { curve_ids: (0..n as i64).collect(), ..Default::default() };
        for i in 0..n {
            for (l, &t) in t_grid.iter().enumerate() {
                ds.obs_curve.push(i);
                ds.t.push(t);
                ds.y.push(y[(i, l)]);
            }
        }
        ds
    }

    pub fn n(&self) -> usize {
        self.curve_ids.len()
    }

    pub fn num_obs(&self) -> usize {
        self.t.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let big_n = self.num_obs();
        if self.obs_curve.len() != big_n || self.y.len() != big_n {
            return Err(Error::Shape(format!(
                "{} observation times, {} curve indices, {} responses",
                big_n,
                self.obs_curve.len(),
                self.y.len()
            )));
        }
        if let Some(&bad) = self.obs_curve.iter().find(|&&i| i >= n) {
            return Err(Error::Data(format!("curve index {bad} exceeds curve count {n}")));
        }
        if self.t.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite observation time or response".into()));
        }
        for (name, col) in &self.scalar_covariates {
            if col.len() != n {
                return Err(Error::Shape(format!("scalar covariate {name} has {} values for {n} curves", col.len())));
            }
        }
        for (name, col) in &self.grouping_factors {
            if col.len() != n {
                return Err(Error::Shape(format!("grouping factor {name} has {} values for {n} curves", col.len())));
            }
        }
        for (name, fc) in &self.functional_covariates {
            if fc.values.nrows() != n || fc.values.ncols() != fc.grid.len() {
                return Err(Error::Shape(format!(
                    "functional covariate {name} is {}×{}, expected {n}×{}",
                    fc.values.nrows(),
                    fc.values.ncols(),
                    fc.grid.len()
                )));
            }
            if fc.grid.len() < 2 || fc.grid.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Data(format!("grid of functional covariate {name} must be strictly increasing")));
            }
        }
        Ok(())
    }

    fn scalar(&self, name: &str) -> Result<&[f64]> {
        self.scalar_covariates
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Specification(format!("unknown scalar covariate `{name}`")))
    }

    fn functional(&self, name: &str) -> Result<&FunctionalCovariate> {
        self.functional_covariates
            .get(name)
            .ok_or_else(|| Error::Specification(format!("unknown functional covariate `{name}`")))
    }

    fn factor(&self, name: &str) -> Result<&[i64]> {
        if name == CURVE_FACTOR && !self.grouping_factors.contains_key(name) {
            return Ok(&self.curve_ids);
        }
        self.grouping_factors
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Specification(format!("unknown grouping factor `{name}`")))
    }

    /// Scalar covariate expanded to observations.
    fn per_obs(&self, per_curve: &[f64]) -> Vec<f64> {
        self.obs_curve.iter().map(|&i| per_curve[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermKind {
    Intercept,
    LinearScalar,
    SmoothScalar,
    SmoothScalarInteraction,
    FunctionalLinear,
    Concurrent,
    RandomIntercept,
    RandomSlope,
    /// Smooth curve-specific deviation `e_i(t)`: a random intercept on the curve id.
    SmoothCurveEffect,
}

impl TermKind {
    pub fn name(self) -> &'static str {
        match self {
            TermKind::Intercept => "intercept",
            TermKind::LinearScalar => "linear-scalar",
            TermKind::SmoothScalar => "smooth-scalar",
            TermKind::SmoothScalarInteraction => "smooth-scalar-interaction",
            TermKind::FunctionalLinear => "functional-linear",
            TermKind::Concurrent => "concurrent",
            TermKind::RandomIntercept => "random-intercept",
            TermKind::RandomSlope => "random-slope",
            TermKind::SmoothCurveEffect => "smooth-curve-effect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowEdge {
    GridMin,
    GridMax,
    Fixed(f64),
    /// `t + offset`.
    RelativeToT(f64),
}

impl WindowEdge {
    fn at(self, t: f64, grid: &[f64]) -> f64 {
        match self {
            WindowEdge::GridMin => grid[0],
            WindowEdge::GridMax => grid[grid.len() - 1],
            WindowEdge::Fixed(v) => v,
            WindowEdge::RelativeToT(o) => t + o,
        }
    }
}

/// Integration range `[l(t), u(t)]` (or `[l(t), u(t))`) of a functional-linear term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationWindow {
    pub lower: WindowEdge,
    pub upper: WindowEdge,
    #[serde(default)]
    pub upper_open: bool,
}

impl Default for IntegrationWindow {
    fn default() -> Self {
        Self { lower: WindowEdge::GridMin, upper: WindowEdge::GridMax, upper_open: false }
    }
}

impl IntegrationWindow {
    /// Window `[t − length, t)`.
    pub fn lagged(length: f64) -> Self {
        Self { lower: WindowEdge::RelativeToT(-length), upper: WindowEdge::RelativeToT(0.0), upper_open: true }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub kind: TermKind,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub x_basis: Vec<BasisSpec>,
    #[serde(default)]
    pub t_basis: Option<BasisSpec>,
    #[serde(default = "default_true")]
    pub varies_over_t: bool,
    #[serde(default)]
    pub window: Option<IntegrationWindow>,
    /// Center the functional covariate at each grid point before integration.
    #[serde(default)]
    pub center: bool,
    #[serde(default)]
    pub label: Option<String>,
}

impl TermSpec {
    pub fn new(kind: TermKind) -> Self {
        Self {
            kind,
            covariates: Vec::new(),
            x_basis: Vec::new(),
            t_basis: None,
            varies_over_t: true,
            window: None,
            center: false,
            label: None,
        }
    }

    pub fn intercept(t_basis: BasisSpec) -> Self {
        Self::new(TermKind::Intercept).over_t(t_basis)
    }

    pub fn over_t(mut self, t_basis: BasisSpec) -> Self {
        self.t_basis = Some(t_basis);
        self.varies_over_t = true;
        self
    }

    pub fn constant_in_t(mut self) -> Self {
        self.t_basis = None;
        self.varies_over_t = false;
        self
    }

    pub fn covariate(mut self, name: &str) -> Self {
        self.covariates.push(name.to_string());
        self
    }

    pub fn x_basis(mut self, spec: BasisSpec) -> Self {
        self.x_basis.push(spec);
        self
    }

    pub fn window(mut self, window: IntegrationWindow) -> Self {
        self.window = Some(window);
        self
    }

    pub fn centered(mut self) -> Self {
        self.center = true;
        self
    }

    pub fn labelled(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn display_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let kind = self.kind.name();
        if self.covariates.is_empty() {
            kind.to_string()
        } else {
            format!("{kind}({})", self.covariates.join(","))
        }
    }

    fn grouping_name(&self) -> &str {
        if self.kind == TermKind::SmoothCurveEffect {
            return CURVE_FACTOR;
        }
        self.covariates.first().map(String::as_str).unwrap_or(CURVE_FACTOR)
    }
}

/// One marginal of a block: its design over the observations and its penalty
/// components (null components are dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub design: DMatrix<f64>,
    pub penalties: Vec<DMatrix<f64>>,
}

impl Marginal {
    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn from_basis(design: DMatrix<f64>, penalty: PenaltyMatrix) -> Self {
        let penalties = if penalty.is_null() { Vec::new() } else { vec![penalty.values] };
        Self { design, penalties }
    }

    /// Sum of the penalty components with unit weights.
    pub fn total_penalty(&self) -> PenaltyMatrix {
        let k = self.dim();
        if self.penalties.is_empty() {
            return PenaltyMatrix::zero(k);
        }
        let sum = self.penalties.iter().fold(DMatrix::zeros(k, k), |acc, p| acc + p);
        PenaltyMatrix::from_matrix(sum)
    }
}

/// Everything needed to rebuild a block on new data consistently with the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermState {
    /// The term with every basis domain filled in.
    pub spec: TermSpec,
    /// Random-effect levels in column order.
    #[serde(default)]
    pub levels: Vec<i64>,
    /// Per-grid-point means subtracted from a centered functional covariate.
    #[serde(default)]
    pub center_means: Vec<f64>,
    /// Sum-to-zero constraint vector on the covariate marginal, if one was applied.
    #[serde(default)]
    pub constraint: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DesignBlock {
    pub label: String,
    pub kind: TermKind,
    pub phi: DMatrix<f64>,
    pub x: Marginal,
    pub t: Marginal,
    /// Null-space basis `Z` with `Φ_x ← Φ_x Z`, when a constraint was absorbed.
    pub constraint_transform: Option<DMatrix<f64>>,
    pub state: TermState,
    /// Observation rows whose integration window was empty.
    pub empty_window_rows: Vec<usize>,
}

impl DesignBlock {
    pub fn k_x(&self) -> usize {
        self.x.dim()
    }

    pub fn k_t(&self) -> usize {
        self.t.dim()
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn p_x(&self) -> PenaltyMatrix {
        self.x.total_penalty()
    }

    pub fn p_t(&self) -> PenaltyMatrix {
        self.t.total_penalty()
    }

    /// Penalty components expanded to block coordinates: `A ⊗ I_{K_t}` for
    /// covariate components, `I_{K_x} ⊗ B` for t components.
    pub fn penalty_components(&self) -> Vec<DMatrix<f64>> {
        let it = DMatrix::identity(self.k_t(), self.k_t());
        let ix = DMatrix::identity(self.k_x(), self.k_x());
        let mut out: Vec<DMatrix<f64>> = self.x.penalties.iter().map(|a| linalg::kron(a, &it)).collect();
        out.extend(self.t.penalties.iter().map(|b| linalg::kron(&ix, b)));
        out
    }

    pub fn num_penalties(&self) -> usize {
        self.x.penalties.len() + self.t.penalties.len()
    }

    /// Covariate-marginal basis rows at the given coordinates (after constraint).
    ///
    /// Coordinates are, by kind: nothing (intercept), the covariate value
    /// (linear and smooth scalar, concurrent), both covariate values
    /// (interaction), `s` (functional-linear, giving the coefficient surface),
    /// the level label (random intercept) or level label and covariate value
    /// (random slope).
    pub fn x_rows_at(&self, coords: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let spec = &self.state.spec;
        let m = coords.len();
        let need = match spec.kind {
            TermKind::Intercept => 0,
            TermKind::SmoothScalarInteraction | TermKind::RandomSlope => 2,
            _ => 1,
        };
        if let Some(c) = coords.iter().find(|c| c.len() != need) {
            return Err(Error::Shape(format!(
                "term {} takes {need} covariate coordinates, got {}",
                self.label,
                c.len()
            )));
        }
        let col = |j: usize| coords.iter().map(|c| c[j]).collect::<Vec<_>>();
        let raw = match spec.kind {
            TermKind::Intercept => DMatrix::from_element(m, 1, 1.0),
            TermKind::LinearScalar => DMatrix::from_column_slice(m, 1, &col(0)),
            TermKind::Concurrent if spec.x_basis.is_empty() => DMatrix::from_column_slice(m, 1, &col(0)),
            TermKind::SmoothScalar | TermKind::Concurrent | TermKind::FunctionalLinear => {
                eval_basis(&spec.x_basis[0], &col(0))?.values
            }
            TermKind::SmoothScalarInteraction => {
                let a = eval_basis(&spec.x_basis[0], &col(0))?.values;
                let b = eval_basis(&spec.x_basis[1], &col(1))?.values;
                row_tensor(&a, &b)?
            }
            TermKind::RandomIntercept | TermKind::SmoothCurveEffect | TermKind::RandomSlope => {
                let labels: Vec<i64> = col(0).iter().map(|&v| v.round() as i64).collect();
                let scale = if spec.kind == TermKind::RandomSlope { col(1) } else { vec![1.0; m] };
                incidence(&labels, &self.state.levels, &scale)
            }
        };
        Ok(match &self.constraint_transform {
            Some(z) => raw * z,
            None => raw,
        })
    }

    /// t-marginal basis rows at `t` (a column of ones for time-constant blocks).
    pub fn t_rows_at(&self, t: &[f64]) -> Result<DMatrix<f64>> {
        match (&self.state.spec.t_basis, self.state.spec.varies_over_t) {
            (Some(spec), true) => Ok(eval_basis(spec, t)?.values),
            _ => Ok(DMatrix::from_element(t.len(), 1, 1.0)),
        }
    }
}

/// Row tensor product: column `j·b + k` of the result is `A[:, j] ∘ B[:, k]`.
pub fn row_tensor(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!("row tensor of {} and {} rows", a.nrows(), b.nrows())));
    }
    let (ka, kb) = (a.ncols(), b.ncols());
    Ok(DMatrix::from_fn(a.nrows(), ka * kb, |i, c| a[(i, c / kb)] * b[(i, c % kb)]))
}

/// `λ_x (P_x ⊗ I) + λ_t (I ⊗ P_t)`.
pub fn kron_sum_penalty(
    lambda_x: f64,
    lambda_t: f64,
    p_x: &PenaltyMatrix,
    p_t: &PenaltyMatrix,
) -> Result<DMatrix<f64>> {
    for l in [lambda_x, lambda_t] {
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::Domain { value: l, lower: 0.0, upper: f64::INFINITY });
        }
    }
    let (kx, kt) = (p_x.dim(), p_t.dim());
    let a = linalg::kron(&p_x.values, &DMatrix::identity(kt, kt)) * lambda_x;
    let b = linalg::kron(&DMatrix::identity(kx, kx), &p_t.values) * lambda_t;
    Ok(a + b)
}

/// Trapezoidal weights over the grid points inside each observation's window.
///
/// Returns the `N × S` weight matrix and the rows whose window holds fewer
/// than two grid points (those rows are zero).
pub fn quadrature_weights(
    s_grid: &[f64],
    t_points: &[f64],
    window: &IntegrationWindow,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let s = s_grid.len();
    if s < 2 {
        return Err(Error::Shape("integration grid needs at least two points".into()));
    }
    let mut w = DMatrix::zeros(t_points.len(), s);
    let mut empty = Vec::new();
    for (r, &t) in t_points.iter().enumerate() {
        let lo = window.lower.at(t, s_grid);
        let hi = window.upper.at(t, s_grid);
        // small slack so grid points sitting on a window edge are not lost to rounding
        let eps = 1e-10 * (s_grid[s - 1] - s_grid[0]);
        let inside = |v: f64| v >= lo - eps && if window.upper_open { v < hi - eps } else { v <= hi + eps };
        let first = s_grid.iter().position(|&v| inside(v));
        let last = s_grid.iter().rposition(|&v| inside(v));
        match (first, last) {
            (Some(a), Some(b)) if b > a => {
                for k in a..b {
                    let half = 0.5 * (s_grid[k + 1] - s_grid[k]);
                    w[(r, k)] += half;
                    w[(r, k + 1)] += half;
                }
            }
            _ => empty.push(r),
        }
    }
    Ok((w, empty))
}

/// Incidence rows of `labels` against `levels`, scaled; unknown labels give zero rows.
fn incidence(labels: &[i64], levels: &[i64], scale: &[f64]) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(labels.len(), levels.len());
    for (r, l) in labels.iter().enumerate() {
        if let Ok(j) = levels.binary_search(l) {
            g[(r, j)] = scale[r];
        }
    }
    g
}

fn range_of(values: impl Iterator<Item = f64>) -> Result<[f64; 2]> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(lo < hi) {
        return Err(Error::Data(format!("cannot infer a basis domain from a degenerate range [{lo}, {hi}]")));
    }
    Ok([lo, hi])
}

fn resolve_domain(spec: &mut BasisSpec, values: impl Iterator<Item = f64>) -> Result<()> {
    if spec.domain.is_none() && matches!(spec.kind, BasisKind::Bspline | BasisKind::CyclicBspline) {
        spec.domain = Some(range_of(values)?);
    }
    Ok(())
}

fn require_covariates(term: &TermSpec, n: usize) -> Result<()> {
    if term.covariates.len() != n {
        return Err(Error::Specification(format!(
            "term {} needs {n} covariate name(s), got {}",
            term.display_label(),
            term.covariates.len()
        )));
    }
    Ok(())
}

fn require_x_basis(term: &TermSpec, n: usize) -> Result<()> {
    if term.x_basis.len() != n {
        return Err(Error::Specification(format!(
            "term {} needs {n} covariate basis specification(s), got {}",
            term.display_label(),
            term.x_basis.len()
        )));
    }
    Ok(())
}

/// Fills data-dependent parts of a term (basis domains, levels, centering means).
fn resolve(dataset: &FunctionalDataset, term: &TermSpec) -> Result<TermState> {
    let mut spec = term.clone();
    let mut levels = Vec::new();
    let mut center_means = Vec::new();
    if spec.varies_over_t {
        let tb = spec
            .t_basis
            .as_mut()
            .ok_or_else(|| Error::Specification(format!("term {} varies over t but has no t basis", term.display_label())))?;
        resolve_domain(tb, dataset.t.iter().copied())?;
    }
    match spec.kind {
        TermKind::Intercept => {}
        TermKind::LinearScalar => {
            require_covariates(term, 1)?;
            dataset.scalar(&term.covariates[0])?;
        }
        TermKind::SmoothScalar => {
            require_covariates(term, 1)?;
            require_x_basis(term, 1)?;
            let z = dataset.scalar(&term.covariates[0])?;
            resolve_domain(&mut spec.x_basis[0], z.iter().copied())?;
        }
        TermKind::SmoothScalarInteraction => {
            require_covariates(term, 2)?;
            require_x_basis(term, 2)?;
            for j in 0..2 {
                let z = dataset.scalar(&term.covariates[j])?;
                resolve_domain(&mut spec.x_basis[j], z.iter().copied())?;
            }
        }
        TermKind::FunctionalLinear => {
            require_covariates(term, 1)?;
            require_x_basis(term, 1)?;
            let fc = dataset.functional(&term.covariates[0])?;
            resolve_domain(&mut spec.x_basis[0], fc.grid.iter().copied())?;
            if spec.window.is_none() {
                spec.window = Some(IntegrationWindow::default());
            }
            if spec.center {
                let n = fc.values.nrows() as f64;
                center_means = fc.values.row_sum().iter().map(|v| v / n).collect();
            }
        }
        TermKind::Concurrent => {
            require_covariates(term, 1)?;
            let fc = dataset.functional(&term.covariates[0])?;
            if spec.x_basis.len() > 1 {
                return Err(Error::Specification("concurrent term takes at most one covariate basis".into()));
            }
            if let Some(b) = spec.x_basis.first_mut() {
                resolve_domain(b, fc.values.iter().copied())?;
            }
        }
        TermKind::RandomIntercept | TermKind::SmoothCurveEffect | TermKind::RandomSlope => {
            if spec.kind == TermKind::RandomSlope {
                require_covariates(term, 2)?;
                dataset.scalar(&term.covariates[1])?;
            }
            let f = dataset.factor(term.grouping_name())?;
            levels = f.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        }
    }
    Ok(TermState { spec, levels, center_means, constraint: None })
}

/// Builds the unconstrained covariate and t marginals of a resolved term.
fn marginals(dataset: &FunctionalDataset, state: &TermState) -> Result<(Marginal, Marginal, Vec<usize>)> {
    let spec = &state.spec;
    let big_n = dataset.num_obs();
    let mut empty_rows = Vec::new();
    let x = match spec.kind {
        TermKind::Intercept => Marginal { design: DMatrix::from_element(big_n, 1, 1.0), penalties: vec![] },
        TermKind::LinearScalar => {
            let z = dataset.per_obs(dataset.scalar(&spec.covariates[0])?);
            Marginal { design: DMatrix::from_column_slice(big_n, 1, &z), penalties: vec![] }
        }
        TermKind::SmoothScalar => {
            let z = dataset.per_obs(dataset.scalar(&spec.covariates[0])?);
            let b = eval_basis(&spec.x_basis[0], &z)?;
            Marginal::from_basis(b.values, difference_penalty(&spec.x_basis[0])?)
        }
        TermKind::SmoothScalarInteraction => {
            let z1 = dataset.per_obs(dataset.scalar(&spec.covariates[0])?);
            let z2 = dataset.per_obs(dataset.scalar(&spec.covariates[1])?);
            let b1 = eval_basis(&spec.x_basis[0], &z1)?.values;
            let b2 = eval_basis(&spec.x_basis[1], &z2)?.values;
            let (k1, k2) = (b1.ncols(), b2.ncols());
            let p1 = difference_penalty(&spec.x_basis[0])?;
            let p2 = difference_penalty(&spec.x_basis[1])?;
            let mut penalties = Vec::new();
            if !p1.is_null() {
                penalties.push(linalg::kron(&p1.values, &DMatrix::identity(k2, k2)));
            }
            if !p2.is_null() {
                penalties.push(linalg::kron(&DMatrix::identity(k1, k1), &p2.values));
            }
            Marginal { design: row_tensor(&b1, &b2)?, penalties }
        }
        TermKind::FunctionalLinear => {
            let fc = dataset.functional(&spec.covariates[0])?;
            let window = spec.window.unwrap_or_default();
            let (w, empty) = quadrature_weights(&fc.grid, &dataset.t, &window)?;
            empty_rows = empty;
            let phi_s = eval_basis(&spec.x_basis[0], &fc.grid)?.values;
            let s = fc.grid.len();
            if !state.center_means.is_empty() && state.center_means.len() != s {
                return Err(Error::Shape(format!(
                    "functional covariate {} has {s} grid points, fit used {}",
                    spec.covariates[0],
                    state.center_means.len()
                )));
            }
            let mut wx = DMatrix::zeros(big_n, s);
            for r in 0..big_n {
                let i = dataset.obs_curve[r];
                for k in 0..s {
                    let wk = w[(r, k)];
                    if wk != 0.0 {
                        let mean = state.center_means.get(k).copied().unwrap_or(0.0);
                        wx[(r, k)] = wk * (fc.values[(i, k)] - mean);
                    }
                }
            }
            Marginal::from_basis(wx * phi_s, difference_penalty(&spec.x_basis[0])?)
        }
        TermKind::Concurrent => {
            let fc = dataset.functional(&spec.covariates[0])?;
            let v = (0..big_n)
                .map(|r| fc.value_at(dataset.obs_curve[r], dataset.t[r]))
                .collect::<Result<Vec<_>>>()?;
            match spec.x_basis.first() {
                None => Marginal { design: DMatrix::from_column_slice(big_n, 1, &v), penalties: vec![] },
                Some(b) => Marginal::from_basis(eval_basis(b, &v)?.values, difference_penalty(b)?),
            }
        }
        TermKind::RandomIntercept | TermKind::SmoothCurveEffect | TermKind::RandomSlope => {
            let f = dataset.factor(spec.grouping_name())?;
            let labels: Vec<i64> = dataset.obs_curve.iter().map(|&i| f[i]).collect();
            let scale = if spec.kind == TermKind::RandomSlope {
                dataset.per_obs(dataset.scalar(&spec.covariates[1])?)
            } else {
                vec![1.0; big_n]
            };
            let m = state.levels.len();
            Marginal::from_basis(incidence(&labels, &state.levels, &scale), PenaltyMatrix::identity(m))
        }
    };
    let t = match (&spec.t_basis, spec.varies_over_t) {
        (Some(tb), true) => Marginal::from_basis(eval_basis(tb, &dataset.t)?.values, difference_penalty(tb)?),
        _ => Marginal { design: DMatrix::from_element(big_n, 1, 1.0), penalties: vec![] },
    };
    Ok((x, t, empty_rows))
}

fn assemble(dataset: &FunctionalDataset, state: TermState) -> Result<DesignBlock> {
    let (mut x, t, empty_window_rows) = marginals(dataset, &state)?;
    let mut constraint_transform = None;
    if let Some(c) = &state.constraint {
        if c.len() != x.dim() {
            return Err(Error::Shape(format!(
                "stored constraint has length {}, covariate marginal has {} columns",
                c.len(),
                x.dim()
            )));
        }
        let z = linalg::householder_null_basis(&DVector::from_column_slice(c));
        constrain_marginal(&mut x, &z);
        constraint_transform = Some(z);
    }
    let phi = row_tensor(&x.design, &t.design)?;
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite entries in the design of {}", state.spec.display_label())));
    }
    Ok(DesignBlock {
        label: state.spec.display_label(),
        kind: state.spec.kind,
        phi,
        x,
        t,
        constraint_transform,
        state,
        empty_window_rows,
    })
}

fn constrain_marginal(x: &mut Marginal, z: &DMatrix<f64>) {
    x.design = &x.design * z;
    for p in &mut x.penalties {
        let mut q = z.transpose() * &*p * z;
        linalg::symmetrize(&mut q);
        *p = q;
    }
}

pub fn build_term(dataset: &FunctionalDataset, term: &TermSpec) -> Result<DesignBlock> {
    dataset.validate()?;
    assemble(dataset, resolve(dataset, term)?)
}

/// Whether the constant function lies in the unpenalized part of the covariate marginal.
fn needs_constraint(x: &Marginal) -> bool {
    let k = x.dim();
    if k < 2 {
        return false;
    }
    // null space of the summed covariate penalty
    let total = x.penalties.iter().fold(DMatrix::zeros(k, k), |acc, p| acc + p);
    let (eig, vecs) = linalg::symmetric_eigen(&total);
    let tol = linalg::zero_threshold(&eig, k).max(1e-12 * eig.last().copied().unwrap_or(0.0).abs());
    let null: Vec<usize> = (0..k).filter(|&i| eig[i] <= tol).collect();
    if null.is_empty() {
        return false;
    }
    let u0 = DMatrix::from_fn(k, null.len(), |r, c| vecs[(r, null[c])]);
    let d = &x.design * u0;
    let ones = DVector::from_element(d.nrows(), 1.0);
    let gram = d.transpose() * &d;
    let rhs = d.transpose() * &ones;
    let Some(coef) = gram.clone().pseudo_inverse(1e-12 * gram.amax().max(f64::MIN_POSITIVE)).ok().map(|g| g * rhs) else {
        return false;
    };
    let resid = (&d * coef - &ones).norm();
    resid < 1e-8 * ones.norm()
}

/// Absorbs sum-to-zero constraints into blocks whose covariate marginal
/// contains unpenalized constants, when an intercept block is present.
pub fn apply_identifiability(mut blocks: Vec<DesignBlock>) -> Result<Vec<DesignBlock>> {
    let intercepts = blocks.iter().filter(|b| b.kind == TermKind::Intercept).count();
    if intercepts > 1 {
        return Err(Error::Specification(format!("{intercepts} intercept terms; at most one is allowed")));
    }
    if intercepts == 0 {
        return Ok(blocks);
    }
    for b in &mut blocks {
        if b.kind == TermKind::Intercept || b.constraint_transform.is_some() || !needs_constraint(&b.x) {
            continue;
        }
        let c = b.x.design.row_sum().transpose();
        let z = linalg::householder_null_basis(&c);
        constrain_marginal(&mut b.x, &z);
        b.phi = row_tensor(&b.x.design, &b.t.design)?;
        b.state.constraint = Some(c.iter().copied().collect());
        b.constraint_transform = Some(z);
    }
    Ok(blocks)
}

/// Design blocks of a whole model.
#[derive(Debug, Clone)]
pub struct Design {
    pub blocks: Vec<DesignBlock>,
    pub diagnostics: Vec<String>,
}

impl Design {
    pub fn build(dataset: &FunctionalDataset, terms: &[TermSpec]) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Specification("model has no terms".into()));
        }
        let blocks = terms.iter().map(|t| build_term(dataset, t)).collect::<Result<Vec<_>>>()?;
        let mut labels = BTreeSet::new();
        for b in &blocks {
            if !labels.insert(b.label.clone()) {
                return Err(Error::Specification(format!("duplicate term label `{}`", b.label)));
            }
        }
        Ok(Self::finish(apply_identifiability(blocks)?))
    }

    /// Same terms evaluated on other data, with the fitted domains, levels and constraints.
    pub fn rebuild(states: &[TermState], dataset: &FunctionalDataset) -> Result<Self> {
        dataset.validate()?;
        let blocks = states.iter().map(|s| assemble(dataset, s.clone())).collect::<Result<Vec<_>>>()?;
        Ok(Self::finish(blocks))
    }

    fn finish(blocks: Vec<DesignBlock>) -> Self {
        let diagnostics = blocks
            .iter()
            .filter(|b| !b.empty_window_rows.is_empty())
            .map(|b| {
                format!(
                    "term {}: integration window empty at {} observation(s); contribution set to 0",
                    b.label,
                    b.empty_window_rows.len()
                )
            })
            .collect();
        Self { blocks, diagnostics }
    }

    pub fn states(&self) -> Vec<TermState> {
        self.blocks.iter().map(|b| b.state.clone()).collect()
    }

    /// Column offset of each block in the concatenated design.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = acc;
                acc += b.dim();
                o
            })
            .collect()
    }

    pub fn num_coefficients(&self) -> usize {
        self.blocks.iter().map(DesignBlock::dim).sum()
    }

    /// `[Φ_1 | … | Φ_R]`.
    pub fn full_matrix(&self) -> DMatrix<f64> {
        let n = self.blocks.first().map_or(0, |b| b.phi.nrows());
        let mut out = DMatrix::zeros(n, self.num_coefficients());
        for (b, off) in self.blocks.iter().zip(self.offsets()) {
            out.columns_mut(off, b.dim()).copy_from(&b.phi);
        }
        out
    }

    pub fn block(&self, label: &str) -> Result<(usize, &DesignBlock)> {
        let offsets = self.offsets();
        self.blocks
            .iter()
            .enumerate()
            .find(|(_, b)| b.label == label)
            .map(|(i, b)| (offsets[i], b))
            .ok_or_else(|| Error::Specification(format!("unknown term label `{label}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    fn toy(n: usize, m: usize) -> FunctionalDataset {
        let grid = linspace(0.0, 1.0, m);
        let y = DMatrix::from_fn(n, m, |i, l| (i + l) as f64 * 0.1);
        let mut ds = FunctionalDataset::on_grid(&grid, &y);
        ds.scalar_covariates.insert("z".into(), (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect());
        ds
    }

    #[test]
    fn row_tensor_with_ones_is_identity() {
        let b = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let a = DMatrix::from_element(4, 1, 1.0);
        assert_eq!(row_tensor(&a, &b).unwrap(), b);
    }

    #[test]
    fn row_tensor_one_row() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(row_tensor(&a, &b).unwrap(), DMatrix::from_row_slice(1, 4, &[3.0, 4.0, 6.0, 8.0]));
    }

    #[test]
    fn row_tensor_rejects_row_mismatch() {
        let a = DMatrix::<f64>::zeros(2, 1);
        let b = DMatrix::<f64>::zeros(3, 1);
        assert!(matches!(row_tensor(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn kron_sum_of_intercept_is_t_penalty() {
        let pt = difference_penalty(&BasisSpec::bspline(5, [0.0, 1.0])).unwrap();
        let s = kron_sum_penalty(1.0, 1.0, &PenaltyMatrix::zero(1), &pt).unwrap();
        assert_eq!(s, pt.values);
    }

    #[test]
    fn kron_sum_of_identities() {
        let s = kron_sum_penalty(1.0, 1.0, &PenaltyMatrix::identity(2), &PenaltyMatrix::identity(3)).unwrap();
        assert_eq!(s, DMatrix::identity(6, 6) * 2.0);
    }

    #[test]
    fn kron_sum_rejects_nonpositive_lambda() {
        let p = PenaltyMatrix::identity(2);
        assert!(matches!(kron_sum_penalty(0.0, 1.0, &p, &p), Err(Error::Domain { .. })));
    }

    #[test]
    fn trapezoid_full_window() {
        let (w, empty) = quadrature_weights(&linspace(0.0, 1.0, 5), &[0.5], &IntegrationWindow::default()).unwrap();
        assert!(empty.is_empty());
        let expect = [0.125, 0.25, 0.25, 0.25, 0.125];
        for k in 0..5 {
            assert!((w[(0, k)] - expect[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn lagged_window_excludes_future_points() {
        let grid = linspace(0.0, 1.0, 101);
        let (w, _) = quadrature_weights(&grid, &[0.1], &IntegrationWindow::lagged(0.3)).unwrap();
        for (k, &s) in grid.iter().enumerate() {
            if s >= 0.1 - 1e-12 {
                assert_eq!(w[(0, k)], 0.0);
            }
        }
        assert!((w.row(0).sum() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn empty_window_gives_zero_row_and_diagnostic() {
        let grid = linspace(0.0, 1.0, 11);
        let (w, empty) = quadrature_weights(&grid, &[0.0, 0.5], &IntegrationWindow::lagged(0.3)).unwrap();
        assert_eq!(empty, vec![0]);
        assert_eq!(w.row(0).sum(), 0.0);
    }

    #[test]
    fn intercept_block_equals_t_basis() {
        let ds = toy(2, 5);
        let tb = BasisSpec::bspline(4, [0.0, 1.0]).with_degree(2);
        let block = build_term(&ds, &TermSpec::intercept(tb.clone())).unwrap();
        let expect = eval_basis(&tb, &ds.t).unwrap().values;
        assert_eq!(block.phi.shape(), (10, 4));
        assert_eq!(block.phi, expect);
    }

    #[test]
    fn random_intercept_is_block_diagonal() {
        let ds = toy(3, 2);
        let tb = BasisSpec::bspline(2, [0.0, 1.0]).with_degree(1);
        let block = build_term(&ds, &TermSpec::new(TermKind::RandomIntercept).over_t(tb.clone())).unwrap();
        assert_eq!(block.phi.shape(), (6, 6));
        let tblock = eval_basis(&tb, &[0.0, 1.0]).unwrap().values;
        for i in 0..3 {
            for j in 0..3 {
                let sub = block.phi.view((2 * i, 2 * j), (2, 2));
                if i == j {
                    assert_eq!(sub, tblock);
                } else {
                    assert!(sub.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn functional_linear_reproduces_known_integral() {
        // x(s) ≡ 1 and β(s,t) = s·t lies in the span of the bases, so the
        // term equals t·∫ s ds = t/2 up to trapezoid error (exact for linear s).
        let n = 2;
        let grid = linspace(0.0, 1.0, 60);
        let t = linspace(0.0, 1.0, 7);
        let y = DMatrix::zeros(n, t.len());
        let mut ds = FunctionalDataset::on_grid(&t, &y);
        ds.functional_covariates.insert(
            "x".into(),
            FunctionalCovariate { grid: grid.clone(), values: DMatrix::from_element(n, 60, 1.0) },
        );
        let sb = BasisSpec::bspline(4, [0.0, 1.0]).with_degree(1);
        let tb = BasisSpec::bspline(3, [0.0, 1.0]).with_degree(1);
        let term = TermSpec::new(TermKind::FunctionalLinear).covariate("x").x_basis(sb.clone()).over_t(tb.clone());
        let block = build_term(&ds, &term).unwrap();
        // coefficients of s in the linear B-spline basis are the knot abscissae
        let s_coef = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        let t_coef = [0.0, 0.5, 1.0];
        let theta = DVector::from_fn(12, |c, _| s_coef[c / 3] * t_coef[c % 3]);
        let f = &block.phi * theta;
        for (r, &tv) in ds.t.iter().enumerate() {
            assert!((f[r] - tv / 2.0).abs() < 1e-12, "t={tv}");
        }
    }

    #[test]
    fn smooth_scalar_constraint_centers_columns() {
        let ds = toy(6, 4);
        let terms = [
            TermSpec::intercept(BasisSpec::bspline(4, [0.0, 1.0])),
            TermSpec::new(TermKind::SmoothScalar)
                .covariate("z")
                .x_basis(BasisSpec::bspline(5, [0.0, 1.0]))
                .over_t(BasisSpec::bspline(4, [0.0, 1.0])),
        ];
        let design = Design::build(&ds, &terms).unwrap();
        assert!(design.blocks[0].constraint_transform.is_none());
        let b = &design.blocks[1];
        assert!(b.constraint_transform.is_some());
        assert_eq!(b.k_x(), 4);
        for c in 0..b.k_x() {
            assert!(b.x.design.column(c).mean().abs() < 1e-10);
        }
    }

    #[test]
    fn random_intercept_is_not_constrained() {
        let ds = toy(4, 3);
        let terms = [
            TermSpec::intercept(BasisSpec::bspline(4, [0.0, 1.0])),
            TermSpec::new(TermKind::SmoothCurveEffect).over_t(BasisSpec::bspline(4, [0.0, 1.0])),
        ];
        let design = Design::build(&ds, &terms).unwrap();
        assert!(design.blocks[1].constraint_transform.is_none());
    }

    #[test]
    fn missing_covariate_is_a_specification_error() {
        let ds = toy(3, 3);
        let term = TermSpec::new(TermKind::LinearScalar).covariate("nope").over_t(BasisSpec::bspline(4, [0.0, 1.0]));
        match build_term(&ds, &term) {
            Err(Error::Specification(m)) => assert!(m.contains("nope")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unseen_levels_get_zero_rows() {
        let ds = toy(3, 3);
        let tb = BasisSpec::bspline(4, [0.0, 1.0]);
        let design = Design::build(&ds, &[TermSpec::new(TermKind::SmoothCurveEffect).over_t(tb)]).unwrap();
        let mut other = toy(3, 3);
        other.curve_ids = vec![0, 7, 2];
        let rebuilt = Design::rebuild(&design.states(), &other).unwrap();
        let phi = &rebuilt.blocks[0].phi;
        for r in 3..6 {
            assert!(phi.row(r).iter().all(|&v| v == 0.0));
        }
        assert_eq!(phi.rows(0, 3), design.blocks[0].phi.rows(0, 3));
    }

    #[test]
    fn irregular_grids_stack_per_observation() {
        let mut ds = FunctionalDataset {
            curve_ids: vec![10, 20],
            obs_curve: vec![0, 0, 0, 1, 1],
            t: vec![0.0, 0.4, 1.0, 0.2, 0.9],
            y: vec![0.0; 5],
            ..Default::default()
        };
        ds.scalar_covariates.insert("z".into(), vec![1.0, 2.0]);
        let term = TermSpec::new(TermKind::LinearScalar).covariate("z").over_t(BasisSpec::bspline(4, [0.0, 1.0]));
        let block = build_term(&ds, &term).unwrap();
        assert_eq!(block.phi.nrows(), 5);
        let tb = eval_basis(&BasisSpec::bspline(4, [0.0, 1.0]), &ds.t).unwrap().values;
        assert_eq!(block.phi.row(4), tb.row(4) * 2.0);
    }

    fn random_matrix(rows: usize, cols: usize, seed: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |i, j| seed[(i * cols + j) % seed.len()] * (1.0 + (i + 2 * j) as f64 * 0.1))
    }

    proptest! {
        #[test]
        fn row_tensor_matches_columnwise_products(
            seed in prop::collection::vec(-3.0f64..3.0, 12..40),
            a_cols in 1usize..5,
            b_cols in 1usize..5,
        ) {
            let a = random_matrix(7, a_cols, &seed);
            let b = random_matrix(7, b_cols, &seed[3..]);
            let r = row_tensor(&a, &b).unwrap();
            for j in 0..a_cols {
                for k in 0..b_cols {
                    for i in 0..7 {
                        prop_assert_eq!(r[(i, j * b_cols + k)], a[(i, j)] * b[(i, k)]);
                    }
                }
            }
        }

        #[test]
        fn kron_sum_quadratic_form(
            ax in prop::collection::vec(-2.0f64..2.0, 9),
            at in prop::collection::vec(-2.0f64..2.0, 16),
            theta in prop::collection::vec(-2.0f64..2.0, 12),
            lx in 0.01f64..10.0,
            lt in 0.01f64..10.0,
        ) {
            let mx = DMatrix::from_row_slice(3, 3, &ax);
            let mt = DMatrix::from_row_slice(4, 4, &at);
            let px = PenaltyMatrix::from_matrix(mx.transpose() * &mx);
            let pt = PenaltyMatrix::from_matrix(mt.transpose() * &mt);
            let s = kron_sum_penalty(lx, lt, &px, &pt).unwrap();
            let th = DVector::from_column_slice(&theta);
            let direct = (th.transpose() * &s * &th)[0];
            // θ indexed (j, k) ↦ j·4 + k
            let mut brute = 0.0;
            for j in 0..3 { for jj in 0..3 { for k in 0..4 {
                brute += lx * th[j * 4 + k] * px.values[(j, jj)] * th[jj * 4 + k];
            }}}
            for j in 0..3 { for k in 0..4 { for kk in 0..4 {
                brute += lt * th[j * 4 + k] * pt.values[(k, kk)] * th[j * 4 + kk];
            }}}
            prop_assert!((direct - brute).abs() <= 1e-12 * brute.abs().max(1e-12));
            prop_assert_eq!((&s - s.transpose()).amax(), 0.0);
            let eig = linalg::symmetric_eigenvalues(&s);
            prop_assert!(eig[0] >= -1e-10 * eig[eig.len() - 1].max(1.0));
        }

        #[test]
        fn quadrature_integrates_constants(c in -3.0f64..3.0, t in 0.0f64..1.0, len in 0.05f64..1.0) {
            let grid = linspace(0.0, 1.0, 100);
            let window = IntegrationWindow { lower: WindowEdge::RelativeToT(-len), upper: WindowEdge::RelativeToT(0.0), upper_open: false };
            let (w, empty) = quadrature_weights(&grid, &[t], &window).unwrap();
            let lo = (t - len).max(0.0);
            let first = grid.iter().position(|&s| s >= lo - 1e-10).unwrap();
            let last = grid.iter().rposition(|&s| s <= t + 1e-10).unwrap();
            let span = if last > first { grid[last] - grid[first] } else { 0.0 };
            prop_assert_eq!(empty.is_empty(), last > first);
            let integral: f64 = (0..100).map(|k| w[(0, k)] * c).sum();
            prop_assert!((integral - c * span).abs() < 1e-10);
            for (k, &s) in grid.iter().enumerate() {
                if s < lo - 1e-9 || s > t + 1e-9 {
                    prop_assert_eq!(w[(0, k)], 0.0);
                }
            }
        }

        #[test]
        fn block_matches_double_sum(
            theta in prop::collection::vec(-2.0f64..2.0, 20),
        ) {
            let ds = toy(4, 6);
            let term = TermSpec::new(TermKind::SmoothScalar)
                .covariate("z")
                .x_basis(BasisSpec::bspline(5, [0.0, 1.0]))
                .over_t(BasisSpec::bspline(4, [0.0, 1.0]));
            let b = build_term(&ds, &term).unwrap();
            let th = DVector::from_column_slice(&theta);
            let f = &b.phi * &th;
            for r in 0..ds.num_obs() {
                let mut s = 0.0;
                for j in 0..5 { for k in 0..4 {
                    s += b.x.design[(r, j)] * b.t.design[(r, k)] * th[j * 4 + k];
                }}
                prop_assert!((f[r] - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }
}
