//! Marginal spline bases and their difference penalties.
//!
//! B-splines use equidistant knots over the declared domain with the boundary
//! knots replicated `degree` extra times (clamped knot vector). Cyclic
//! B-splines wrap equidistant knots around the period so the first and last
//! basis functions join smoothly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Bspline,
    CyclicBspline,
    /// One indicator column per level; points are level indices `0..K`.
    DummyIndicator,
    Constant,
}

fn default_degree() -> usize {
    3
}

fn default_penalty_order() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub kind: BasisKind,
    #[serde(default = "default_degree")]
    pub degree: usize,
    pub num_basis: usize,
    /// Closed interval `[lower, upper]`. May be left unset in model
    /// configurations and filled in from the data range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<[f64; 2]>,
    #[serde(default = "default_penalty_order")]
    pub penalty_order: usize,
}

impl BasisSpec {
    pub fn bspline(num_basis: usize, domain: [f64; 2]) -> Self {
        Self { kind: BasisKind::Bspline, degree: 3, num_basis, domain: Some(domain), penalty_order: 1 }
    }

    pub fn cyclic(num_basis: usize, domain: [f64; 2]) -> Self {
        Self { kind: BasisKind::CyclicBspline, degree: 3, num_basis, domain: Some(domain), penalty_order: 1 }
    }

    pub fn dummy(levels: usize) -> Self {
        Self { kind: BasisKind::DummyIndicator, degree: 0, num_basis: levels, domain: None, penalty_order: 1 }
    }

    pub fn constant() -> Self {
        Self { kind: BasisKind::Constant, degree: 0, num_basis: 1, domain: None, penalty_order: 1 }
    }

    pub fn with_degree(mut self, degree: usize) -> Self {
        self.degree = degree;
        self
    }

    pub fn with_penalty_order(mut self, order: usize) -> Self {
        self.penalty_order = order;
        self
    }

    fn domain(&self) -> Result<(f64, f64)> {
        let [lo, hi] = self
            .domain
            .ok_or_else(|| Error::InvalidSpec("basis domain is not set".into()))?;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidSpec(format!("domain lower {lo} must be below upper {hi}")));
        }
        Ok((lo, hi))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_basis == 0 {
            return Err(Error::InvalidSpec("num_basis must be positive".into()));
        }
        match self.kind {
            BasisKind::Bspline | BasisKind::CyclicBspline => {
                if self.num_basis <= self.degree {
                    return Err(Error::InvalidSpec(format!(
                        "num_basis {} must exceed degree {}",
                        self.num_basis, self.degree
                    )));
                }
                self.domain()?;
            }
            BasisKind::Constant if self.num_basis != 1 => {
                return Err(Error::InvalidSpec("constant basis has exactly one column".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Basis functions evaluated at a set of points.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub spec: BasisSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub values: DMatrix<f64>,
    pub rank_deficiency: usize,
}

impl PenaltyMatrix {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// A matrix of zeros is treated as "no penalty" for the marginal.
    pub fn is_null(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn zero(dim: usize) -> Self {
        Self { values: DMatrix::zeros(dim, dim), rank_deficiency: dim }
    }

    pub fn identity(dim: usize) -> Self {
        Self { values: DMatrix::identity(dim, dim), rank_deficiency: 0 }
    }

    /// Builds a penalty and determines its rank deficiency numerically.
    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        let dim = values.nrows();
        let eig = linalg::symmetric_eigenvalues(&values);
        let rank_deficiency = if eig.iter().all(|&e| e == 0.0) {
            dim
        } else {
            linalg::rank_deficiency(&eig, dim)
        };
        Self { values, rank_deficiency }
    }
}

pub fn eval_basis(spec: &BasisSpec, points: &[f64]) -> Result<BasisMatrix> {
    spec.validate()?;
    let k = spec.num_basis;
    let mut values = DMatrix::zeros(points.len(), k);
    match spec.kind {
        BasisKind::Constant => values.fill(1.0),
        BasisKind::DummyIndicator => {
            for (r, &x) in points.iter().enumerate() {
                let level = x.round();
                if (x - level).abs() > 1e-9 || level < 0.0 || level >= k as f64 {
                    return Err(Error::Domain { value: x, lower: 0.0, upper: (k - 1) as f64 });
                }
                values[(r, level as usize)] = 1.0;
            }
        }
        BasisKind::Bspline => {
            let (lo, hi) = spec.domain()?;
            let knots = clamped_knots(spec.degree, k, lo, hi);
            let slack = 1e-10 * (hi - lo);
            let mut local = vec![0.0; spec.degree + 1];
            for (r, &x) in points.iter().enumerate() {
                if !(x >= lo - slack && x <= hi + slack) {
                    return Err(Error::Domain { value: x, lower: lo, upper: hi });
                }
                let x = x.clamp(lo, hi);
                let span = find_span(&knots, spec.degree, k, x);
                basis_functions(&knots, span, x, spec.degree, &mut local);
                for (j, &v) in local.iter().enumerate() {
                    values[(r, span - spec.degree + j)] = v;
                }
            }
        }
        BasisKind::CyclicBspline => {
            let (lo, hi) = spec.domain()?;
            let q = spec.degree;
            let h = (hi - lo) / k as f64;
            for (r, &x) in points.iter().enumerate() {
                let u = ((x - lo) / h).rem_euclid(k as f64);
                let m = u.floor();
                let f = u - m;
                let m = m as usize % k;
                for j in 0..=q {
                    // function index m - j (mod k) at local argument f + j
                    let col = (m + k - j) % k;
                    values[(r, col)] += cardinal_bspline(q, f + j as f64);
                }
            }
        }
    }
    Ok(BasisMatrix { values, spec: spec.clone() })
}

/// Knot vector with `degree + 1` copies of each boundary and equidistant interior knots.
fn clamped_knots(degree: usize, num_basis: usize, lo: f64, hi: f64) -> Vec<f64> {
    let intervals = num_basis - degree;
    let h = (hi - lo) / intervals as f64;
    let mut knots = Vec::with_capacity(num_basis + degree + 1);
    knots.extend(std::iter::repeat_n(lo, degree));
    for j in 0..=intervals {
        knots.push(if j == intervals { hi } else { lo + j as f64 * h });
    }
    knots.extend(std::iter::repeat_n(hi, degree));
    knots
}

fn find_span(knots: &[f64], degree: usize, num_basis: usize, x: f64) -> usize {
    if x >= knots[num_basis] {
        return num_basis - 1;
    }
    let (mut low, mut high) = (degree, num_basis);
    while high - low > 1 {
        let mid = (low + high) / 2;
        if x < knots[mid] {
            high = mid;
        } else {
            low = mid;
        }
    }
    low
}

/// Cox–de Boor triangle for the `degree + 1` functions non-zero on `span`.
fn basis_functions(knots: &[f64], span: usize, x: f64, degree: usize, out: &mut [f64]) {
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    out[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { out[r] / denom };
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// Uniform B-spline of the given degree on integer knots `0..=degree+1`.
fn cardinal_bspline(degree: usize, v: f64) -> f64 {
    if degree == 0 {
        return if (0.0..1.0).contains(&v) { 1.0 } else { 0.0 };
    }
    let q = degree as f64;
    (v * cardinal_bspline(degree - 1, v) + (q + 1.0 - v) * cardinal_bspline(degree - 1, v - 1.0)) / q
}

/// `d`-th order difference operator, `(k − d) × k`.
pub fn difference_operator(k: usize, d: usize) -> DMatrix<f64> {
    let mut op = DMatrix::identity(k, k);
    for _ in 0..d {
        let rows = op.nrows();
        op = DMatrix::from_fn(rows - 1, k, |i, j| op[(i + 1, j)] - op[(i, j)]);
    }
    op
}

/// `d`-th power of the wrap-around first difference, `k × k`.
fn cyclic_difference_operator(k: usize, d: usize) -> DMatrix<f64> {
    let first = DMatrix::from_fn(k, k, |i, j| {
        if j == (i + 1) % k {
            1.0
        } else if j == i {
            -1.0
        } else {
            0.0
        }
    });
    let mut op = DMatrix::identity(k, k);
    for _ in 0..d {
        op = &first * op;
    }
    op
}

pub fn difference_penalty(spec: &BasisSpec) -> Result<PenaltyMatrix> {
    let k = spec.num_basis;
    match spec.kind {
        BasisKind::Constant => Ok(PenaltyMatrix::zero(1)),
        BasisKind::DummyIndicator => Ok(PenaltyMatrix::identity(k)),
        BasisKind::Bspline | BasisKind::CyclicBspline => {
            let d = spec.penalty_order;
            if d == 0 || d >= k {
                return Err(Error::InvalidSpec(format!(
                    "penalty order {d} must satisfy 0 < d < num_basis ({k})"
                )));
            }
            let (op, rank_deficiency) = if spec.kind == BasisKind::Bspline {
                (difference_operator(k, d), d)
            } else {
                (cyclic_difference_operator(k, d), 1)
            };
            Ok(PenaltyMatrix { values: op.transpose() * op, rank_deficiency })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn constant_basis_is_column_of_ones() {
        let b = eval_basis(&BasisSpec::constant(), &[0.3, -2.0, 7.0]).unwrap();
        assert_eq!(b.values, DMatrix::from_element(3, 1, 1.0));
    }

    #[test]
    fn cubic_bspline_rows_sum_to_one() {
        let spec = BasisSpec::bspline(8, [0.0, 1.0]);
        let b = eval_basis(&spec, &linspace(0.0, 1.0, 20)).unwrap();
        assert_eq!(b.values.shape(), (20, 8));
        for r in 0..20 {
            assert!((b.values.row(r).sum() - 1.0).abs() < 1e-12);
            assert!(b.values.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cyclic_basis_is_periodic() {
        let spec = BasisSpec::cyclic(9, [2.0, 5.0]);
        let b = eval_basis(&spec, &[2.0, 5.0]).unwrap();
        assert!((b.values.row(0) - b.values.row(1)).amax() < 1e-12);
        let inner = eval_basis(&spec, &linspace(2.0, 5.0, 31)).unwrap();
        for r in 0..31 {
            assert!((inner.values.row(r).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bspline_matches_cox_de_boor_recursion() {
        // independent textbook recursion on the same clamped knot vector
        fn naive(knots: &[f64], i: usize, p: usize, x: f64, last: bool) -> f64 {
            if p == 0 {
                let inside = knots[i] <= x && x < knots[i + 1];
                let right_end = last && x == knots[i + 1] && knots[i] < knots[i + 1];
                return if inside || right_end { 1.0 } else { 0.0 };
            }
            let mut v = 0.0;
            let d1 = knots[i + p] - knots[i];
            if d1 > 0.0 {
                v += (x - knots[i]) / d1 * naive(knots, i, p - 1, x, last);
            }
            let d2 = knots[i + p + 1] - knots[i + 1];
            if d2 > 0.0 {
                v += (knots[i + p + 1] - x) / d2 * naive(knots, i + 1, p - 1, x, last);
            }
            v
        }
        let spec = BasisSpec::bspline(7, [-1.0, 2.0]);
        let knots = clamped_knots(3, 7, -1.0, 2.0);
        let xs = [-1.0, -0.3, 0.0, 0.55, 1.2, 1.999];
        let b = eval_basis(&spec, &xs).unwrap();
        for (r, &x) in xs.iter().enumerate() {
            for j in 0..7 {
                let expect = naive(&knots, j, 3, x, false);
                assert!((b.values[(r, j)] - expect).abs() < 1e-12, "x={x} j={j}");
            }
        }
    }

    #[test]
    fn out_of_domain_point_is_rejected() {
        let spec = BasisSpec::bspline(6, [0.0, 1.0]);
        assert!(matches!(eval_basis(&spec, &[1.5]), Err(Error::Domain { .. })));
        // cyclic bases reduce modulo the period instead
        let c = BasisSpec::cyclic(6, [0.0, 1.0]);
        let a = eval_basis(&c, &[1.25]).unwrap();
        let b = eval_basis(&c, &[0.25]).unwrap();
        assert!((a.values - b.values).amax() < 1e-12);
    }

    #[test]
    fn too_few_basis_functions_is_invalid() {
        let spec = BasisSpec::bspline(3, [0.0, 1.0]);
        assert!(matches!(eval_basis(&spec, &[0.5]), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn first_difference_penalty_small_case() {
        let spec = BasisSpec::bspline(3, [0.0, 1.0]).with_degree(2);
        let p = difference_penalty(&spec).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(p.values, expect);
        assert_eq!(p.rank_deficiency, 1);
    }

    #[test]
    fn dummy_penalty_is_identity() {
        let p = difference_penalty(&BasisSpec::dummy(5)).unwrap();
        assert_eq!(p.values, DMatrix::identity(5, 5));
        assert_eq!(p.rank_deficiency, 0);
    }

    #[test]
    fn constant_penalty_is_zero() {
        let p = difference_penalty(&BasisSpec::constant()).unwrap();
        assert_eq!(p.values, DMatrix::zeros(1, 1));
        assert_eq!(p.rank_deficiency, 1);
    }

    #[test]
    fn penalty_order_must_be_below_basis_size() {
        let spec = BasisSpec::bspline(5, [0.0, 1.0]).with_penalty_order(5);
        assert!(matches!(difference_penalty(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn first_difference_k8_has_one_null_eigenvalue() {
        let p = difference_penalty(&BasisSpec::bspline(8, [0.0, 1.0])).unwrap();
        let (eig, _) = linalg::symmetric_eigen(&p.values);
        let max = eig.iter().cloned().fold(0.0, f64::max);
        let zeros = eig.iter().filter(|e| e.abs() < 1e-10 * max).count();
        assert_eq!(zeros, 1);
        assert_eq!(eig.iter().filter(|&&e| e > 1e-10 * max).count(), 7);
    }

    #[test]
    fn first_difference_annihilates_constants() {
        for spec in [BasisSpec::bspline(9, [0.0, 1.0]), BasisSpec::cyclic(9, [0.0, 1.0])] {
            let p = difference_penalty(&spec).unwrap();
            let ones = nalgebra::DVector::from_element(9, 1.0);
            assert_eq!((&p.values * ones).amax(), 0.0);
        }
    }

    fn spec_strategy() -> impl Strategy<Value = BasisSpec> {
        (0usize..4, 1usize..4, 0usize..12, prop::bool::ANY).prop_map(|(deg, d, extra, cyclic)| {
            let k = deg.max(d) + 1 + extra;
            let base = if cyclic { BasisSpec::cyclic(k, [0.0, 1.0]) } else { BasisSpec::bspline(k, [0.0, 1.0]) };
            base.with_degree(deg).with_penalty_order(d)
        })
    }

    proptest! {
        #[test]
        fn partition_of_unity(spec in spec_strategy(), xs in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let b = eval_basis(&spec, &xs).unwrap();
            for r in 0..xs.len() {
                prop_assert!((b.values.row(r).sum() - 1.0).abs() < 1e-12);
                prop_assert!(b.values.row(r).iter().all(|&v| v >= -1e-15));
            }
        }

        #[test]
        fn penalty_symmetric_psd_with_declared_rank(spec in spec_strategy()) {
            let p = difference_penalty(&spec).unwrap();
            let k = spec.num_basis;
            prop_assert_eq!((&p.values - p.values.transpose()).amax(), 0.0);
            let eig = linalg::symmetric_eigenvalues(&p.values);
            let max = eig.iter().cloned().fold(0.0, f64::max);
            prop_assert!(eig[0] >= -1e-10 * max);
            let rank = eig.iter().filter(|&&e| e > linalg::zero_threshold(&eig, k)).count();
            prop_assert_eq!(rank, k - p.rank_deficiency);
        }
    }
}
