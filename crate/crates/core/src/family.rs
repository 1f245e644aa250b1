//! Response distributions with their links, log-likelihoods and scoring quantities.
//!
//! Every family is handled through the score `u = ∂ℓ/∂η` and the expected
//! information `w = E[−∂²ℓ/∂η²]`. The working response is `z = η + u / w`,
//! which for exponential families coincides with `η + (y − μ) g'(μ)`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

pub const WEIGHT_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Gaussian,
    Binomial,
    Poisson,
    NegativeBinomial,
    Beta,
    ScaledT,
}

impl FamilyKind {
    pub fn link(self) -> Link {
        match self {
            FamilyKind::Gaussian | FamilyKind::ScaledT => Link::Identity,
            FamilyKind::Binomial | FamilyKind::Beta => Link::Logit,
            FamilyKind::Poisson | FamilyKind::NegativeBinomial => Link::Log,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    Identity,
    Logit,
    Log,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => logistic(eta),
            Link::Log => eta.exp(),
        }
    }

    pub fn apply(self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Log => mu.ln(),
        }
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// ψ'(x) for x > 0 by upward recurrence and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + x2 / x * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 * (1.0 / 30.0 - x2 * 5.0 / 66.0))))
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

fn is_count(y: f64) -> bool {
    y >= 0.0 && (y - y.round()).abs() < 1e-9
}

/// Response distribution and its nuisance parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Family {
    pub kind: FamilyKind,
    pub link: Link,
    /// Error variance σ² (gaussian), number of trials (binomial), dispersion
    /// θ (negative binomial), precision φ (beta), scale σ (scaled t). Unused
    /// for poisson.
    pub nuisance: f64,
    pub estimate_nuisance: bool,
    /// Degrees of freedom of the scaled t; always held fixed.
    #[serde(default)]
    pub df: f64,
}

impl Family {
    fn new(kind: FamilyKind, nuisance: f64, estimate: bool) -> Self {
        Self { kind, link: kind.link(), nuisance, estimate_nuisance: estimate, df: 0.0 }
    }

    pub fn gaussian(variance: f64) -> Self {
        Self::new(FamilyKind::Gaussian, variance, true)
    }

    pub fn binomial(trials: f64) -> Self {
        Self::new(FamilyKind::Binomial, trials, false)
    }

    pub fn poisson() -> Self {
        Self::new(FamilyKind::Poisson, 1.0, false)
    }

    pub fn negative_binomial(theta: f64) -> Self {
        Self::new(FamilyKind::NegativeBinomial, theta, true)
    }

    pub fn beta(phi: f64) -> Self {
        Self::new(FamilyKind::Beta, phi, true)
    }

    pub fn scaled_t(df: f64, scale: f64) -> Self {
        Self { df, ..Self::new(FamilyKind::ScaledT, scale, true) }
    }

    /// Holds the nuisance parameter at its current value.
    pub fn fixed(mut self) -> Self {
        self.estimate_nuisance = false;
        self
    }

    pub fn with_nuisance(&self, value: f64) -> Self {
        Self { nuisance: value, ..self.clone() }
    }

    /// Whether the outer optimizer should treat the nuisance parameter as free.
    pub fn has_free_nuisance(&self) -> bool {
        self.estimate_nuisance && !matches!(self.kind, FamilyKind::Binomial | FamilyKind::Poisson)
    }

    pub fn validate(&self) -> Result<()> {
        if self.link != self.kind.link() {
            return Err(Error::Specification(format!(
                "family {:?} supports only the {:?} link",
                self.kind,
                self.kind.link()
            )));
        }
        if self.kind != FamilyKind::Poisson && !(self.nuisance > 0.0 && self.nuisance.is_finite()) {
            return Err(Error::Specification(format!("nuisance parameter must be positive, got {}", self.nuisance)));
        }
        if self.kind == FamilyKind::ScaledT && !(self.df > 0.0 && self.df.is_finite()) {
            return Err(Error::Specification(format!("scaled t needs positive degrees of freedom, got {}", self.df)));
        }
        Ok(())
    }

    /// Mean on the response scale; for the binomial this is the success probability.
    pub fn mean(&self, eta: f64) -> f64 {
        self.link.inverse(eta)
    }

    pub fn check_support(&self, y: &[f64]) -> Result<()> {
        for (i, &v) in y.iter().enumerate() {
            let ok = match self.kind {
                FamilyKind::Gaussian | FamilyKind::ScaledT => v.is_finite(),
                FamilyKind::Binomial => is_count(v) && v <= self.nuisance + 1e-9,
                FamilyKind::Poisson | FamilyKind::NegativeBinomial => is_count(v),
                FamilyKind::Beta => v > 0.0 && v < 1.0,
            };
            if !ok {
                return Err(Error::Data(format!("response {v} at observation {i} is outside the {:?} support", self.kind)));
            }
        }
        Ok(())
    }

    /// Log-density of one observation at linear predictor `eta`.
    pub fn loglik_obs_eta(&self, y: f64, eta: f64) -> f64 {
        match self.kind {
            FamilyKind::Binomial => {
                let m = self.nuisance;
                ln_choose(m, y) + y * eta - m * softplus(eta)
            }
            FamilyKind::Poisson => y * eta - eta.exp() - ln_gamma(y + 1.0),
            FamilyKind::NegativeBinomial => {
                let th = self.nuisance;
                // log(μ / (θ + μ)) = η − log(θ + e^η)
                let log_th_mu = th.ln() + softplus(eta - th.ln());
                let tail = if y == 0.0 { 0.0 } else { y * (eta - log_th_mu) };
                ln_gamma(y + th) - ln_gamma(th) - ln_gamma(y + 1.0) + th * (th.ln() - log_th_mu) + tail
            }
            _ => self.loglik_obs(y, self.mean(eta)),
        }
    }

    /// Log-density of one observation at mean `mu`.
    pub fn loglik_obs(&self, y: f64, mu: f64) -> f64 {
        let nu = self.nuisance;
        match self.kind {
            FamilyKind::Gaussian => -0.5 * (2.0 * std::f64::consts::PI * nu).ln() - (y - mu).powi(2) / (2.0 * nu),
            FamilyKind::Binomial => ln_choose(nu, y) + xlogy(y, mu) + xlogy(nu - y, 1.0 - mu),
            FamilyKind::Poisson => xlogy(y, mu) - mu - ln_gamma(y + 1.0),
            FamilyKind::NegativeBinomial => {
                ln_gamma(y + nu) - ln_gamma(nu) - ln_gamma(y + 1.0) + nu * (nu / (nu + mu)).ln()
                    + xlogy(y, mu / (nu + mu))
            }
            FamilyKind::Beta => {
                let a = mu * nu;
                let b = (1.0 - mu) * nu;
                ln_gamma(nu) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * y.ln() + (b - 1.0) * (1.0 - y).ln()
            }
            FamilyKind::ScaledT => {
                let df = self.df;
                let r = (y - mu) / nu;
                ln_gamma((df + 1.0) / 2.0)
                    - ln_gamma(df / 2.0)
                    - 0.5 * (df * std::f64::consts::PI).ln()
                    - nu.ln()
                    - (df + 1.0) / 2.0 * (r * r / df).ln_1p()
            }
        }
    }

    /// Σ log-density at means `mu`.
    pub fn loglik(&self, y: &[f64], mu: &[f64]) -> Result<f64> {
        check_len(y, mu)?;
        self.check_support(y)?;
        let v: f64 = y.iter().zip(mu).map(|(&yi, &mi)| self.loglik_obs(yi, mi)).sum();
        finite(v, "log-likelihood")
    }

    /// Σ log-density at linear predictors `eta`.
    pub fn loglik_eta(&self, y: &[f64], eta: &[f64]) -> Result<f64> {
        check_len(y, eta)?;
        let v: f64 = y.iter().zip(eta).map(|(&yi, &ei)| self.loglik_obs_eta(yi, ei)).sum();
        finite(v, "log-likelihood")
    }

    /// Score `∂ℓ/∂η` and expected information on the η scale.
    pub fn score_info(&self, y: f64, eta: f64) -> (f64, f64) {
        let nu = self.nuisance;
        match self.kind {
            FamilyKind::Gaussian => ((y - eta) / nu, 1.0 / nu),
            FamilyKind::Binomial => {
                let p = logistic(eta);
                (y - nu * p, nu * p * (1.0 - p))
            }
            FamilyKind::Poisson => {
                let mu = eta.exp();
                (y - mu, mu)
            }
            FamilyKind::NegativeBinomial => {
                let mu = eta.exp();
                let denom = 1.0 + mu / nu;
                ((y - mu) / denom, mu / denom)
            }
            FamilyKind::Beta => {
                let mu = logistic(eta);
                let dmu = mu * (1.0 - mu);
                let (a, b) = (mu * nu, (1.0 - mu) * nu);
                let score_mu = nu * ((y / (1.0 - y)).ln() - digamma(a) + digamma(b));
                let info_mu = nu * nu * (trigamma(a) + trigamma(b));
                (score_mu * dmu, info_mu * dmu * dmu)
            }
            FamilyKind::ScaledT => {
                let df = self.df;
                let r = y - eta;
                let s2 = nu * nu;
                ((df + 1.0) * r / (df * s2 + r * r), (df + 1.0) / ((df + 3.0) * s2))
            }
        }
    }

    /// Working response and (floored) working weights.
    pub fn irls_quantities(&self, y: &[f64], eta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len(y, eta)?;
        let mut z = Vec::with_capacity(y.len());
        let mut w = Vec::with_capacity(y.len());
        for (&yi, &ei) in y.iter().zip(eta) {
            if !ei.is_finite() {
                return Err(Error::Numeric(format!("non-finite linear predictor {ei}")));
            }
            let (u, info) = self.score_info(yi, ei);
            let wi = if info.is_finite() { info.max(WEIGHT_FLOOR) } else { WEIGHT_FLOOR };
            let zi = if self.kind == FamilyKind::Gaussian { yi } else { ei + u / wi };
            if !zi.is_finite() {
                return Err(Error::Numeric(format!("non-finite working response at η = {ei}")));
            }
            z.push(zi);
            w.push(wi);
        }
        Ok((z, w))
    }

    /// Log-density of one observation under the saturated model.
    pub fn saturated_obs(&self, y: f64) -> f64 {
        match self.kind {
            FamilyKind::Binomial => self.loglik_obs(y, y / self.nuisance),
            FamilyKind::Beta => self.loglik_obs(y, beta_saturated_mean(y, self.nuisance)),
            _ => self.loglik_obs(y, y),
        }
    }

    pub fn saturated_loglik(&self, y: &[f64]) -> f64 {
        y.iter().map(|&v| self.saturated_obs(v)).sum()
    }

    /// 2 (ℓ_saturated − ℓ).
    pub fn deviance(&self, y: &[f64], mu: &[f64]) -> Result<f64> {
        let l = self.loglik(y, mu)?;
        Ok((2.0 * (self.saturated_loglik(y) - l)).max(0.0))
    }

    /// Starting means for the first working system.
    pub fn initial_mu(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .map(|&v| match self.kind {
                FamilyKind::Gaussian | FamilyKind::ScaledT => v,
                FamilyKind::Binomial => (v + 0.5 * self.nuisance) / (2.0 * self.nuisance),
                FamilyKind::Poisson | FamilyKind::NegativeBinomial => v + 0.1,
                FamilyKind::Beta => v.clamp(0.01, 0.99),
            })
            .collect()
    }

    pub fn initial_eta(&self, y: &[f64]) -> Vec<f64> {
        self.initial_mu(y).into_iter().map(|m| self.link.apply(m)).collect()
    }
}

/// Mean maximizing the beta log-density of `y` at precision `phi`.
fn beta_saturated_mean(y: f64, phi: f64) -> f64 {
    // g(μ) = logit(y) − ψ(μφ) + ψ((1−μ)φ) is strictly decreasing on (0, 1)
    let target = (y / (1.0 - y)).ln();
    let g = |m: f64| target - digamma(m * phi) + digamma((1.0 - m) * phi);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut m = y;
    for _ in 0..100 {
        let gm = g(m);
        if gm > 0.0 {
            lo = m;
        } else {
            hi = m;
        }
        let slope = -phi * (trigamma(m * phi) + trigamma((1.0 - m) * phi));
        let mut next = m - gm / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - m).abs() < 1e-15 {
            return next;
        }
        m = next;
    }
    m
}

fn ln_choose(m: f64, y: f64) -> f64 {
    ln_gamma(m + 1.0) - ln_gamma(y + 1.0) - ln_gamma(m - y + 1.0)
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} responses but {} predictor values", a.len(), b.len())));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is not finite")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::Distribution;

    #[test]
    fn gaussian_zero_residual_loglik() {
        let f = Family::gaussian(1.0);
        let y = [0.3, -1.0, 2.5, 4.0];
        let l = f.loglik(&y, &y).unwrap();
        assert!((l + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn binomial_closed_form() {
        let f = Family::binomial(60.0);
        let l = f.loglik(&[30.0], &[0.5]).unwrap();
        let expect = ln_choose(60.0, 30.0) + 60.0 * 0.5_f64.ln();
        assert!((l - expect).abs() < 1e-10);
        // same value through η
        assert!((f.loglik_eta(&[30.0], &[0.0]).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn ln_choose_small_values() {
        assert!((ln_choose(5.0, 2.0) - 10.0_f64.ln()).abs() < 1e-12);
        assert!(ln_choose(7.0, 0.0).abs() < 1e-12);
    }

    #[test]
    fn negative_binomial_variance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (mu, theta) = (3.0, 0.5);
        // gamma–poisson mixture
        let gamma = rand_distr::Gamma::new(theta, mu / theta).unwrap();
        let draws: Vec<f64> = (0..1_000_000)
            .map(|_| rand_distr::Poisson::new(f64::max(gamma.sample(&mut rng), 1e-300)).unwrap().sample(&mut rng))
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let expect = mu + mu * mu / theta;
        assert!(((v - expect) / expect).abs() < 0.02, "variance {v}");
    }

    #[test]
    fn nb_density_sums_to_one() {
        let f = Family::negative_binomial(0.5);
        let total: f64 = (0..2000).map(|y| f.loglik_obs(y as f64, 3.0).exp()).sum();
        assert!((total - 1.0).abs() < 1e-8);
        let f = f.with_nuisance(2.0);
        let eta = 1.3_f64;
        assert!((f.loglik_obs_eta(4.0, eta) - f.loglik_obs(4.0, eta.exp())).abs() < 1e-12);
    }

    #[test]
    fn gaussian_working_quantities() {
        let f = Family::gaussian(2.0);
        let (z, w) = f.irls_quantities(&[1.5, -0.5], &[0.2, 0.9]).unwrap();
        assert_eq!(z, vec![1.5, -0.5]);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn binomial_weight_at_zero() {
        let f = Family::binomial(60.0);
        let (_, w) = f.irls_quantities(&[10.0], &[0.0]).unwrap();
        assert_eq!(w[0], 15.0);
    }

    #[test]
    fn binomial_deviance_small_case() {
        let f = Family::binomial(2.0);
        let d = f.deviance(&[1.0], &[0.25]).unwrap();
        let expect = 2.0 * ((0.5_f64 / 0.25).ln() + (0.5_f64 / 0.75).ln());
        assert!((d - expect).abs() < 1e-12);
    }

    #[test]
    fn deviance_zero_at_saturation() {
        for (f, y) in [
            (Family::gaussian(1.3), vec![0.2, 5.0]),
            (Family::poisson(), vec![0.0, 3.0, 7.0]),
            (Family::negative_binomial(0.7), vec![0.0, 4.0]),
            (Family::scaled_t(3.0, 0.4), vec![-1.0, 2.0]),
        ] {
            assert!(f.deviance(&y, &y).unwrap().abs() < 1e-10);
        }
        let f = Family::binomial(4.0);
        assert!(f.deviance(&[0.0, 2.0, 4.0], &[0.0, 0.5, 1.0]).unwrap().abs() < 1e-10);
    }

    #[test]
    fn gaussian_deviance_is_scaled_rss() {
        let f = Family::gaussian(0.5);
        let d = f.deviance(&[1.0, 2.0], &[0.0, 2.5]).unwrap();
        assert!((d - (1.0 + 0.25) / 0.5).abs() < 1e-12);
    }

    #[test]
    fn beta_saturated_mean_maximizes() {
        let f = Family::beta(6.0);
        for y in [0.05, 0.3, 0.5, 0.93] {
            let m = beta_saturated_mean(y, 6.0);
            let best = f.loglik_obs(y, m);
            for d in [-1e-4, 1e-4] {
                assert!(f.loglik_obs(y, m + d) <= best + 1e-14);
            }
        }
    }

    #[test]
    fn support_violations_are_data_errors() {
        assert!(matches!(Family::beta(2.0).loglik(&[1.0], &[0.5]), Err(Error::Data(_))));
        assert!(matches!(Family::negative_binomial(1.0).loglik(&[-1.0], &[1.0]), Err(Error::Data(_))));
        assert!(matches!(Family::negative_binomial(1.0).loglik(&[1.5], &[1.0]), Err(Error::Data(_))));
    }

    #[test]
    fn trigamma_reference_values() {
        assert!((trigamma(1.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-12);
        // ψ'(x) − ψ'(x+1) = 1/x²
        assert!((trigamma(3.7) - trigamma(4.7) - 1.0 / 3.7_f64.powi(2)).abs() < 1e-13);
    }

    #[test]
    fn poisson_single_step_matches_newton() {
        // one IRLS update equals one Newton step for the canonical link
        let f = Family::poisson();
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| ((1.0 + x) * 2.0_f64).round()).collect();
        let beta = [0.3, 0.5];
        let eta: Vec<f64> = xs.iter().map(|x| beta[0] + beta[1] * x).collect();
        let (z, w) = f.irls_quantities(&y, &eta).unwrap();
        let mut xtwx = nalgebra::Matrix2::zeros();
        let mut xtwz = nalgebra::Vector2::zeros();
        let mut grad = nalgebra::Vector2::zeros();
        for i in 0..50 {
            let row = nalgebra::Vector2::new(1.0, xs[i]);
            xtwx += row * row.transpose() * w[i];
            xtwz += row * w[i] * z[i];
            grad += row * (y[i] - eta[i].exp());
        }
        let irls = xtwx.try_inverse().unwrap() * xtwz;
        let newton = nalgebra::Vector2::new(beta[0], beta[1]) + xtwx.try_inverse().unwrap() * grad;
        assert!((irls - newton).amax() < 1e-10);
    }

    fn family_strategy() -> impl Strategy<Value = (Family, f64, f64)> {
        let eta = -2.5f64..2.5;
        prop_oneof![
            (0.2f64..3.0, -3.0f64..3.0, eta.clone()).prop_map(|(v, y, e)| (Family::gaussian(v), y, e)),
            (1u32..40, 0.0f64..1.0, eta.clone())
                .prop_map(|(m, p, e)| (Family::binomial(m as f64), (p * m as f64).round(), e)),
            (0u32..20, eta.clone()).prop_map(|(y, e)| (Family::poisson(), y as f64, e)),
            (0.2f64..5.0, 0u32..20, eta.clone())
                .prop_map(|(t, y, e)| (Family::negative_binomial(t), y as f64, e)),
            (1.0f64..50.0, 0.02f64..0.98, eta.clone()).prop_map(|(p, y, e)| (Family::beta(p), y, e)),
            (0.2f64..3.0, -3.0f64..3.0, eta).prop_map(|(s, y, e)| (Family::scaled_t(3.0, s), y, e)),
        ]
    }

    proptest! {
        #[test]
        fn score_matches_finite_difference((f, y, eta) in family_strategy()) {
            let h = 1e-6;
            let fd = (f.loglik_obs_eta(y, eta + h) - f.loglik_obs_eta(y, eta - h)) / (2.0 * h);
            let (u, w) = f.score_info(y, eta);
            prop_assert!((fd - u).abs() <= 1e-5 * u.abs().max(1.0), "fd {} vs {}", fd, u);
            let (z, ww) = f.irls_quantities(&[y], &[eta]).unwrap();
            prop_assert!(ww[0] > 0.0 && z[0].is_finite() && w.is_finite());
        }

        #[test]
        fn loglik_peaks_at_observation(y in 1u32..30, m in 31u32..60) {
            let y = y as f64;
            for f in [Family::gaussian(1.0), Family::poisson()] {
                let best = f.loglik_obs(y, y);
                prop_assert!(f.loglik_obs(y, y * 1.001) < best);
                prop_assert!(f.loglik_obs(y, y * 0.999) < best);
            }
            let f = Family::binomial(m as f64);
            let p = y / m as f64;
            let best = f.loglik_obs(y, p);
            prop_assert!(f.loglik_obs(y, p * 1.001) < best);
            prop_assert!(f.loglik_obs(y, p * 0.999) < best);
        }
    }
}
