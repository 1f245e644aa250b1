//! Fits a Poisson functional response with a smooth effect of a per-curve scalar.

use gfamm::basis::BasisSpec;
use gfamm::design::{FunctionalDataset, TermKind, TermSpec};
use gfamm::family::Family;
use gfamm::fit::{fit_model, OptimizerOptions};
use gfamm::inference::term_contribution;
use nalgebra::DMatrix;

fn main() -> gfamm::Result<()> {
    let (n, m) = (30, 40);
    let t: Vec<f64> = (0..m).map(|l| l as f64 / (m - 1) as f64).collect();
    let z: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let y = DMatrix::from_fn(n, m, |i, l| {
        let eta = 1.0 + (2.0 * std::f64::consts::PI * t[l]).sin() + 0.5 * (3.0 * z[i]).cos() * t[l];
        // deterministic stand-in for Poisson noise
        (eta.exp() + ((i * 31 + l * 17) % 7) as f64 / 3.0 - 1.0).round().max(0.0)
    });
    let mut data = FunctionalDataset::on_grid(&t, &y);
    data.scalar_covariates.insert("z".into(), z);

    let unit = [0.0, 1.0];
    let terms = [
        TermSpec::intercept(BasisSpec::bspline(8, unit)).labelled("intercept"),
        TermSpec::new(TermKind::SmoothScalar)
            .covariate("z")
            .x_basis(BasisSpec::bspline(6, unit).with_penalty_order(2))
            .over_t(BasisSpec::bspline(6, unit))
            .labelled("f(z,t)"),
    ];
    let (system, fit) = fit_model(&data, &terms, Family::poisson(), &OptimizerOptions::default())?;
    println!("converged: {}, lambda: {:?}", fit.diagnostics.converged, fit.lambda);
    let f = term_contribution(&fit, &system, "f(z,t)", 0.95)?;
    println!("f(z,t) at first observation: {:.3} [{:.3}, {:.3}]", f.estimate[0], f.lower[0], f.upper[0]);
    Ok(())
}
