//! `gfamm predict`: evaluate a stored fit on new data.

use std::path::Path;

use gfamm::family::FamilyKind;
use gfamm::inference::{brier, predict_from_states, Scale};
use nalgebra::DVector;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::fit::FitDocument;
use crate::io::{fmt_float, read_json, read_long, write_csv};

/// Scores of the predictions against observed responses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionScores {
    pub deviance: f64,
    /// Binomial fits only.
    pub brier: Option<f64>,
}

pub struct PredictArgs<'a> {
    pub fit: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    /// Alternative column bindings for the new data.
    pub config: Option<&'a Path>,
}

/// Writes `curve,t,eta_hat,mu_hat`; scores are returned when the data hold responses.
pub fn run(args: PredictArgs) -> Result<Option<PredictionScores>> {
    let doc = FitDocument::read(args.fit)?;
    let (bindings, base) = match args.config {
        Some(c) => (read_json::<ModelConfig>(c)?.data, c.parent().unwrap_or(Path::new(".")).to_path_buf()),
        None => (doc.data.clone(), std::path::PathBuf::from(".")),
    };
    let (ds, has_y) = read_long(args.data, &bindings, &base, false)?;
    let theta = DVector::from_vec(doc.theta.clone());
    let eta = predict_from_states(&doc.terms, &theta, &doc.family, &ds, Scale::Link)?;
    let mu: Vec<f64> = eta.iter().map(|&e| doc.family.mean(e)).collect();

    let header = ["curve", "t", "eta_hat", "mu_hat"].map(String::from);
    let rows = (0..ds.num_obs()).map(|k| {
        vec![ds.curve_ids[ds.obs_curve[k]].to_string(), fmt_float(ds.t[k]), fmt_float(eta[k]), fmt_float(mu[k])]
    });
    write_csv(args.out, &header, rows)?;

    if !has_y {
        return Ok(None);
    }
    doc.family.check_support(&ds.y)?;
    let deviance = doc.family.deviance(&ds.y, &mu)?;
    let brier = match doc.family.kind {
        FamilyKind::Binomial => Some(brier(&ds.y, &vec![doc.family.nuisance; ds.y.len()], &mu)?),
        _ => None,
    };
    Ok(Some(PredictionScores { deviance, brier }))
}
