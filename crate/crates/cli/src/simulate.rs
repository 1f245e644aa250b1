//! `gfamm simulate`: generate → fit → score replicates of a scenario.

use std::path::Path;

use gfamm::simgen::generate;
use gfamm::simgen::harness::{run_study, summarize, HarnessOptions, ReplicateScore};

use crate::config::SimulationConfig;
use crate::error::Result;
use crate::io::{create_dir, fmt_float, read_json, write_csv, write_long};

pub struct SimulateArgs<'a> {
    pub config: &'a Path,
    pub replicates: usize,
    pub seed: Option<u64>,
    pub out: &'a Path,
    pub level: Option<f64>,
    /// Also write each replicate's data as long CSV.
    pub save_data: bool,
}

/// Named metric columns in a stable order.
fn metric_columns(scores: &[ReplicateScore]) -> Vec<String> {
    let mut cols = vec!["rrimse_eta".to_string(), "rimse_eta".into(), "coverage_eta".into()];
    let mut push = |c: String| {
        if !cols.contains(&c) {
            cols.push(c);
        }
    };
    for s in scores {
        for e in &s.effects {
            push(format!("rrimse_{}", e.label));
            push(format!("coverage_{}", e.label));
        }
        for e in &s.surfaces {
            push(format!("rrimse_surface_{}", e.label));
            push(format!("coverage_surface_{}", e.label));
        }
    }
    cols
}

fn metric(s: &ReplicateScore, col: &str) -> f64 {
    let find = |list: &[gfamm::simgen::harness::Score], label: &str, rr: bool| {
        list.iter().find(|e| e.label == label).map_or(f64::NAN, |e| if rr { e.rrimse } else { e.coverage })
    };
    match col {
        "rrimse_eta" => s.rrimse_eta,
        "rimse_eta" => s.rimse_eta,
        "coverage_eta" => s.coverage_eta,
        _ => {
            if let Some(l) = col.strip_prefix("rrimse_surface_") {
                find(&s.surfaces, l, true)
            } else if let Some(l) = col.strip_prefix("coverage_surface_") {
                find(&s.surfaces, l, false)
            } else if let Some(l) = col.strip_prefix("rrimse_") {
                find(&s.effects, l, true)
            } else if let Some(l) = col.strip_prefix("coverage_") {
                find(&s.effects, l, false)
            } else {
                f64::NAN
            }
        }
    }
}

/// Runs the study and writes `replicates.csv`, `summary.csv` and `timings.csv`.
/// Returns the number of failed replicates.
pub fn run(args: SimulateArgs) -> Result<usize> {
    let config: SimulationConfig = read_json(args.config)?;
    let mut scenario = config.scenario.clone();
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    let opts = HarnessOptions { level: args.level.or(config.level).unwrap_or(0.95), optimizer: config.optimizer };
    let scores = run_study(&scenario, args.replicates, &opts);

    create_dir(args.out)?;
    let cols = metric_columns(&scores);
    let mut header = vec!["replicate".to_string(), "seed".into()];
    header.extend(cols.iter().cloned());
    header.extend(["converged", "outer_iterations", "nuisance", "error"].map(String::from));
    let rows = scores.iter().map(|s| {
        let mut row = vec![s.replicate.to_string(), s.seed.to_string()];
        row.extend(cols.iter().map(|c| fmt_float(metric(s, c))));
        row.push(s.converged.to_string());
        row.push(s.outer_iterations.to_string());
        row.push(fmt_float(s.nuisance));
        row.push(s.error.clone().unwrap_or_default());
        row
    });
    write_csv(&args.out.join("replicates.csv"), &header, rows)?;

    let header = ["metric", "median", "q25", "q75", "count"].map(String::from);
    let rows = cols.iter().map(|c| {
        let sum = summarize(scores.iter().map(|s| metric(s, c)));
        vec![c.clone(), fmt_float(sum.median), fmt_float(sum.q25), fmt_float(sum.q75), sum.count.to_string()]
    });
    write_csv(&args.out.join("summary.csv"), &header, rows)?;

    let header = ["replicate", "seconds"].map(String::from);
    let rows = scores.iter().map(|s| vec![s.replicate.to_string(), fmt_float(s.seconds)]);
    write_csv(&args.out.join("timings.csv"), &header, rows)?;

    if args.save_data {
        let dir = args.out.join("data");
        create_dir(&dir)?;
        for s in &scores {
            let rep = generate(&scenario.with_seed(s.seed))?;
            write_long(&dir.join(format!("replicate_{}.csv", s.replicate)), &rep.dataset)?;
        }
    }
    Ok(scores.iter().filter(|s| s.error.is_some()).count())
}
