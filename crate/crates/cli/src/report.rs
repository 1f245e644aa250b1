//! `gfamm report`: SVG figures and a markdown summary from a results directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};
use crate::fit::FitDocument;
use crate::io::{create_dir, read_numeric_csv};
use crate::svg::{heatmap, line_plot};

/// Columns that follow the coordinate columns in a term estimate CSV.
const VALUE_COLUMNS: [&str; 5] = ["t", "estimate", "se", "lower", "upper"];

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Renders one term estimate CSV to SVG.
pub fn render_term(path: &Path) -> Result<String> {
    let (header, rows) = read_numeric_csv(path)?;
    let k = header.len().checked_sub(VALUE_COLUMNS.len()).filter(|&k| header[k..] == VALUE_COLUMNS).ok_or_else(|| {
        CliError::Input(format!("{}: expected trailing columns {}", path.display(), VALUE_COLUMNS.join(",")))
    })?;
    if rows.is_empty() {
        return Err(CliError::Input(format!("{}: no rows", path.display())));
    }
    let title = path.file_stem().and_then(|s| s.to_str()).unwrap_or("term");
    let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
    // rows are coordinate-major with t varying fastest
    let q = rows.iter().take_while(|r| r[..k] == rows[0][..k]).count();
    let groups = rows.len() / q;
    if groups * q != rows.len() {
        return Err(CliError::Input(format!("{}: rows do not form a coordinate × t grid", path.display())));
    }
    let (est, lower, upper) = (col(k + 1), col(k + 2), col(k + 3));
    if groups == 1 {
        return Ok(line_plot(title, "t", &col(k), &est, &lower, &upper));
    }
    if q == 1 {
        let (x, label) = if k == 1 {
            (col(0), header[0].as_str())
        } else {
            ((0..groups).map(|g| g as f64).collect(), "coordinate index")
        };
        return Ok(line_plot(title, label, &x, &est, &lower, &upper));
    }
    let t: Vec<f64> = rows[..q].iter().map(|r| r[k]).collect();
    let y: Vec<f64> = if k == 1 { (0..groups).map(|g| rows[g * q][0]).collect() } else { (0..groups).map(|g| g as f64).collect() };
    let y_label = if k == 1 { header[0].as_str() } else { "coordinate index" };
    let values: Vec<Vec<f64>> = est.chunks(q).map(<[f64]>::to_vec).collect();
    Ok(heatmap(title, "t", y_label, &t, &y, &values))
}

fn term_csvs(dir: &Path) -> Result<Vec<PathBuf>> {
    let terms = dir.join("terms");
    if !terms.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(&terms)
        .map_err(|e| CliError::io(&terms, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    out.sort();
    Ok(out)
}

/// Writes SVGs and `summary.md` into `out`; returns the files written.
pub fn run(dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::Input(format!("{}: not a directory", dir.display())));
    }
    let terms = term_csvs(dir)?;
    let fit = dir.join("fit.json");
    let summary = dir.join("summary.csv");
    if terms.is_empty() && !fit.is_file() && !summary.is_file() {
        return Err(CliError::Input(format!(
            "{}: no results found (expected fit.json, terms/*.csv or summary.csv)",
            dir.display()
        )));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    let mut md = String::from("# Results\n\n");

    if fit.is_file() {
        let doc = FitDocument::read(&fit)?;
        let _ = writeln!(md, "## Fit\n");
        let _ = writeln!(md, "- family: {:?} ({:?} link)", doc.family.kind, doc.family.link);
        if let Some(nu) = doc.nuisance {
            let _ = writeln!(md, "- estimated nuisance parameter: {nu:.6}");
        }
        let _ = writeln!(md, "- observations: {}", doc.num_obs);
        let _ = writeln!(md, "- marginal likelihood (Laplace): {:.6}", doc.laml);
        let _ = writeln!(md, "- deviance: {:.6}", doc.deviance);
        let _ = writeln!(
            md,
            "- converged: {} after {} outer iterations",
            doc.diagnostics.converged, doc.diagnostics.outer_iterations
        );
        for m in doc.diagnostics.messages.iter().chain(&doc.design_messages) {
            let _ = writeln!(md, "- note: {m}");
        }
        let _ = writeln!(md, "\n| term | edf |\n|---|---|");
        for e in &doc.edf {
            let _ = writeln!(md, "| {} | {:.3} |", e.label, e.edf);
        }
        let _ = writeln!(md, "\n| smoothing parameter | λ |\n|---|---|");
        for (l, v) in doc.lambda_labels.iter().zip(&doc.lambda) {
            let _ = writeln!(md, "| {l} | {v:.6e} |");
        }
        md.push('\n');
    }

    if summary.is_file() {
        let mut r = csv::Reader::from_path(&summary).map_err(|e| CliError::csv(&summary, e))?;
        let _ = writeln!(md, "## Simulation summary\n\n| metric | median | q25 | q75 | n |\n|---|---|---|---|---|");
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::csv(&summary, e))?;
            let num = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok()).map_or("NaN".into(), |v| format!("{v:.4}"));
            let _ = writeln!(md, "| {} | {} | {} | {} | {} |", &rec[0], num(1), num(2), num(3), rec.get(4).unwrap_or(""));
        }
        md.push('\n');
    }

    if !terms.is_empty() {
        let _ = writeln!(md, "## Term estimates\n");
    }
    for csv in &terms {
        let svg = render_term(csv)?;
        let name = format!("{}.svg", csv.file_stem().and_then(|s| s.to_str()).unwrap_or("term"));
        let path = out.join(&name);
        write_text(&path, &svg)?;
        let _ = writeln!(md, "![{name}]({name})\n");
        written.push(path);
    }
    let md_path = out.join("summary.md");
    write_text(&md_path, &md)?;
    written.push(md_path);
    Ok(written)
}
