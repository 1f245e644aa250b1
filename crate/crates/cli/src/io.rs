//! CSV and JSON reading and writing.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gfamm::design::{FunctionalCovariate, FunctionalDataset};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::DataBindings;
use crate::error::{CliError, Result};

/// `%.17g`: 17 significant digits, trailing zeros dropped.
pub fn fmt_float(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let fixed = format!("{:.*}", (16 - exp) as usize, v);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| CliError::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::json(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Writes a CSV with a header row; floats should already be formatted.
pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| CliError::csv(path, e))?;
    w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn open_csv(path: &Path) -> Result<(csv::Reader<File>, Vec<String>)> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| CliError::csv(path, e))?;
    let header = r.headers().map_err(|e| CliError::csv(path, e))?.iter().map(str::to_string).collect();
    Ok((r, header))
}

fn column(path: &Path, header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Input(format!("{}: missing column `{name}`", path.display())))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, name: &str, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| CliError::Input(format!("{}:{line}: column `{name}`: cannot parse `{field}`", path.display())))
}

/// Reads a long-format CSV (`curve,t,y` plus per-curve covariate columns)
/// and the functional covariates it binds.
///
/// Without `require_y` a missing response column yields zeros and `false`.
pub fn read_long(path: &Path, bindings: &DataBindings, base: &Path, require_y: bool) -> Result<(FunctionalDataset, bool)> {
    let (mut reader, header) = open_csv(path)?;
    let curve_col = column(path, &header, &bindings.curve)?;
    let t_col = column(path, &header, &bindings.t)?;
    let y_col = match column(path, &header, &bindings.y) {
        Ok(c) => Some(c),
        Err(e) if require_y => return Err(e),
        Err(_) => None,
    };
    let scalar_cols =
        bindings.scalar.iter().map(|n| column(path, &header, n).map(|c| (n, c))).collect::<Result<Vec<_>>>()?;
    let factor_cols =
        bindings.factors.iter().map(|n| column(path, &header, n).map(|c| (n, c))).collect::<Result<Vec<_>>>()?;

    let mut ds = FunctionalDataset::default();
    let mut index: HashMap<i64, usize> = HashMap::new();
    let mut scalars: BTreeMap<String, Vec<f64>> = bindings.scalar.iter().map(|n| (n.clone(), Vec::new())).collect();
    let mut factors: BTreeMap<String, Vec<i64>> = bindings.factors.iter().map(|n| (n.clone(), Vec::new())).collect();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let curve: i64 = parse_field(path, line, &bindings.curve, &record[curve_col])?;
        let t: f64 = parse_field(path, line, &bindings.t, &record[t_col])?;
        let y: f64 = match y_col {
            Some(c) => parse_field(path, line, &bindings.y, &record[c])?,
            None => 0.0,
        };
        let next = index.len();
        let i = *index.entry(curve).or_insert(next);
        let new_curve = i == next;
        if new_curve {
            ds.curve_ids.push(curve);
        }
        for (name, c) in &scalar_cols {
            let v: f64 = parse_field(path, line, name, &record[*c])?;
            let col = scalars.get_mut(*name).expect("bound column");
            if new_curve {
                col.push(v);
            } else if col[i] != v {
                return Err(CliError::Input(format!(
                    "{}:{line}: scalar covariate `{name}` changes within curve {curve}",
                    path.display()
                )));
            }
        }
        for (name, c) in &factor_cols {
            let v: i64 = parse_field(path, line, name, &record[*c])?;
            let col = factors.get_mut(*name).expect("bound column");
            if new_curve {
                col.push(v);
            } else if col[i] != v {
                return Err(CliError::Input(format!(
                    "{}:{line}: grouping factor `{name}` changes within curve {curve}",
                    path.display()
                )));
            }
        }
        ds.obs_curve.push(i);
        ds.t.push(t);
        ds.y.push(y);
    }
    if ds.t.is_empty() {
        return Err(CliError::Input(format!("{}: no observations", path.display())));
    }
    ds.scalar_covariates = scalars;
    ds.grouping_factors = factors;
    for (name, source) in &bindings.functional {
        let values = resolve(base, &source.values);
        let grid = resolve(base, &source.grid);
        let fc = read_functional(&values, &grid, &ds.curve_ids)?;
        ds.functional_covariates.insert(name.clone(), fc);
    }
    ds.validate()?;
    Ok((ds, y_col.is_some()))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Wide CSV keyed by curve (`curve,s_1,…,s_S`) plus a one-column grid sidecar (`s`).
pub fn read_functional(values: &Path, grid: &Path, curve_ids: &[i64]) -> Result<FunctionalCovariate> {
    let (mut gr, gh) = open_csv(grid)?;
    if gh.len() != 1 {
        return Err(CliError::Input(format!("{}: grid file must have exactly one column", grid.display())));
    }
    let mut s = Vec::new();
    for record in gr.records() {
        let record = record.map_err(|e| CliError::csv(grid, e))?;
        let line = record.position().map_or(0, |p| p.line());
        s.push(parse_field::<f64>(grid, line, &gh[0], &record[0])?);
    }

    let (mut vr, vh) = open_csv(values)?;
    let curve_col = column(values, &vh, "curve")?;
    if vh.len() - 1 != s.len() {
        return Err(CliError::Input(format!(
            "{}: {} value columns but the grid {} has {} points",
            values.display(),
            vh.len() - 1,
            grid.display(),
            s.len()
        )));
    }
    let mut rows: HashMap<i64, Vec<f64>> = HashMap::new();
    for record in vr.records() {
        let record = record.map_err(|e| CliError::csv(values, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let curve: i64 = parse_field(values, line, "curve", &record[curve_col])?;
        let row = (0..vh.len())
            .filter(|&c| c != curve_col)
            .map(|c| parse_field::<f64>(values, line, &vh[c], &record[c]))
            .collect::<Result<Vec<_>>>()?;
        if rows.insert(curve, row).is_some() {
            return Err(CliError::Input(format!("{}:{line}: curve {curve} appears twice", values.display())));
        }
    }
    let mut m = DMatrix::zeros(curve_ids.len(), s.len());
    for (i, id) in curve_ids.iter().enumerate() {
        let row = rows
            .get(id)
            .ok_or_else(|| CliError::Input(format!("{}: no row for curve {id}", values.display())))?;
        m.row_mut(i).copy_from_slice(row);
    }
    Ok(FunctionalCovariate { grid: s, values: m })
}

/// Writes a dataset as long CSV with its scalar covariates and grouping
/// factors; functional covariates go to `<stem>_<name>.csv` and
/// `<stem>_<name>_grid.csv` next to it. Returns the matching bindings.
pub fn write_long(path: &Path, ds: &FunctionalDataset) -> Result<DataBindings> {
    let mut header: Vec<String> = vec!["curve".into(), "t".into(), "y".into()];
    header.extend(ds.scalar_covariates.keys().cloned());
    header.extend(ds.grouping_factors.keys().cloned());
    let rows = (0..ds.num_obs()).map(|k| {
        let i = ds.obs_curve[k];
        let mut row = vec![ds.curve_ids[i].to_string(), fmt_float(ds.t[k]), fmt_float(ds.y[k])];
        row.extend(ds.scalar_covariates.values().map(|c| fmt_float(c[i])));
        row.extend(ds.grouping_factors.values().map(|c| c[i].to_string()));
        row
    });
    write_csv(path, &header, rows)?;

    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    let mut bindings = DataBindings {
        scalar: ds.scalar_covariates.keys().cloned().collect(),
        factors: ds.grouping_factors.keys().cloned().collect(),
        ..DataBindings::default()
    };
    for (name, fc) in &ds.functional_covariates {
        let values = format!("{stem}_{name}.csv");
        let grid = format!("{stem}_{name}_grid.csv");
        let mut vh = vec!["curve".to_string()];
        vh.extend((1..=fc.grid.len()).map(|k| format!("s_{k}")));
        let rows = (0..fc.values.nrows()).map(|i| {
            let mut row = vec![ds.curve_ids[i].to_string()];
            row.extend(fc.values.row(i).iter().map(|&v| fmt_float(v)));
            row
        });
        write_csv(&dir.join(&values), &vh, rows)?;
        write_csv(&dir.join(&grid), &["s".to_string()], fc.grid.iter().map(|&s| vec![fmt_float(s)]))?;
        bindings.functional.insert(
            name.clone(),
            crate::config::FunctionalSource { values: values.into(), grid: grid.into() },
        );
    }
    Ok(bindings)
}

/// Header and rows of a CSV with only numeric fields.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let (mut r, header) = open_csv(path)?;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| CliError::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push(
            record.iter().zip(&header).map(|(f, h)| parse_field::<f64>(path, line, h, f)).collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((header, rows))
}
