use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gfamm::simgen::harness::fit_replicate;
use gfamm::simgen::{generate, SimFamily, SimScenario};
use gfamm::fit::OptimizerOptions;
use serde_json::{json, Value};
use tempfile::TempDir;

fn gfamm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfamm")).args(args).env_remove("GFAMM_THREADS").output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(path: &Path, text: &str) -> PathBuf {
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

/// Three curves on 12 points with a per-curve covariate `z`.
fn toy_csv(dir: &Path, counts: bool) -> PathBuf {
    let mut s = String::from("curve,t,y,z\n");
    for (c, z) in [(10, 0.2), (11, 0.5), (12, 0.9)] {
        for l in 0..12 {
            let t = l as f64 / 11.0;
            let wiggle = ((c * 7 + l * 3) % 5) as f64 / 10.0 - 0.2;
            let y = if counts {
                ((1.0 + (6.0 * t).sin() + z).exp() + 3.0 * wiggle).round().max(0.0)
            } else {
                (6.0 * t).sin() + z * t + wiggle
            };
            s.push_str(&format!("{c},{t},{y},{z}\n"));
        }
    }
    write(&dir.join("data.csv"), &s)
}

fn intercept_config(dir: &Path, family: Value) -> PathBuf {
    let cfg = json!({
        "family": family,
        "terms": [{"kind": "intercept", "t_basis": {"kind": "bspline", "num_basis": 6}, "label": "intercept"}]
    });
    write(&dir.join("model.json"), &cfg.to_string())
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = read_csv(path);
    let j = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

#[test]
fn intercept_fit_writes_a_readable_document() {
    let dir = TempDir::new().unwrap();
    let data = toy_csv(dir.path(), false);
    let cfg = intercept_config(dir.path(), json!({"name": "gaussian"}));
    let out = dir.path().join("out");
    let o = gfamm(&["fit", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let text = fs::read_to_string(out.join("fit.json")).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["schema"], "gfamm-fit/1");
    assert_eq!(doc["theta"].as_array().unwrap().len(), 6);
    assert_eq!(doc["num_obs"], 36);
    let again = serde_json::to_string_pretty(&doc).unwrap();
    assert_eq!(serde_json::from_str::<Value>(&again).unwrap(), doc);

    let (header, rows) = read_csv(&out.join("terms/intercept.csv"));
    assert_eq!(header, ["t", "estimate", "se", "lower", "upper"]);
    assert_eq!(rows.len(), 50);
    let (header, rows) = read_csv(&out.join("fitted.csv"));
    assert_eq!(header, ["curve", "t", "y", "eta_hat", "mu_hat"]);
    assert_eq!(rows.len(), 36);
    assert_eq!(rows[12][0], "11");
}

#[test]
fn missing_column_is_named() {
    let dir = TempDir::new().unwrap();
    let data = toy_csv(dir.path(), false);
    let cfg = json!({
        "family": {"name": "gaussian"},
        "terms": [{"kind": "intercept", "t_basis": {"kind": "bspline", "num_basis": 6}}],
        "data": {"scalar": ["humidity"]}
    });
    let cfg = write(&dir.path().join("model.json"), &cfg.to_string());
    let o = gfamm(&["fit", "--data", p(&data), "--config", p(&cfg), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("humidity"), "{}", stderr(&o));
}

#[test]
fn malformed_values_report_file_and_line() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir.path().join("bad.csv"), "curve,t,y\n1,0.0,1.5\n1,0.5,oops\n");
    let cfg = intercept_config(dir.path(), json!({"name": "gaussian"}));
    let o = gfamm(&["fit", "--data", p(&data), "--config", p(&cfg), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("bad.csv:3") && err.contains("oops"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let data = toy_csv(dir.path(), false);
    let cfg = json!({"family": {"name": "gaussian"}, "terms": [], "smoothing": 3});
    let cfg = write(&dir.path().join("model.json"), &cfg.to_string());
    let o = gfamm(&["fit", "--data", p(&data), "--config", p(&cfg), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("smoothing"), "{}", stderr(&o));
}

#[test]
fn refitting_at_the_stored_parameters_reproduces_theta() {
    let dir = TempDir::new().unwrap();
    let data = toy_csv(dir.path(), false);
    let cfg = json!({
        "family": {"name": "gaussian"},
        "terms": [
            {"kind": "intercept", "t_basis": {"kind": "bspline", "num_basis": 6}},
            {"kind": "smooth-scalar", "covariates": ["z"], "x_basis": [{"kind": "bspline", "num_basis": 4}],
             "t_basis": {"kind": "bspline", "num_basis": 4}}
        ],
        "data": {"scalar": ["z"]}
    });
    let cfg = write(&dir.path().join("model.json"), &cfg.to_string());
    let first = dir.path().join("first");
    let o = gfamm(&["fit", "--data", p(&data), "--config", p(&cfg), "--out", p(&first)]);
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&fs::read_to_string(first.join("fit.json")).unwrap()).unwrap();
    let mut fixed: Vec<String> = doc["lambda"].as_array().unwrap().iter().map(|v| v.to_string()).collect();
    fixed.push(doc["nuisance"].to_string());

    let second = dir.path().join("second");
    let o = gfamm(&[
        "fit", "--data", p(&data), "--config", p(&cfg), "--out", p(&second), "--fixed-lambda", &fixed.join(","),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let redo: Value = serde_json::from_str(&fs::read_to_string(second.join("fit.json")).unwrap()).unwrap();
    let a = doc["theta"].as_array().unwrap();
    let b = redo["theta"].as_array().unwrap();
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
        assert!((x - y).abs() < 1e-8, "{x} vs {y}");
    }
    assert_eq!(redo["lambda"], doc["lambda"]);
}

#[test]
fn predictions_on_training_data_match_the_fit() {
    let dir = TempDir::new().unwrap();
    let data = toy_csv(dir.path(), true);
    let cfg = intercept_config(dir.path(), json!({"name": "poisson"}));
    let out = dir.path().join("out");
    let o = gfamm(&["fit", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let preds = dir.path().join("pred.csv");
    let o = gfamm(&["predict", "--fit", p(&out.join("fit.json")), "--data", p(&data), "--out", p(&preds)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read_csv(&preds).0, ["curve", "t", "eta_hat", "mu_hat"]);
    assert_eq!(column(&preds, "mu_hat"), column(&out.join("fitted.csv"), "mu_hat"));

    let doc: Value = serde_json::from_str(&fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    let stdout = String::from_utf8(o.stdout).unwrap();
    let dev: f64 = stdout.lines().find_map(|l| l.strip_prefix("deviance ")).unwrap().parse().unwrap();
    let stored = doc["deviance"].as_f64().unwrap();
    assert!((dev - stored).abs() < 1e-8 * stored.max(1.0), "{dev} vs {stored}");
}

#[test]
fn binomial_predictions_are_probabilities_with_a_brier_score() {
    let dir = TempDir::new().unwrap();
    let mut s = String::from("curve,t,y\n");
    for c in 0..4 {
        for l in 0..15 {
            let t = l as f64 / 14.0;
            s.push_str(&format!("{c},{t},{}\n", ((c * 5 + l * 7) % 11).min(10)));
        }
    }
    let data = write(&dir.path().join("data.csv"), &s);
    let cfg = intercept_config(dir.path(), json!({"name": "binomial", "nuisance": 10.0}));
    let out = dir.path().join("out");
    let o = gfamm(&["fit", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", stderr(&o));

    let newdata = write(&dir.path().join("new.csv"), "curve,t,y\n7,0.05,3\n7,0.5,6\n8,0.95,1\n");
    let preds = dir.path().join("pred.csv");
    let o = gfamm(&["predict", "--fit", p(&out.join("fit.json")), "--data", p(&newdata), "--out", p(&preds)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mu = column(&preds, "mu_hat");
    assert_eq!(mu.len(), 3);
    assert!(mu.iter().all(|&m| m > 0.0 && m < 1.0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let brier: f64 = stdout.lines().find_map(|l| l.strip_prefix("brier ")).unwrap().parse().unwrap();
    let y = [0.3, 0.6, 0.1];
    let expected = y.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 3.0;
    assert!((brier - expected).abs() < 1e-12);

    // without responses only the predictions are written
    let newdata = write(&dir.path().join("new2.csv"), "curve,t\n7,0.05\n");
    let o = gfamm(&["predict", "--fit", p(&out.join("fit.json")), "--data", p(&newdata), "--out", p(&preds)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
}

#[test]
fn predict_rejects_data_outside_the_model() {
    let dir = TempDir::new().unwrap();
    let data = toy_csv(dir.path(), false);
    let cfg = intercept_config(dir.path(), json!({"name": "gaussian"}));
    let out = dir.path().join("out");
    gfamm(&["fit", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    let newdata = write(&dir.path().join("new.csv"), "curve,t\n1,4.0\n");
    let o = gfamm(&["predict", "--fit", p(&out.join("fit.json")), "--data", p(&newdata), "--out", p(&dir.path().join("p.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    let newdata = write(&dir.path().join("new.csv"), "time\n1\n");
    let o = gfamm(&["predict", "--fit", p(&out.join("fit.json")), "--data", p(&newdata), "--out", p(&dir.path().join("p.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("curve"));
}

fn small_scenario() -> SimScenario {
    let mut sc = SimScenario::families(SimFamily::NegativeBinomial, "ff", None, 20, 5).unwrap();
    sc.grid_points = 30;
    sc
}

#[test]
fn simulation_output_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir.path().join("sim.json"), &json!({"scenario": small_scenario()}).to_string());
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_gfamm"))
            .args(["simulate", "--config", p(&cfg), "--replicates", "1", "--seed", "9", "--out", p(&out)])
            .env("GFAMM_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let a = run("a", "1");
    let b = run("b", "1");
    for f in ["replicates.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (header, rows) = read_csv(&a.join("replicates.csv"));
    assert_eq!(&header[..5], ["replicate", "seed", "rrimse_eta", "rimse_eta", "coverage_eta"]);
    assert!(header.contains(&"rrimse_surface_ff".to_string()));
    assert_eq!(header.last().unwrap(), "error");
    assert_eq!(rows[0][1], "9");
    assert_eq!(rows[0].last().unwrap(), "");
    let (header, rows) = read_csv(&a.join("summary.csv"));
    assert_eq!(header, ["metric", "median", "q25", "q75", "count"]);
    assert_eq!(rows[0][0], "rrimse_eta");
    assert_eq!(read_csv(&a.join("timings.csv")).0, ["replicate", "seconds"]);
}

#[test]
fn saved_replicates_refit_to_the_in_process_fit() {
    let dir = TempDir::new().unwrap();
    let sc = small_scenario();
    let cfg = write(&dir.path().join("sim.json"), &json!({"scenario": sc}).to_string());
    let out = dir.path().join("sim");
    let o = gfamm(&["simulate", "--config", p(&cfg), "--replicates", "1", "--out", p(&out), "--save-data"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let rep = generate(&sc).unwrap();
    let (terms, _) = sc.model().unwrap();
    let functional: serde_json::Map<String, Value> = rep
        .dataset
        .functional_covariates
        .keys()
        .map(|n| {
            (n.clone(), json!({"values": format!("replicate_0_{n}.csv"), "grid": format!("replicate_0_{n}_grid.csv")}))
        })
        .collect();
    let model = json!({
        "family": {"name": "negative-binomial"},
        "terms": terms,
        "data": {"scalar": rep.dataset.scalar_covariates.keys().collect::<Vec<_>>(), "functional": functional}
    });
    let data_dir = out.join("data");
    let model = write(&data_dir.join("model.json"), &model.to_string());
    let fit_out = dir.path().join("fit");
    let o = gfamm(&["fit", "--data", p(&data_dir.join("replicate_0.csv")), "--config", p(&model), "--out", p(&fit_out)]);
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", stderr(&o));

    let (_, fit) = fit_replicate(&rep, &OptimizerOptions::default()).unwrap();
    let doc: Value = serde_json::from_str(&fs::read_to_string(fit_out.join("fit.json")).unwrap()).unwrap();
    let theta: Vec<f64> = doc["theta"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(theta.len(), fit.theta.len());
    for (a, b) in theta.iter().zip(fit.theta.iter()) {
        assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
    }
    assert!(fit_out.join("terms/ff.csv").is_file());
}

#[test]
fn report_renders_curves_and_surfaces() {
    let dir = TempDir::new().unwrap();
    let data = toy_csv(dir.path(), false);
    let cfg = json!({
        "family": {"name": "gaussian"},
        "terms": [
            {"kind": "intercept", "t_basis": {"kind": "bspline", "num_basis": 6}, "label": "intercept"},
            {"kind": "smooth-scalar", "covariates": ["z"], "x_basis": [{"kind": "bspline", "num_basis": 4}],
             "t_basis": {"kind": "bspline", "num_basis": 4}, "label": "f_z"}
        ],
        "data": {"scalar": ["z"]}
    });
    let cfg = write(&dir.path().join("model.json"), &cfg.to_string());
    let out = dir.path().join("out");
    let o = gfamm(&["fit", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", stderr(&o));
    let o = gfamm(&["report", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let line = fs::read_to_string(out.join("report/intercept.svg")).unwrap();
    assert_eq!(line.matches("<polyline").count(), 3);
    let surface = fs::read_to_string(out.join("report/f_z.svg")).unwrap();
    let est = column(&out.join("terms/f_z.csv"), "estimate");
    let lo = est.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = est.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(surface.contains(&format!(r#"data-min="{lo}" data-max="{hi}""#)));
    let md = fs::read_to_string(out.join("report/summary.md")).unwrap();
    assert!(md.contains("intercept.svg") && md.contains("| f_z |"));
}

#[test]
fn report_on_an_empty_directory_fails() {
    let dir = TempDir::new().unwrap();
    let o = gfamm(&["report", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no results"), "{}", stderr(&o));
}
