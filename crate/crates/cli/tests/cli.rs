use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample_panel.csv")
}

fn dccal(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dccal"))
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .arg("--threads")
        .arg("1")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_writes_parameters_and_paths() {
    let dir = tempfile::tempdir().unwrap();
    let data = sample();
    let o = dccal(&["fit", "--data", data.to_str().unwrap(), "--seed", "2"], dir.path());
    ok(&o);
    let doc = json(dir.path().join("fit.json"));
    let p = &doc["params"];
    for k in ["a", "b", "q", "gamma0"] {
        assert!(p[k].as_f64().unwrap().is_finite(), "{k}");
    }
    assert_eq!(doc["stage1"].as_array().unwrap().len(), 4);
    assert!(doc["forecast"]["es"].as_f64().unwrap() < doc["forecast"]["var"].as_f64().unwrap());
    let paths = std::fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    assert_eq!(paths.lines().count(), 1501);
    assert!(paths.lines().nth(1).unwrap().contains('e'));
}

#[test]
fn malformed_csv_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "date,A,B\n2020-01-01,1.0,x\n").unwrap();
    let o = dccal(&["fit", "--data", bad.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "IngestError");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn unknown_config_key_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dccal(&["simulate", "--set", "n_rep=3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "ConfigError");
}

#[test]
fn backtest_report_is_consistent_with_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = sample();
    let o = dccal(
        &[
            "backtest", "--data", data.to_str().unwrap(), "--set", "in_size=1000", "--set", "out_size=60", "--set",
            "step=30", "--set", "models=[\"historical\"]",
        ],
        dir.path(),
    );
    ok(&o);
    let report = json(dir.path().join("report.json"));
    let r = &report["reports"][0];
    let hit_rate = r["hit_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&hit_rate));
    let p = r["uc_p"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    let text = std::fs::read_to_string(dir.path().join("records_historical.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "joint_loss").unwrap();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 60);
    let total: f64 = rows.iter().map(|r| r[col].parse::<f64>().unwrap()).sum();
    let reported = r["joint_loss_total"].as_f64().unwrap();
    assert!((total - reported).abs() < 1e-9 * reported.abs().max(1.0));
}

#[test]
fn study_writes_three_rows_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let o = dccal(
        &[
            "study", "--set", "n=2", "--set", "dists=[\"normal\", \"mvt\"]", "--set", "t_values=[500]", "--set",
            "n_reps=3",
        ],
        dir.path(),
    );
    ok(&o);
    let text = std::fs::read_to_string(dir.path().join("study.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "dist,T,stat,a,b,gamma0,q2,var_fc,es_fc");
    assert_eq!(lines.len(), 7);
}

#[test]
fn optimize_writes_simplex_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = sample();
    let o = dccal(
        &[
            "optimize", "--data", data.to_str().unwrap(), "--set", "in_size=1000", "--set", "out_size=3", "--set",
            "step=3", "--set", "n_sim=100",
        ],
        dir.path(),
    );
    ok(&o);
    let hedging = json(dir.path().join("hedging.json"));
    let names: Vec<&str> = hedging["strategies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["strategy"].as_str().unwrap())
        .collect();
    assert_eq!(names[0], "ew");
    let text = std::fs::read_to_string(dir.path().join("solutions.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let w_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("w")).collect();
    assert_eq!(w_cols.len(), 4);
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let w: Vec<f64> = w_cols.iter().map(|&i| f[i].parse().unwrap()).collect();
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&dccal(&["simulate", "--seed", "8", "--set", "t_len=200"], &a));
    ok(&dccal(&["simulate", "--seed", "8", "--set", "t_len=200"], &b));
    let pa = std::fs::read(a.join("panel.csv")).unwrap();
    assert_eq!(pa, std::fs::read(b.join("panel.csv")).unwrap());
    assert_eq!(String::from_utf8(pa).unwrap().lines().count(), 201);
}
