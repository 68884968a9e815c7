use std::path::Path;

use assert_cmd::Command;

fn walknoise() -> Command {
    Command::cargo_bin("walknoise").unwrap()
}

fn stdout(cmd: &mut Command) -> String {
    let out = cmd.assert().success().get_output().stdout.clone();
    String::from_utf8(out).unwrap()
}

fn logistic(sigma: f64, mu: f64, s: f64, delta_a: f64, a_min: f64) -> f64 {
    a_min + 2.0 * delta_a / (1.0 + ((sigma - mu) / s).exp())
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    walknoise().assert().code(2);
    walknoise().args(["fit", "--bogus"]).assert().code(2);
    walknoise().args(["walk", "--sigma-grid", "cube:1:2:3"]).assert().code(2);
    walknoise().args(["frobnicate"]).assert().code(2);
    walknoise().arg("--help").assert().success();
}

#[test]
fn every_command_takes_common_flags() {
    for cmd in [
        "train",
        "sweep-global",
        "walk",
        "mixed-grid",
        "fit",
        "probe-binarize",
        "probe-weights",
        "multiexec",
        "report",
    ] {
        let help = stdout(walknoise().args([cmd, "--help"]));
        for flag in ["--seed", "--config", "--out"] {
            assert!(help.contains(flag), "{cmd} lacks {flag}");
        }
    }
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    walknoise()
        .args(["fit", "--in"])
        .arg(dir.path().join("missing.csv"))
        .arg("--out")
        .arg(dir.path())
        .assert()
        .code(1);
}

#[test]
fn fit_recovers_synthetic_curve() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("curve.csv");
    let mut text = String::from("sigma,acc_mean,acc_stderr\n");
    for i in 0..25 {
        let s = 10f64.powf(-2.0 + 4.0 * i as f64 / 24.0);
        text.push_str(&format!("{s},{},0.01\n", logistic(s, 1.0, 0.2, 0.4, 0.1)));
    }
    std::fs::write(&input, text).unwrap();
    let out = stdout(walknoise().args(["fit", "--seed", "1", "--in"]).arg(&input).arg("--out").arg(dir.path()));
    let mu_line = out.lines().find(|l| l.starts_with("mu")).unwrap();
    let fields: Vec<&str> = mu_line.split_whitespace().collect();
    let mu: f64 = fields[1].parse().unwrap();
    assert!((mu - 1.0).abs() < 1e-3, "{out}");
    assert!(dir.path().join("fit.json").exists());
    let m = manifest(dir.path());
    assert_eq!(m["command"], "fit");
    assert_eq!(m["seed"], 1);
    assert!(m["code_version"].as_str().unwrap().contains("walknoise"));
}

#[test]
fn multiexec_plan_sums_to_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mus = dir.path().join("fits.csv");
    let mut text = String::from("experiment,layer,layer_name,mu\n");
    for i in 0..11 {
        text.push_str(&format!("walking,{i},p{i},{}\n", 0.2 + 0.3 * i as f64));
    }
    text.push_str("global,global,global,0.3\n");
    std::fs::write(&mus, text).unwrap();
    let out = stdout(walknoise().args(["multiexec", "--budget", "22", "--mus"]).arg(&mus).arg("--out").arg(dir.path()));
    assert!(out.contains("total 22"), "{out}");
    let plan: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan.len(), 11);
    let total: u64 = plan.iter().map(|e| e["n_i"].as_u64().unwrap()).sum();
    assert_eq!(total, 22);
    assert!(plan[0]["n_i"].as_u64() >= plan[10]["n_i"].as_u64());
}

#[test]
fn report_on_empty_records_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let text = stdout(walknoise().args(["report", "--records"]).arg(dir.path().join("none.csv")).arg("--out").arg(&out));
    assert!(text.contains("1 warnings"), "{text}");
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn walk_writes_fits_curves_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(
        walknoise()
            .args([
                "walk",
                "--model",
                "mlp",
                "--dataset",
                "blobs",
                "--noise",
                "additive",
                "--sigma-grid",
                "log:1e-1:1e2:5",
                "--seeds",
                "1",
                "--epochs",
                "1",
                "--layers",
                "0,7",
                "--seed",
                "2",
            ])
            .arg("--out")
            .arg(dir.path()),
    );
    assert!(text.contains("12 records, 2 curves"), "{text}");
    let fits = std::fs::read_to_string(dir.path().join("fits.csv")).unwrap();
    assert_eq!(fits.lines().count(), 3);
    assert_eq!(std::fs::read_dir(dir.path().join("curves")).unwrap().count(), 2);
    let m = manifest(dir.path());
    assert_eq!(m["command"], "walk");
    assert_eq!(m["config"]["seeds"], serde_json::json!([2]));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    let report = dir.path().join("report");
    let text = stdout(walknoise().args(["report", "--records"]).arg(dir.path().join("records.csv")).arg("--out").arg(&report));
    assert!(report.join("layer_midpoints.csv").exists(), "{text}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        format!(
            "model = \"mlp\"\ndataset = \"blobs\"\nsigma_grid = \"list:0.5\"\nseeds = [7]\noutput = {:?}\n[train]\nepochs = 3\n",
            dir.path().join("from_config")
        ),
    )
    .unwrap();
    walknoise()
        .args(["sweep-global", "--epochs", "1", "--config"])
        .arg(&config)
        .assert()
        .success();
    let m = manifest(&dir.path().join("from_config"));
    assert_eq!(m["config"]["train"]["epochs"], 1);
    assert_eq!(m["config"]["seeds"], serde_json::json!([7]));
}
