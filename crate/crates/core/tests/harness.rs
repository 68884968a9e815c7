use std::collections::HashSet;
use std::path::Path;

use walknoise::harness::{
    fit_all, read_records, run_global_sweep, run_global_sweep_with, run_mixed_grid, run_walking_sweep,
    run_walking_sweep_with, seed_mean_stderr, train_clean, write_fit_outputs, Experiment, ExperimentConfig,
    ExperimentRecord, GridSpec, SweepContext, CODE_VERSION, RECORDS_FILE,
};
use walknoise::nn::{evaluate, LayerKind, ModelSpec};
use walknoise::robustfit::{double_logistic, logistic, DoubleParams, FitMode};
use walknoise::{Domain, NoiseKind, Phase, RngStream};

fn blobs_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(
        r#"
        name = "test"
        model = "mlp"
        dataset = "blobs"
        noise = "additive"
        sigma_grid = "list:0.5,4"
        seeds = [3, 4]
        workers = 2
        [train]
        epochs = 2
        patience = 0
        "#,
    )
    .unwrap();
    cfg.output = out.to_path_buf();
    cfg
}

fn assert_same(a: &[ExperimentRecord], b: &[ExperimentRecord]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!(x.same_result(y), "{x:?}\n{y:?}");
    }
}

#[test]
fn zero_sigma_matches_noiseless_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs_config(dir.path());
    cfg.phase = Phase::InferenceOnly;
    cfg.train.epochs = 10;
    cfg.train.learning_rate = 1e-2;
    let ctx = SweepContext::load(&cfg).unwrap();
    let records = run_global_sweep_with(&ctx, &cfg).unwrap();
    assert_eq!(records.len(), 3 * 2);
    for seed in [3, 4] {
        let model = train_clean(&ctx, &cfg.train, seed).unwrap();
        let clean = evaluate(&model, &ctx.test, None, RngStream::new(seed, Domain::Eval), 1).unwrap();
        let at_zero = records.iter().find(|r| r.seed == seed && r.sigma == 0.0).unwrap();
        assert_eq!(at_zero.accuracy, clean.accuracy);
        assert!(clean.accuracy > 0.9, "blobs should be learnable: {}", clean.accuracy);
    }
}

#[test]
fn records_carry_hash_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs_config(dir.path());
    let records = run_global_sweep(&cfg).unwrap();
    let hash = cfg.hash();
    assert!(records.iter().all(|r| r.config_hash == hash && r.code_version == CODE_VERSION));
    let on_disk = read_records(&dir.path().join(RECORDS_FILE)).unwrap();
    assert_eq!(on_disk.len(), records.len());
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("index.json")).unwrap()).unwrap();
    assert_eq!(index[0]["config_hash"], hash.as_str());
    assert_eq!(index[0]["records"], records.len());
}

#[test]
fn reruns_are_bit_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r1 = run_global_sweep(&blobs_config(a.path())).unwrap();
    let mut cfg = blobs_config(b.path());
    cfg.workers = 1;
    let r2 = run_global_sweep(&cfg).unwrap();
    assert_same(&r1, &r2);
}

#[test]
fn interrupted_sweep_resumes_without_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs_config(dir.path());
    let full = run_global_sweep(&cfg).unwrap();

    let path = dir.path().join(RECORDS_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().take(3).collect();
    std::fs::write(&path, kept.join("\n") + "\n").unwrap();
    assert_eq!(read_records(&path).unwrap().len(), 2);

    let resumed = run_global_sweep(&cfg).unwrap();
    assert_same(&full, &resumed);
    let on_disk = read_records(&path).unwrap();
    assert_eq!(on_disk.len(), full.len());
    let keys: HashSet<String> = on_disk.iter().map(|r| r.cell_key()).collect();
    assert_eq!(keys.len(), full.len());

    let again = run_global_sweep(&cfg).unwrap();
    assert_same(&full, &again);
    assert_eq!(read_records(&path).unwrap().len(), full.len());
}

#[test]
fn walking_over_single_point_equals_global() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs_config(dir.path());
    let mut ctx = SweepContext::load(&cfg).unwrap();
    let mut spec = ModelSpec::mlp(ctx.spec.input, ctx.spec.classes, false);
    spec.layers.insert(3, LayerKind::InjectionPoint { id: 0 });
    ctx.spec = spec;
    let global = run_global_sweep_with(&ctx, &cfg).unwrap();
    cfg.output = dir.path().join("walk");
    let walking = run_walking_sweep_with(&ctx, &cfg).unwrap();
    assert_eq!(global.len(), walking.len());
    for (g, w) in global.iter().zip(&walking) {
        assert_eq!((g.sigma, g.seed), (w.sigma, w.seed));
        assert_eq!(g.accuracy, w.accuracy);
        assert_eq!(g.epochs_run, w.epochs_run);
        assert_eq!(w.experiment, Experiment::Walking);
        assert_eq!(w.layer, "0");
    }
}

#[test]
fn walking_zero_column_identical_across_layers() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs_config(dir.path());
    cfg.layers = vec![0, 3, 7];
    cfg.seeds = vec![1];
    let records = run_walking_sweep(&cfg).unwrap();
    assert_eq!(records.len(), 3 * 3);
    let zeros: Vec<f64> = records.iter().filter(|r| r.sigma == 0.0).map(|r| r.accuracy).collect();
    assert_eq!(zeros.len(), 3);
    assert!(zeros.iter().all(|&a| a == zeros[0]));
    assert!(records.iter().any(|r| r.layer_name.ends_with("(out)")));

    cfg.layers = vec![8];
    cfg.output = dir.path().join("bad");
    assert!(run_walking_sweep(&cfg).is_err());
}

#[test]
fn mixed_corner_is_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs_config(dir.path());
    cfg.noise = NoiseKind::Mixed;
    cfg.add_grid = "list:1".parse().unwrap();
    cfg.mul_grid = "list:1".parse().unwrap();
    cfg.seeds = vec![5];
    cfg.mixed_point = Some(2);
    let records = run_mixed_grid(&cfg).unwrap();
    assert_eq!(records.len(), 2 * 2 * 2);
    assert!(records.iter().all(|r| r.experiment == Experiment::Mixed && r.layer == "2"));

    cfg.noise = NoiseKind::Additive;
    cfg.sigma_grid = GridSpec::List(vec![0.0]);
    cfg.layers = vec![2];
    cfg.output = dir.path().join("walk");
    let baseline = run_walking_sweep(&cfg).unwrap()[0].accuracy;
    let corners: Vec<f64> = records
        .iter()
        .filter(|r| r.sigma_add == 0.0 && r.sigma_mul == 0.0)
        .map(|r| r.accuracy)
        .collect();
    assert_eq!(corners, vec![baseline, baseline]);
}

#[test]
fn divergence_is_recorded_not_raised() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs_config(dir.path());
    cfg.sigma_grid = "list:1e39".parse().unwrap();
    cfg.include_zero = false;
    cfg.seeds = vec![0];
    let records = run_global_sweep(&cfg).unwrap();
    assert_eq!(records.len(), 1);
    let r = &records[0];
    assert!(r.diverged);
    assert_eq!(r.accuracy, 1.0 / r.classes as f64);
    assert_eq!(r.accuracy_std, 0.0);
}

fn record(layer: &str, sigma: f64, seed: u64, accuracy: f64) -> ExperimentRecord {
    ExperimentRecord {
        config_hash: "h".into(),
        code_version: CODE_VERSION.into(),
        experiment: Experiment::Walking,
        layer: layer.into(),
        layer_name: format!("l{layer}"),
        noise: NoiseKind::Additive,
        sigma,
        sigma_add: sigma,
        sigma_mul: 0.0,
        order: String::new(),
        phase: Phase::TrainAndInference,
        clamp: false,
        seed,
        classes: 10,
        accuracy,
        accuracy_std: 0.0,
        epochs_run: 1,
        wallclock_s: 0.0,
        diverged: false,
        checkpoint: String::new(),
    }
}

#[test]
fn seed_aggregation_arithmetic() {
    let (m, se) = seed_mean_stderr(&[0.6, 0.62, 0.64]);
    assert!((m - 0.62).abs() < 1e-12);
    assert!((se - 0.02 / 3f64.sqrt()).abs() < 1e-12);
    assert!((se - 0.0115).abs() < 1e-4);
}

#[test]
fn fit_all_selects_model_per_curve() {
    let sigmas: Vec<f64> = (0..40).map(|i| 10f64.powf(-2.0 + 6.0 * i as f64 / 39.0)).collect();
    let stacked = DoubleParams {
        mu1: 0.1,
        s1: 0.03,
        delta_a1: 0.25,
        mu2: 100.0,
        s2: 20.0,
        delta_a2: 0.2,
        a_min: 0.1,
        errors: [0.0; 7],
    };
    let mut records = Vec::new();
    for (i, &s) in sigmas.iter().enumerate() {
        for seed in 0..3u64 {
            let jitter = 0.002 * ((i as f64 * 1.7 + seed as f64 * 2.3).sin());
            records.push(record("1", s, seed, logistic(s, 1.0, 0.2, 0.4, 0.1) + jitter));
            records.push(record("2", s, seed, double_logistic(s, &stacked) + jitter));
        }
    }
    records.push(record("3", 1.0, 0, 0.5));
    let fits = fit_all(&records);
    assert_eq!(fits.len(), 3);
    let by_layer = |l: &str| fits.iter().find(|f| f.key.layer == l).unwrap();
    let single = by_layer("1").fit.as_ref().unwrap();
    assert!(matches!(single.mode, FitMode::Single));
    assert!((single.mu - 1.0).abs() < 0.05);
    let double = by_layer("2").fit.as_ref().unwrap();
    assert!(matches!(double.mode, FitMode::Double(_)), "{:?}", double.mode);
    assert!(by_layer("3").fit.is_err());

    let dir = tempfile::tempdir().unwrap();
    write_fit_outputs(&fits, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("fits.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(std::fs::read_dir(dir.path().join("curves")).unwrap().count(), 3);
}
