use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use walknoise::harness::{
    self, fit_all, read_walking_mus, write_fit_outputs, ExperimentConfig, GridSpec, SweepContext, CODE_VERSION,
};
use walknoise::multiexec::{self, allocate_repetitions, PlanEntry};
use walknoise::nn::{build_model, checkpoint, evaluate, train, Model, TrainConfig};
use walknoise::probes::{self, HistogramSettings, QuantLevels};
use walknoise::robustfit::{self, read_curve_csv, FitResult};
use walknoise::{Domain, InjectionPlan, MixOrder, NoiseKind, NoiseSpec, Phase, Placement, RngStream};

/// Layer-wise noise injection experiments.
#[derive(Parser)]
#[command(name = "walknoise", version, about)]
struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and evaluate it on the test split.
    Train(TrainCmd),
    /// Sweep σ with noise at every injection point.
    SweepGlobal(SweepCmd),
    /// Sweep σ with noise at one injection point at a time.
    Walk(WalkCmd),
    /// Sweep (σ_add, σ_mul) of mixed noise at one injection point.
    MixedGrid(MixedCmd),
    /// Fit a logistic curve to an accuracy CSV.
    Fit(FitCmd),
    /// Activation histograms and a threshold-quantization probe.
    ProbeBinarize(ProbeBinarizeCmd),
    /// Weight magnitudes of unclamped against clamped training.
    ProbeWeights(ProbeWeightsCmd),
    /// Allocate a repetition budget from per-layer midpoints.
    Multiexec(MultiexecCmd),
    /// Plot-ready tables from a results log.
    Report(ReportCmd),
}

/// Flags shared by every command.
#[derive(Args, Clone)]
struct Common {
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment config (TOML); flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Additive,
    Multiplicative,
    Mixed,
}

impl From<NoiseArg> for NoiseKind {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Additive => NoiseKind::Additive,
            NoiseArg::Multiplicative => NoiseKind::Multiplicative,
            NoiseArg::Mixed => NoiseKind::Mixed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    NoisyTraining,
    InferenceOnly,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::NoisyTraining => Phase::TrainAndInference,
            PhaseArg::InferenceOnly => Phase::InferenceOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    MulFirst,
    AddFirst,
}

impl From<OrderArg> for MixOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::MulFirst => MixOrder::MultiplicativeFirst,
            OrderArg::AddFirst => MixOrder::AdditiveFirst,
        }
    }
}

/// Model, data, noise and training flags.
#[derive(Args, Clone)]
struct ExpArgs {
    /// mlp, mlp-bn, lenet5, lenet5-bn.
    #[arg(long)]
    model: Option<String>,
    /// mnist, fashion, cifar10, blobs.
    #[arg(long)]
    dataset: Option<String>,
    /// Class-balanced training subset size.
    #[arg(long)]
    subset: Option<usize>,
    /// Class-balanced test subset size.
    #[arg(long)]
    test_subset: Option<usize>,
    /// Dataset directory (default: $WALKNOISE_DATA or ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    #[arg(long, value_enum)]
    phase: Option<PhaseArg>,
    /// log:lo:hi:n, lin:lo:hi:n or list:a,b,...
    #[arg(long)]
    sigma_grid: Option<GridSpec>,
    /// Leave σ = 0 out of the grid.
    #[arg(long)]
    no_zero: bool,
    /// Number of seeds, counted up from --seed.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Early-stopping patience in epochs (0 disables).
    #[arg(long)]
    patience: Option<usize>,
    /// Clamp weights to [-1, 1] after every step.
    #[arg(long)]
    clamp: bool,
    /// Noisy evaluation passes per cell.
    #[arg(long)]
    eval_repeats: Option<usize>,
    /// Worker threads (0: one per CPU).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    exp: ExpArgs,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Inject at this point only (default: every point).
    #[arg(long)]
    point: Option<usize>,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    exp: ExpArgs,
}

#[derive(Args)]
struct WalkCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    exp: ExpArgs,
    /// Injection points to visit (default: all).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
}

#[derive(Args)]
struct MixedCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    exp: ExpArgs,
    #[arg(long)]
    add_grid: Option<GridSpec>,
    #[arg(long)]
    mul_grid: Option<GridSpec>,
    /// Injection point (default: middle of the network).
    #[arg(long)]
    point: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    orders: Option<Vec<OrderArg>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitModel {
    Auto,
    Single,
    Double,
}

#[derive(Args)]
struct FitCmd {
    #[command(flatten)]
    common: Common,
    /// CSV with columns sigma, acc_mean, acc_stderr.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    fit_model: FitModel,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelsArg {
    Binary,
    Ternary,
}

#[derive(Args)]
struct ProbeBinarizeCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    exp: ExpArgs,
    /// Injection point to probe.
    #[arg(long)]
    point: usize,
    #[arg(long, default_value_t = 1e6)]
    sigma: f64,
    /// Probe this model instead of training one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ternary")]
    levels: LevelsArg,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

#[derive(Args)]
struct ProbeWeightsCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    exp: ExpArgs,
    /// Walking injection point.
    #[arg(long)]
    point: usize,
    #[arg(long)]
    sigma: f64,
}

#[derive(Args)]
struct MultiexecCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    exp: ExpArgs,
    /// fits.csv or layer_midpoints.csv with per-layer μ.
    #[arg(long)]
    mus: PathBuf,
    /// Total executions across all points.
    #[arg(long)]
    budget: usize,
    /// Evaluate uniform and guided plans on this model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Global additive σ for the evaluation.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct ReportCmd {
    #[command(flatten)]
    common: Common,
    /// records.csv written by a sweep.
    #[arg(long)]
    records: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(c) => cmd_train(c),
        Command::SweepGlobal(c) => cmd_sweep(c),
        Command::Walk(c) => cmd_walk(c),
        Command::MixedGrid(c) => cmd_mixed(c),
        Command::Fit(c) => cmd_fit(c),
        Command::ProbeBinarize(c) => cmd_probe_binarize(c),
        Command::ProbeWeights(c) => cmd_probe_weights(c),
        Command::Multiexec(c) => cmd_multiexec(c),
        Command::Report(c) => cmd_report(c),
    }
}

/// Config file (or defaults) with flags applied on top.
fn experiment_config(common: &Common, exp: &ExpArgs, defaults: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let mut cfg = ExperimentConfig::default();
            defaults(&mut cfg);
            cfg
        }
    };
    if let Some(v) = &exp.model {
        cfg.model = v.clone();
    }
    if let Some(v) = &exp.dataset {
        cfg.dataset = v.clone();
    }
    if exp.subset.is_some() {
        cfg.subset = exp.subset;
    }
    if exp.test_subset.is_some() {
        cfg.test_subset = exp.test_subset;
    }
    if exp.data_dir.is_some() {
        cfg.data_dir = exp.data_dir.clone();
    }
    if let Some(v) = exp.noise {
        let kind = NoiseKind::from(v);
        if common.config.is_none() && exp.sigma_grid.is_none() {
            cfg.sigma_grid = harness::default_grid(kind);
        }
        cfg.noise = kind;
    }
    if let Some(v) = exp.phase {
        cfg.phase = v.into();
    }
    if let Some(v) = &exp.sigma_grid {
        cfg.sigma_grid = v.clone();
    }
    if exp.no_zero {
        cfg.include_zero = false;
    }
    if common.seed.is_some() || exp.seeds.is_some() {
        let base = common.seed.or(cfg.seeds.first().copied()).unwrap_or(0);
        let n = exp.seeds.unwrap_or(cfg.seeds.len());
        cfg.seeds = (base..base + n as u64).collect();
    }
    if let Some(v) = exp.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = exp.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = exp.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = exp.patience {
        cfg.train.patience = v;
    }
    if exp.clamp {
        cfg.train.clamp_weights = true;
    }
    if let Some(v) = exp.eval_repeats {
        cfg.eval_repeats = v;
    }
    if let Some(v) = exp.workers {
        cfg.workers = v;
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let out = match (&common.out, &common.config) {
        (Some(o), _) => o.clone(),
        (None, Some(path)) => ExperimentConfig::load(path)?.output,
        (None, None) => PathBuf::from("results"),
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write_manifest(out: &Path, command: &str, seed: Option<u64>, cfg: Option<&ExperimentConfig>, extra: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let manifest = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "code_version": CODE_VERSION,
        "seed": seed,
        "config_hash": cfg.map(|c| c.hash()),
        "config": cfg,
        "details": extra,
    });
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn train_one(ctx: &SweepContext, cfg: &ExperimentConfig, plan: &InjectionPlan, seed: u64) -> Result<Model<f32>> {
    let mut model = build_model::<f32>(&ctx.spec, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let noisy = (plan.phase == Phase::TrainAndInference).then_some(plan);
    let report = train(&mut model, &ctx.train, Some(&ctx.val), noisy, &train_cfg, 0)?;
    log::info!("trained {} epochs, best validation {:?}", report.epochs_run, report.best_val_accuracy);
    Ok(model)
}

fn cmd_train(c: TrainCmd) -> Result<()> {
    let cfg = experiment_config(&c.common, &c.exp, |_| {})?;
    let ctx = SweepContext::load(&cfg)?;
    let seed = first_seed(&cfg);
    let spec = NoiseSpec::of_kind(cfg.noise, c.sigma)?;
    let plan = InjectionPlan {
        placement: c.point.map_or(Placement::Global, Placement::WalkingAt),
        spec,
        phase: cfg.phase,
    };
    let model = train_one(&ctx, &cfg, &plan, seed)?;
    let ev = evaluate(&model, &ctx.test, Some(&plan), RngStream::new(seed, Domain::Eval), cfg.eval_repeats)?;
    std::fs::create_dir_all(&cfg.output)?;
    checkpoint::save(&model, &cfg.output.join("model.json"))?;
    let result = json!({ "accuracy": ev.accuracy, "accuracy_std": ev.std, "noise": spec.to_string() });
    std::fs::write(cfg.output.join("train.json"), serde_json::to_string_pretty(&result)?)?;
    println!("test accuracy {:.4} ± {:.4} ({spec})", ev.accuracy, ev.std);
    write_manifest(&cfg.output, "train", Some(seed), Some(&cfg), json!({ "sigma": c.sigma, "point": c.point }))
}

fn finish_sweep(cfg: &ExperimentConfig, command: &str, records: &[harness::ExperimentRecord]) -> Result<()> {
    let fits = fit_all(records);
    write_fit_outputs(&fits, &cfg.output)?;
    for f in &fits {
        match &f.fit {
            Ok(r) => println!("{:<28} mu = {:.4e} ± {:.2e} ({})", f.key.slug(), r.mu, r.errors.mu, r.mode.name()),
            Err(e) => println!("{:<28} fit failed: {e}", f.key.slug()),
        }
    }
    println!("{} records, {} curves in {}", records.len(), fits.len(), cfg.output.display());
    write_manifest(&cfg.output, command, cfg.seeds.first().copied(), Some(cfg), json!({}))
}

fn cmd_sweep(c: SweepCmd) -> Result<()> {
    let cfg = experiment_config(&c.common, &c.exp, |_| {})?;
    let records = harness::run_global_sweep(&cfg)?;
    finish_sweep(&cfg, "sweep-global", &records)
}

fn cmd_walk(c: WalkCmd) -> Result<()> {
    let mut cfg = experiment_config(&c.common, &c.exp, |_| {})?;
    if let Some(layers) = c.layers {
        cfg.layers = layers;
    }
    let records = harness::run_walking_sweep(&cfg)?;
    finish_sweep(&cfg, "walk", &records)
}

fn cmd_mixed(c: MixedCmd) -> Result<()> {
    let mut cfg = experiment_config(&c.common, &c.exp, |cfg| cfg.noise = NoiseKind::Mixed)?;
    if let Some(g) = c.add_grid {
        cfg.add_grid = g;
    }
    if let Some(g) = c.mul_grid {
        cfg.mul_grid = g;
    }
    if c.point.is_some() {
        cfg.mixed_point = c.point;
    }
    if let Some(orders) = c.orders {
        cfg.orders = orders.into_iter().map(Into::into).collect();
    }
    cfg.validate()?;
    let records = harness::run_mixed_grid(&cfg)?;
    println!("{} records in {}", records.len(), cfg.output.display());
    write_manifest(&cfg.output, "mixed-grid", cfg.seeds.first().copied(), Some(&cfg), json!({}))
}

fn cmd_fit(c: FitCmd) -> Result<()> {
    let out = out_dir(&c.common)?;
    let curve = read_curve_csv(&c.input)?;
    let fitted: std::result::Result<FitResult, robustfit::FitError> = match c.fit_model {
        FitModel::Auto => robustfit::fit_best(&curve),
        FitModel::Single => robustfit::fit_logistic(&curve),
        FitModel::Double => robustfit::fit_double_logistic(&curve),
    };
    let fit = match fitted {
        Ok(f) => f,
        Err(robustfit::FitError::NotConverged { best }) => {
            log::warn!("fit did not converge; reporting the best iterate");
            *best
        }
        Err(e) => return Err(e.into()),
    };
    println!("mode    {}", fit.mode.name());
    println!("mu      {:.6} ± {:.6}", fit.mu, fit.errors.mu);
    println!("s       {:.6} ± {:.6}", fit.s, fit.errors.s);
    println!("delta_a {:.6} ± {:.6}", fit.delta_a, fit.errors.delta_a);
    println!("a_min   {:.6} ± {:.6}", fit.a_min, fit.errors.a_min);
    robustfit::write_fit_json(&fit, &out.join("fit.json"))?;
    write_manifest(&out, "fit", c.common.seed, None, json!({ "input": c.input }))
}

fn load_or_train(
    ctx: &SweepContext,
    cfg: &ExperimentConfig,
    plan: &InjectionPlan,
    checkpoint_path: Option<&Path>,
) -> Result<Model<f32>> {
    match checkpoint_path {
        Some(p) => {
            let model: Model<f32> = checkpoint::load(p)?;
            if model.spec() != &ctx.spec {
                bail!("checkpoint {} does not match model {:?} on {:?}", p.display(), cfg.model, cfg.dataset);
            }
            Ok(model)
        }
        None => train_one(ctx, cfg, plan, first_seed(cfg)),
    }
}

fn cmd_probe_binarize(c: ProbeBinarizeCmd) -> Result<()> {
    let cfg = experiment_config(&c.common, &c.exp, |cfg| {
        cfg.model = "mlp-bn".into();
        cfg.noise = NoiseKind::Multiplicative;
    })?;
    let ctx = SweepContext::load(&cfg)?;
    let seed = first_seed(&cfg);
    let plan = InjectionPlan::walking(c.point, NoiseSpec::of_kind(cfg.noise, c.sigma)?, cfg.phase);
    let model = load_or_train(&ctx, &cfg, &plan, c.checkpoint.as_deref())?;
    std::fs::create_dir_all(&cfg.output)?;
    if c.checkpoint.is_none() {
        checkpoint::save(&model, &cfg.output.join("model.json"))?;
    }
    let rng = RngStream::new(seed, Domain::Eval);
    let hists = probes::capture_histograms(&model, &ctx.test, Some(&plan), rng, &HistogramSettings::default())?;
    probes::write_histograms_csv(&hists, &cfg.output.join("histograms.csv"))?;
    let levels = match c.levels {
        LevelsArg::Binary => QuantLevels::BinaryZeroPeak,
        LevelsArg::Ternary => QuantLevels::TernarySymmetric,
    };
    let (rule, bimodality) = probes::derive_rule(&model, &ctx.val, Some(&plan), rng.epoch(1 << 16), c.point, levels)?;
    let outcome = probes::quantize_probe(&model, &ctx.test, Some(&plan), &rule, rng, c.repeats)?;
    println!("bimodal: {} (peaks {:.3e}, {:.3e})", bimodality.is_bimodal, bimodality.peaks.0, bimodality.peaks.1);
    println!(
        "accuracy unquantized {:.4}, quantized {:.4}",
        outcome.accuracy_unquantized, outcome.accuracy_quantized
    );
    let result = json!({ "bimodality": bimodality, "rule": rule, "outcome": outcome });
    std::fs::write(cfg.output.join("probe.json"), serde_json::to_string_pretty(&result)?)?;
    write_manifest(&cfg.output, "probe-binarize", Some(seed), Some(&cfg), json!({ "point": c.point, "sigma": c.sigma, "checkpoint": c.checkpoint }))
}

fn cmd_probe_weights(c: ProbeWeightsCmd) -> Result<()> {
    let cfg = experiment_config(&c.common, &c.exp, |_| {})?;
    let ctx = SweepContext::load(&cfg)?;
    let seed = first_seed(&cfg);
    let plan = InjectionPlan::walking(c.point, NoiseSpec::of_kind(cfg.noise, c.sigma)?, Phase::TrainAndInference);
    let mut unclamped_cfg = cfg.clone();
    unclamped_cfg.train.clamp_weights = false;
    let mut clamped_cfg = cfg.clone();
    clamped_cfg.train.clamp_weights = true;
    let unclamped = train_one(&ctx, &unclamped_cfg, &plan, seed)?;
    let clamped = train_one(&ctx, &clamped_cfg, &plan, seed)?;
    let ratios = probes::weight_magnitude_ratios(&unclamped, &clamped)?;
    std::fs::create_dir_all(&cfg.output)?;
    let path = cfg.output.join("weight_ratios.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &ratios {
        w.serialize(r)?;
        println!("layer {} ({}): {:.3}", r.ordinal, r.layer, r.ratio);
    }
    w.flush()?;
    write_manifest(&cfg.output, "probe-weights", Some(seed), Some(&cfg), json!({ "point": c.point, "sigma": c.sigma }))
}

fn cmd_multiexec(c: MultiexecCmd) -> Result<()> {
    let rows = read_walking_mus(&c.mus)?;
    if rows.is_empty() {
        bail!("no per-layer midpoints in {}", c.mus.display());
    }
    let mus: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let plan = allocate_repetitions(&mus, c.budget)?;
    let entries: Vec<PlanEntry> = rows
        .iter()
        .zip(&plan.counts)
        .map(|((id, name, _), &n)| PlanEntry {
            layer_id: *id,
            layer_name: name.clone(),
            n_i: n,
        })
        .collect();
    println!("plan {} (total {})", plan.braces(), plan.total);

    let needs_model = c.checkpoint.is_some() || c.sigma.is_some();
    let cfg = if needs_model { Some(experiment_config(&c.common, &c.exp, |_| {})?) } else { None };
    let out = match &cfg {
        Some(cfg) => cfg.output.clone(),
        None => out_dir(&c.common)?,
    };
    std::fs::create_dir_all(&out)?;
    multiexec::write_plan_json(&entries, &out.join("plan.json"))?;

    if let Some(cfg) = &cfg {
        let (Some(ckpt), Some(sigma)) = (&c.checkpoint, c.sigma) else {
            bail!("evaluating plans needs both --checkpoint and --sigma");
        };
        let ctx = SweepContext::load(cfg)?;
        let model: Model<f32> = checkpoint::load(ckpt)?;
        if model.points().len() != mus.len() {
            bail!("{} midpoints for a model with {} injection points", mus.len(), model.points().len());
        }
        let noise = NoiseSpec::additive(sigma)?;
        let cmp = multiexec::compare_uniform_vs_guided(&model, &ctx.test, &noise, c.budget, &mus, &cfg.seeds)?;
        println!(
            "uniform {} acc {:.4}; guided {} acc {:.4}; improvement {:+.4}",
            cmp.uniform.plan.braces(),
            cmp.uniform.accuracy,
            cmp.guided.plan.braces(),
            cmp.guided.accuracy,
            cmp.improvement()
        );
        multiexec::write_comparison_csv(&[(cfg.model.as_str(), cfg.dataset.as_str(), &cmp)], &out.join("comparison.csv"))?;
    }
    write_manifest(&out, "multiexec", c.common.seed, cfg.as_ref(), json!({ "mus": c.mus, "budget": c.budget, "plan": plan }))
}

fn cmd_report(c: ReportCmd) -> Result<()> {
    let out = out_dir(&c.common)?;
    let summary = walknoise::report::report(&c.records, &out)?;
    for f in &summary.files {
        println!("wrote {}", f.display());
    }
    println!("{} warnings", summary.warnings.len());
    if !summary.files.is_empty() {
        write_manifest(&out, "report", c.common.seed, None, json!({ "records": c.records }))?;
    }
    Ok(())
}
