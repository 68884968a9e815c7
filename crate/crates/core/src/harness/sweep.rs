use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::records::{cell_key, Experiment, ExperimentRecord, IndexEntry, ResultsStore, CODE_VERSION};
use crate::datasets::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::{build_model, checkpoint, evaluate, train, Model, ModelSpec, TrainConfig};
use crate::noise::{InjectionPlan, NoiseSpec, Phase, Placement};
use crate::rng::{Domain, RngStream};

/// Data and architecture shared by every cell of a sweep.
#[derive(Clone, Debug)]
pub struct SweepContext {
    pub spec: ModelSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SweepContext {
    /// Loads the configured dataset (with subsets) and builds the model spec.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.data_dir.clone().unwrap_or_else(datasets::default_data_dir);
        let splits = datasets::load_named(&cfg.dataset, &dir, cfg.data_seed)?;
        let train = match cfg.subset {
            Some(n) => datasets::subset(&splits.train, n, cfg.data_seed)?,
            None => splits.train,
        };
        let test = match cfg.test_subset {
            Some(n) => datasets::subset(&splits.test, n, cfg.data_seed)?,
            None => splits.test,
        };
        let spec = ModelSpec::by_name(&cfg.model, train.item_shape(), train.classes)?;
        Ok(SweepContext {
            spec,
            train,
            val: splits.val,
            test,
        })
    }

    pub fn point_count(&self) -> Result<usize> {
        Ok(build_model::<f32>(&self.spec, 0)?.points().len())
    }
}

#[derive(Clone, Debug)]
struct Cell {
    experiment: Experiment,
    point: Option<usize>,
    spec: NoiseSpec,
    sigma: f64,
    seed: u64,
}

impl Cell {
    fn layer(&self) -> String {
        self.point.map_or_else(|| "global".to_string(), |p| p.to_string())
    }

    fn order(&self) -> &'static str {
        self.spec.order().map_or("", |o| o.as_str())
    }

    fn key(&self) -> String {
        cell_key(
            self.experiment,
            &self.layer(),
            self.spec.sigma_add(),
            self.spec.sigma_mul(),
            self.order(),
            self.seed,
        )
    }

    fn plan(&self, phase: Phase) -> InjectionPlan {
        let placement = self.point.map_or(Placement::Global, Placement::WalkingAt);
        InjectionPlan {
            placement,
            spec: self.spec,
            phase,
        }
    }
}

/// Trains and evaluates every σ of the grid with noise at all points.
pub fn run_global_sweep(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    run_global_sweep_with(&SweepContext::load(cfg)?, cfg)
}

pub fn run_global_sweep_with(ctx: &SweepContext, cfg: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    let mut cells = Vec::new();
    for &sigma in &cfg.sigmas() {
        for &seed in &cfg.seeds {
            cells.push(Cell {
                experiment: Experiment::Global,
                point: None,
                spec: NoiseSpec::of_kind(cfg.noise, sigma)?,
                sigma,
                seed,
            });
        }
    }
    run_cells(ctx, cfg, cells)
}

/// The layer × σ × seed factorial with noise at one point at a time.
pub fn run_walking_sweep(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    run_walking_sweep_with(&SweepContext::load(cfg)?, cfg)
}

pub fn run_walking_sweep_with(ctx: &SweepContext, cfg: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    let count = ctx.point_count()?;
    let layers: Vec<usize> = if cfg.layers.is_empty() { (0..count).collect() } else { cfg.layers.clone() };
    if let Some(&bad) = layers.iter().find(|&&p| p >= count) {
        return Err(Error::InjectionPoint { id: bad, count });
    }
    let mut cells = Vec::new();
    for &point in &layers {
        for &sigma in &cfg.sigmas() {
            for &seed in &cfg.seeds {
                cells.push(Cell {
                    experiment: Experiment::Walking,
                    point: Some(point),
                    spec: NoiseSpec::of_kind(cfg.noise, sigma)?,
                    sigma,
                    seed,
                });
            }
        }
    }
    run_cells(ctx, cfg, cells)
}

/// The (σ_add, σ_mul, order) surface at one injection point; the point
/// defaults to the middle of the network.
pub fn run_mixed_grid(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    run_mixed_grid_with(&SweepContext::load(cfg)?, cfg)
}

pub fn run_mixed_grid_with(ctx: &SweepContext, cfg: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    let count = ctx.point_count()?;
    let point = cfg.mixed_point.unwrap_or(count / 2);
    if point >= count {
        return Err(Error::InjectionPoint { id: point, count });
    }
    let axis = |g: &super::config::GridSpec| {
        let mut v = g.values();
        if cfg.include_zero {
            v.push(0.0);
        }
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let (adds, muls) = (axis(&cfg.add_grid), axis(&cfg.mul_grid));
    let mut cells = Vec::new();
    for &order in &cfg.orders {
        for &sa in &adds {
            for &sm in &muls {
                for &seed in &cfg.seeds {
                    cells.push(Cell {
                        experiment: Experiment::Mixed,
                        point: Some(point),
                        spec: NoiseSpec::mixed(sa, sm, order)?,
                        sigma: sm,
                        seed,
                    });
                }
            }
        }
    }
    run_cells(ctx, cfg, cells)
}

/// Trains a noise-free model, as used by every inference-only cell of a seed.
pub fn train_clean(ctx: &SweepContext, train_cfg: &TrainConfig, seed: u64) -> Result<Model<f32>> {
    let mut model = build_model::<f32>(&ctx.spec, seed)?;
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    train(&mut model, &ctx.train, Some(&ctx.val), None, &cfg, 0)?;
    Ok(model)
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    let n = if workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        workers
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))
}

fn run_cells(ctx: &SweepContext, cfg: &ExperimentConfig, cells: Vec<Cell>) -> Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    let hash = cfg.hash();
    let store = ResultsStore::open(&cfg.output)?;
    let done = store.done_keys(&hash);
    let pending: Vec<&Cell> = cells.iter().filter(|c| !done.contains(&c.key())).collect();
    log::info!(
        "{}: {} cells, {} already recorded, {} to run",
        cfg.name,
        cells.len(),
        cells.len() - pending.len(),
        pending.len()
    );
    let pool = thread_pool(cfg.workers)?;

    let clean: HashMap<u64, Model<f32>> = if cfg.phase == Phase::InferenceOnly {
        let mut seeds: Vec<u64> = pending.iter().map(|c| c.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let models = pool.install(|| {
            seeds
                .par_iter()
                .map(|&s| train_clean(ctx, &cfg.train, s).map(|m| (s, m)))
                .collect::<Result<Vec<_>>>()
        })?;
        if cfg.save_checkpoints {
            let dir = cfg.output.join("checkpoints");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (s, m) in &models {
                checkpoint::save(m, &dir.join(format!("clean_seed{s}.json")))?;
            }
        }
        models.into_iter().collect()
    } else {
        HashMap::new()
    };

    let mut writer = store.appender()?;
    let (tx, rx) = mpsc::channel::<ExperimentRecord>();
    let outcome = std::thread::scope(|scope| {
        let sink = scope.spawn(move || -> Result<Vec<ExperimentRecord>> {
            let mut written = Vec::new();
            for rec in rx {
                writer.serialize(&rec)?;
                writer.flush().map_err(|e| Error::io(&cfg.output, e))?;
                written.push(rec);
            }
            Ok(written)
        });
        let ran = pool.install(|| {
            pending.par_iter().try_for_each_with(tx, |tx, cell| {
                let rec = run_cell(ctx, cfg, &hash, cell, clean.get(&cell.seed))?;
                tx.send(rec)
                    .map_err(|_| Error::InvalidArgument("results writer stopped".into()))
            })
        });
        let written = sink.join().expect("results writer panicked");
        ran.and(written)
    })?;

    let total = store.existing(&hash).count() + outcome.len();
    let mut by_key: HashMap<String, ExperimentRecord> =
        store.existing(&hash).cloned().map(|r| (r.cell_key(), r)).collect();
    for r in outcome {
        by_key.insert(r.cell_key(), r);
    }
    let records: Vec<ExperimentRecord> = cells.iter().filter_map(|c| by_key.remove(&c.key())).collect();

    store.update_index(IndexEntry {
        config_hash: hash,
        name: cfg.name.clone(),
        code_version: CODE_VERSION.to_string(),
        records: total,
        config: serde_json::to_value(cfg)?,
    })?;
    Ok(records)
}

fn run_cell(
    ctx: &SweepContext,
    cfg: &ExperimentConfig,
    hash: &str,
    cell: &Cell,
    clean: Option<&Model<f32>>,
) -> Result<ExperimentRecord> {
    let start = Instant::now();
    let plan = cell.plan(cfg.phase);
    let classes = ctx.spec.classes;
    let train_cfg = TrainConfig {
        seed: cell.seed,
        ..cfg.train.clone()
    };

    let mut epochs_run = 0;
    let mut diverged = false;
    let mut checkpoint_ref = String::new();
    let trained;
    let model = match clean {
        Some(m) => m,
        None => {
            let mut m = build_model::<f32>(&ctx.spec, cell.seed)?;
            match train(&mut m, &ctx.train, Some(&ctx.val), Some(&plan), &train_cfg, 0) {
                Ok(report) => epochs_run = report.epochs_run,
                Err(Error::NonFiniteLoss { epoch, .. }) => {
                    diverged = true;
                    epochs_run = epoch + 1;
                }
                Err(e) => return Err(e),
            }
            trained = m;
            &trained
        }
    };

    let point_name = match cell.point {
        Some(p) => model
            .point(p)
            .map(|i| i.name.clone())
            .ok_or(Error::InjectionPoint {
                id: p,
                count: model.points().len(),
            })?,
        None => "global".to_string(),
    };

    let (accuracy, accuracy_std) = if diverged {
        (1.0 / classes as f64, 0.0)
    } else {
        let rng = RngStream::new(cell.seed, Domain::Eval);
        let ev = evaluate(model, &ctx.test, Some(&plan), rng, cfg.eval_repeats)?;
        (ev.accuracy, ev.std)
    };

    if cfg.save_checkpoints && clean.is_none() && !diverged {
        let rel = PathBuf::from("checkpoints").join(format!("{}.json", sanitize(&cell.key())));
        let path = cfg.output.join(&rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        checkpoint::save(model, &path)?;
        checkpoint_ref = rel.to_string_lossy().into_owned();
    } else if cfg.save_checkpoints && clean.is_some() {
        checkpoint_ref = format!("checkpoints/clean_seed{}.json", cell.seed);
    }

    Ok(ExperimentRecord {
        config_hash: hash.to_string(),
        code_version: CODE_VERSION.to_string(),
        experiment: cell.experiment,
        layer: cell.layer(),
        layer_name: point_name,
        noise: cell.spec.kind(),
        sigma: cell.sigma,
        sigma_add: cell.spec.sigma_add(),
        sigma_mul: cell.spec.sigma_mul(),
        order: cell.order().to_string(),
        phase: cfg.phase,
        clamp: cfg.train.clamp_weights,
        seed: cell.seed,
        classes,
        accuracy,
        accuracy_std,
        epochs_run,
        wallclock_s: start.elapsed().as_secs_f64(),
        diverged,
        checkpoint: checkpoint_ref,
    })
}

fn sanitize(key: &str) -> String {
    key.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}
