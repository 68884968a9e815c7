//! Sensitivity-guided multi-execution.
//!
//! A layer executed `n` times with independent noise and averaged sees its
//! injected noise shrink by `1/√n`. Given a total budget `n_t`, repetitions
//! are allocated in proportion to `1/μ` per injection point and rounded with
//! the largest-remainder method, keeping every point at one execution or
//! more and the total exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nn::{evaluate_with, Evaluation, Model, PassOptions};
use crate::noise::{mean_std, InjectionPlan, NoiseSpec, Phase};
use crate::rng::{Domain, RngStream};
use crate::tensor::Real;

/// Remainders closer than this are treated as tied.
const TIE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanSource {
    Uniform,
    Guided { mus: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    /// Repetitions per injection point, in point order.
    pub counts: Vec<usize>,
    pub total: usize,
    pub source: PlanSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer_id: usize,
    pub layer_name: String,
    pub n_i: usize,
}

impl ExecutionPlan {
    /// Same count everywhere.
    pub fn uniform(points: usize, per_point: usize) -> Result<Self> {
        if points == 0 || per_point == 0 {
            return Err(Error::InvalidArgument("uniform plan needs points and repetitions >= 1".into()));
        }
        Ok(ExecutionPlan {
            counts: vec![per_point; points],
            total: points * per_point,
            source: PlanSource::Uniform,
        })
    }

    /// `{a,b,c}` as printed in the comparison tables.
    pub fn braces(&self) -> String {
        let inner: Vec<String> = self.counts.iter().map(|c| c.to_string()).collect();
        format!("{{{}}}", inner.join(","))
    }

    pub fn entries<T: Real>(&self, model: &Model<T>) -> Result<Vec<PlanEntry>> {
        check_plan(model, self)?;
        Ok(model
            .points()
            .iter()
            .zip(&self.counts)
            .map(|(p, &n)| PlanEntry {
                layer_id: p.id,
                layer_name: p.name.clone(),
                n_i: n,
            })
            .collect())
    }

    /// Per-point counts indexed by injection point id.
    fn by_point_id<T: Real>(&self, model: &Model<T>) -> Result<Vec<usize>> {
        check_plan(model, self)?;
        let max_id = model.point_ids().into_iter().max().unwrap_or(0);
        let mut reps = vec![1; max_id + 1];
        for (p, &n) in model.points().iter().zip(&self.counts) {
            reps[p.id] = n;
        }
        Ok(reps)
    }
}

fn check_plan<T: Real>(model: &Model<T>, plan: &ExecutionPlan) -> Result<()> {
    if plan.counts.len() != model.points().len() {
        return Err(Error::InvalidArgument(format!(
            "plan has {} entries, model has {} injection points",
            plan.counts.len(),
            model.points().len()
        )));
    }
    if plan.counts.contains(&0) {
        return Err(Error::InvalidArgument("every point needs at least one execution".into()));
    }
    Ok(())
}

/// Shares `(1/μ_i) / Σ(1/μ_j) · n_t`, floored (at least 1), then the
/// leftover units go to the largest fractional remainders, ties to the
/// smaller index. If the floor of one pushes the sum above `n_t`, units are
/// taken back from the points most above their share (ties to the larger
/// index).
pub fn allocate_repetitions(mus: &[f64], n_t: usize) -> Result<ExecutionPlan> {
    if mus.is_empty() {
        return Err(Error::InvalidArgument("no midpoints given".into()));
    }
    if let Some(bad) = mus.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
        return Err(Error::InvalidArgument(format!("midpoints must be positive and finite, got {bad}")));
    }
    if n_t < mus.len() {
        return Err(Error::InvalidArgument(format!(
            "budget {n_t} cannot give each of {} points one execution",
            mus.len()
        )));
    }
    // normalize before inverting so that rescaled inputs give identical shares
    let mu_max = mus.iter().cloned().fold(0.0, f64::max);
    let inv: Vec<f64> = mus.iter().map(|m| mu_max / m).collect();
    let sum: f64 = inv.iter().sum();
    let raw: Vec<f64> = inv.iter().map(|w| w / sum * n_t as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| ((r + TIE_EPS).floor() as usize).max(1)).collect();
    let mut assigned: usize = counts.iter().sum();

    let by_priority = |key: &dyn Fn(usize) -> f64, prefer_small_index: bool| {
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| {
            let (ka, kb) = (key(a), key(b));
            if (ka - kb).abs() <= TIE_EPS {
                if prefer_small_index {
                    a.cmp(&b)
                } else {
                    b.cmp(&a)
                }
            } else {
                kb.total_cmp(&ka)
            }
        });
        order
    };

    if assigned < n_t {
        let counts0 = counts.clone();
        let order = by_priority(&|i| raw[i] - counts0[i] as f64, true);
        for &i in order.iter().cycle().take(n_t - assigned) {
            counts[i] += 1;
        }
        assigned = n_t;
    }
    while assigned > n_t {
        let snapshot = counts.clone();
        let order = by_priority(&|i| snapshot[i] as f64 - raw[i], false);
        let i = *order
            .iter()
            .find(|&&i| counts[i] > 1)
            .expect("n_t >= points leaves a point above one");
        counts[i] -= 1;
        assigned -= 1;
    }
    Ok(ExecutionPlan {
        counts,
        total: n_t,
        source: PlanSource::Guided { mus: mus.to_vec() },
    })
}

/// Accuracy with `noise` injected at every point and point `i` executed
/// `n_i` times (averaged) per pass. Repeat `r` uses `rng` at epoch `r`.
pub fn evaluate_with_plan<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    noise: &NoiseSpec,
    plan: &ExecutionPlan,
    rng: RngStream,
    repeats: usize,
) -> Result<Evaluation> {
    let reps = plan.by_point_id(model)?;
    let injection = InjectionPlan::global(*noise, Phase::InferenceOnly);
    let opts = PassOptions {
        repetitions: Some(&reps),
        ..PassOptions::eval(Some(&injection), rng)
    };
    evaluate_with(model, ds, &opts, repeats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub plan: ExecutionPlan,
    pub accuracy: f64,
    /// Standard deviation across seeds.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub noise: NoiseSpec,
    pub budget: usize,
    pub uniform: PlanOutcome,
    pub guided: PlanOutcome,
}

impl Comparison {
    pub fn improvement(&self) -> f64 {
        self.guided.accuracy - self.uniform.accuracy
    }
}

/// Uniform (`μ` all equal) against guided allocation of `n_t`, each
/// evaluated once per seed with the `(seed, Eval)` stream shared by both.
pub fn compare_uniform_vs_guided<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    noise: &NoiseSpec,
    n_t: usize,
    mus: &[f64],
    seeds: &[u64],
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds".into()));
    }
    let mut uniform = allocate_repetitions(&vec![1.0; mus.len()], n_t)?;
    uniform.source = PlanSource::Uniform;
    let guided = allocate_repetitions(mus, n_t)?;
    let run = |plan: ExecutionPlan| -> Result<PlanOutcome> {
        let per_seed = seeds
            .iter()
            .map(|&s| Ok(evaluate_with_plan(model, ds, noise, &plan, RngStream::new(s, Domain::Eval), 1)?.accuracy))
            .collect::<Result<Vec<f64>>>()?;
        let (accuracy, std) = mean_std(&per_seed);
        Ok(PlanOutcome {
            plan,
            accuracy,
            std,
            per_seed,
        })
    };
    Ok(Comparison {
        noise: *noise,
        budget: n_t,
        uniform: run(uniform)?,
        guided: run(guided)?,
    })
}

#[derive(Serialize)]
struct ComparisonRow<'a> {
    model: &'a str,
    dataset: &'a str,
    points: usize,
    noise: String,
    budget: usize,
    uniform_plan: String,
    uniform_acc: f64,
    uniform_std: f64,
    guided_plan: String,
    guided_acc: f64,
    guided_std: f64,
}

/// One comparison per row, with the plans in `{a,b,...}` form.
pub fn write_comparison_csv(rows: &[(&str, &str, &Comparison)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (model, dataset, c) in rows {
        w.serialize(ComparisonRow {
            model,
            dataset,
            points: c.guided.plan.counts.len(),
            noise: c.noise.to_string(),
            budget: c.budget,
            uniform_plan: c.uniform.plan.braces(),
            uniform_acc: c.uniform.accuracy,
            uniform_std: c.uniform.std,
            guided_plan: c.guided.plan.braces(),
            guided_acc: c.guided.accuracy,
            guided_std: c.guided.std,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_plan_json(entries: &[PlanEntry], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(entries)?).map_err(|e| Error::io(path, e))
}
