use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::records::{Experiment, ExperimentRecord};
use crate::error::{Error, Result};
use crate::noise::{mean_std, NoiseKind, Phase};
use crate::robustfit::{self, AccuracyCurve, CurvePoint, FitResult};

/// What makes records one curve.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct CurveKey {
    pub experiment: Experiment,
    pub layer: String,
    pub layer_name: String,
    pub noise: NoiseKind,
    pub order: String,
    pub phase: Phase,
    pub clamp: bool,
}

impl CurveKey {
    fn of(r: &ExperimentRecord) -> Self {
        CurveKey {
            experiment: r.experiment,
            layer: r.layer.clone(),
            layer_name: r.layer_name.clone(),
            noise: r.noise,
            order: r.order.clone(),
            phase: r.phase,
            clamp: r.clamp,
        }
    }

    /// Numeric layer id, with `global` first.
    fn layer_rank(&self) -> i64 {
        self.layer.parse::<i64>().unwrap_or(-1)
    }

    /// A file-name-safe label.
    pub fn slug(&self) -> String {
        let mut s = format!("{}_{}_{}_{}", self.experiment.as_str(), self.layer, self.noise.as_str(), self.phase.as_str());
        if !self.order.is_empty() {
            s.push('_');
            s.push_str(&self.order);
        }
        if self.clamp {
            s.push_str("_clamped");
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct CurveFit {
    pub key: CurveKey,
    pub classes: usize,
    pub curve: AccuracyCurve,
    pub fit: std::result::Result<FitResult, String>,
    /// Preserved relative accuracy at the largest σ, when defined.
    pub preserved: Option<f64>,
    pub raw_ratio: f64,
}

/// Seed mean and standard error (sample std over √n) of accuracies.
pub fn seed_mean_stderr(acc: &[f64]) -> (f64, f64) {
    let n = acc.len();
    let (mean, _) = mean_std(acc);
    if n < 2 {
        return (mean, 0.0);
    }
    let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Aggregates records into one curve per key and fits each. Mixed-grid
/// records are surfaces, not curves, and are skipped.
pub fn fit_all(records: &[ExperimentRecord]) -> Vec<CurveFit> {
    let mut groups: BTreeMap<CurveKey, (usize, BTreeMap<u64, Vec<f64>>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.experiment != Experiment::Mixed) {
        let entry = groups.entry(CurveKey::of(r)).or_insert_with(|| (r.classes, BTreeMap::new()));
        entry.1.entry(r.sigma.to_bits()).or_default().push(r.accuracy);
    }
    let mut keys: Vec<CurveKey> = groups.keys().cloned().collect();
    keys.sort_by(|a, b| {
        (a.experiment, a.phase, a.noise, a.clamp, &a.order, a.layer_rank()).cmp(&(
            b.experiment,
            b.phase,
            b.noise,
            b.clamp,
            &b.order,
            b.layer_rank(),
        ))
    });
    keys.into_iter()
        .filter_map(|key| {
            let (classes, by_sigma) = groups.remove(&key)?;
            let points: Vec<CurvePoint> = by_sigma
                .into_iter()
                .map(|(bits, acc)| {
                    let (y, dy) = seed_mean_stderr(&acc);
                    CurvePoint {
                        sigma: f64::from_bits(bits),
                        y,
                        dy,
                    }
                })
                .collect();
            let curve = match AccuracyCurve::new(points) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("{}: {e}", key.slug());
                    return None;
                }
            };
            let curve = curve
                .with_meta("experiment", key.experiment.as_str())
                .with_meta("layer", &key.layer)
                .with_meta("layer_name", &key.layer_name)
                .with_meta("noise", key.noise.as_str())
                .with_meta("phase", key.phase.as_str())
                .with_meta("order", &key.order)
                .with_meta("clamp", key.clamp);
            let fit = match robustfit::fit_best(&curve) {
                Ok(f) => Ok(f),
                Err(robustfit::FitError::NotConverged { best }) => Ok(*best),
                Err(e) => Err(e.to_string()),
            };
            let first = curve.points.first().map_or(f64::NAN, |p| p.y);
            let last = curve.points.last().map_or(f64::NAN, |p| p.y);
            let preserved = robustfit::preserved_relative_accuracy(first, last, 1.0 / classes as f64).ok();
            Some(CurveFit {
                raw_ratio: robustfit::raw_accuracy_ratio(first, last),
                key,
                classes,
                curve,
                fit,
                preserved,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct FitRow<'a> {
    experiment: &'a str,
    layer: &'a str,
    layer_name: &'a str,
    noise: &'a str,
    order: &'a str,
    phase: &'a str,
    clamp: bool,
    mode: &'a str,
    mu: f64,
    mu_stderr: f64,
    s: f64,
    s_stderr: f64,
    delta_a: f64,
    delta_a_stderr: f64,
    a_min: f64,
    a_min_stderr: f64,
    headline: f64,
    headline_stderr: f64,
    residual: f64,
    aicc: f64,
    n_points: usize,
    converged: bool,
    preserved_rel_acc: f64,
    raw_ratio: f64,
    error: &'a str,
}

/// One row per curve; failed fits keep their row with the error text.
pub fn write_fits_csv(fits: &[CurveFit], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for cf in fits {
        let k = &cf.key;
        let nan = f64::NAN;
        let row = match &cf.fit {
            Ok(f) => {
                let (h, he) = f.headline(k.noise == NoiseKind::Multiplicative);
                FitRow {
                    experiment: k.experiment.as_str(),
                    layer: &k.layer,
                    layer_name: &k.layer_name,
                    noise: k.noise.as_str(),
                    order: &k.order,
                    phase: k.phase.as_str(),
                    clamp: k.clamp,
                    mode: f.mode.name(),
                    mu: f.mu,
                    mu_stderr: f.errors.mu,
                    s: f.s,
                    s_stderr: f.errors.s,
                    delta_a: f.delta_a,
                    delta_a_stderr: f.errors.delta_a,
                    a_min: f.a_min,
                    a_min_stderr: f.errors.a_min,
                    headline: h,
                    headline_stderr: he,
                    residual: f.residual,
                    aicc: f.aicc,
                    n_points: f.n_points,
                    converged: f.converged,
                    preserved_rel_acc: cf.preserved.unwrap_or(nan),
                    raw_ratio: cf.raw_ratio,
                    error: "",
                }
            }
            Err(e) => FitRow {
                experiment: k.experiment.as_str(),
                layer: &k.layer,
                layer_name: &k.layer_name,
                noise: k.noise.as_str(),
                order: &k.order,
                phase: k.phase.as_str(),
                clamp: k.clamp,
                mode: "",
                mu: nan,
                mu_stderr: nan,
                s: nan,
                s_stderr: nan,
                delta_a: nan,
                delta_a_stderr: nan,
                a_min: nan,
                a_min_stderr: nan,
                headline: nan,
                headline_stderr: nan,
                residual: nan,
                aicc: nan,
                n_points: cf.curve.len(),
                converged: false,
                preserved_rel_acc: cf.preserved.unwrap_or(nan),
                raw_ratio: cf.raw_ratio,
                error: e,
            },
        };
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `fits.csv` plus one curve CSV per key under `curves/`.
pub fn write_fit_outputs(fits: &[CurveFit], dir: &Path) -> Result<()> {
    let curves = dir.join("curves");
    std::fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
    for cf in fits {
        robustfit::write_curve_csv(&cf.curve, &curves.join(format!("{}.csv", cf.key.slug())))?;
    }
    write_fits_csv(fits, &dir.join("fits.csv"))
}

/// (layer id, layer name, μ) per walking curve of a `fits.csv` or
/// `layer_midpoints.csv`, in layer order. Without an `experiment` column
/// every row is taken.
pub fn read_walking_mus(path: &Path) -> Result<Vec<(usize, String, f64)>> {
    let parse_err = |offset: u64, detail: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        detail,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| parse_err(0, format!("missing column {name:?}")));
    let (layer, lname, mu) = (need("layer")?, need("layer_name")?, need("mu")?);
    let exp = col("experiment");
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let offset = row.position().map_or(0, |p| p.byte());
        if exp.is_some_and(|e| &row[e] != "walking") {
            continue;
        }
        let id: usize = row[layer]
            .parse()
            .map_err(|_| parse_err(offset, format!("bad layer id {:?}", &row[layer])))?;
        let m: f64 = row[mu]
            .parse()
            .map_err(|_| parse_err(offset, format!("bad mu {:?}", &row[mu])))?;
        out.push((id, row[lname].to_string(), m));
    }
    out.sort_by_key(|(id, ..)| *id);
    Ok(out)
}
