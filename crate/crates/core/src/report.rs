//! Plot-ready CSV tables built from a results log.
//!
//! | file | rows |
//! |---|---|
//! | `accuracy_vs_sigma.csv` | measured points and fit samples per curve |
//! | `layer_midpoints.csv` | one per (layer, noise, phase, clamp) of walking sweeps |
//! | `histograms.csv` | copied from the probe output when present |
//! | `preserved_accuracy.csv` | one per walking curve |
//! | `mixed_grid.csv` | one per (σ_add, σ_mul, order) |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{fit_all, read_records, seed_mean_stderr, CurveFit, Experiment, ExperimentRecord};
use crate::noise::NoiseKind;

pub const FIT_SAMPLES: usize = 64;
pub const HISTOGRAM_SOURCE: &str = "histograms.csv";

#[derive(Debug, Default)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl ReportSummary {
    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Reads `records_path` and writes every table that has data into `out`.
/// Histograms are taken from a `histograms.csv` next to the records.
pub fn report(records_path: &Path, out: &Path) -> Result<ReportSummary> {
    let records = if records_path.exists() { read_records(records_path)? } else { Vec::new() };
    let hist = records_path.parent().map(|d| d.join(HISTOGRAM_SOURCE));
    report_records(&records, hist.as_deref(), out)
}

pub fn report_records(records: &[ExperimentRecord], histograms: Option<&Path>, out: &Path) -> Result<ReportSummary> {
    let mut summary = ReportSummary::default();
    if records.is_empty() {
        summary.warn("no records: nothing to report".into());
        return Ok(summary);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let fits = fit_all(records);
    for cf in &fits {
        if let Err(e) = &cf.fit {
            summary.warn(format!("fit failed for {}: {e}", cf.key.slug()));
        }
    }

    if fits.is_empty() {
        summary.warn("no sweep curves in records".into());
    } else {
        let path = out.join("accuracy_vs_sigma.csv");
        write_curves(&fits, &path)?;
        summary.files.push(path);
    }

    let walking: Vec<&CurveFit> = fits.iter().filter(|f| f.key.experiment == Experiment::Walking).collect();
    if walking.is_empty() {
        summary.warn("no walking curves: skipping per-layer tables".into());
    } else {
        let path = out.join("layer_midpoints.csv");
        write_midpoints(&walking, &path)?;
        summary.files.push(path);
        let path = out.join("preserved_accuracy.csv");
        write_preserved(&walking, &path)?;
        summary.files.push(path);
    }

    match histograms.filter(|p| p.exists()) {
        Some(src) => {
            let path = out.join("histograms.csv");
            if src != path {
                std::fs::copy(src, &path).map_err(|e| Error::io(src, e))?;
            }
            summary.files.push(path);
        }
        None => summary.warn("no histogram dump found".into()),
    }

    let mixed: Vec<&ExperimentRecord> = records.iter().filter(|r| r.experiment == Experiment::Mixed).collect();
    if mixed.is_empty() {
        summary.warn("no mixed-noise records".into());
    } else {
        let path = out.join("mixed_grid.csv");
        write_mixed(&mixed, &path)?;
        summary.files.push(path);
    }
    Ok(summary)
}

#[derive(Serialize)]
struct CurveRow<'a> {
    curve: String,
    experiment: &'a str,
    layer: &'a str,
    layer_name: &'a str,
    noise: &'a str,
    phase: &'a str,
    order: &'a str,
    clamp: bool,
    kind: &'a str,
    sigma: f64,
    accuracy: f64,
    stderr: f64,
}

fn write_curves(fits: &[CurveFit], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for cf in fits {
        let k = &cf.key;
        let row = |kind, sigma, accuracy, stderr| CurveRow {
            curve: k.slug(),
            experiment: k.experiment.as_str(),
            layer: &k.layer,
            layer_name: &k.layer_name,
            noise: k.noise.as_str(),
            phase: k.phase.as_str(),
            order: &k.order,
            clamp: k.clamp,
            kind,
            sigma,
            accuracy,
            stderr,
        };
        for p in &cf.curve.points {
            w.serialize(row("data", p.sigma, p.y, p.dy))?;
        }
        if let Ok(fit) = &cf.fit {
            for s in fit_samples(&cf.curve.points.iter().map(|p| p.sigma).collect::<Vec<_>>()) {
                w.serialize(row("fit", s, fit.predict(s), f64::NAN))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Log-spaced σ values spanning the positive measured range.
fn fit_samples(sigmas: &[f64]) -> Vec<f64> {
    let pos: Vec<f64> = sigmas.iter().copied().filter(|s| *s > 0.0).collect();
    let (Some(lo), Some(hi)) = (pos.iter().copied().reduce(f64::min), pos.iter().copied().reduce(f64::max)) else {
        return Vec::new();
    };
    if lo == hi {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..FIT_SAMPLES)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (FIT_SAMPLES - 1) as f64))
        .collect()
}

#[derive(Serialize)]
struct MidpointRow<'a> {
    layer: &'a str,
    layer_name: &'a str,
    noise: &'a str,
    phase: &'a str,
    clamp: bool,
    order: &'a str,
    mode: &'a str,
    mu: f64,
    mu_stderr: f64,
    headline: f64,
    headline_stderr: f64,
}

fn write_midpoints(fits: &[&CurveFit], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for cf in fits {
        let k = &cf.key;
        let (mode, mu, mu_se, h, h_se) = match &cf.fit {
            Ok(f) => {
                let (h, h_se) = f.headline(k.noise == NoiseKind::Multiplicative);
                (f.mode.name(), f.mu, f.errors.mu, h, h_se)
            }
            Err(_) => ("failed", f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        w.serialize(MidpointRow {
            layer: &k.layer,
            layer_name: &k.layer_name,
            noise: k.noise.as_str(),
            phase: k.phase.as_str(),
            clamp: k.clamp,
            order: &k.order,
            mode,
            mu,
            mu_stderr: mu_se,
            headline: h,
            headline_stderr: h_se,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct PreservedRow<'a> {
    layer: &'a str,
    layer_name: &'a str,
    noise: &'a str,
    phase: &'a str,
    clamp: bool,
    sigma_max: f64,
    acc_clean: f64,
    acc_max_sigma: f64,
    preserved_rel_acc: f64,
    raw_ratio: f64,
}

fn write_preserved(fits: &[&CurveFit], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for cf in fits {
        let k = &cf.key;
        let (first, last) = (cf.curve.points.first(), cf.curve.points.last());
        w.serialize(PreservedRow {
            layer: &k.layer,
            layer_name: &k.layer_name,
            noise: k.noise.as_str(),
            phase: k.phase.as_str(),
            clamp: k.clamp,
            sigma_max: last.map_or(f64::NAN, |p| p.sigma),
            acc_clean: first.map_or(f64::NAN, |p| p.y),
            acc_max_sigma: last.map_or(f64::NAN, |p| p.y),
            preserved_rel_acc: cf.preserved.unwrap_or(f64::NAN),
            raw_ratio: cf.raw_ratio,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct MixedRow<'a> {
    layer: &'a str,
    layer_name: &'a str,
    phase: &'a str,
    sigma_add: f64,
    sigma_mul: f64,
    order: &'a str,
    accuracy: f64,
    stderr: f64,
    seeds: usize,
}

fn write_mixed(records: &[&ExperimentRecord], path: &Path) -> Result<()> {
    let mut cells: BTreeMap<(String, u64, u64), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.order.clone(), r.sigma_add.to_bits(), r.sigma_mul.to_bits()))
            .or_default()
            .push(r);
    }
    let mut keys: Vec<_> = cells.keys().cloned().collect();
    keys.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(f64::from_bits(a.1).total_cmp(&f64::from_bits(b.1)))
            .then(f64::from_bits(a.2).total_cmp(&f64::from_bits(b.2)))
    });
    let mut w = csv::Writer::from_path(path)?;
    for key in keys {
        let rs = &cells[&key];
        let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
        let (mean, se) = seed_mean_stderr(&acc);
        w.serialize(MixedRow {
            layer: &rs[0].layer,
            layer_name: &rs[0].layer_name,
            phase: rs[0].phase.as_str(),
            sigma_add: f64::from_bits(key.1),
            sigma_mul: f64::from_bits(key.2),
            order: &key.0,
            accuracy: mean,
            stderr: se,
            seeds: rs.len(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
