//! Probes of learned robustness: activation histograms, bimodality
//! detection, threshold quantization of in-flight activations, and weight
//! magnitude ratios between clamped and unclamped training.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nn::train::EVAL_BATCH;
use crate::nn::{evaluate_with, Model, PassOptions};
use crate::noise::InjectionPlan;
use crate::rng::RngStream;
use crate::tensor::Real;

/// Smallest and largest finite log-magnitude edges.
pub const LOG_FLOOR: f64 = 1e-8;
pub const LOG_CEIL: f64 = 1e12;
/// Evaluation inputs used for histograms.
pub const HISTOGRAM_SAMPLE: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// Bins over `|x|`: `[0, 1e-8)`, log-spaced bins up to `1e12`, `[1e12, ∞)`.
    LogMagnitude,
    /// Bins over `x`: `(-∞, lo)`, equal-width bins on `[lo, hi)`, `[hi, ∞)`.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationHistogram {
    pub layer_id: usize,
    pub layer_name: String,
    pub binning: Binning,
    /// `counts.len() + 1` strictly increasing edges (outer ones may be infinite).
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub noisy: bool,
}

impl ActivationHistogram {
    pub fn log_magnitude(layer_id: usize, layer_name: &str, bins_per_decade: usize, noisy: bool) -> Self {
        let decades = (LOG_CEIL / LOG_FLOOR).log10().round() as usize;
        let n = decades * bins_per_decade.max(1);
        let mut edges = vec![0.0];
        edges.extend((0..=n).map(|i| LOG_FLOOR * 10f64.powf(i as f64 / bins_per_decade.max(1) as f64)));
        edges.push(f64::INFINITY);
        ActivationHistogram {
            layer_id,
            layer_name: layer_name.to_string(),
            binning: Binning::LogMagnitude,
            counts: vec![0; edges.len() - 1],
            edges,
            noisy,
        }
    }

    pub fn linear(layer_id: usize, layer_name: &str, lo: f64, hi: f64, bins: usize, noisy: bool) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let bins = bins.max(1);
        let mut edges = vec![f64::NEG_INFINITY];
        edges.extend((0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64));
        edges.push(f64::INFINITY);
        ActivationHistogram {
            layer_id,
            layer_name: layer_name.to_string(),
            binning: Binning::Linear,
            counts: vec![0; edges.len() - 1],
            edges,
            noisy,
        }
    }

    fn bin_of(&self, v: f64) -> usize {
        let x = match self.binning {
            Binning::LogMagnitude => v.abs(),
            Binning::Linear => v,
        };
        if x.is_nan() {
            return self.counts.len() - 1;
        }
        // last edge e with e <= x
        self.edges.partition_point(|&e| e <= x).saturating_sub(1).min(self.counts.len() - 1)
    }

    pub fn add<T: Real>(&mut self, values: &[T]) {
        for v in values {
            let b = self.bin_of(v.to_f64());
            self.counts[b] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Representative value of a bin: geometric center for log bins (the
    /// floor and ceiling for the open ends), midpoint for linear bins.
    pub fn bin_center(&self, i: usize) -> f64 {
        let (lo, hi) = (self.edges[i], self.edges[i + 1]);
        match self.binning {
            Binning::LogMagnitude if lo == 0.0 => hi,
            Binning::LogMagnitude if hi.is_infinite() => lo,
            Binning::LogMagnitude => (lo * hi).sqrt(),
            Binning::Linear if lo.is_infinite() => hi,
            Binning::Linear if hi.is_infinite() => lo,
            Binning::Linear => 0.5 * (lo + hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSettings {
    pub log_bins_per_decade: usize,
    pub linear_bins: usize,
    /// Inputs taken from the front of the dataset.
    pub sample: usize,
}

impl Default for HistogramSettings {
    fn default() -> Self {
        HistogramSettings {
            log_bins_per_decade: 3,
            linear_bins: 100,
            sample: HISTOGRAM_SAMPLE,
        }
    }
}

fn sample_indices(ds: &Dataset, n: usize) -> Vec<usize> {
    (0..ds.len().min(n)).collect()
}

/// Runs `f(batch_index, captured)` over evaluation batches of the sample.
fn for_each_capture<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    idx: &[usize],
    plan: Option<&InjectionPlan>,
    rng: RngStream,
    points: &BTreeSet<usize>,
    mut f: impl FnMut(&std::collections::BTreeMap<usize, crate::Tensor<T>>),
) -> Result<()> {
    for (b, chunk) in idx.chunks(EVAL_BATCH).enumerate() {
        let (x, _) = ds.gather::<T>(chunk);
        let (_, captured) = model.forward(&x, plan, rng.batch(b as u32), Some(points))?;
        f(&captured);
    }
    Ok(())
}

/// Clean and noisy histograms (log-magnitude and linear) at every injection
/// point, over the first `settings.sample` inputs. Clean passes use no plan;
/// noisy passes use `plan` with `rng`. Linear bins span `±max|clean|` of the
/// point, so both histograms of a point share edges.
pub fn capture_histograms<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    plan: Option<&InjectionPlan>,
    rng: RngStream,
    settings: &HistogramSettings,
) -> Result<Vec<ActivationHistogram>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx = sample_indices(ds, settings.sample);
    let points: BTreeSet<usize> = model.point_ids().into_iter().collect();
    let mut range = vec![0.0f64; model.points().len()];
    let slot = |id: usize| model.points().iter().position(|p| p.id == id).expect("known point");

    for_each_capture(model, ds, &idx, None, rng, &points, |cap| {
        for (id, t) in cap {
            let r = &mut range[slot(*id)];
            for v in t.data() {
                *r = r.max(v.to_f64().abs());
            }
        }
    })?;

    let mut out = Vec::new();
    for noisy in [false, true] {
        let mut logs: Vec<ActivationHistogram> = model
            .points()
            .iter()
            .map(|p| ActivationHistogram::log_magnitude(p.id, &p.label(), settings.log_bins_per_decade, noisy))
            .collect();
        let mut lins: Vec<ActivationHistogram> = model
            .points()
            .iter()
            .zip(&range)
            .map(|(p, &r)| ActivationHistogram::linear(p.id, &p.label(), -r, r, settings.linear_bins, noisy))
            .collect();
        let pass_plan = if noisy { plan } else { None };
        for_each_capture(model, ds, &idx, pass_plan, rng, &points, |cap| {
            for (id, t) in cap {
                logs[slot(*id)].add(t.data());
                lins[slot(*id)].add(t.data());
            }
        })?;
        out.extend(logs);
        out.extend(lins);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bimodality {
    pub is_bimodal: bool,
    /// Center of the valley bin (NaN when there are fewer than two peaks).
    pub valley: f64,
    /// Centers of the two peaks, lower one first.
    pub peaks: (f64, f64),
    /// Fractions of the total mass on either side of the valley.
    pub masses: (f64, f64),
}

impl Bimodality {
    fn none() -> Self {
        Bimodality {
            is_bimodal: false,
            valley: f64::NAN,
            peaks: (f64::NAN, f64::NAN),
            masses: (0.0, 0.0),
        }
    }
}

/// Two largest local maxima of the histogram and the deepest valley between
/// them; bimodal when each side of the valley holds more than 5% of the mass
/// and the valley is lower than 20% of the smaller peak.
pub fn detect_bimodality(hist: &ActivationHistogram) -> Bimodality {
    let c = &hist.counts;
    let total = hist.total();
    if total == 0 {
        return Bimodality::none();
    }
    // plateaus count once, at their left end
    let mut maxima: Vec<usize> = (0..c.len())
        .filter(|&i| c[i] > 0 && (i == 0 || c[i] > c[i - 1]) && (i + 1 == c.len() || c[i] >= c[i + 1]))
        .collect();
    if maxima.len() < 2 {
        return Bimodality::none();
    }
    maxima.sort_by(|&a, &b| c[b].cmp(&c[a]).then(a.cmp(&b)));
    let (l, r) = (maxima[0].min(maxima[1]), maxima[0].max(maxima[1]));
    let v = (l + 1..r).min_by(|&a, &b| c[a].cmp(&c[b]).then(a.cmp(&b))).unwrap_or(l);
    let left: u64 = c[..=v].iter().sum();
    let right = total - left;
    let masses = (left as f64 / total as f64, right as f64 / total as f64);
    let smaller = c[l].min(c[r]) as f64;
    Bimodality {
        is_bimodal: r > l + 1 && masses.0 > 0.05 && masses.1 > 0.05 && (c[v] as f64) < 0.2 * smaller,
        valley: hist.bin_center(v),
        peaks: (hist.bin_center(l), hist.bin_center(r)),
        masses,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantLevels {
    /// `|x| < t → 0`, otherwise the mean of the large cluster.
    BinaryZeroPeak,
    /// `|x| < t → 0`, positive and negative large values to their own means.
    TernarySymmetric,
}

/// Threshold quantization of the activations at one injection point.
///
/// `thresholds` holds one cut on `|x|`; a second, larger cut (if present)
/// bounds the large cluster from above, and values beyond it are left
/// untouched. A rule without thresholds changes nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizationRule {
    pub layer_id: usize,
    pub thresholds: Vec<f64>,
    pub levels: QuantLevels,
    /// `[large]` for binary, `[positive, negative]` for ternary.
    pub peak_values: Vec<f64>,
}

impl QuantizationRule {
    pub fn apply(&self, x: f64) -> f64 {
        let Some(&t) = self.thresholds.first() else {
            return x;
        };
        let a = x.abs();
        if a < t {
            return 0.0;
        }
        if self.thresholds.get(1).is_some_and(|&upper| a >= upper) {
            return x;
        }
        match self.levels {
            QuantLevels::BinaryZeroPeak => self.peak_values[0],
            QuantLevels::TernarySymmetric => {
                if x >= 0.0 {
                    self.peak_values[0]
                } else {
                    self.peak_values[1]
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let need = match self.levels {
            QuantLevels::BinaryZeroPeak => 1,
            QuantLevels::TernarySymmetric => 2,
        };
        if !self.thresholds.is_empty() && self.peak_values.len() != need {
            return Err(Error::InvalidArgument(format!(
                "{:?} rule needs {need} peak values, got {}",
                self.levels,
                self.peak_values.len()
            )));
        }
        if self.thresholds.len() > 2 || self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("one or two increasing thresholds expected".into()));
        }
        Ok(())
    }
}

/// Calibrates a rule at `layer_id` from the activations of a noisy pass
/// (`plan`, `rng`) over `calibration`: the cut is the geometric mean of the
/// two histogram peaks (the zero bin counts as `1e-8`), and each large
/// cluster is replaced by its mean.
pub fn derive_rule<T: Real>(
    model: &Model<T>,
    calibration: &Dataset,
    plan: Option<&InjectionPlan>,
    rng: RngStream,
    layer_id: usize,
    levels: QuantLevels,
) -> Result<(QuantizationRule, Bimodality)> {
    let point = model.point(layer_id).ok_or(Error::InjectionPoint {
        id: layer_id,
        count: model.points().len(),
    })?;
    let idx = sample_indices(calibration, HISTOGRAM_SAMPLE);
    let set = BTreeSet::from([layer_id]);
    let mut values: Vec<f64> = Vec::new();
    let mut hist = ActivationHistogram::log_magnitude(layer_id, &point.label(), 3, plan.is_some());
    for_each_capture(model, calibration, &idx, plan, rng, &set, |cap| {
        let t = &cap[&layer_id];
        hist.add(t.data());
        values.extend(t.data().iter().map(|v| v.to_f64()));
    })?;
    let bi = detect_bimodality(&hist);
    let threshold = if bi.peaks.0.is_finite() {
        (bi.peaks.0 * bi.peaks.1).sqrt()
    } else {
        0.0
    };
    let mean_of = |keep: &dyn Fn(f64) -> bool| {
        let (s, n) = values
            .iter()
            .filter(|&&v| v.abs() >= threshold && keep(v))
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n > 0 {
            s / n as f64
        } else {
            0.0
        }
    };
    let peak_values = match levels {
        QuantLevels::BinaryZeroPeak => vec![mean_of(&|_| true)],
        QuantLevels::TernarySymmetric => vec![mean_of(&|v| v >= 0.0), mean_of(&|v| v < 0.0)],
    };
    Ok((
        QuantizationRule {
            layer_id,
            thresholds: vec![threshold],
            levels,
            peak_values,
        },
        bi,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizeOutcome {
    pub accuracy_quantized: f64,
    pub accuracy_unquantized: f64,
    pub std_quantized: f64,
    pub std_unquantized: f64,
}

/// Accuracy with and without the rule applied after injection at its point,
/// under identical noise streams.
pub fn quantize_probe<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    plan: Option<&InjectionPlan>,
    rule: &QuantizationRule,
    rng: RngStream,
    repeats: usize,
) -> Result<QuantizeOutcome> {
    rule.validate()?;
    if model.point(rule.layer_id).is_none() {
        return Err(Error::InjectionPoint {
            id: rule.layer_id,
            count: model.points().len(),
        });
    }
    let hook = |id: usize, xs: &mut [T]| {
        if id == rule.layer_id {
            for x in xs {
                *x = T::from_f64(rule.apply(x.to_f64()));
            }
        }
    };
    let plain = PassOptions::eval(plan, rng);
    let hooked = PassOptions {
        hook: Some(&hook),
        ..plain
    };
    let q = evaluate_with(model, ds, &hooked, repeats)?;
    let u = evaluate_with(model, ds, &plain, repeats)?;
    Ok(QuantizeOutcome {
        accuracy_quantized: q.accuracy,
        accuracy_unquantized: u.accuracy,
        std_quantized: q.std,
        std_unquantized: u.std,
    })
}

/// `average |w|` of the unclamped model over that of the clamped model at
/// the conv/FC layer with spec index `layer`.
pub fn weight_magnitude_ratio<T: Real>(unclamped: &Model<T>, clamped: &Model<T>, layer: usize) -> Result<f64> {
    if unclamped.spec() != clamped.spec() {
        return Err(Error::InvalidArgument("models have different specs".into()));
    }
    let num = unclamped.average_weight_magnitude(layer)?;
    let den = clamped.average_weight_magnitude(layer)?;
    if den == 0.0 {
        return Err(Error::InvalidArgument(format!("clamped layer {layer} has zero average weight")));
    }
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRatio {
    /// 1-based position among conv/FC layers.
    pub ordinal: usize,
    pub layer_index: usize,
    pub layer: String,
    pub ratio: f64,
}

/// Ratios for every conv/FC layer, in network order.
pub fn weight_magnitude_ratios<T: Real>(unclamped: &Model<T>, clamped: &Model<T>) -> Result<Vec<WeightRatio>> {
    unclamped
        .learnable_layers()
        .into_iter()
        .enumerate()
        .map(|(k, layer)| {
            Ok(WeightRatio {
                ordinal: k + 1,
                layer_index: layer,
                layer: unclamped.spec().layers[layer].to_string(),
                ratio: weight_magnitude_ratio(unclamped, clamped, layer)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct HistRow {
    layer_id: usize,
    bin_lo: f64,
    bin_hi: f64,
    count: u64,
    noisy_flag: bool,
}

/// Writes `layer_id,bin_lo,bin_hi,count,noisy_flag` rows.
pub fn write_histograms_csv(hists: &[ActivationHistogram], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for h in hists {
        for (i, &count) in h.counts.iter().enumerate() {
            w.serialize(HistRow {
                layer_id: h.layer_id,
                bin_lo: h.edges[i],
                bin_hi: h.edges[i + 1],
                count,
                noisy_flag: h.noisy,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::datasets::synthetic_gaussian_blobs;
    use crate::nn::{build_model, ModelSpec};
    use crate::noise::{NoiseSpec, Phase};
    use crate::rng::Domain;

    fn hist_of(values: &[f64]) -> ActivationHistogram {
        let mut h = ActivationHistogram::log_magnitude(0, "x", 3, true);
        h.add(values);
        h
    }

    #[test]
    fn log_edges_cover_the_range() {
        let h = ActivationHistogram::log_magnitude(0, "x", 3, false);
        assert_eq!(h.edges[0], 0.0);
        assert_eq!(h.edges[1], LOG_FLOOR);
        assert!((h.edges[h.edges.len() - 2] / LOG_CEIL - 1.0).abs() < 1e-9);
        assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
        let mut h = h;
        h.add(&[0.0f64, 1e-9, 1e-8, 1.0, 1e12, 1e30, -5.0]);
        assert_eq!(h.total(), 7);
        assert_eq!(h.counts[0], 2);
        assert_eq!(*h.counts.last().unwrap(), 2);
    }

    #[test]
    fn bimodal_mixture_detected() {
        let mut g = RngStream::new(1, Domain::Data).generator();
        let values: Vec<f64> = (0..20000)
            .map(|i| {
                let z: f64 = g.sample(StandardNormal);
                if i % 2 == 0 {
                    1e-9 * z
                } else {
                    1e6 + 1e5 * z
                }
            })
            .collect();
        let b = detect_bimodality(&hist_of(&values));
        assert!(b.is_bimodal, "{b:?}");
        assert!(b.valley > 1e-8 && b.valley < 1e5, "{b:?}");
    }

    #[test]
    fn unimodal_and_zero_are_not_bimodal() {
        let mut g = RngStream::new(2, Domain::Data).generator();
        let values: Vec<f64> = (0..20000).map(|_| 5.0 + g.sample::<f64, _>(StandardNormal)).collect();
        assert!(!detect_bimodality(&hist_of(&values)).is_bimodal);
        assert!(!detect_bimodality(&hist_of(&[0.0; 100])).is_bimodal);
        let empty = ActivationHistogram::log_magnitude(0, "x", 3, true);
        assert!(!detect_bimodality(&empty).is_bimodal);
    }

    #[test]
    fn bimodality_invariant_to_decade_rescaling() {
        let mut g = RngStream::new(3, Domain::Data).generator();
        let values: Vec<f64> = (0..20000)
            .map(|i| {
                let z: f64 = g.sample(StandardNormal);
                if i % 3 == 0 {
                    1e-6 * (1.0 + 0.1 * z)
                } else {
                    1e3 * (1.0 + 0.1 * z)
                }
            })
            .collect();
        let a = detect_bimodality(&hist_of(&values));
        let scaled: Vec<f64> = values.iter().map(|v| v * 100.0).collect();
        let b = detect_bimodality(&hist_of(&scaled));
        assert!(a.is_bimodal && b.is_bimodal);
        assert!((b.valley / a.valley - 100.0).abs() < 1e-6 * 100.0);
    }

    #[test]
    fn rule_application() {
        let ternary = QuantizationRule {
            layer_id: 1,
            thresholds: vec![0.5],
            levels: QuantLevels::TernarySymmetric,
            peak_values: vec![10.0, -12.0],
        };
        assert_eq!(ternary.apply(0.2), 0.0);
        assert_eq!(ternary.apply(-0.2), 0.0);
        assert_eq!(ternary.apply(3.0), 10.0);
        assert_eq!(ternary.apply(-3.0), -12.0);
        let binary = QuantizationRule {
            levels: QuantLevels::BinaryZeroPeak,
            peak_values: vec![7.0],
            ..ternary.clone()
        };
        assert_eq!(binary.apply(-3.0), 7.0);
        let bad = QuantizationRule {
            peak_values: vec![1.0],
            ..ternary
        };
        assert!(bad.validate().is_err());
    }

    fn small_model() -> (Model<f32>, Dataset) {
        let ds = synthetic_gaussian_blobs(3, 100, 6, 3.0, 1).unwrap();
        let model = build_model::<f32>(&ModelSpec::mlp([1, 1, 6], 3, false), 4).unwrap();
        (model, ds)
    }

    #[test]
    fn clean_relu_histogram_has_no_negative_mass() {
        let (model, ds) = small_model();
        let plan = InjectionPlan::global(NoiseSpec::additive(0.5).unwrap(), Phase::TrainAndInference);
        let hists = capture_histograms(&model, &ds, Some(&plan), RngStream::noise(1), &HistogramSettings::default()).unwrap();
        let relu = model.points().iter().find(|p| p.name.starts_with("relu")).unwrap().id;
        let h = hists
            .iter()
            .find(|h| h.layer_id == relu && !h.noisy && h.binning == Binning::Linear)
            .unwrap();
        let negative: u64 = h
            .counts
            .iter()
            .zip(h.edges.windows(2))
            .filter(|(_, e)| e[1] <= 0.0)
            .map(|(c, _)| c)
            .sum();
        assert_eq!(negative, 0);
        let per_point = ds.len() as u64 * model.point(relu).unwrap().shape.iter().product::<usize>() as u64;
        assert!(hists.iter().filter(|h| h.layer_id == relu).all(|h| h.total() == per_point));
    }

    #[test]
    fn empty_plan_histograms_match() {
        let (model, ds) = small_model();
        let hists = capture_histograms(&model, &ds, None, RngStream::noise(1), &HistogramSettings::default()).unwrap();
        let (clean, noisy): (Vec<_>, Vec<_>) = hists.iter().partition(|h| !h.noisy);
        for (c, n) in clean.iter().zip(&noisy) {
            assert_eq!(c.counts, n.counts);
        }
    }

    #[test]
    fn passthrough_rule_reproduces_accuracy() {
        let (model, ds) = small_model();
        let plan = InjectionPlan::global(NoiseSpec::multiplicative(1.0).unwrap(), Phase::TrainAndInference);
        let rule = QuantizationRule {
            layer_id: 2,
            thresholds: vec![],
            levels: QuantLevels::TernarySymmetric,
            peak_values: vec![],
        };
        let out = quantize_probe(&model, &ds, Some(&plan), &rule, RngStream::noise(9), 3).unwrap();
        assert_eq!(out.accuracy_quantized, out.accuracy_unquantized);
        let bad = QuantizationRule { layer_id: 99, ..rule };
        assert!(quantize_probe(&model, &ds, Some(&plan), &bad, RngStream::noise(9), 1).is_err());
    }

    #[test]
    fn weight_ratios() {
        let (model, _) = small_model();
        let layer = model.learnable_layers()[0];
        assert_eq!(weight_magnitude_ratio(&model, &model, layer).unwrap(), 1.0);
        assert!(weight_magnitude_ratio(&model, &model, 0).is_err());
        let all = weight_magnitude_ratios(&model, &model).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(all[0].ordinal, 1);
    }
}
