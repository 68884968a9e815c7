//! Gaussian activation noise: additive, multiplicative and mixed, plus the
//! plan describing where and when it is injected.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MixOrder {
    #[serde(rename = "mul_first")]
    MultiplicativeFirst,
    #[serde(rename = "add_first")]
    AdditiveFirst,
}

impl MixOrder {
    pub fn as_str(&self) -> &'static str {
        match self {
            MixOrder::MultiplicativeFirst => "mul_first",
            MixOrder::AdditiveFirst => "add_first",
        }
    }
}

/// Noise family and strengths (standard deviations).
///
/// Additive offsets are drawn from `N(0, sigma_add^2)`, multiplicative
/// factors from `N(1, sigma_mul^2)`, untruncated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseSpecRepr", into = "NoiseSpecRepr")]
pub enum NoiseSpec {
    Additive(f64),
    Multiplicative(f64),
    Mixed {
        sigma_add: f64,
        sigma_mul: f64,
        order: MixOrder,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Additive,
    Multiplicative,
    Mixed,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::Additive => "additive",
            NoiseKind::Multiplicative => "multiplicative",
            NoiseKind::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" | "add" => Ok(NoiseKind::Additive),
            "multiplicative" | "mul" => Ok(NoiseKind::Multiplicative),
            "mixed" => Ok(NoiseKind::Mixed),
            other => Err(Error::Noise(format!("unknown noise type {other:?}"))),
        }
    }
}

impl NoiseSpec {
    pub fn additive(sigma: f64) -> Result<Self> {
        NoiseSpec::Additive(sigma).validated()
    }

    pub fn multiplicative(sigma: f64) -> Result<Self> {
        NoiseSpec::Multiplicative(sigma).validated()
    }

    pub fn mixed(sigma_add: f64, sigma_mul: f64, order: MixOrder) -> Result<Self> {
        NoiseSpec::Mixed {
            sigma_add,
            sigma_mul,
            order,
        }
        .validated()
    }

    /// Single-σ spec of the given kind; mixed specs need both strengths.
    pub fn of_kind(kind: NoiseKind, sigma: f64) -> Result<Self> {
        match kind {
            NoiseKind::Additive => Self::additive(sigma),
            NoiseKind::Multiplicative => Self::multiplicative(sigma),
            NoiseKind::Mixed => Err(Error::Noise(
                "mixed noise needs sigma_add, sigma_mul and an order".into(),
            )),
        }
    }

    pub fn kind(&self) -> NoiseKind {
        match self {
            NoiseSpec::Additive(_) => NoiseKind::Additive,
            NoiseSpec::Multiplicative(_) => NoiseKind::Multiplicative,
            NoiseSpec::Mixed { .. } => NoiseKind::Mixed,
        }
    }

    pub fn sigma_add(&self) -> f64 {
        match *self {
            NoiseSpec::Additive(s) => s,
            NoiseSpec::Multiplicative(_) => 0.0,
            NoiseSpec::Mixed { sigma_add, .. } => sigma_add,
        }
    }

    pub fn sigma_mul(&self) -> f64 {
        match *self {
            NoiseSpec::Additive(_) => 0.0,
            NoiseSpec::Multiplicative(s) => s,
            NoiseSpec::Mixed { sigma_mul, .. } => sigma_mul,
        }
    }

    pub fn order(&self) -> Option<MixOrder> {
        match *self {
            NoiseSpec::Mixed { order, .. } => Some(order),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("sigma_add", self.sigma_add()), ("sigma_mul", self.sigma_mul())] {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::Noise(format!("{name} must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_add() == 0.0 && self.sigma_mul() == 0.0
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSpec::Additive(s) => write!(f, "additive(σ={s:e})"),
            NoiseSpec::Multiplicative(s) => write!(f, "multiplicative(σ={s:e})"),
            NoiseSpec::Mixed {
                sigma_add,
                sigma_mul,
                order,
            } => write!(
                f,
                "mixed(σ_add={sigma_add:e}, σ_mul={sigma_mul:e}, {})",
                order.as_str()
            ),
        }
    }
}

/// Wire form used in experiment configs.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct NoiseSpecRepr {
    #[serde(rename = "type")]
    kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_add: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_mul: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    order: Option<MixOrder>,
}

impl TryFrom<NoiseSpecRepr> for NoiseSpec {
    type Error = Error;

    fn try_from(r: NoiseSpecRepr) -> Result<Self> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::Noise(format!("{} noise needs {name}", r.kind.as_str())))
        };
        match r.kind {
            NoiseKind::Additive => NoiseSpec::additive(need(r.sigma_add, "sigma_add")?),
            NoiseKind::Multiplicative => NoiseSpec::multiplicative(need(r.sigma_mul, "sigma_mul")?),
            NoiseKind::Mixed => NoiseSpec::mixed(
                need(r.sigma_add, "sigma_add")?,
                need(r.sigma_mul, "sigma_mul")?,
                r.order
                    .ok_or_else(|| Error::Noise("mixed noise needs an order".into()))?,
            ),
        }
    }
}

impl From<NoiseSpec> for NoiseSpecRepr {
    fn from(s: NoiseSpec) -> Self {
        match s {
            NoiseSpec::Additive(a) => NoiseSpecRepr {
                kind: NoiseKind::Additive,
                sigma_add: Some(a),
                sigma_mul: None,
                order: None,
            },
            NoiseSpec::Multiplicative(m) => NoiseSpecRepr {
                kind: NoiseKind::Multiplicative,
                sigma_add: None,
                sigma_mul: Some(m),
                order: None,
            },
            NoiseSpec::Mixed {
                sigma_add,
                sigma_mul,
                order,
            } => NoiseSpecRepr {
                kind: NoiseKind::Mixed,
                sigma_add: Some(sigma_add),
                sigma_mul: Some(sigma_mul),
                order: Some(order),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Every injection point.
    Global,
    /// Exactly one injection point.
    WalkingAt(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TrainAndInference,
    InferenceOnly,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::TrainAndInference => "noisy_training",
            Phase::InferenceOnly => "inference_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub placement: Placement,
    pub spec: NoiseSpec,
    pub phase: Phase,
}

impl InjectionPlan {
    pub fn global(spec: NoiseSpec, phase: Phase) -> Self {
        InjectionPlan {
            placement: Placement::Global,
            spec,
            phase,
        }
    }

    pub fn walking(point: usize, spec: NoiseSpec, phase: Phase) -> Self {
        InjectionPlan {
            placement: Placement::WalkingAt(point),
            spec,
            phase,
        }
    }

    pub fn targets(&self, point: usize) -> bool {
        match self.placement {
            Placement::Global => true,
            Placement::WalkingAt(p) => p == point,
        }
    }

    /// Whether the plan injects during a pass of the given kind.
    pub fn active(&self, training: bool) -> bool {
        !training || self.phase == Phase::TrainAndInference
    }
}

#[inline]
fn draw(g: &mut impl Rng, sigma: f64) -> f64 {
    let z: f64 = g.sample(StandardNormal);
    sigma * z
}

/// Applies noise in place. One multiplicative factor and one additive
/// offset are drawn per element, in that order, skipping zero strengths.
pub fn apply_noise_in_place<T: Real>(x: &mut [T], spec: &NoiseSpec, rng: &RngStream) {
    let sa = spec.sigma_add();
    let sm = spec.sigma_mul();
    if sa == 0.0 && sm == 0.0 {
        return;
    }
    let mut g = rng.generator();
    match *spec {
        NoiseSpec::Additive(s) => {
            for v in x.iter_mut() {
                *v = T::from_f64(v.to_f64() + draw(&mut g, s));
            }
        }
        NoiseSpec::Multiplicative(s) => {
            for v in x.iter_mut() {
                *v = T::from_f64(v.to_f64() * (1.0 + draw(&mut g, s)));
            }
        }
        NoiseSpec::Mixed { order, .. } => {
            for v in x.iter_mut() {
                let m = if sm > 0.0 { 1.0 + draw(&mut g, sm) } else { 1.0 };
                let a = if sa > 0.0 { draw(&mut g, sa) } else { 0.0 };
                let xv = v.to_f64();
                let y = match order {
                    MixOrder::MultiplicativeFirst => xv * m + a,
                    MixOrder::AdditiveFirst => (xv + a) * m,
                };
                *v = T::from_f64(y);
            }
        }
    }
}

pub fn apply_noise<T: Real>(x: &Tensor<T>, spec: &NoiseSpec, rng: &RngStream) -> Tensor<T> {
    let mut out = x.clone();
    apply_noise_in_place(out.data_mut(), spec, rng);
    out
}

/// Averages `repeats` independent noisy copies of `x` (lanes `0..repeats`
/// of `rng`). One repeat is plain [`apply_noise_in_place`].
pub fn apply_noise_averaged<T: Real>(x: &mut [T], spec: &NoiseSpec, rng: &RngStream, repeats: usize) {
    if repeats <= 1 {
        apply_noise_in_place(x, spec, rng);
        return;
    }
    let clean: Vec<T> = x.to_vec();
    let mut acc = vec![0.0f64; x.len()];
    let mut buf = clean.clone();
    for lane in 0..repeats {
        buf.copy_from_slice(&clean);
        apply_noise_in_place(&mut buf, spec, &rng.lane(lane as u32));
        for (a, v) in acc.iter_mut().zip(&buf) {
            *a += v.to_f64();
        }
    }
    let inv = 1.0 / repeats as f64;
    for (v, a) in x.iter_mut().zip(acc) {
        *v = T::from_f64(a * inv);
    }
}

/// Empirical mean and standard deviation of the noise: the offset for
/// additive noise, the factor for multiplicative noise, and the noisy image
/// of a unit activation for mixed noise.
pub fn sample_stats(spec: &NoiseSpec, count: usize, rng: &RngStream) -> Result<(f64, f64)> {
    if count < 2 {
        return Err(Error::InvalidArgument("sample_stats needs count >= 2".into()));
    }
    spec.validate()?;
    let base = match spec {
        NoiseSpec::Additive(_) => 0.0,
        _ => 1.0,
    };
    let mut x = vec![base; count];
    apply_noise_in_place(&mut x, spec, rng);
    Ok(mean_std(&x))
}

/// Mean and sample standard deviation (n-1 denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use statrs::distribution::{ContinuousCDF, Normal};

    use super::*;

    fn stream() -> RngStream {
        RngStream::noise(42).run(3)
    }

    #[test]
    fn degenerate_mixed_is_identity() {
        for order in [MixOrder::MultiplicativeFirst, MixOrder::AdditiveFirst] {
            let spec = NoiseSpec::mixed(0.0, 0.0, order).unwrap();
            let x = Tensor::<f32>::full(&[4], 1.0);
            assert_eq!(apply_noise(&x, &spec, &stream()).data(), &[1.0; 4]);
        }
    }

    #[test]
    fn zero_input_under_multiplicative_stays_zero() {
        let x = Tensor::<f32>::zeros(&[1000]);
        for sigma in [0.5, 1e3, 1e10] {
            let y = apply_noise(&x, &NoiseSpec::multiplicative(sigma).unwrap(), &stream());
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn additive_sigma_two_moments() {
        let x = Tensor::<f64>::zeros(&[1_000_000]);
        let y = apply_noise(&x, &NoiseSpec::additive(2.0).unwrap(), &stream());
        let (m, s) = mean_std(y.data());
        // CLT: se(mean) = 2e-3, se(std) ~ 1.4e-3
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((s - 2.0).abs() < 0.01, "std {s}");
    }

    #[test]
    fn sample_stats_examples() {
        let (m, s) = sample_stats(&NoiseSpec::additive(1.0).unwrap(), 1_000_000, &stream()).unwrap();
        assert!(m.abs() < 0.005 && (s - 1.0).abs() < 0.005, "{m} {s}");
        let (m, _) =
            sample_stats(&NoiseSpec::multiplicative(0.5).unwrap(), 1_000_000, &stream()).unwrap();
        assert!((m - 1.0).abs() < 0.003, "{m}");
        let (m, s) = sample_stats(&NoiseSpec::additive(0.0).unwrap(), 10, &stream()).unwrap();
        assert_eq!((m, s), (0.0, 0.0));
        assert!(sample_stats(&NoiseSpec::Additive(1.0), 1, &stream()).is_err());
    }

    #[test]
    fn rejects_bad_sigma() {
        assert!(NoiseSpec::additive(f64::NAN).is_err());
        assert!(NoiseSpec::multiplicative(f64::INFINITY).is_err());
        assert!(NoiseSpec::mixed(-1.0, 0.0, MixOrder::AdditiveFirst).is_err());
    }

    #[test]
    fn replay_is_bitwise() {
        let x = Tensor::<f32>::full(&[257], 0.3);
        let spec = NoiseSpec::mixed(0.1, 0.2, MixOrder::AdditiveFirst).unwrap();
        assert_eq!(apply_noise(&x, &spec, &stream()), apply_noise(&x, &spec, &stream()));
        assert_ne!(
            apply_noise(&x, &spec, &stream()),
            apply_noise(&x, &spec, &stream().batch(1))
        );
    }

    #[test]
    fn order_irrelevant_when_one_component_vanishes() {
        let x = Tensor::<f64>::new(vec![5], vec![-2.0, -0.5, 0.0, 0.7, 3.0]).unwrap();
        for (sa, sm) in [(0.0, 0.8), (0.8, 0.0)] {
            let a = apply_noise(&x, &NoiseSpec::mixed(sa, sm, MixOrder::MultiplicativeFirst).unwrap(), &stream());
            let b = apply_noise(&x, &NoiseSpec::mixed(sa, sm, MixOrder::AdditiveFirst).unwrap(), &stream());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mixed_edge_matches_pure_family() {
        let x = Tensor::<f64>::full(&[64], 1.5);
        let mixed = NoiseSpec::mixed(0.0, 0.3, MixOrder::AdditiveFirst).unwrap();
        let pure = NoiseSpec::multiplicative(0.3).unwrap();
        assert_eq!(apply_noise(&x, &mixed, &stream()), apply_noise(&x, &pure, &stream()));
    }

    #[test]
    fn layers_are_uncorrelated() {
        let n = 100_000;
        let x = Tensor::<f64>::zeros(&[n]);
        let spec = NoiseSpec::additive(1.0).unwrap();
        let a = apply_noise(&x, &spec, &stream().layer(1));
        let b = apply_noise(&x, &spec, &stream().layer(2));
        let (ma, sa) = mean_std(a.data());
        let (mb, sb) = mean_std(b.data());
        let cov = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / (n as f64 - 1.0);
        let rho = cov / (sa * sb);
        assert!(rho.abs() < 0.01, "rho {rho}");
    }

    #[test]
    fn kolmogorov_smirnov_against_target_normal() {
        let n = 100_000;
        let spec = NoiseSpec::multiplicative(0.7).unwrap();
        let mut x = vec![1.0f64; n];
        apply_noise_in_place(&mut x, &spec, &stream());
        x.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let target = Normal::new(1.0, 0.7).unwrap();
        let d = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = target.cdf(v);
                (c - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - c).abs())
            })
            .fold(0.0, f64::max);
        // asymptotic critical value at alpha = 0.01
        let critical = 1.628 / (n as f64).sqrt();
        assert!(d < critical, "D = {d}, critical {critical}");
    }

    #[test]
    fn averaging_reduces_spread() {
        let n = 1_000_000;
        let mut x = vec![0.0f64; n];
        apply_noise_averaged(&mut x, &NoiseSpec::additive(2.0).unwrap(), &stream(), 4);
        let (_, s) = mean_std(&x);
        assert!((s - 1.0).abs() < 0.01, "std {s}");
    }

    #[test]
    fn wire_format() {
        let spec = NoiseSpec::mixed(0.5, 2.0, MixOrder::MultiplicativeFirst).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"type":"mixed","sigma_add":0.5,"sigma_mul":2.0,"order":"mul_first"}"#
        );
        let back: NoiseSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let add: NoiseSpec = serde_json::from_str(r#"{"type":"additive","sigma_add":1.5}"#).unwrap();
        assert_eq!(add, NoiseSpec::Additive(1.5));
        assert!(serde_json::from_str::<NoiseSpec>(r#"{"type":"additive","sigma_add":-1}"#).is_err());
        assert!(serde_json::from_str::<NoiseSpec>(r#"{"type":"mixed","sigma_add":1,"sigma_mul":1}"#).is_err());
    }
}
