//! Accuracy-versus-noise curves and their logistic fits.
//!
//! The single model is
//!
//! ```text
//! F(σ; μ, s, δa, a_min) = 2 δa / (1 + exp((σ − μ) / s)) + a_min
//! ```
//!
//! fitted by Levenberg–Marquardt on the `Δy`-weighted residuals. The
//! optimizer works in `(ln μ, ln s, δa, a_min)` so that μ and s stay positive
//! and steps are relative, which suits grids spanning many decades; all
//! reported values and standard errors are in linear σ units.
//!
//! The stacked model adds a second logistic with `μ2 = μ1 + gap²`, and
//! [`fit_best`] chooses between the two by the corrected Akaike criterion.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound applied to `Δy` before weighting.
pub const DY_FLOOR: f64 = 1e-4;
pub const MAX_ITERATIONS: usize = 500;
/// Convergence threshold on the relative change of the weighted SSE.
pub const REL_TOLERANCE: f64 = 1e-10;
pub const MIN_POINTS_SINGLE: usize = 5;
pub const MIN_POINTS_DOUBLE: usize = 8;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate curve: {0}")]
    Degenerate(String),
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("no convergence after {} iterations (best weighted SSE {:.6e})", best.iterations, best.residual)]
    NotConverged { best: Box<FitResult> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sigma: f64,
    /// Mean accuracy.
    pub y: f64,
    /// Accuracy uncertainty (standard error).
    pub dy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    /// Sorted by strictly increasing σ.
    pub points: Vec<CurvePoint>,
    pub metadata: std::collections::BTreeMap<String, String>,
}

impl AccuracyCurve {
    /// Validates and sorts the points.
    pub fn new(mut points: Vec<CurvePoint>) -> Result<Self, FitError> {
        for p in &points {
            if !(p.sigma.is_finite() && p.sigma >= 0.0) {
                return Err(FitError::InvalidCurve(format!("sigma {} must be finite and >= 0", p.sigma)));
            }
            if !(0.0..=1.0).contains(&p.y) {
                return Err(FitError::InvalidCurve(format!("accuracy {} outside [0, 1]", p.y)));
            }
            if !(p.dy.is_finite() && p.dy >= 0.0) {
                return Err(FitError::InvalidCurve(format!("uncertainty {} must be >= 0", p.dy)));
            }
        }
        points.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
        if let Some(w) = points.windows(2).find(|w| w[0].sigma == w[1].sigma) {
            return Err(FitError::InvalidCurve(format!("duplicate sigma {}", w[0].sigma)));
        }
        Ok(AccuracyCurve {
            points,
            metadata: Default::default(),
        })
    }

    pub fn from_triples(triples: &[(f64, f64, f64)]) -> Result<Self, FitError> {
        Self::new(
            triples
                .iter()
                .map(|&(sigma, y, dy)| CurvePoint { sigma, y, dy })
                .collect(),
        )
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn y_range(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamErrors {
    pub mu: f64,
    pub s: f64,
    pub delta_a: f64,
    pub a_min: f64,
}

/// Parameters of the stacked model with their standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoubleParams {
    pub mu1: f64,
    pub s1: f64,
    pub delta_a1: f64,
    pub mu2: f64,
    pub s2: f64,
    pub delta_a2: f64,
    pub a_min: f64,
    /// Standard errors in the order above.
    pub errors: [f64; 7],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FitMode {
    Single,
    Double(DoubleParams),
}

impl FitMode {
    pub fn name(&self) -> &'static str {
        match self {
            FitMode::Single => "single",
            FitMode::Double(_) => "double",
        }
    }
}

/// Result of a curve fit.
///
/// For stacked fits, `mu` is the σ at which the curve crosses half of its
/// total span, `delta_a` is the half total span, and `s` is the slope of the
/// component with the larger span.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub mode: FitMode,
    pub mu: f64,
    pub s: f64,
    pub delta_a: f64,
    pub a_min: f64,
    pub errors: ParamErrors,
    /// Weighted sum of squared residuals.
    pub residual: f64,
    pub aicc: f64,
    pub n_points: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn predict(&self, sigma: f64) -> f64 {
        match self.mode {
            FitMode::Single => logistic(sigma, self.mu, self.s, self.delta_a, self.a_min),
            FitMode::Double(d) => double_logistic(sigma, &d),
        }
    }

    /// The robustness figure of merit with its standard error: μ, or a_min
    /// for multiplicative-noise curves, where many layers never drop to the
    /// random-guess floor inside the sweep.
    pub fn headline(&self, multiplicative: bool) -> (f64, f64) {
        if multiplicative {
            (self.a_min, self.errors.a_min)
        } else {
            (self.mu, self.errors.mu)
        }
    }
}

/// `1 / (1 + exp(z))` without overflow.
#[inline]
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

pub fn logistic(sigma: f64, mu: f64, s: f64, delta_a: f64, a_min: f64) -> f64 {
    2.0 * delta_a * sigmoid_neg((sigma - mu) / s) + a_min
}

pub fn double_logistic(sigma: f64, p: &DoubleParams) -> f64 {
    2.0 * p.delta_a1 * sigmoid_neg((sigma - p.mu1) / p.s1)
        + 2.0 * p.delta_a2 * sigmoid_neg((sigma - p.mu2) / p.s2)
        + p.a_min
}

/// Value and partials (μ, s, δa) of one logistic term `2 δa g(z)`.
#[inline]
fn term(sigma: f64, mu: f64, s: f64, da: f64) -> (f64, [f64; 3]) {
    let z = (sigma - mu) / s;
    let g = sigmoid_neg(z);
    let gp = g * (1.0 - g);
    (2.0 * da * g, [2.0 * da * gp / s, 2.0 * da * gp * z / s, 2.0 * g])
}

/// A model in its optimizer parameterization.
trait CurveModel {
    const P: usize;
    /// Value and Jacobian row in optimizer parameters.
    fn eval(&self, theta: &[f64], sigma: f64, jac: &mut [f64]) -> f64;
    /// Linear parameters and the Jacobian row with respect to them.
    fn linear(&self, theta: &[f64]) -> Vec<f64>;
    fn eval_linear(&self, lin: &[f64], sigma: f64, jac: &mut [f64]);
}

struct Single;

impl CurveModel for Single {
    const P: usize = 4;

    fn eval(&self, t: &[f64], sigma: f64, jac: &mut [f64]) -> f64 {
        let (mu, s) = (t[0].exp(), t[1].exp());
        let (v, d) = term(sigma, mu, s, t[2]);
        jac[0] = d[0] * mu;
        jac[1] = d[1] * s;
        jac[2] = d[2];
        jac[3] = 1.0;
        v + t[3]
    }

    fn linear(&self, t: &[f64]) -> Vec<f64> {
        vec![t[0].exp(), t[1].exp(), t[2], t[3]]
    }

    fn eval_linear(&self, l: &[f64], sigma: f64, jac: &mut [f64]) {
        let (_, d) = term(sigma, l[0], l[1], l[2]);
        jac[..3].copy_from_slice(&d);
        jac[3] = 1.0;
    }
}

/// θ = (ln μ1, ln s1, δa1, gap, ln s2, δa2, a_min), μ2 = μ1 + gap².
struct Double;

impl CurveModel for Double {
    const P: usize = 7;

    fn eval(&self, t: &[f64], sigma: f64, jac: &mut [f64]) -> f64 {
        let mu1 = t[0].exp();
        let s1 = t[1].exp();
        let mu2 = mu1 + t[3] * t[3];
        let s2 = t[4].exp();
        let (v1, d1) = term(sigma, mu1, s1, t[2]);
        let (v2, d2) = term(sigma, mu2, s2, t[5]);
        jac[0] = (d1[0] + d2[0]) * mu1;
        jac[1] = d1[1] * s1;
        jac[2] = d1[2];
        jac[3] = d2[0] * 2.0 * t[3];
        jac[4] = d2[1] * s2;
        jac[5] = d2[2];
        jac[6] = 1.0;
        v1 + v2 + t[6]
    }

    fn linear(&self, t: &[f64]) -> Vec<f64> {
        let mu1 = t[0].exp();
        vec![mu1, t[1].exp(), t[2], mu1 + t[3] * t[3], t[4].exp(), t[5], t[6]]
    }

    fn eval_linear(&self, l: &[f64], sigma: f64, jac: &mut [f64]) {
        let (_, d1) = term(sigma, l[0], l[1], l[2]);
        let (_, d2) = term(sigma, l[3], l[4], l[5]);
        jac[..3].copy_from_slice(&d1);
        jac[3..6].copy_from_slice(&d2);
        jac[6] = 1.0;
    }
}

struct Solution {
    theta: Vec<f64>,
    chi2: f64,
    iterations: usize,
    converged: bool,
    /// Weighted SSE after the start and after every accepted step.
    #[cfg_attr(not(test), allow(dead_code))]
    history: Vec<f64>,
}

fn weights(curve: &AccuracyCurve) -> Vec<f64> {
    curve.points.iter().map(|p| 1.0 / p.dy.max(DY_FLOOR)).collect()
}

fn residuals<M: CurveModel>(m: &M, theta: &[f64], curve: &AccuracyCurve, w: &[f64], jac: Option<&mut DMatrix<f64>>) -> DVector<f64> {
    let n = curve.len();
    let mut r = DVector::zeros(n);
    let mut row = vec![0.0; M::P];
    let mut jac = jac;
    for (i, (p, wi)) in curve.points.iter().zip(w).enumerate() {
        let f = m.eval(theta, p.sigma, &mut row);
        r[i] = (f - p.y) * wi;
        if let Some(j) = jac.as_deref_mut() {
            for (k, v) in row.iter().enumerate() {
                j[(i, k)] = v * wi;
            }
        }
    }
    r
}

/// Levenberg–Marquardt with Marquardt's diagonal scaling. Accepted steps
/// never increase the weighted SSE.
fn levenberg_marquardt<M: CurveModel>(m: &M, curve: &AccuracyCurve, w: &[f64], start: &[f64]) -> Solution {
    let n = curve.len();
    let mut theta = start.to_vec();
    let mut jac = DMatrix::zeros(n, M::P);
    let mut r = residuals(m, &theta, curve, w, Some(&mut jac));
    let mut chi2 = r.norm_squared();
    if !chi2.is_finite() {
        return Solution {
            theta,
            chi2: f64::INFINITY,
            iterations: 0,
            converged: false,
            history: Vec::new(),
        };
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut history = vec![chi2];
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if chi2 <= 1e-24 * n as f64 {
            return Solution {
                theta,
                chi2,
                iterations,
                converged: true,
                history,
            };
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() <= 1e-14 * (1.0 + chi2) {
            return Solution {
                theta,
                chi2,
                iterations,
                converged: true,
                history,
            };
        }
        let mut a = jtj.clone();
        for k in 0..M::P {
            a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
        }
        let step = a.cholesky().map(|c| c.solve(&(-&g)));
        let Some(step) = step else {
            lambda *= 10.0;
            continue;
        };
        let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, d)| t + d).collect();
        let r_trial = residuals(m, &trial, curve, w, None);
        let chi2_trial = r_trial.norm_squared();
        if chi2_trial.is_finite() && chi2_trial <= chi2 {
            let rel = (chi2 - chi2_trial) / chi2.max(f64::MIN_POSITIVE);
            theta = trial;
            r = residuals(m, &theta, curve, w, Some(&mut jac));
            chi2 = chi2_trial;
            history.push(chi2);
            lambda = (lambda / 3.0).max(1e-12);
            if rel < REL_TOLERANCE {
                return Solution {
                    theta,
                    chi2,
                    iterations,
                    converged: true,
                    history,
                };
            }
        } else {
            lambda *= 4.0;
            if lambda > 1e16 {
                // no descent direction left at working precision
                return Solution {
                    theta,
                    chi2,
                    iterations,
                    converged: true,
                    history,
                };
            }
        }
    }
    Solution {
        theta,
        chi2,
        iterations,
        converged: false,
        history,
    }
}

/// Covariance of the linear parameters: `(JᵀJ)⁻¹ · max(1, χ² / (n − p))`,
/// with `J` the weighted Jacobian at the solution. The residual scaling only
/// inflates: when the scatter is already explained by `Δy`, the supplied
/// uncertainties are taken at face value.
fn linear_covariance<M: CurveModel>(m: &M, lin: &[f64], curve: &AccuracyCurve, w: &[f64], chi2: f64) -> DMatrix<f64> {
    let n = curve.len();
    let mut jac = DMatrix::zeros(n, M::P);
    let mut row = vec![0.0; M::P];
    for (i, (p, wi)) in curve.points.iter().zip(w).enumerate() {
        m.eval_linear(lin, p.sigma, &mut row);
        for (k, v) in row.iter().enumerate() {
            jac[(i, k)] = v * wi;
        }
    }
    let dof = n.saturating_sub(M::P).max(1) as f64;
    let scale = (chi2 / dof).max(1.0);
    match (jac.transpose() * &jac).try_inverse() {
        Some(inv) => inv * scale,
        None => DMatrix::from_element(M::P, M::P, f64::INFINITY),
    }
}

fn stderr_of(cov: &DMatrix<f64>, k: usize) -> f64 {
    let v = cov[(k, k)];
    if v >= 0.0 {
        v.sqrt()
    } else {
        f64::INFINITY
    }
}

/// Corrected Akaike information criterion for a weighted least-squares fit
/// with `k` parameters on `n` points.
pub fn aicc(chi2: f64, n: usize, k: usize) -> f64 {
    let (n, k) = (n as f64, k as f64);
    let correction = if n - k - 1.0 > 0.0 {
        2.0 * k * (k + 1.0) / (n - k - 1.0)
    } else {
        f64::INFINITY
    };
    chi2 + 2.0 * k + correction
}

fn check_curve(curve: &AccuracyCurve, needed: usize) -> Result<(f64, f64), FitError> {
    if curve.len() < needed {
        return Err(FitError::TooFewPoints {
            needed,
            got: curve.len(),
        });
    }
    let (lo, hi) = curve.y_range();
    if hi - lo < 1e-12 {
        return Err(FitError::Degenerate(format!("all accuracies equal ({lo})")));
    }
    Ok((lo, hi))
}

/// Picks the best of several LM runs; ties on SSE keep the earlier start.
fn multi_start<M: CurveModel>(m: &M, curve: &AccuracyCurve, starts: &[Vec<f64>]) -> Option<Solution> {
    let w = weights(curve);
    let mut best: Option<Solution> = None;
    for start in starts {
        let sol = levenberg_marquardt(m, curve, &w, start);
        if !sol.chi2.is_finite() {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => (sol.converged && !b.converged) || (sol.converged == b.converged && sol.chi2 < b.chi2),
        };
        if better {
            best = Some(sol);
        }
    }
    best
}

/// Candidate σ positions for starting midpoints: every point with σ > 0,
/// thinned to at most `max` roughly evenly spaced entries.
fn sigma_candidates(curve: &AccuracyCurve, max: usize) -> Vec<f64> {
    let pos: Vec<f64> = curve.points.iter().map(|p| p.sigma).filter(|&s| s > 0.0).collect();
    if pos.len() <= max {
        return pos;
    }
    (0..max).map(|i| pos[i * (pos.len() - 1) / (max - 1)]).collect()
}

/// Weighted single-logistic fit (see module docs). The first start is the
/// conventional guess: `a_min = min y`, `δa = (max y − min y) / 2`, μ at the
/// point nearest the half level, `s = (σ_max − σ_min) / 10`; further starts
/// place μ at other sampled σ values.
pub fn fit_logistic(curve: &AccuracyCurve) -> Result<FitResult, FitError> {
    let (lo, hi) = check_curve(curve, MIN_POINTS_SINGLE)?;
    let da0 = (hi - lo) / 2.0;
    let smin = curve.points[0].sigma;
    let smax = curve.points[curve.len() - 1].sigma;
    let spread = ((smax - smin) / 10.0).max(1e-12);
    let mu0 = midpoint_closest_datapoint(curve).max(spread * 1e-3);

    let mut starts = vec![vec![mu0.ln(), spread.ln(), da0, lo]];
    for mu in sigma_candidates(curve, 10) {
        for s in [spread, 0.3 * mu] {
            starts.push(vec![mu.ln(), s.max(1e-12).ln(), da0, lo]);
        }
    }
    let sol = multi_start(&Single, curve, &starts)
        .ok_or_else(|| FitError::Degenerate("no finite fit from any start".into()))?;
    let lin = Single.linear(&sol.theta);
    let cov = linear_covariance(&Single, &lin, curve, &weights(curve), sol.chi2);
    let result = FitResult {
        mode: FitMode::Single,
        mu: lin[0],
        s: lin[1],
        delta_a: lin[2],
        a_min: lin[3],
        errors: ParamErrors {
            mu: stderr_of(&cov, 0),
            s: stderr_of(&cov, 1),
            delta_a: stderr_of(&cov, 2),
            a_min: stderr_of(&cov, 3),
        },
        residual: sol.chi2,
        aicc: aicc(sol.chi2, curve.len(), Single::P),
        n_points: curve.len(),
        iterations: sol.iterations,
        converged: sol.converged,
    };
    if sol.converged {
        Ok(result)
    } else {
        Err(FitError::NotConverged { best: Box::new(result) })
    }
}

/// σ where the stacked curve crosses `a_min + δa1 + δa2`, by bisection.
fn double_crossing(p: &DoubleParams) -> f64 {
    let target = p.a_min + p.delta_a1 + p.delta_a2;
    let mut lo = (p.mu1 - 60.0 * p.s1).min(p.mu2 - 60.0 * p.s2);
    let mut hi = (p.mu1 + 60.0 * p.s1).max(p.mu2 + 60.0 * p.s2);
    let decreasing = p.delta_a1 + p.delta_a2 >= 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let above = double_logistic(mid, p) > target;
        if above == decreasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Weighted fit of two stacked logistics with `μ1 < μ2`, from a grid of
/// starting pairs over the sampled σ values.
pub fn fit_double_logistic(curve: &AccuracyCurve) -> Result<FitResult, FitError> {
    let (lo, hi) = check_curve(curve, MIN_POINTS_DOUBLE)?;
    let cands = sigma_candidates(curve, 12);
    let mut starts = Vec::new();
    for i in 0..cands.len() {
        for j in i + 1..cands.len() {
            let (m1, m2) = (cands[i], cands[j]);
            // accuracy level between the two drops
            let mid_sigma = (m1 * m2).sqrt();
            let plateau = curve
                .points
                .iter()
                .min_by(|a, b| (a.sigma - mid_sigma).abs().total_cmp(&(b.sigma - mid_sigma).abs()))
                .map_or((lo + hi) / 2.0, |p| p.y)
                .clamp(lo, hi);
            let da1 = ((hi - plateau) / 2.0).max(0.01 * (hi - lo));
            let da2 = ((plateau - lo) / 2.0).max(0.01 * (hi - lo));
            starts.push(vec![
                m1.ln(),
                (0.3 * m1).ln(),
                da1,
                (m2 - m1).sqrt(),
                (0.3 * m2).ln(),
                da2,
                lo,
            ]);
        }
    }
    if starts.is_empty() {
        return Err(FitError::Degenerate("need at least two positive sigma values".into()));
    }
    let sol = multi_start(&Double, curve, &starts)
        .ok_or_else(|| FitError::Degenerate("no finite fit from any start".into()))?;
    let lin = Double.linear(&sol.theta);
    let cov = linear_covariance(&Double, &lin, curve, &weights(curve), sol.chi2);
    let errors: [f64; 7] = std::array::from_fn(|k| stderr_of(&cov, k));
    let d = DoubleParams {
        mu1: lin[0],
        s1: lin[1],
        delta_a1: lin[2],
        mu2: lin[3],
        s2: lin[4],
        delta_a2: lin[5],
        a_min: lin[6],
        errors,
    };
    let mu = double_crossing(&d);
    // delta method through the implicit equation F(μ; θ) = a_min + δa1 + δa2
    let mut dmu = [0.0; 7];
    let (_, t1) = term(mu, d.mu1, d.s1, d.delta_a1);
    let (_, t2) = term(mu, d.mu2, d.s2, d.delta_a2);
    let dg_dsigma = -(t1[0] + t2[0]);
    let dg_dtheta = [t1[0], t1[1], t1[2] - 1.0, t2[0], t2[1], t2[2] - 1.0, 0.0];
    if dg_dsigma.abs() > 0.0 {
        for k in 0..7 {
            dmu[k] = -dg_dtheta[k] / dg_dsigma;
        }
    }
    let g = DVector::from_row_slice(&dmu);
    let var_mu = (g.transpose() * &cov * &g)[(0, 0)];
    let (s, s_err) = if d.delta_a1.abs() >= d.delta_a2.abs() {
        (d.s1, errors[1])
    } else {
        (d.s2, errors[4])
    };
    let result = FitResult {
        mode: FitMode::Double(d),
        mu,
        s,
        delta_a: d.delta_a1 + d.delta_a2,
        a_min: d.a_min,
        errors: ParamErrors {
            mu: if var_mu >= 0.0 { var_mu.sqrt() } else { f64::INFINITY },
            s: s_err,
            delta_a: (cov[(2, 2)] + cov[(5, 5)] + 2.0 * cov[(2, 5)]).max(0.0).sqrt(),
            a_min: errors[6],
        },
        residual: sol.chi2,
        aicc: aicc(sol.chi2, curve.len(), Double::P),
        n_points: curve.len(),
        iterations: sol.iterations,
        converged: sol.converged,
    };
    if sol.converged {
        Ok(result)
    } else {
        Err(FitError::NotConverged { best: Box::new(result) })
    }
}

/// A stacked fit is a candidate only if both drops are real: `δa_i` positive
/// and more than two standard errors, and both midpoints inside the sampled
/// positive σ range.
fn admissible_double(fit: &FitResult, curve: &AccuracyCurve) -> bool {
    let FitMode::Double(d) = fit.mode else {
        return false;
    };
    let pos = curve.points.iter().map(|p| p.sigma).filter(|&s| s > 0.0);
    let lo = pos.clone().fold(f64::INFINITY, f64::min);
    let hi = pos.fold(0.0, f64::max);
    let resolved = |da: f64, err: f64| da > 0.0 && da > 2.0 * err;
    resolved(d.delta_a1, d.errors[2])
        && resolved(d.delta_a2, d.errors[5])
        && [d.mu1, d.mu2].iter().all(|&m| m >= lo && m <= hi)
}

/// Single fit, replaced by the stacked fit when the curve has enough points,
/// the stacked fit is admissible (both drops resolved inside the sampled
/// range), and it has the lower AICc.
pub fn fit_best(curve: &AccuracyCurve) -> Result<FitResult, FitError> {
    let single = fit_logistic(curve);
    if curve.len() < MIN_POINTS_DOUBLE {
        return single;
    }
    let double = fit_double_logistic(curve).ok().filter(|d| admissible_double(d, curve));
    match (single, double) {
        (Ok(s), Some(d)) => Ok(if d.aicc < s.aicc { d } else { s }),
        (Ok(s), None) => Ok(s),
        (Err(_), Some(d)) => Ok(d),
        (Err(e), None) => Err(e),
    }
}

/// Fraction of the above-chance accuracy retained at maximum noise:
/// `(acc_max_noise − a_random) / (acc_clean − a_random)`, clipped to `[0, 1]`.
pub fn preserved_relative_accuracy(acc_clean: f64, acc_max_noise: f64, a_random: f64) -> Result<f64, FitError> {
    if !(acc_clean > a_random) {
        return Err(FitError::InvalidCurve(format!(
            "clean accuracy {acc_clean} must exceed the random baseline {a_random}"
        )));
    }
    Ok(((acc_max_noise - a_random) / (acc_clean - a_random)).clamp(0.0, 1.0))
}

/// Plain ratio `acc_max_noise / acc_clean`, without the random baseline.
pub fn raw_accuracy_ratio(acc_clean: f64, acc_max_noise: f64) -> f64 {
    if acc_clean > 0.0 {
        acc_max_noise / acc_clean
    } else {
        f64::NAN
    }
}

/// σ of the point whose accuracy is nearest `(max y + min y) / 2`; ties go to
/// the smaller σ. `NaN` for an empty curve.
pub fn midpoint_closest_datapoint(curve: &AccuracyCurve) -> f64 {
    let (lo, hi) = curve.y_range();
    let target = (lo + hi) / 2.0;
    let mut best = (f64::INFINITY, f64::NAN);
    for p in &curve.points {
        let d = (p.y - target).abs();
        if d < best.0 {
            best = (d, p.sigma);
        }
    }
    best.1
}

#[derive(Serialize, Deserialize)]
struct CurveRow {
    sigma: f64,
    acc_mean: f64,
    acc_stderr: f64,
}

/// Reads a `sigma,acc_mean,acc_stderr` CSV.
pub fn read_curve_csv(path: &Path) -> crate::Result<AccuracyCurve> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut points = Vec::new();
    for row in rdr.deserialize() {
        let row: CurveRow = row?;
        points.push(CurvePoint {
            sigma: row.sigma,
            y: row.acc_mean,
            dy: row.acc_stderr,
        });
    }
    Ok(AccuracyCurve::new(points)?)
}

pub fn write_curve_csv(curve: &AccuracyCurve, path: &Path) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in &curve.points {
        w.serialize(CurveRow {
            sigma: p.sigma,
            acc_mean: p.y,
            acc_stderr: p.dy,
        })?;
    }
    w.flush().map_err(|e| crate::Error::io(path, e))?;
    Ok(())
}

pub fn write_fit_json(fit: &FitResult, path: &Path) -> crate::Result<()> {
    fs::write(path, serde_json::to_string_pretty(fit)?).map_err(|e| crate::Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::rng::{Domain, RngStream};

    fn synth(grid: &[f64], mut f: impl FnMut(f64) -> f64, dy: f64) -> AccuracyCurve {
        AccuracyCurve::from_triples(&grid.iter().map(|&s| (s, f(s), dy)).collect::<Vec<_>>()).unwrap()
    }

    fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        linspace(lo.log10(), hi.log10(), n).into_iter().map(|e| 10f64.powf(e)).collect()
    }

    #[test]
    fn logistic_values() {
        assert_eq!(logistic(2.0, 2.0, 0.3, 0.4, 0.1), 0.5);
        assert!((logistic(1e9, 2.0, 0.3, 0.4, 0.1) - 0.1).abs() < 1e-12);
        assert!((logistic(0.0, 200.0, 0.3, 0.4, 0.1) - 0.9).abs() < 1e-12);
        let expected = 0.1 + 0.8 / (1.0 + std::f64::consts::E);
        assert!((logistic(2.3, 2.0, 0.3, 0.4, 0.1) - expected).abs() < 1e-15);
        assert!((expected - 0.3152).abs() < 1e-4);
    }

    #[test]
    fn noise_free_round_trip() {
        let grid = linspace(0.5, 3.5, 20);
        let c = synth(&grid, |s| logistic(s, 2.0, 0.3, 0.4, 0.1), 0.01);
        let f = fit_logistic(&c).unwrap();
        assert!((f.mu - 2.0).abs() < 1e-3, "{f:?}");
        assert!((f.s - 0.3).abs() < 1e-3, "{f:?}");
        assert!((f.delta_a - 0.4).abs() < 1e-3, "{f:?}");
        assert!((f.a_min - 0.1).abs() < 1e-3, "{f:?}");
        assert!((f.predict(f.mu) - (f.a_min + f.delta_a)).abs() < 1e-12);
    }

    #[test]
    fn coverage_of_mu_stderr() {
        let grid = linspace(0.5, 3.5, 20);
        let mut covered = 0;
        for trial in 0..100u32 {
            let mut g = RngStream::new(11, Domain::Data).run(trial).generator();
            let c = synth(
                &grid,
                |s| {
                    let z: f64 = g.sample(StandardNormal);
                    (logistic(s, 2.0, 0.3, 0.4, 0.1) + 0.01 * z).clamp(0.0, 1.0)
                },
                0.01,
            );
            let f = fit_logistic(&c).unwrap();
            if (f.mu - 2.0).abs() <= 3.0 * f.errors.mu {
                covered += 1;
            }
        }
        assert!(covered >= 99, "{covered}/100");
    }

    #[test]
    fn scale_covariance() {
        let grid = logspace(1e-2, 1e2, 25);
        let c = synth(&grid, |s| logistic(s, 1.7, 0.6, 0.42, 0.1) + 0.003 * (s * 7.0).sin(), 0.01);
        let f = fit_logistic(&c).unwrap();
        let k = 8.0;
        let scaled = synth(&grid.iter().map(|s| s * k).collect::<Vec<_>>(), |s| {
            logistic(s / k, 1.7, 0.6, 0.42, 0.1) + 0.003 * (s / k * 7.0).sin()
        }, 0.01);
        let g = fit_logistic(&scaled).unwrap();
        assert!((g.mu / f.mu - k).abs() < 1e-6 * k, "{} vs {}", g.mu, f.mu);
        assert!((g.s / f.s - k).abs() < 1e-6 * k);
        assert!((g.a_min - f.a_min).abs() < 1e-8);
    }

    #[test]
    fn fit_agrees_with_closest_datapoint() {
        let grid = linspace(0.0, 4.0, 41);
        let c = synth(&grid, |s| logistic(s, 2.03, 0.25, 0.4, 0.1), 0.01);
        let f = fit_logistic(&c).unwrap();
        assert!((f.mu - midpoint_closest_datapoint(&c)).abs() <= 0.1 + 1e-12);
    }

    #[test]
    fn residual_never_increases() {
        let grid = logspace(1e-2, 1e2, 25);
        let c = synth(&grid, |s| logistic(s, 0.8, 0.2, 0.4, 0.1), 0.02);
        let w = weights(&c);
        for start in [[10f64.ln(), 0f64, 0.3, 0.2], [0.01f64.ln(), 5f64.ln(), 0.1, 0.0]] {
            let sol = levenberg_marquardt(&Single, &c, &w, &start);
            assert!(sol.history.len() > 1);
            assert!(sol.history.windows(2).all(|h| h[1] <= h[0]), "{:?}", sol.history);
        }
    }

    #[test]
    fn double_recovers_separated_midpoints() {
        let grid = logspace(1e-2, 1e3, 30);
        let truth = DoubleParams {
            mu1: 0.5,
            s1: 0.1,
            delta_a1: 0.2,
            mu2: 50.0,
            s2: 10.0,
            delta_a2: 0.2,
            a_min: 0.1,
            errors: [0.0; 7],
        };
        let c = synth(&grid, |s| double_logistic(s, &truth), 0.01);
        let f = fit_double_logistic(&c).unwrap();
        let FitMode::Double(d) = f.mode else { panic!() };
        assert!((d.mu1 / 0.5 - 1.0).abs() < 0.05, "{d:?}");
        assert!((d.mu2 / 50.0 - 1.0).abs() < 0.05, "{d:?}");
        assert!(d.mu1 < d.mu2);
        assert!((f.predict(f.mu) - (f.a_min + f.delta_a)).abs() < 1e-9);
        assert_eq!(fit_best(&c).unwrap().mode.name(), "double");
    }

    #[test]
    fn single_data_prefers_single() {
        let grid = logspace(1e-2, 1e2, 25);
        let mut g = RngStream::new(5, Domain::Data).generator();
        let c = synth(
            &grid,
            |s| {
                let z: f64 = g.sample(StandardNormal);
                logistic(s, 1.5, 0.4, 0.4, 0.1) + 0.01 * z
            },
            0.01,
        );
        assert_eq!(fit_best(&c).unwrap().mode.name(), "single");
    }

    #[test]
    fn error_cases() {
        let flat = AccuracyCurve::from_triples(&[(0.0, 0.5, 0.0); 1].repeat(1)).unwrap();
        assert!(matches!(fit_logistic(&flat), Err(FitError::TooFewPoints { .. })));
        let flat = synth(&linspace(0.0, 1.0, 6), |_| 0.5, 0.01);
        assert!(matches!(fit_logistic(&flat), Err(FitError::Degenerate(_))));
        assert!(AccuracyCurve::from_triples(&[(1.0, 0.5, 0.0), (1.0, 0.4, 0.0)]).is_err());
        assert!(AccuracyCurve::from_triples(&[(-1.0, 0.5, 0.0)]).is_err());
        assert!(AccuracyCurve::from_triples(&[(1.0, 1.5, 0.0)]).is_err());
        let few = synth(&linspace(0.0, 1.0, 7), |s| 1.0 - s / 2.0, 0.01);
        assert!(matches!(fit_double_logistic(&few), Err(FitError::TooFewPoints { needed: 8, got: 7 })));
    }

    #[test]
    fn zero_uncertainty_is_floored() {
        let grid = linspace(0.5, 3.5, 20);
        let c = synth(&grid, |s| logistic(s, 2.0, 0.3, 0.4, 0.1), 0.0);
        let f = fit_logistic(&c).unwrap();
        assert!(f.residual.is_finite());
        assert!((f.mu - 2.0).abs() < 1e-3);
    }

    #[test]
    fn preserved_accuracy() {
        assert_eq!(preserved_relative_accuracy(0.9, 0.9, 0.1).unwrap(), 1.0);
        assert_eq!(preserved_relative_accuracy(0.9, 0.1, 0.1).unwrap(), 0.0);
        assert!((preserved_relative_accuracy(0.9, 0.5, 0.1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(preserved_relative_accuracy(0.9, 0.05, 0.1).unwrap(), 0.0);
        assert!(preserved_relative_accuracy(0.1, 0.1, 0.1).is_err());
        assert!((raw_accuracy_ratio(0.9, 0.45) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn closest_datapoint_rules() {
        let one = AccuracyCurve::from_triples(&[(3.0, 0.4, 0.0)]).unwrap();
        assert_eq!(midpoint_closest_datapoint(&one), 3.0);
        let sym = AccuracyCurve::from_triples(&[(1.0, 0.9, 0.0), (2.0, 0.1, 0.0)]).unwrap();
        assert_eq!(midpoint_closest_datapoint(&sym), 1.0);
    }

    #[test]
    fn curve_csv_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("c.csv");
        let c = synth(&linspace(0.0, 1.0, 5), |s| 0.9 - 0.5 * s, 0.01);
        write_curve_csv(&c, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sigma,acc_mean,acc_stderr"));
        assert_eq!(read_curve_csv(&path).unwrap().points, c.points);
    }
}
