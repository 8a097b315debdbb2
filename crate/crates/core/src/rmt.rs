//! Asymptotic efficiencies from deterministic equivalents.
//!
//! Everything reduces to `f(γ, G) = η_G⁻¹(1 − γ) = γ·e(γ, G)`, where `e` is
//! the unique positive root of `∫ se/(1 + γse) dG(s) = 1`. [`solve_e`]
//! integrates that equation directly; [`f_inverse_eta_bisection`] inverts the
//! η-transform instead, so the two routes check each other.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{CovarianceSpec, ScaleDistribution};
use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor};
use crate::rng;

pub const DEFAULT_MAX_ITER: usize = 200;
pub const RESIDUAL_TOL: f64 = 1e-12;
pub const BRACKET_LIMIT: f64 = 1e15;
const SUM_TOL: f64 = 1e-10;

/// Limiting aspect ratios and scale laws of a one-shot problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRegime {
    pub gamma: f64,
    pub gammas: Vec<f64>,
    pub g: ScaleDistribution,
    pub g_i: Vec<ScaleDistribution>,
    /// Limiting spectrum of `Σ`. None of the limits depend on it.
    #[serde(default)]
    pub h: Option<ScaleDistribution>,
}

impl AsymptoticRegime {
    /// Checks `γ ∈ (0,1)`, `Σ 1/γ_i = 1/γ` and, when every law is given as a
    /// mixture, `G/γ = Σ G_i/γ_i` (compared through η-transforms).
    ///
    /// Machines with `γ_i ≥ 1` are accepted; every limit is then zero.
    pub fn new(gamma: f64, gammas: Vec<f64>, g: ScaleDistribution, g_i: Vec<ScaleDistribution>) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidInput(format!("γ = {gamma} must lie in (0, 1)")));
        }
        if gammas.is_empty() || gammas.len() != g_i.len() {
            return Err(Error::InvalidInput("need one scale law per machine".into()));
        }
        if gammas.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidInput("every γ_i must be positive".into()));
        }
        let inv: f64 = gammas.iter().map(|x| 1.0 / x).sum();
        if (inv - 1.0 / gamma).abs() > SUM_TOL * (1.0 / gamma).max(1.0) {
            return Err(Error::InvalidInput(format!("Σ 1/γ_i = {inv} differs from 1/γ = {}", 1.0 / gamma)));
        }
        g.validate()?;
        for gi in &g_i {
            gi.validate()?;
        }
        for x in [0.1, 1.0, 10.0] {
            let lhs = g.eta(x) / gamma;
            let rhs: f64 = g_i.iter().zip(&gammas).map(|(gi, gm)| gi.eta(x) / gm).sum();
            if (lhs - rhs).abs() > 1e-8 * lhs.abs().max(1.0) {
                return Err(Error::InvalidInput(
                    "machine scale laws are not a mixture of the global law with weights γ/γ_i".into(),
                ));
            }
        }
        Ok(Self { gamma, gammas, g, g_i, h: None })
    }

    /// `k` machines of equal size sharing the scale law `g`.
    pub fn equal_split(gamma: f64, k: usize, g: ScaleDistribution) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be positive".into()));
        }
        Self::new(gamma, vec![gamma * k as f64; k], g.clone(), vec![g; k])
    }

    /// Unequal machines sharing one scale law.
    pub fn shared_law(gamma: f64, gammas: Vec<f64>, g: ScaleDistribution) -> Result<Self> {
        let k = gammas.len();
        Self::new(gamma, gammas, g.clone(), vec![g; k])
    }

    pub fn k(&self) -> usize {
        self.gammas.len()
    }

    pub fn locally_identified(&self) -> bool {
        self.gammas.iter().all(|&g| g < 1.0)
    }

    /// `f(γ_i, G_i)` for every machine.
    fn local_f(&self) -> Result<Vec<f64>> {
        self.gammas.iter().zip(&self.g_i).map(|(&gm, gi)| f_inverse_eta(gm, gi)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSolution {
    pub e: f64,
    pub f: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Root of `∫ se/(1 + γse) dG(s) = 1`.
pub fn solve_e(gamma: f64, g: &ScaleDistribution) -> Result<FixedPointSolution> {
    solve_e_with(gamma, g, DEFAULT_MAX_ITER)
}

pub fn solve_e_with(gamma: f64, g: &ScaleDistribution, max_iter: usize) -> Result<FixedPointSolution> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidInput(format!("γ = {gamma} must lie in (0, 1)")));
    }
    g.validate()?;
    let mass = g.expect(|_| 1.0);
    let phi = |e: f64| g.expect(|s| (s * e * (1.0 - gamma) - 1.0) / (1.0 + gamma * s * e)) + (mass - 1.0);
    let dphi = |e: f64| {
        g.expect(|s| {
            let d = 1.0 + gamma * s * e;
            s / (d * d)
        })
    };

    // φ is increasing with φ(0) = −1 and φ(hi) ≥ 0 at the bound below.
    let mut lo = 0.0;
    let mut hi = 1.0 / ((1.0 - gamma) * g.min_scale());
    let mut iterations = 0;
    let mut e = 0.5 * hi;
    let mut r = phi(e);
    while iterations < max_iter {
        iterations += 1;
        let settled = r.abs() <= 0.1 * RESIDUAL_TOL && (r / dphi(e)).abs() <= 4.0 * f64::EPSILON * e.max(1.0);
        if settled || hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        if r > 0.0 {
            hi = e;
        } else {
            lo = e;
        }
        // Newton step when it stays inside the bracket, bisection otherwise
        let step = e - r / dphi(e);
        e = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        r = phi(e);
    }
    if r.abs() > RESIDUAL_TOL {
        return Err(Error::NoConvergence { iterations, residual: r });
    }
    Ok(FixedPointSolution {
        e,
        f: gamma * e,
        residual: r,
        iterations,
    })
}

/// `f(γ, G) = η_G⁻¹(1 − γ)`, computed as `γ·e(γ, G)`.
pub fn f_inverse_eta(gamma: f64, g: &ScaleDistribution) -> Result<f64> {
    Ok(solve_e(gamma, g)?.f)
}

/// `η_G⁻¹(1 − γ)` by bracketing and bisecting the η-transform itself.
pub fn f_inverse_eta_bisection(gamma: f64, g: &ScaleDistribution) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidInput(format!("γ = {gamma} must lie in (0, 1)")));
    }
    g.validate()?;
    let target = 1.0 - gamma;
    let mut hi = 1.0;
    while g.eta(hi) >= target {
        hi *= 2.0;
        if hi > BRACKET_LIMIT {
            return Err(Error::BracketOverflow {
                target,
                limit: BRACKET_LIMIT,
            });
        }
    }
    let mut lo = 0.0;
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g.eta(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Estimation efficiency limit `f(γ,G)·Σ 1/f(γ_i,G_i)`, floored at zero.
pub fn are_limit(r: &AsymptoticRegime) -> Result<f64> {
    if !r.locally_identified() {
        return Ok(0.0);
    }
    let f = f_inverse_eta(r.gamma, &r.g)?;
    let s: f64 = r.local_f()?.iter().map(|fi| 1.0 / fi).sum();
    Ok((f * s).max(0.0))
}

/// `max((1/γ − k)/(1/γ − 1), 0)`.
pub fn are_mp(gamma: f64, k: f64) -> f64 {
    ((1.0 / gamma - k) / (1.0 / gamma - 1.0)).max(0.0)
}

pub fn fe_limit(r: &AsymptoticRegime) -> Result<f64> {
    if !r.locally_identified() {
        return Ok(0.0);
    }
    let mean = r.g.mean() / r.gamma;
    let mut s = 0.0;
    for ((gm, gi), fi) in r.gammas.iter().zip(&r.g_i).zip(r.local_f()?) {
        s += 1.0 / (1.0 + (mean - gi.mean() / gm) * fi);
    }
    Ok(s.max(0.0))
}

/// `γ/(1−γ)·Σ (1−γ_i)/γ_i`.
pub fn fe_mp(gamma: f64, gammas: &[f64]) -> f64 {
    if gammas.iter().any(|&g| g >= 1.0) {
        return 0.0;
    }
    gamma / (1.0 - gamma) * gammas.iter().map(|g| (1.0 - g) / g).sum::<f64>()
}

pub fn ie_limit(r: &AsymptoticRegime) -> Result<f64> {
    if !r.locally_identified() {
        return Ok(0.0);
    }
    let gamma = r.gamma;
    let mean = r.g.mean();
    let mut s = 0.0;
    for ((gm, gi), fi) in r.gammas.iter().zip(&r.g_i).zip(r.local_f()?) {
        s += 1.0 / (gamma + (mean - gamma / gm * gi.mean()) * fi);
    }
    Ok(((1.0 - gamma) / (1.0 - 2.0 * gamma + 1.0 / s)).max(0.0))
}

/// `1/(1 + (k−1)γ²/((1−kγ)(1−γ)))`.
pub fn ie_mp(gamma: f64, k: f64) -> f64 {
    if k * gamma >= 1.0 {
        return 0.0;
    }
    1.0 / (1.0 + (k - 1.0) * gamma * gamma / ((1.0 - k * gamma) * (1.0 - gamma)))
}

/// Out-of-sample limit conditional on the test point's scale `g_t`.
pub fn oe_limit(r: &AsymptoticRegime, g_t: f64) -> Result<f64> {
    if !(g_t >= 0.0) {
        return Err(Error::InvalidInput(format!("test scale {g_t} must be nonnegative")));
    }
    if !r.locally_identified() {
        return Ok(0.0);
    }
    let f = f_inverse_eta(r.gamma, &r.g)?;
    let s: f64 = r.local_f()?.iter().map(|fi| 1.0 / fi).sum();
    Ok((1.0 + g_t * f) / (1.0 + g_t / s))
}

/// `1/(1 + (k−1)γ²/(1−kγ))`.
pub fn oe_mp(gamma: f64, k: f64) -> f64 {
    if k * gamma >= 1.0 {
        return 0.0;
    }
    1.0 / (1.0 + (k - 1.0) * gamma * gamma / (1.0 - k * gamma))
}

/// Confidence-interval limit; identical to [`are_limit`].
pub fn ce_limit(r: &AsymptoticRegime) -> Result<f64> {
    are_limit(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Criticality {
    pub k_r: f64,
    pub k_tr: f64,
    pub k_te: f64,
    pub e_r: f64,
    pub e_tr: f64,
    pub e_te: f64,
}

/// Machine counts at which each efficiency drops to one half, and the
/// efficiencies at the largest feasible machine count.
pub fn criticality(gamma: f64) -> Result<Criticality> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidInput(format!("γ = {gamma} must lie in (0, 1)")));
    }
    let g = gamma;
    Ok(Criticality {
        k_r: (g + 1.0) / (2.0 * g),
        k_tr: (g * g - g + 1.0) / g,
        k_te: (g * g + 1.0) / (g * g + g),
        e_r: g / (1.0 - g),
        e_tr: (1.0 - g) / (2.0 - 3.0 * g),
        e_te: 1.0 / (2.0 * (1.0 - g)),
    })
}

/// Positive root `x` of `η(x) = 1 − γ` for `(1−c)δ_τ + cδ_{ατ}`.
pub fn worst_case_root(gamma: f64, c: f64, alpha: f64, tau: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidInput(format!("γ = {gamma} must lie in (0, 1)")));
    }
    if !(c > 0.0 && c < 1.0 && alpha > 0.0 && tau > 0.0) {
        return Err(Error::InvalidInput("need c ∈ (0,1), α > 0, τ > 0".into()));
    }
    let b = (gamma - c) * alpha + c + gamma - 1.0;
    let d = 4.0 * gamma * (1.0 - gamma) * alpha;
    let root = (b * b + d).sqrt();
    let u = if b >= 0.0 {
        (b + root) / (2.0 * (1.0 - gamma) * alpha)
    } else {
        2.0 * gamma / (root - b)
    };
    Ok(u / tau)
}

/// `ARE(k) = k·x₁/x_k` for the two-scale worst-case mixture, equal splits.
pub fn worst_case_are(k: usize, gamma: f64, c: f64, alpha: f64, tau: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    let kg = k as f64 * gamma;
    if kg >= 1.0 {
        return Ok(0.0);
    }
    let x1 = worst_case_root(gamma, c, alpha, tau)?;
    let xk = worst_case_root(kg, c, alpha, tau)?;
    Ok(k as f64 * x1 / xk)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityScan {
    pub points: Vec<(f64, f64)>,
    pub decreasing: bool,
    pub midpoint_convex: bool,
}

/// Equal-split `ARE(k) = k·f(γ,G)/f(kγ,G)` along a grid of machine counts.
///
/// Convexity is checked on consecutive triples with equal spacing.
pub fn are_monotonicity_scan(gamma: f64, g: &ScaleDistribution, ks: &[f64]) -> Result<MonotonicityScan> {
    let f = f_inverse_eta(gamma, g)?;
    let points = ks
        .iter()
        .map(|&k| {
            if !(k >= 1.0) {
                return Err(Error::InvalidInput(format!("machine count {k} below 1")));
            }
            let v = if k * gamma >= 1.0 {
                0.0
            } else {
                k * f / f_inverse_eta(k * gamma, g)?
            };
            Ok((k, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let decreasing = points.windows(2).all(|w| w[1].1 < w[0].1);
    let midpoint_convex = points.windows(3).all(|w| {
        let equal = ((w[1].0 - w[0].0) - (w[2].0 - w[1].0)).abs() <= 1e-12 * w[2].0;
        !equal || w[0].1 + w[2].1 - 2.0 * w[1].1 >= -1e-9
    });
    Ok(MonotonicityScan {
        points,
        decreasing,
        midpoint_convex,
    })
}

/// Test matrices `C_n` for the deterministic-equivalence check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSequence {
    /// `n⁻¹ I_p`.
    ScaledIdentity,
    /// `E₁E₁ᵀ`.
    FirstCoordinate,
    /// `uuᵀ` with a fresh uniformly random unit vector `u`.
    RandomRankOne,
    /// `n⁻¹ D` for a fixed diagonal `D` with entries in `[0.5, 1.5]`.
    DiagonalProduct,
}

impl TestSequence {
    pub const ALL: [TestSequence; 4] = [
        TestSequence::ScaledIdentity,
        TestSequence::FirstCoordinate,
        TestSequence::RandomRankOne,
        TestSequence::DiagonalProduct,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TestSequence::ScaledIdentity => "scaled_identity",
            TestSequence::FirstCoordinate => "first_coordinate",
            TestSequence::RandomRankOne => "random_rank_one",
            TestSequence::DiagonalProduct => "diagonal_product",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub ns: Vec<usize>,
    pub aspect: f64,
    pub replicates: usize,
    pub covariance: CovarianceSpec,
    pub scales: ScaleDistribution,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub n: usize,
    pub p: usize,
    pub family: TestSequence,
    pub median: f64,
    pub values: Vec<f64>,
}

/// `|tr[C(Σ̂⁻¹ − e_p Σ⁻¹)]|` over replicates, with `Σ̂ = XᵀX/n` and `e_p`
/// solved from the realized scales.
pub fn equivalence_check(cfg: &EquivalenceConfig) -> Result<Vec<EquivalenceRow>> {
    if cfg.replicates == 0 || !(cfg.aspect > 0.0 && cfg.aspect < 1.0) {
        return Err(Error::InvalidInput("need replicates ≥ 1 and aspect in (0, 1)".into()));
    }
    let mut rows = Vec::new();
    for (ni, &n) in cfg.ns.iter().enumerate() {
        let p = ((cfg.aspect * n as f64).round() as usize).max(1);
        let sigma = cfg.covariance.diagonal(p)?;
        let d: Vec<f64> = (0..p).map(|j| 1.0 + 0.5 * (j as f64 * 0.37).sin()).collect();
        let per_rep = (0..cfg.replicates)
            .into_par_iter()
            .map(|r| equivalence_replicate(cfg, n, p, &sigma, &d, (ni * cfg.replicates + r) as u64))
            .collect::<Result<Vec<_>>>()?;
        for (fi, family) in TestSequence::ALL.iter().enumerate() {
            let values: Vec<f64> = per_rep.iter().map(|v| v[fi]).collect();
            rows.push(EquivalenceRow {
                n,
                p,
                family: *family,
                median: median(&values),
                values,
            });
        }
    }
    Ok(rows)
}

fn equivalence_replicate(
    cfg: &EquivalenceConfig,
    n: usize,
    p: usize,
    sigma: &[f64],
    d: &[f64],
    index: u64,
) -> Result<[f64; 4]> {
    let mut scale_rng = rng::stream(cfg.seed, "scales", index);
    let scales: Vec<f64> = (0..n).map(|_| cfg.scales.sample(&mut scale_rng)).collect();
    let mut design_rng = rng::stream(cfg.seed, "design", index);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let g = scales[i].sqrt();
        for j in 0..p {
            let z: f64 = StandardNormal.sample(&mut design_rng);
            x[(i, j)] = g * z * sigma[j].sqrt();
        }
    }
    let mut cov = linalg::gram(&x);
    cov /= n as f64;
    let inv = SpdFactor::with_limit(cov, f64::INFINITY)?.inverse();
    let e_p = solve_e(p as f64 / n as f64, &ScaleDistribution::empirical(&scales)?)?.e;
    let diff = |j: usize| inv[(j, j)] - e_p / sigma[j];

    let mut u_rng = rng::stream(cfg.seed, "covariance", index);
    let u: DVector<f64> = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut u_rng));
    let u = &u / u.norm();
    let uu = u.dot(&(&inv * &u)) - e_p * u.iter().zip(sigma).map(|(ui, s)| ui * ui / s).sum::<f64>();

    let nf = n as f64;
    Ok([
        ((0..p).map(diff).sum::<f64>() / nf).abs(),
        diff(0).abs(),
        uu.abs(),
        ((0..p).map(|j| d[j] * diff(j)).sum::<f64>() / nf).abs(),
    ])
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// One sample of an asymptotic curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub quantity: String,
    pub value: f64,
}

/// Writes `axis,quantity,value` rows, where `axis` is `k` or `gamma`.
pub fn write_curve_csv<W: Write>(axis: &str, points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([axis, "quantity", "value"])?;
    for pt in points {
        w.write_record([pt.x.to_string(), pt.quantity.clone(), pt.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// MP efficiency curves in `k` for a fixed `γ`.
pub fn mp_curves(gamma: f64, k_max: usize) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    for k in 1..=k_max {
        let kf = k as f64;
        for (q, v) in [
            ("are", are_mp(gamma, kf)),
            ("fe", fe_mp(gamma, &vec![kf * gamma; k])),
            ("ie", ie_mp(gamma, kf)),
            ("oe", oe_mp(gamma, kf)),
        ] {
            out.push(CurvePoint {
                x: kf,
                quantity: q.to_string(),
                value: v,
            });
        }
    }
    out
}
