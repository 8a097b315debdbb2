//! Synchronous parameter-server simulation of multi-round least squares.
//!
//! Each round the workers update from their own shard and the broadcast
//! state, then the server averages in machine order. All methods start
//! from `β⁰ = 0`; ADMM also starts its local copies and duals at zero.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::estimators;
use crate::linalg::{self, SpdFactor};

pub const DEFAULT_TOL: f64 = 1e-10;
const DIVERGENCE_FACTOR: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    /// Gradient descent on `f(β) = (1/k) Σ ‖X_iβ − Y_i‖²` with step `alpha`.
    Dgd { alpha: f64 },
    Admm { rho: f64 },
    Dane { eta: f64, rho: f64 },
    /// Ridge-centered averaging with per-machine regularizers `ρ_i`.
    IterAvg { rhos: Vec<f64> },
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Dgd { .. } => "dgd",
            Method::Admm { .. } => "admm",
            Method::Dane { .. } => "dane",
            Method::IterAvg { .. } => "iteravg",
        }
    }

    /// `(up, down)` p-vectors exchanged per round with `k` workers.
    pub fn messages_per_round(&self, k: usize) -> (usize, usize) {
        match self {
            Method::Dane { .. } => (2 * k, 2 * k),
            _ => (k, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    #[serde(flatten)]
    pub method: Method,
    pub max_rounds: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

impl AlgorithmConfig {
    pub fn new(method: Method, max_rounds: usize) -> Self {
        Self {
            method,
            max_rounds,
            tol: DEFAULT_TOL,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1");
        }
        if !(self.tol >= 0.0) {
            return bad("tolerance must be nonnegative");
        }
        match &self.method {
            Method::Dgd { alpha } if !(*alpha > 0.0) => bad("DGD step size must be positive"),
            Method::Admm { rho } if !(*rho >= 0.0) => bad("ADMM ρ must be nonnegative"),
            Method::Dane { eta, rho } if !(*eta > 0.0 && *rho >= 0.0) => bad("DANE needs η > 0 and ρ ≥ 0"),
            Method::IterAvg { rhos } if rhos.len() != k => bad("IterAvg needs one ρ_i per machine"),
            Method::IterAvg { rhos } if rhos.iter().any(|r| !(*r >= 0.0)) => bad("IterAvg ρ_i must be nonnegative"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    GlobalOls,
    /// The method's own limit: `β*` for IterAvg, global OLS otherwise.
    LimitStar,
    TrueBeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub beta: DVector<f64>,
    pub err_to_target: f64,
    pub objective: f64,
    pub cum_vectors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterTrace {
    pub method: Method,
    pub k: usize,
    pub target: Target,
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    /// Final local iterates (ADMM, DANE, IterAvg).
    pub locals: Vec<DVector<f64>>,
    /// Final scaled duals (ADMM only).
    pub duals: Vec<DVector<f64>>,
}

impl IterTrace {
    pub fn rounds(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("a trace always holds round 0")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "err_to_target", "objective", "cum_vectors"])?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                r.err_to_target.to_string(),
                r.objective.to_string(),
                r.cum_vectors.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shard data cached once per run.
struct Shards {
    grams: Vec<DMatrix<f64>>,
    xty: Vec<DVector<f64>>,
    sizes: Vec<usize>,
    total_gram: DMatrix<f64>,
    total_xty: DVector<f64>,
    yty: f64,
}

impl Shards {
    fn new(ds: &Dataset) -> Self {
        let parts: Vec<(DMatrix<f64>, DVector<f64>)> = (0..ds.k())
            .into_par_iter()
            .map(|i| {
                let (x, y) = ds.block(i);
                (linalg::gram(&x), x.tr_mul(&y))
            })
            .collect();
        let p = ds.p();
        let mut total_gram = DMatrix::zeros(p, p);
        let mut total_xty = DVector::zeros(p);
        for (g, v) in &parts {
            total_gram += g;
            total_xty += v;
        }
        let (grams, xty) = parts.into_iter().unzip();
        Self {
            grams,
            xty,
            sizes: ds.partition.sizes().to_vec(),
            total_gram,
            total_xty,
            yty: ds.y.norm_squared(),
        }
    }

    fn k(&self) -> usize {
        self.grams.len()
    }

    fn p(&self) -> usize {
        self.total_xty.len()
    }

    /// `(1/k)‖Xβ − Y‖²` from the cached moments.
    fn objective(&self, beta: &DVector<f64>) -> f64 {
        let v = beta.dot(&(&self.total_gram * beta)) - 2.0 * beta.dot(&self.total_xty) + self.yty;
        v.max(0.0) / self.k() as f64
    }

    /// Cholesky factors of `G_i + λ_i I`.
    fn shifted_factors(&self, shifts: &[f64]) -> Result<Vec<SpdFactor>> {
        self.grams
            .par_iter()
            .zip(shifts)
            .enumerate()
            .map(|(i, (g, &s))| {
                let mut m = g.clone();
                for j in 0..m.nrows() {
                    m[(j, j)] += s;
                }
                let limit = if s > 0.0 { f64::INFINITY } else { linalg::DEFAULT_COND_LIMIT };
                SpdFactor::with_limit(m, limit).map_err(|e| e.on_machine(i))
            })
            .collect()
    }
}

fn average(v: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(v[0].len());
    for b in v {
        acc += b;
    }
    acc / v.len() as f64
}

/// Runs the configured method, recording every round.
pub fn run(config: &AlgorithmConfig, ds: &Dataset, target: Target) -> Result<IterTrace> {
    config.validate(ds.k())?;
    let sh = Shards::new(ds);
    let (k, p) = (sh.k(), sh.p());

    let target_vec = match (target, &config.method) {
        (Target::TrueBeta, _) => ds
            .beta_true
            .clone()
            .ok_or_else(|| Error::InvalidInput("true β is unknown for this dataset".into()))?,
        (Target::LimitStar, Method::IterAvg { rhos }) => iteravg_fixed_point(ds, rhos)?.beta_star,
        _ => SpdFactor::new(sh.total_gram.clone())?.solve_vec(&sh.total_xty),
    };

    let (up, down) = config.method.messages_per_round(k);
    let mut beta = DVector::zeros(p);
    let limit = DIVERGENCE_FACTOR * (1.0 + beta.norm());
    let mut trace = IterTrace {
        method: config.method.clone(),
        k,
        target,
        rows: vec![TraceRow {
            round: 0,
            err_to_target: (&beta - &target_vec).norm(),
            objective: sh.objective(&beta),
            beta: beta.clone(),
            cum_vectors: 0,
        }],
        converged: false,
        locals: Vec::new(),
        duals: Vec::new(),
    };

    let mut locals = vec![DVector::zeros(p); k];
    let mut duals = vec![DVector::zeros(p); k];
    let factors = match &config.method {
        Method::Dgd { .. } => Vec::new(),
        Method::Admm { rho } | Method::Dane { rho, .. } => sh.shifted_factors(&vec![*rho; k])?,
        Method::IterAvg { rhos } => {
            let shifts: Vec<f64> = rhos.iter().zip(&sh.sizes).map(|(r, &n)| r * n as f64).collect();
            sh.shifted_factors(&shifts)?
        }
    };

    for round in 1..=config.max_rounds {
        let next = match &config.method {
            Method::Dgd { alpha } => {
                let grads: Vec<DVector<f64>> = (0..k)
                    .into_par_iter()
                    .map(|i| (&sh.grams[i] * &beta - &sh.xty[i]) * (2.0 / k as f64))
                    .collect();
                let mut g = DVector::zeros(p);
                for gi in &grads {
                    g += gi;
                }
                &beta - g * *alpha
            }
            Method::Admm { rho } => {
                locals = (0..k)
                    .into_par_iter()
                    .map(|i| factors[i].solve_vec(&(&sh.xty[i] + (&beta - &duals[i]) * *rho)))
                    .collect();
                let b = average(&locals);
                for (u, bi) in duals.iter_mut().zip(&locals) {
                    *u += bi - &b;
                }
                b
            }
            Method::Dane { eta, .. } => {
                let residuals: Vec<DVector<f64>> = (0..k)
                    .into_par_iter()
                    .map(|i| &sh.xty[i] - &sh.grams[i] * &beta)
                    .collect();
                let mut r = DVector::zeros(p);
                for ri in &residuals {
                    r += ri;
                }
                let scale = *eta / k as f64;
                locals = (0..k)
                    .into_par_iter()
                    .map(|i| &beta + factors[i].solve_vec(&r) * scale)
                    .collect();
                average(&locals)
            }
            Method::IterAvg { rhos } => {
                locals = (0..k)
                    .into_par_iter()
                    .map(|i| {
                        let lam = rhos[i] * sh.sizes[i] as f64;
                        factors[i].solve_vec(&(&sh.xty[i] + &beta * lam))
                    })
                    .collect();
                average(&locals)
            }
        };

        let step = (&next - &beta).norm();
        let prev_norm = beta.norm();
        beta = next;
        let norm = beta.norm();
        trace.rows.push(TraceRow {
            round,
            err_to_target: (&beta - &target_vec).norm(),
            objective: sh.objective(&beta),
            beta: beta.clone(),
            cum_vectors: round * (up + down),
        });
        if !norm.is_finite() || norm > limit {
            return Err(Error::Diverged {
                round,
                norm,
                trace: Box::new(trace),
            });
        }
        if step <= config.tol * (1.0 + prev_norm) {
            trace.converged = true;
            break;
        }
    }
    if !matches!(config.method, Method::Dgd { .. }) {
        trace.locals = locals;
    }
    if matches!(config.method, Method::Admm { .. }) {
        trace.duals = duals;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterAvgAnalysis {
    pub rhos: Vec<f64>,
    /// `λ_max(W)` with `W = (1/k) Σ n_iρ_i (X_iᵀX_i + n_iρ_i I)⁻¹`.
    pub contraction: f64,
    pub beta_star: DVector<f64>,
    pub psi: f64,
    /// Available for equal sizes and a common ρ.
    pub psi_prime: Option<f64>,
}

/// Closed-form limit `β*` of iterative averaging and its mean squared error.
pub fn iteravg_fixed_point(ds: &Dataset, rhos: &[f64]) -> Result<IterAvgAnalysis> {
    if rhos.len() != ds.k() || rhos.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::InvalidInput("need one nonnegative ρ_i per machine".into()));
    }
    let sh = Shards::new(ds);
    let (k, p) = (sh.k(), sh.p());
    let shifts: Vec<f64> = rhos.iter().zip(&sh.sizes).map(|(r, &n)| r * n as f64).collect();
    let factors = sh.shifted_factors(&shifts)?;

    let mut d = DMatrix::zeros(p, p);
    let mut w = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut s = DMatrix::zeros(p, p);
    for i in 0..k {
        // M_i G_i via a solve against G_i
        let mut mg = factors[i].solve(&sh.grams[i]);
        linalg::symmetrize(&mut mg);
        rhs += factors[i].solve_vec(&sh.xty[i]);
        s += factors[i].solve(&mg);
        d += &mg;
        if shifts[i] > 0.0 {
            w += factors[i].inverse() * shifts[i];
        }
    }
    w /= k as f64;
    linalg::symmetrize(&mut s);
    let d_factor = SpdFactor::with_limit(d, f64::INFINITY)?;
    let beta_star = d_factor.solve_vec(&rhs);
    // ψ = σ² tr(D⁻¹ S D⁻¹)
    let dinv_s = d_factor.solve(&s);
    let psi = ds.sigma2 * d_factor.solve(&dinv_s.transpose()).trace();
    let contraction = linalg::sym_max_eigenvalue(&w).max(0.0);

    let common = rhos.iter().all(|&r| r == rhos[0]);
    let psi_prime = if common && ds.partition.is_equal_split() {
        Some(psi_prime_at(&sh, ds.sigma2, rhos[0])?)
    } else {
        None
    };
    Ok(IterAvgAnalysis {
        rhos: rhos.to_vec(),
        contraction,
        beta_star,
        psi,
        psi_prime,
    })
}

/// `σ²(2k/n)(tr[Δ⁻¹S₂Δ⁻²S₂] − tr[Δ⁻²S₃])` with `Σ̂_i = X_iᵀX_i/n_i`,
/// `Δ = Σ(Σ̂_i+ρ)⁻¹Σ̂_i`, `S₂ = Σ(Σ̂_i+ρ)⁻²Σ̂_i`, `S₃ = Σ(Σ̂_i+ρ)⁻³Σ̂_i`.
fn psi_prime_at(sh: &Shards, sigma2: f64, rho: f64) -> Result<f64> {
    let (k, p) = (sh.k(), sh.p());
    let n: usize = sh.sizes.iter().sum();
    let mut delta = DMatrix::zeros(p, p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut s3 = DMatrix::zeros(p, p);
    for i in 0..k {
        let cov = &sh.grams[i] / sh.sizes[i] as f64;
        let mut shifted = cov.clone();
        for j in 0..p {
            shifted[(j, j)] += rho;
        }
        let limit = if rho > 0.0 { f64::INFINITY } else { linalg::DEFAULT_COND_LIMIT };
        let f = SpdFactor::with_limit(shifted, limit).map_err(|e| e.on_machine(i))?;
        let a = f.solve(&cov);
        let b = f.solve(&a);
        let c = f.solve(&b);
        delta += a;
        s2 += b;
        s3 += c;
    }
    for m in [&mut delta, &mut s2, &mut s3] {
        linalg::symmetrize(m);
    }
    let df = SpdFactor::with_limit(delta, f64::INFINITY)?;
    let d1s2 = df.solve(&s2); // Δ⁻¹S₂
    let d2s2 = df.solve(&d1s2); // Δ⁻²S₂
    let d2s3 = df.solve(&df.solve(&s3)); // Δ⁻²S₃
    let first = linalg::trace_of_product(&d1s2, &d2s2);
    Ok(sigma2 * (2.0 * k as f64 / n as f64) * (first - d2s3.trace()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiPoint {
    pub rho: f64,
    pub psi: f64,
    pub psi_prime: f64,
}

/// `ψ(ρ)` and `ψ'(ρ)` along a grid of common regularizers; equal splits only.
pub fn psi_curve(ds: &Dataset, rhos: &[f64]) -> Result<Vec<PsiPoint>> {
    if !ds.partition.is_equal_split() {
        return Err(Error::InvalidInput("ψ'(ρ) is defined for equal partition sizes only".into()));
    }
    rhos.iter()
        .map(|&rho| {
            let a = iteravg_fixed_point(ds, &vec![rho; ds.k()])?;
            Ok(PsiPoint {
                rho,
                psi: a.psi,
                psi_prime: a.psi_prime.expect("equal split with common ρ"),
            })
        })
        .collect()
}

/// `ψ'(0) = σ²(2/(nk²))·tr[(Σ Σ̂_i⁻¹)² − k Σ Σ̂_i⁻²]`.
pub fn psi_prime_at_zero(ds: &Dataset) -> Result<f64> {
    let sh = Shards::new(ds);
    let (k, p) = (sh.k(), sh.p());
    let mut s1 = DMatrix::zeros(p, p);
    let mut s2 = 0.0;
    for i in 0..k {
        let inv = SpdFactor::new(&sh.grams[i] / sh.sizes[i] as f64)
            .map_err(|e| e.on_machine(i))?
            .inverse();
        s2 += linalg::trace_of_product(&inv, &inv);
        s1 += inv;
    }
    let n = ds.n() as f64;
    let kf = k as f64;
    Ok(ds.sigma2 * 2.0 / (n * kf * kf) * (linalg::trace_of_product(&s1, &s1) - kf * s2))
}

/// `I − (η/k²) Σ (X_iᵀX_i + ρI)⁻¹ XᵀX`.
pub fn dane_recursion_matrix(ds: &Dataset, eta: f64, rho: f64) -> Result<DMatrix<f64>> {
    let sh = Shards::new(ds);
    let (k, p) = (sh.k(), sh.p());
    let factors = sh.shifted_factors(&vec![rho; k])?;
    let mut acc = DMatrix::zeros(p, p);
    for f in &factors {
        acc += f.solve(&sh.total_gram);
    }
    Ok(DMatrix::identity(p, p) - acc * (eta / (k * k) as f64))
}

/// Affine ADMM map `z ↦ Az + b` on the state `(β_1..β_k, u_1..u_k, β)`.
#[derive(Debug, Clone)]
pub struct AdmmRecursion {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub k: usize,
    pub p: usize,
}

impl AdmmRecursion {
    /// Stacks a state in the recursion's layout.
    pub fn state(&self, locals: &[DVector<f64>], duals: &[DVector<f64>], beta: &DVector<f64>) -> DVector<f64> {
        let p = self.p;
        let mut z = DVector::zeros((2 * self.k + 1) * p);
        for i in 0..self.k {
            z.rows_mut(i * p, p).copy_from(&locals[i]);
            z.rows_mut((self.k + i) * p, p).copy_from(&duals[i]);
        }
        z.rows_mut(2 * self.k * p, p).copy_from(beta);
        z
    }
}

pub fn admm_recursion(ds: &Dataset, rho: f64) -> Result<AdmmRecursion> {
    let sh = Shards::new(ds);
    let (k, p) = (sh.k(), sh.p());
    let factors = sh.shifted_factors(&vec![rho; k])?;
    let inv: Vec<DMatrix<f64>> = factors.iter().map(|f| f.inverse()).collect();
    let offs: Vec<DVector<f64>> = factors.iter().zip(&sh.xty).map(|(f, c)| f.solve_vec(c)).collect();
    let mut inv_avg = DMatrix::zeros(p, p);
    for m in &inv {
        inv_avg += m;
    }
    inv_avg /= k as f64;
    let off_avg = average(&offs);

    let dim = (2 * k + 1) * p;
    let mut a = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    let u = |i: usize| (k + i) * p;
    let bt = 2 * k * p;
    let eye = DMatrix::<f64>::identity(p, p);
    for i in 0..k {
        // β_i' = P_i(c_i + ρβ − ρu_i)
        a.view_mut((i * p, u(i)), (p, p)).copy_from(&(&inv[i] * -rho));
        a.view_mut((i * p, bt), (p, p)).copy_from(&(&inv[i] * rho));
        b.rows_mut(i * p, p).copy_from(&offs[i]);
        // u_i' = u_i + β_i' − β'
        for j in 0..k {
            let mut blk = &inv[j] * (rho / k as f64);
            if i == j {
                blk += &eye - &inv[i] * rho;
            }
            a.view_mut((u(i), u(j)), (p, p)).copy_from(&blk);
        }
        a.view_mut((u(i), bt), (p, p)).copy_from(&((&inv[i] - &inv_avg) * rho));
        b.rows_mut(u(i), p).copy_from(&(&offs[i] - &off_avg));
        // β' = mean of β_i'
        a.view_mut((bt, u(i)), (p, p)).copy_from(&(&inv[i] * (-rho / k as f64)));
    }
    a.view_mut((bt, bt), (p, p)).copy_from(&(&inv_avg * rho));
    b.rows_mut(bt, p).copy_from(&off_avg);
    Ok(AdmmRecursion { a, b, k, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmSpectrum {
    /// Radius of the full recursion matrix. `Σ u_i` is conserved, so this is at least one.
    pub full_radius: f64,
    /// Radius on the invariant subspace `Σ u_i = 0` reached from zero initialization.
    pub consensus_radius: f64,
}

pub fn admm_spectral_check(ds: &Dataset, rho: f64) -> Result<AdmmSpectrum> {
    let rec = admm_recursion(ds, rho)?;
    let (k, p) = (rec.k, rec.p);
    // Columns of the old local copies are zero.
    let tail = rec.a.view((k * p, k * p), ((k + 1) * p, (k + 1) * p)).clone_owned();
    let full_radius = linalg::spectral_radius(&tail);

    // Reduced state (u_1..u_{k−1}, β) with u_k = −Σ_{j<k} u_j.
    let m = k * p;
    let src = |blk: usize| if blk < k - 1 { (k + blk) * p } else { 2 * k * p };
    let mut r = DMatrix::zeros(m, m);
    for out in 0..k {
        let row = src(out);
        for inp in 0..k {
            let col = src(inp);
            let mut blk = rec.a.view((row, col), (p, p)).clone_owned();
            if inp < k - 1 {
                blk -= rec.a.view((row, (2 * k - 1) * p), (p, p));
            }
            r.view_mut((out * p, inp * p), (p, p)).copy_from(&blk);
        }
    }
    let consensus_radius = linalg::spectral_radius(&r);
    Ok(AdmmSpectrum {
        full_radius,
        consensus_radius,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunicationCost {
    pub vectors_up: usize,
    pub vectors_down: usize,
    pub rounds: usize,
}

pub fn communication_cost(trace: &IterTrace) -> CommunicationCost {
    let (up, down) = trace.method.messages_per_round(trace.k);
    let rounds = trace.rounds();
    CommunicationCost {
        vectors_up: up * rounds,
        vectors_down: down * rounds,
        rounds,
    }
}

/// One-shot averaging: every worker uploads its estimate once.
pub fn one_shot_cost(k: usize) -> CommunicationCost {
    CommunicationCost {
        vectors_up: k,
        vectors_down: 0,
        rounds: 1,
    }
}

/// Global OLS on the pooled data, used as the reference point for traces.
pub fn global_ols(ds: &Dataset) -> Result<DVector<f64>> {
    estimators::ols(&ds.x, &ds.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::*;

    fn dataset(n: usize, p: usize, k: usize, seed: u64) -> Dataset {
        let spec = ProblemSpec::new(PartitionPlan::new(n, p, vec![n / k; k]).unwrap(), 1.0, BetaSpec::StandardNormal).unwrap();
        sample_dataset(&spec, &ScaleDistribution::marchenko_pastur(), &CovarianceSpec::Identity { p }, seed).unwrap()
    }

    #[test]
    fn dgd_matches_centralized_gradient_descent() {
        let ds = dataset(200, 5, 4, 1);
        let alpha = 0.5 / linalg::sym_max_eigenvalue(&linalg::gram(&ds.x));
        let cfg = AlgorithmConfig { tol: 0.0, ..AlgorithmConfig::new(Method::Dgd { alpha }, 30) };
        let trace = run(&cfg, &ds, Target::GlobalOls).unwrap();
        let mut b = DVector::zeros(5);
        for row in &trace.rows[1..] {
            b = &b - (ds.x.transpose() * (&ds.x * &b - &ds.y)) * (2.0 / 4.0 * alpha);
            assert!((&row.beta - &b).amax() < 1e-12);
        }
    }

    #[test]
    fn dgd_divergence_is_reported() {
        let ds = dataset(200, 5, 4, 2);
        let alpha = 10.0 / linalg::sym_max_eigenvalue(&linalg::gram(&ds.x));
        match run(&AlgorithmConfig::new(Method::Dgd { alpha }, 500), &ds, Target::GlobalOls) {
            Err(Error::Diverged { trace, round, .. }) => assert_eq!(trace.rounds(), round),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn iteravg_noiseless_geometric_bound() {
        let mut ds = dataset(300, 6, 3, 3);
        let beta = ds.beta_true.clone().unwrap();
        ds.y = &ds.x * &beta;
        let rhos = vec![0.5; 3];
        let a = iteravg_fixed_point(&ds, &rhos).unwrap();
        assert!(a.contraction < 1.0);
        let cfg = AlgorithmConfig { tol: 0.0, ..AlgorithmConfig::new(Method::IterAvg { rhos }, 40) };
        let trace = run(&cfg, &ds, Target::TrueBeta).unwrap();
        for r in &trace.rows {
            assert!(r.err_to_target <= a.contraction.powi(r.round as i32) * beta.norm() + 1e-10);
        }
    }

    #[test]
    fn iteravg_converges_to_beta_star() {
        let ds = dataset(300, 6, 3, 4);
        let rhos = vec![0.2, 0.4, 0.8];
        let a = iteravg_fixed_point(&ds, &rhos).unwrap();
        let trace = run(&AlgorithmConfig::new(Method::IterAvg { rhos }, 2000), &ds, Target::LimitStar).unwrap();
        assert!(trace.converged);
        assert!((&trace.last().beta - &a.beta_star).norm() < 1e-8);
        for w in trace.rows.windows(2) {
            assert!(w[1].err_to_target <= a.contraction * w[0].err_to_target + 1e-10);
        }
    }

    #[test]
    fn beta_star_limits() {
        let ds = dataset(240, 4, 3, 5);
        let zero = iteravg_fixed_point(&ds, &[0.0; 3]).unwrap();
        let naive = crate::estimators::distributed_fit(&ds, &crate::estimators::WeightChoice::Naive).unwrap();
        assert!((&zero.beta_star - &naive.beta_hat).norm() < 1e-10 * naive.beta_hat.norm());
        let inv_sum: f64 = ds.blocks().iter().map(|(x, _)| linalg::gram(x).try_inverse().unwrap().trace()).sum();
        assert!((zero.psi - inv_sum / 9.0).abs() < 1e-10 * zero.psi);

        let big = iteravg_fixed_point(&ds, &[1e9; 3]).unwrap();
        let ols = global_ols(&ds).unwrap();
        assert!((&big.beta_star - &ols).norm() <= 1e-4 * ols.norm());
        let ols_mse = linalg::gram(&ds.x).try_inverse().unwrap().trace();
        assert!((big.psi - ols_mse).abs() <= 1e-4 * ols_mse);
        assert!(iteravg_fixed_point(&ds, &[0.3; 3]).unwrap().psi < zero.psi);
    }

    #[test]
    fn psi_prime_agrees_with_zero_formula_and_sign() {
        let ds = dataset(240, 4, 4, 6);
        let at_zero = iteravg_fixed_point(&ds, &[0.0; 4]).unwrap().psi_prime.unwrap();
        let formula = psi_prime_at_zero(&ds).unwrap();
        assert!((at_zero - formula).abs() < 1e-10 * formula.abs().max(1e-12));
        assert!(formula <= 0.0);
    }

    #[test]
    fn identical_blocks_have_flat_psi_at_zero() {
        let block = dataset(40, 3, 1, 7);
        let mut x = DMatrix::zeros(120, 3);
        for b in 0..3 {
            x.rows_mut(40 * b, 40).copy_from(&block.x);
        }
        let ds = Dataset::new(x, DVector::zeros(120), 1.0, PartitionPlan::new(120, 3, vec![40; 3]).unwrap()).unwrap();
        assert!(psi_prime_at_zero(&ds).unwrap().abs() < 1e-12);
    }

    #[test]
    fn psi_curve_rejects_unequal_sizes() {
        let spec = ProblemSpec::new(PartitionPlan::new(100, 3, vec![40, 60]).unwrap(), 1.0, BetaSpec::StandardNormal).unwrap();
        let ds = sample_dataset(&spec, &ScaleDistribution::marchenko_pastur(), &CovarianceSpec::Identity { p: 3 }, 1).unwrap();
        assert!(psi_curve(&ds, &[0.1]).is_err());
        assert!(iteravg_fixed_point(&ds, &[0.1, 0.1]).unwrap().psi_prime.is_none());
    }

    #[test]
    fn dane_follows_its_recursion() {
        let ds = dataset(400, 5, 4, 8);
        let (eta, rho) = (1.0, 2.0);
        let r = dane_recursion_matrix(&ds, eta, rho).unwrap();
        let ols = global_ols(&ds).unwrap();
        let cfg = AlgorithmConfig { tol: 0.0, ..AlgorithmConfig::new(Method::Dane { eta, rho }, 15) };
        let trace = run(&cfg, &ds, Target::GlobalOls).unwrap();
        for w in trace.rows.windows(2) {
            let predicted = &ols + &r * (&w[0].beta - &ols);
            assert!((&w[1].beta - predicted).norm() < 1e-10);
        }
    }

    #[test]
    fn admm_spectrum_and_fixed_point() {
        let ds = dataset(400, 10, 4, 9);
        let spec = admm_spectral_check(&ds, 1.0).unwrap();
        assert!((spec.full_radius - 1.0).abs() < 1e-8);
        assert!(spec.consensus_radius < 1.0);
        let cfg = AlgorithmConfig { tol: 0.0, ..AlgorithmConfig::new(Method::Admm { rho: 1.0 }, 6000) };
        let trace = run(&cfg, &ds, Target::GlobalOls).unwrap();
        let rec = admm_recursion(&ds, 1.0).unwrap();
        let z = rec.state(&trace.locals, &trace.duals, &trace.last().beta);
        assert!((&rec.a * &z + &rec.b - &z).norm() < 1e-8);
        assert!(trace.last().err_to_target < 1e-8);
    }

    #[test]
    fn admm_single_machine_is_ols() {
        let ds = dataset(50, 4, 1, 10);
        let trace = run(&AlgorithmConfig::new(Method::Admm { rho: 1.0 }, 5000), &ds, Target::GlobalOls).unwrap();
        assert!((&trace.last().beta - global_ols(&ds).unwrap()).norm() < 1e-8);
    }

    #[test]
    fn message_counts() {
        let ds = dataset(100, 2, 5, 11);
        let cfg = AlgorithmConfig { tol: 0.0, ..AlgorithmConfig::new(Method::IterAvg { rhos: vec![1.0; 5] }, 10) };
        let t = run(&cfg, &ds, Target::GlobalOls).unwrap();
        assert_eq!(communication_cost(&t).vectors_up, 50);
        assert_eq!(t.last().cum_vectors, 100);
        let cfg = AlgorithmConfig { tol: 0.0, ..AlgorithmConfig::new(Method::Dane { eta: 1.0, rho: 1.0 }, 10) };
        let t = run(&cfg, &ds, Target::GlobalOls).unwrap();
        assert_eq!(communication_cost(&t).vectors_up, 100);
        assert_eq!(one_shot_cost(5), CommunicationCost { vectors_up: 5, vectors_down: 0, rounds: 1 });
    }

    #[test]
    fn trace_csv_has_fixed_columns() {
        let ds = dataset(60, 2, 2, 12);
        let t = run(&AlgorithmConfig::new(Method::Admm { rho: 1.0 }, 3), &ds, Target::GlobalOls).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("round,err_to_target,objective,cum_vectors\n0,"));
        assert_eq!(text.lines().count(), t.rows.len() + 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = dataset(60, 2, 2, 13);
        for m in [
            Method::Dgd { alpha: 0.0 },
            Method::Admm { rho: -1.0 },
            Method::Dane { eta: 0.0, rho: 1.0 },
            Method::IterAvg { rhos: vec![1.0] },
        ] {
            assert!(run(&AlgorithmConfig::new(m, 5), &ds, Target::GlobalOls).is_err());
        }
        assert!(run(&AlgorithmConfig::new(Method::Admm { rho: 1.0 }, 0), &ds, Target::GlobalOls).is_err());
    }
}
