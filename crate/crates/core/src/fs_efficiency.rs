//! Finite-sample relative efficiencies of optimally weighted one-shot averaging.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::estimators::{self, FunctionalTask, GramSet};
use crate::linalg::{self, SpdFactor};

/// `tr[(XᵀX)⁻¹AᵀA] · Σ 1/tr[(X_iᵀX_i)⁻¹AᵀA]`.
pub fn efficiency_general(ata: &DMatrix<f64>, blocks: &[DMatrix<f64>]) -> Result<f64> {
    efficiency_with(ata, &GramSet::from_blocks(blocks)?)
}

pub fn efficiency_with(ata: &DMatrix<f64>, grams: &GramSet) -> Result<f64> {
    let p = grams.p();
    if ata.shape() != (p, p) {
        return Err(Error::InvalidInput(format!("AᵀA must be {p}x{p}")));
    }
    let global = grams.total.trace_inv(ata);
    let mut harmonic = 0.0;
    for (i, b) in grams.blocks.iter().enumerate() {
        let a = b.trace_inv(ata);
        if !(a > 0.0) {
            return Err(Error::NonPositiveTrace { machine: i, value: a });
        }
        harmonic += 1.0 / a;
    }
    Ok(global * harmonic)
}

/// Estimation efficiency, `A = I_p`.
pub fn re_finite(blocks: &[DMatrix<f64>]) -> Result<f64> {
    re_with(&GramSet::from_blocks(blocks)?)
}

pub fn re_with(g: &GramSet) -> Result<f64> {
    efficiency_with(&DMatrix::identity(g.p(), g.p()), g)
}

/// `Σ 1/tr((X_iᵀX_i)⁻¹XᵀX)` for the blocks.
fn harmonic_prediction(g: &GramSet) -> f64 {
    g.blocks.iter().map(|b| 1.0 / b.trace_inv(&g.total.gram)).sum()
}

/// Regression-function efficiency, `Σ p / tr((X_iᵀX_i)⁻¹XᵀX)`.
pub fn fe_finite(blocks: &[DMatrix<f64>]) -> Result<f64> {
    fe_with(&GramSet::from_blocks(blocks)?)
}

pub fn fe_with(g: &GramSet) -> Result<f64> {
    Ok(g.p() as f64 * harmonic_prediction(g))
}

/// In-sample prediction efficiency.
pub fn ie_finite(blocks: &[DMatrix<f64>]) -> Result<f64> {
    ie_with(&GramSet::from_blocks(blocks)?)
}

pub fn ie_with(g: &GramSet) -> Result<f64> {
    let (n, p) = (g.n() as f64, g.p() as f64);
    Ok((n - p) / (n - 2.0 * p + 1.0 / harmonic_prediction(g)))
}

/// Out-of-sample prediction efficiency at the test point `x_t`.
pub fn oe_finite(x_t: &DVector<f64>, blocks: &[DMatrix<f64>]) -> Result<f64> {
    oe_with(x_t, &GramSet::from_blocks(blocks)?)
}

pub fn oe_with(x_t: &DVector<f64>, g: &GramSet) -> Result<f64> {
    if x_t.len() != g.p() {
        return Err(Error::InvalidInput("test point has the wrong length".into()));
    }
    let global = quad(&g.total.inverse, x_t);
    let harmonic: f64 = g.blocks.iter().map(|b| 1.0 / quad(&b.inverse, x_t)).sum();
    Ok((1.0 + global) / (1.0 + 1.0 / harmonic))
}

fn quad(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Confidence-interval efficiency for coordinate `j` in `1..=p`.
pub fn ce_finite(j: usize, blocks: &[DMatrix<f64>]) -> Result<f64> {
    ce_with(j, &GramSet::from_blocks(blocks)?)
}

pub fn ce_with(j: usize, g: &GramSet) -> Result<f64> {
    let p = g.p();
    if j == 0 || j > p {
        return Err(Error::InvalidInput(format!("coordinate {j} outside 1..={p}")));
    }
    let c = j - 1;
    let harmonic: f64 = g.blocks.iter().map(|b| 1.0 / b.inverse[(c, c)]).sum();
    Ok(g.total.inverse[(c, c)] * harmonic)
}

/// `tr(I − H_dist)` as a real number, summing per-row leverages.
pub fn residual_trace(blocks: &[DMatrix<f64>]) -> Result<f64> {
    let g = GramSet::from_blocks(blocks)?;
    let mut lev = 0.0;
    for (x, b) in blocks.iter().zip(&g.blocks) {
        // row leverages are the diagonal of X_i G_i⁻¹ X_iᵀ
        let solved = b.factor.solve(&x.transpose());
        lev += x.transpose().component_mul(&solved).sum();
    }
    Ok(g.n() as f64 - lev)
}

/// Residual degrees of freedom of the distributed fit.
pub fn dof_residual(blocks: &[DMatrix<f64>]) -> Result<usize> {
    let t = residual_trace(blocks)?;
    let r = t.round();
    if (t - r).abs() > 1e-6 || r < 0.0 {
        return Err(Error::InvalidInput(format!("residual trace {t} is not an integer")));
    }
    Ok(r as usize)
}

/// Asymptotic efficiency of naive averaging, `k²γ/(1−γ) / Σ γ_i/(1−γ_i)`.
pub fn are_subopt_ratio(gammas: &[f64], gamma: f64) -> Result<f64> {
    if gammas.is_empty() || !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidInput("need k ≥ 1 and γ in (0, 1)".into()));
    }
    if gammas.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
        return Err(Error::InvalidInput("every γ_i must lie in (0, 1)".into()));
    }
    let k = gammas.len() as f64;
    let s: f64 = gammas.iter().map(|g| g / (1.0 - g)).sum();
    Ok(k * k * gamma / (1.0 - gamma) / s)
}

/// Finite-sample efficiency of the task on the dataset's partition.
pub fn finite_efficiency(task: &FunctionalTask, grams: &GramSet) -> Result<f64> {
    match task {
        FunctionalTask::Estimation => re_with(grams),
        FunctionalTask::RegressionFunction => fe_with(grams),
        FunctionalTask::InSample => ie_with(grams),
        FunctionalTask::CoordinateCi { j } => ce_with(*j, grams),
        FunctionalTask::TestPoint { x, .. } => oe_with(&DVector::from_column_slice(x), grams),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub task: String,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub gamma: f64,
    pub gammas: Vec<f64>,
    pub finite: f64,
    pub asymptotic: Option<f64>,
    pub weights: Vec<f64>,
    pub seed: Option<u64>,
}

impl EfficiencyReport {
    pub const CSV_HEADER: &'static str = "task,n,p,k,finite,asymptotic,seed";

    pub fn compute(task: &FunctionalTask, ds: &Dataset) -> Result<Self> {
        let grams = GramSet::from_dataset(ds)?;
        let finite = finite_efficiency(task, &grams)?;
        let weights = estimators::optimal_weights_with(task, ds, &grams)?;
        Ok(Self {
            task: task.label().to_string(),
            n: ds.n(),
            p: ds.p(),
            k: ds.k(),
            gamma: ds.partition.gamma(),
            gammas: ds.partition.gammas(),
            finite,
            asymptotic: None,
            weights: weights.as_slice().to_vec(),
            seed: ds.origin.as_ref().map(|o| o.seed),
        })
    }

    pub fn with_asymptotic(mut self, value: f64) -> Self {
        self.asymptotic = Some(value);
        self
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.task,
            self.n,
            self.p,
            self.k,
            self.finite,
            opt(self.asymptotic.map(|a| a.to_string())),
            opt(self.seed.map(|s| s.to_string()))
        )
    }
}

/// Condition estimate above which a block Gram is rebuilt from its rows.
const SWEEP_REBUILD_COND: f64 = 1e8;
/// Condition estimate above which a rebuilt block is rejected as singular.
const SWEEP_COND_LIMIT: f64 = 1e14;

/// Finite-sample efficiencies of one partition, as produced by [`partition_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub re: f64,
    pub fe: f64,
    pub ie: f64,
    /// Confidence-interval efficiency for the first coordinate.
    pub ce: f64,
    /// Out-of-sample efficiency at each test point, in column order.
    pub oe: Vec<f64>,
    /// Estimation-optimal one-shot estimate, when a response was supplied.
    pub beta: Option<DVector<f64>>,
}

/// Efficiencies for many partitions of the same design in a single pass over its rows.
///
/// Block Grams are differences of a running Gram sum, so the cost of forming them
/// does not grow with the number of partitions. `test_points` holds one test point
/// per column.
pub fn partition_sweep(
    x: &DMatrix<f64>,
    y: Option<&DVector<f64>>,
    plans: &[PartitionPlan],
    test_points: Option<&DMatrix<f64>>,
) -> Result<Vec<SweepRow>> {
    let (n, p) = x.shape();
    if let Some(plan) = plans.iter().find(|pl| pl.n() != n || pl.p() != p) {
        return Err(Error::InvalidInput(format!(
            "partition is for {}x{}, design is {n}x{p}",
            plan.n(),
            plan.p()
        )));
    }
    if y.is_some_and(|y| y.len() != n) {
        return Err(Error::InvalidInput("response length differs from the design".into()));
    }
    let empty = DMatrix::zeros(p, 0);
    let tp = test_points.unwrap_or(&empty);
    if tp.nrows() != p {
        return Err(Error::InvalidInput("test points must have p rows".into()));
    }

    let total = SpdFactor::new(linalg::gram(x))?;
    let l_total = total.l();
    let li_total = total.l_inverse();
    let tr_total = li_total.norm_squared();
    let ce_total = li_total.column(0).norm_squared();
    let q_total: Vec<f64> = (&li_total * tp).column_iter().map(|c| c.norm_squared()).collect();

    struct Acc {
        re: f64,
        fe: f64,
        ce: f64,
        oe: Vec<f64>,
        beta: DVector<f64>,
    }
    let mut acc: Vec<Acc> = plans
        .iter()
        .map(|_| Acc {
            re: 0.0,
            fe: 0.0,
            ce: 0.0,
            oe: vec![0.0; tp.ncols()],
            beta: DVector::zeros(p),
        })
        .collect();

    let mut events: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (pi, plan) in plans.iter().enumerate() {
        for (bi, r) in plan.ranges().into_iter().enumerate() {
            events.push((r.end, pi, bi, r.start));
        }
    }
    events.sort_unstable();

    let mut running = DMatrix::<f64>::zeros(p, p);
    let mut running_xy = DVector::<f64>::zeros(p);
    let mut last = vec![DMatrix::<f64>::zeros(p, p); plans.len()];
    let mut last_xy = vec![DVector::<f64>::zeros(p); plans.len()];
    let mut pos = 0;
    for (end, pi, bi, start) in events {
        if end > pos {
            let rows = x.rows(pos, end - pos);
            running.gemm_tr(1.0, &rows, &rows, 1.0);
            if let Some(y) = y {
                running_xy.gemv_tr(1.0, &rows, &y.rows(pos, end - pos), 1.0);
            }
            pos = end;
        }
        let block = &running - &last[pi];
        last[pi].copy_from(&running);
        let factor = match SpdFactor::with_limit(block, SWEEP_REBUILD_COND) {
            Ok(f) => f,
            Err(_) => SpdFactor::with_limit(linalg::gram(&x.rows(start, end - start)), SWEEP_COND_LIMIT)
                .map_err(|e| e.on_machine(bi))?,
        };
        let li = factor.l_inverse();
        let a = &mut acc[pi];
        let tr_inv = li.norm_squared();
        a.re += 1.0 / tr_inv;
        if y.is_some() {
            let local = li.tr_mul(&(&li * (&running_xy - &last_xy[pi])));
            a.beta.axpy(1.0 / tr_inv, &local, 1.0);
            last_xy[pi].copy_from(&running_xy);
        }
        a.fe += 1.0 / (&li * &l_total).norm_squared();
        a.ce += 1.0 / li.column(0).norm_squared();
        for (h, c) in a.oe.iter_mut().zip((&li * tp).column_iter()) {
            *h += 1.0 / c.norm_squared();
        }
    }

    let (nf, pf) = (n as f64, p as f64);
    Ok(plans
        .iter()
        .zip(acc)
        .map(|(plan, a)| SweepRow {
            k: plan.k(),
            re: tr_total * a.re,
            fe: pf * a.fe,
            ie: (nf - pf) / (nf - 2.0 * pf + 1.0 / a.fe),
            ce: ce_total * a.ce,
            oe: a.oe.iter().zip(&q_total).map(|(h, q)| (1.0 + q) / (1.0 + 1.0 / h)).collect(),
            beta: y.map(|_| a.beta / a.re),
        })
        .collect())
}
