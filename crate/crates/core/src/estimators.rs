//! Local and global least squares, and one-shot weighted averaging.
//!
//! Every task is a linear functional `L_A = Aβ + Z` with `Cov(Z) = hσ²I_d`
//! and `Cov(ε, Z) = N`. Only `AᵀA`, `d`, `h` and the cross term enter the
//! mean squared errors, so [`TaskGeometry`] stores exactly those.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor, DEFAULT_COND_LIMIT};

const WEIGHT_SUM_TOL: f64 = 1e-10;

/// Learning task, identified by its `(A, h, N)` triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionalTask {
    /// `A = I_p`, `h = 0`, `N = 0`.
    Estimation,
    /// `A = X`, `h = 0`, `N = 0`.
    RegressionFunction,
    /// `A = E_jᵀ`, `h = 0`, `N = 0`, with `j` in `1..=p`.
    CoordinateCi { j: usize },
    /// `A = x_tᵀ`, `h = 1`, `N = 0`. `g` is the test point's elliptical scale.
    TestPoint {
        x: Vec<f64>,
        #[serde(default = "unit_scale")]
        g: f64,
    },
    /// `A = X`, `h = 1`, `N = σ²I_n`.
    InSample,
}

fn unit_scale() -> f64 {
    1.0
}

impl FunctionalTask {
    pub fn test_point(x: Vec<f64>) -> Self {
        FunctionalTask::TestPoint { x, g: 1.0 }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FunctionalTask::Estimation => "estimation",
            FunctionalTask::RegressionFunction => "regression_function",
            FunctionalTask::CoordinateCi { .. } => "coordinate_ci",
            FunctionalTask::TestPoint { .. } => "test_point",
            FunctionalTask::InSample => "in_sample",
        }
    }

    /// Reduce the task to the quantities that enter the MSE formulas.
    pub fn geometry(&self, x: &DMatrix<f64>, xtx: Option<&DMatrix<f64>>) -> Result<TaskGeometry> {
        let (n, p) = x.shape();
        let full_gram = || xtx.cloned().unwrap_or_else(|| linalg::gram(x));
        let g = match self {
            FunctionalTask::Estimation => TaskGeometry {
                ata: DMatrix::identity(p, p),
                d: p,
                h: 0.0,
                in_sample: false,
            },
            FunctionalTask::RegressionFunction => TaskGeometry {
                ata: full_gram(),
                d: n,
                h: 0.0,
                in_sample: false,
            },
            FunctionalTask::CoordinateCi { j } => {
                if *j == 0 || *j > p {
                    return Err(Error::InvalidInput(format!("coordinate {j} outside 1..={p}")));
                }
                let mut ata = DMatrix::zeros(p, p);
                ata[(*j - 1, *j - 1)] = 1.0;
                TaskGeometry { ata, d: 1, h: 0.0, in_sample: false }
            }
            FunctionalTask::TestPoint { x: xt, .. } => {
                if xt.len() != p {
                    return Err(Error::InvalidInput(format!(
                        "test point has {} entries, expected p = {p}",
                        xt.len()
                    )));
                }
                let v = DVector::from_column_slice(xt);
                TaskGeometry {
                    ata: &v * v.transpose(),
                    d: 1,
                    h: 1.0,
                    in_sample: false,
                }
            }
            FunctionalTask::InSample => TaskGeometry {
                ata: full_gram(),
                d: n,
                h: 1.0,
                in_sample: true,
            },
        };
        Ok(g)
    }
}

/// `AᵀA`, output dimension `d`, noise scale `h`, and whether `N = σ²I_n`.
#[derive(Debug, Clone)]
pub struct TaskGeometry {
    pub ata: DMatrix<f64>,
    pub d: usize,
    pub h: f64,
    pub in_sample: bool,
}

/// Combination weights; they must sum to one. Negative entries are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidInput("weight vector is empty".into()));
        }
        let s: f64 = w.iter().sum();
        if !s.is_finite() || (s - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidInput(format!("weights sum to {s}, not 1")));
        }
        Ok(Self(w))
    }

    pub fn naive(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Gram matrix of one machine (or of the pooled data) with its factor and inverse.
#[derive(Debug, Clone)]
pub struct LocalGram {
    pub gram: DMatrix<f64>,
    pub factor: SpdFactor,
    pub inverse: DMatrix<f64>,
}

impl LocalGram {
    pub fn new(gram: DMatrix<f64>) -> Result<Self> {
        let factor = SpdFactor::new(gram.clone())?;
        let inverse = factor.inverse();
        Ok(Self { gram, factor, inverse })
    }

    /// `tr(G⁻¹ M)`.
    pub fn trace_inv(&self, m: &DMatrix<f64>) -> f64 {
        linalg::trace_of_product(&self.inverse, m)
    }
}

/// Per-machine Gram matrices together with the pooled one.
#[derive(Debug, Clone)]
pub struct GramSet {
    pub blocks: Vec<LocalGram>,
    pub total: LocalGram,
    pub sizes: Vec<usize>,
}

impl GramSet {
    pub fn from_blocks(blocks: &[DMatrix<f64>]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidInput("need at least one block".into()));
        }
        let p = blocks[0].ncols();
        if blocks.iter().any(|b| b.ncols() != p) {
            return Err(Error::InvalidInput("blocks disagree on the number of columns".into()));
        }
        let grams: Vec<DMatrix<f64>> = blocks.par_iter().map(linalg::gram).collect();
        let sizes = blocks.iter().map(|b| b.nrows()).collect();
        Self::from_grams(grams, sizes)
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let grams: Vec<DMatrix<f64>> = (0..ds.k())
            .into_par_iter()
            .map(|i| linalg::gram(&ds.block(i).0))
            .collect();
        Self::from_grams(grams, ds.partition.sizes().to_vec())
    }

    pub fn from_grams(grams: Vec<DMatrix<f64>>, sizes: Vec<usize>) -> Result<Self> {
        let p = grams[0].nrows();
        let mut total = DMatrix::zeros(p, p);
        for g in &grams {
            total += g;
        }
        let blocks = grams
            .into_par_iter()
            .enumerate()
            .map(|(i, g)| LocalGram::new(g).map_err(|e| e.on_machine(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            total: LocalGram::new(total)?,
            sizes,
        })
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn p(&self) -> usize {
        self.total.gram.nrows()
    }

    pub fn n(&self) -> usize {
        self.sizes.iter().sum()
    }
}

/// Ordinary least squares by column-pivoted QR.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    ols_with_limit(x, y, DEFAULT_COND_LIMIT)
}

pub fn ols_with_limit(x: &DMatrix<f64>, y: &DVector<f64>, cond_limit: f64) -> Result<DVector<f64>> {
    linalg::least_squares_qr(x, y, cond_limit)
}

/// `(XᵀX + λI)⁻¹(XᵀY + λ·center)`.
pub fn ridge(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, center: &DVector<f64>) -> Result<DVector<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("ridge penalty {lambda} must be nonnegative")));
    }
    if center.len() != x.ncols() {
        return Err(Error::InvalidInput("ridge center has the wrong length".into()));
    }
    if lambda == 0.0 {
        return ols(x, y);
    }
    let mut g = linalg::gram(x);
    for i in 0..g.nrows() {
        g[(i, i)] += lambda;
    }
    let rhs = x.transpose() * y + center * lambda;
    // only a nonpositive λ can fail here
    let factor = SpdFactor::with_limit(g, f64::INFINITY)?;
    Ok(factor.solve_vec(&rhs))
}

/// `(a_i, b_i)` with `a_i = tr[(X_iᵀX_i)⁻¹AᵀA]` and `b_i = tr(A(X_iᵀX_i)⁻¹X_iᵀN_i)/σ²`.
pub fn weight_coefficients(geom: &TaskGeometry, grams: &GramSet) -> (Vec<f64>, Vec<f64>) {
    grams
        .blocks
        .iter()
        .map(|b| {
            let a = b.trace_inv(&geom.ata);
            // For N = σ²I_n only the machine's own rows correlate with Z = ε,
            // leaving tr((X_iᵀX_i)⁻¹ X_iᵀX_i).
            let c = if geom.in_sample { b.trace_inv(&b.gram) } else { 0.0 };
            (a, c)
        })
        .unzip()
}

/// Minimizer of `Σ (a_i/2)w_i² − b_i w_i` subject to `Σ w_i = 1`.
pub fn weights_from_coefficients(a: &[f64], b: &[f64]) -> Result<WeightVector> {
    if let Some((i, &v)) = a.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(Error::NonPositiveTrace { machine: i, value: v });
    }
    let inv_sum: f64 = a.iter().map(|v| 1.0 / v).sum();
    let ratio_sum: f64 = a.iter().zip(b).map(|(ai, bi)| bi / ai).sum();
    let lambda = (1.0 - ratio_sum) / inv_sum;
    let w: Vec<f64> = a.iter().zip(b).map(|(ai, bi)| (lambda + bi) / ai).collect();
    WeightVector::new(w)
}

/// Optimal one-shot weights for `task` on the dataset's partition.
pub fn optimal_weights(task: &FunctionalTask, ds: &Dataset) -> Result<WeightVector> {
    let grams = GramSet::from_dataset(ds)?;
    optimal_weights_with(task, ds, &grams)
}

pub fn optimal_weights_with(task: &FunctionalTask, ds: &Dataset, grams: &GramSet) -> Result<WeightVector> {
    let geom = task.geometry(&ds.x, Some(&grams.total.gram))?;
    let (a, b) = weight_coefficients(&geom, grams);
    weights_from_coefficients(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightChoice {
    Given(WeightVector),
    Optimal(FunctionalTask),
    Naive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub local: Vec<DVector<f64>>,
    pub weights: WeightVector,
}

/// Local OLS on every machine, combined by a weighted sum in machine order.
pub fn distributed_fit(ds: &Dataset, choice: &WeightChoice) -> Result<FitResult> {
    if !ds.partition.locally_identified() {
        return Err(Error::LocalOlsUndefined {
            n: ds.n(),
            p: ds.p(),
            k: ds.k(),
        });
    }
    let local = (0..ds.k())
        .into_par_iter()
        .map(|i| {
            let (x, y) = ds.block(i);
            ols(&x.clone_owned(), &y.clone_owned()).map_err(|e| e.on_machine(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = match choice {
        WeightChoice::Given(w) => {
            if w.len() != ds.k() {
                return Err(Error::InvalidInput(format!(
                    "{} weights for {} machines",
                    w.len(),
                    ds.k()
                )));
            }
            w.clone()
        }
        WeightChoice::Naive => WeightVector::naive(ds.k()),
        WeightChoice::Optimal(task) => optimal_weights(task, ds)?,
    };
    let beta_hat = combine(&local, &weights);
    Ok(FitResult { beta_hat, local, weights })
}

/// `Σ w_i β_i`, accumulated in index order.
pub fn combine(local: &[DVector<f64>], weights: &WeightVector) -> DVector<f64> {
    let mut acc = DVector::zeros(local[0].len());
    for (b, &w) in local.iter().zip(weights.as_slice()) {
        acc.axpy(w, b, 1.0);
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorSpec {
    GlobalOls,
    Distributed(WeightVector),
}

/// Exact expected loss `E‖L_A − Aβ̂‖²` conditional on the design.
pub fn mse_general(task: &FunctionalTask, estimator: &EstimatorSpec, ds: &Dataset) -> Result<f64> {
    let grams = GramSet::from_dataset(ds)?;
    mse_with(task, estimator, ds, &grams)
}

pub fn mse_with(task: &FunctionalTask, estimator: &EstimatorSpec, ds: &Dataset, grams: &GramSet) -> Result<f64> {
    let geom = task.geometry(&ds.x, Some(&grams.total.gram))?;
    let noise = geom.h * geom.d as f64;
    let value = match estimator {
        EstimatorSpec::GlobalOls => {
            let a = grams.total.trace_inv(&geom.ata);
            let b = if geom.in_sample {
                grams.total.trace_inv(&grams.total.gram)
            } else {
                0.0
            };
            a - 2.0 * b + noise
        }
        EstimatorSpec::Distributed(w) => {
            if w.len() != grams.k() {
                return Err(Error::InvalidInput("weight count differs from machine count".into()));
            }
            let (a, b) = weight_coefficients(&geom, grams);
            let mut s = 0.0;
            for ((wi, ai), bi) in w.as_slice().iter().zip(&a).zip(&b) {
                s += wi * wi * ai - 2.0 * wi * bi;
            }
            s + noise
        }
    };
    Ok(ds.sigma2 * value)
}

/// Realized loss of a point estimate against a known truth for the task.
pub fn realized_loss(task: &FunctionalTask, ds: &Dataset, beta_hat: &DVector<f64>, beta: &DVector<f64>) -> Result<f64> {
    let diff = beta - beta_hat;
    let v = match task {
        FunctionalTask::Estimation => diff.norm_squared(),
        FunctionalTask::RegressionFunction => (&ds.x * &diff).norm_squared(),
        FunctionalTask::CoordinateCi { j } => diff
            .get(j.wrapping_sub(1))
            .map(|d| d * d)
            .ok_or_else(|| Error::InvalidInput(format!("coordinate {j} out of range")))?,
        FunctionalTask::InSample => (&ds.y - &ds.x * beta_hat).norm_squared(),
        FunctionalTask::TestPoint { .. } => {
            return Err(Error::InvalidInput("test-point loss needs a fresh response".into()))
        }
    };
    Ok(v)
}
