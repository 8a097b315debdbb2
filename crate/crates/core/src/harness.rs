//! Experiment orchestration: typed configuration, Monte Carlo sweeps, the
//! empirical CSV pipeline and the `distreg` command line.
//!
//! Every experiment returns a long-format [`ResultTable`]. Replicates run on the
//! rayon pool; each derives its seed from the base seed and its coordinates, and
//! results are collected in replicate order so output is byte-identical for a
//! given configuration and seed.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    make_partition, sample_dataset, BetaSpec, CovarianceSpec, Dataset, PartitionMode, PartitionPlan, ProblemSpec,
    ScaleDistribution,
};
use crate::error::{Error, Result};
use crate::estimators::{self, distributed_fit, FunctionalTask, WeightChoice};
use crate::fs_efficiency::{self, partition_sweep};
use crate::linalg;
use crate::multishot::{self, AlgorithmConfig, Method, Target};
use crate::rmt::{self, AsymptoticRegime};
use crate::rng;

pub const SEED_ENV: &str = "DISTREG_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    OneshotSweep,
    AsymptoticCurves,
    MultishotCompare,
    WorstcaseScan,
    Empirical,
}

impl ExperimentKind {
    pub fn label(self) -> &'static str {
        match self {
            ExperimentKind::OneshotSweep => "oneshot_sweep",
            ExperimentKind::AsymptoticCurves => "asymptotic_curves",
            ExperimentKind::MultishotCompare => "multishot_compare",
            ExperimentKind::WorstcaseScan => "worstcase_scan",
            ExperimentKind::Empirical => "empirical",
        }
    }
}

/// Feature covariance. `identity` takes its dimension from the problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceConfig {
    Identity,
    Diagonal { entries: Vec<f64> },
    UniformDiagonal { lo: f64, hi: f64, seed: u64 },
}

impl CovarianceConfig {
    pub fn spec(&self, p: usize) -> CovarianceSpec {
        match self {
            CovarianceConfig::Identity => CovarianceSpec::Identity { p },
            CovarianceConfig::Diagonal { entries } => CovarianceSpec::Diagonal { entries: entries.clone() },
            CovarianceConfig::UniformDiagonal { lo, hi, seed } => CovarianceSpec::UniformDiagonal {
                lo: *lo,
                hi: *hi,
                seed: *seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(usize),
    Many(Vec<usize>),
}

impl OneOrMany {
    pub fn values(&self) -> Vec<usize> {
        match self {
            OneOrMany::One(v) => vec![*v],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_p")]
    pub p: OneOrMany,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    #[serde(default = "default_beta")]
    pub beta: BetaSpec,
    #[serde(default = "ScaleDistribution::marchenko_pastur")]
    pub scale: ScaleDistribution,
    #[serde(default = "default_covariance")]
    pub covariance: CovarianceConfig,
    #[serde(default = "default_partition")]
    pub partition: PartitionMode,
}

fn default_n() -> usize {
    10_000
}

fn default_p() -> OneOrMany {
    OneOrMany::Many(vec![20, 100])
}

fn default_sigma2() -> f64 {
    1.0
}

fn default_beta() -> BetaSpec {
    BetaSpec::StandardNormal
}

fn default_covariance() -> CovarianceConfig {
    CovarianceConfig::UniformDiagonal { lo: 1.0, hi: 2.0, seed: 0 }
}

fn default_partition() -> PartitionMode {
    PartitionMode::RandomMinP
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            n: default_n(),
            p: default_p(),
            sigma2: default_sigma2(),
            beta: default_beta(),
            scale: ScaleDistribution::marchenko_pastur(),
            covariance: default_covariance(),
            partition: default_partition(),
        }
    }
}

impl ProblemConfig {
    /// Scale law with a zero uniform lower end raised to the supported floor.
    pub fn scale_law(&self) -> Result<ScaleDistribution> {
        match self.scale {
            ScaleDistribution::Uniform { lo, hi } => ScaleDistribution::uniform_truncated(lo, hi),
            ref g => {
                g.validate()?;
                Ok(g.clone())
            }
        }
    }

    fn spec(&self, plan: PartitionPlan) -> Result<ProblemSpec> {
        ProblemSpec::new(plan, self.sigma2, self.beta.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRule {
    /// Every `k` with `k·p < n` (or `k·γ < 1` for limits).
    Feasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KGrid {
    List(Vec<usize>),
    Rule(KRule),
}

impl KGrid {
    /// Machine counts for a sample of size `n` in dimension `p`.
    pub fn for_sample(&self, n: usize, p: usize) -> Result<Vec<usize>> {
        match self {
            KGrid::Rule(KRule::Feasible) => Ok((1..).take_while(|k| k * p < n).collect()),
            KGrid::List(ks) => {
                for &k in ks {
                    if k == 0 {
                        return Err(Error::Config("k grid entries must be positive".into()));
                    }
                    if k * p > n {
                        return Err(Error::LocalOlsUndefined { n, p, k });
                    }
                }
                Ok(ks.clone())
            }
        }
    }

    /// Machine counts for an aspect ratio `γ`.
    pub fn for_gamma(&self, gamma: f64) -> Vec<usize> {
        match self {
            KGrid::Rule(KRule::Feasible) => (1..).take_while(|&k| (k as f64) * gamma < 1.0).collect(),
            KGrid::List(ks) => ks.clone(),
        }
    }

    fn is_empty(&self) -> bool {
        matches!(self, KGrid::List(ks) if ks.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_k")]
    pub k: KGrid,
    #[serde(default = "default_gamma")]
    pub gamma: Vec<f64>,
    #[serde(default = "default_rho")]
    pub rho: Vec<f64>,
    /// DGD step sizes as fractions of the stability limit; worst-case scale ratios otherwise.
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
}

fn default_k() -> KGrid {
    KGrid::Rule(KRule::Feasible)
}

fn default_gamma() -> Vec<f64> {
    vec![0.01]
}

fn default_rho() -> Vec<f64> {
    vec![10.0, 100.0, 1000.0]
}

fn default_alpha() -> Vec<f64> {
    vec![0.1, 0.5, 0.9, 1.05]
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            gamma: default_gamma(),
            rho: default_rho(),
            alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneshotConfig {
    /// Monte Carlo test points per replicate for the out-of-sample efficiency.
    pub test_points: usize,
}

impl Default for OneshotConfig {
    fn default() -> Self {
        Self { test_points: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultishotConfig {
    pub rounds: usize,
    pub tol: f64,
    pub dane_eta: f64,
    /// Per-sample IterAvg regularizers; machine `i` is penalized by `n_i·ρ`.
    pub iteravg_rho: Vec<f64>,
}

impl Default for MultishotConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            tol: 0.0,
            dane_eta: 1.0,
            iteravg_rho: vec![0.01, 0.1, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorstcaseConfig {
    pub c: Vec<f64>,
    pub tau: f64,
    /// Also simulate the mixture design at `n = problem.n`.
    pub empirical: bool,
}

impl Default for WorstcaseConfig {
    fn default() -> Self {
        Self {
            c: (0..=10).map(|i| i as f64 / 10.0).collect(),
            tau: 1.0,
            empirical: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmpiricalConfig {
    pub input: Option<PathBuf>,
    pub target: String,
    pub one_hot: Vec<String>,
    /// Training (and test) set size; half the complete rows when absent.
    pub n: Option<usize>,
    pub corr_threshold: f64,
}

impl Default for EmpiricalConfig {
    fn default() -> Self {
        Self {
            input: None,
            target: "y".into(),
            one_hot: Vec::new(),
            n: None,
            corr_threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub oneshot: OneshotConfig,
    #[serde(default)]
    pub multishot: MultishotConfig,
    #[serde(default)]
    pub worstcase: WorstcaseConfig,
    #[serde(default)]
    pub empirical: EmpiricalConfig,
}

fn default_replicates() -> usize {
    1
}

impl ExperimentConfig {
    /// Defaults that follow the published simulation protocol of each experiment.
    pub fn default_for(kind: ExperimentKind) -> Self {
        let mut c = Self {
            experiment: kind,
            replicates: 1,
            seed: 0,
            output: None,
            problem: ProblemConfig::default(),
            grid: GridConfig::default(),
            oneshot: OneshotConfig::default(),
            multishot: MultishotConfig::default(),
            worstcase: WorstcaseConfig::default(),
            empirical: EmpiricalConfig::default(),
        };
        match kind {
            ExperimentKind::OneshotSweep => c.replicates = 20,
            ExperimentKind::AsymptoticCurves => {}
            ExperimentKind::MultishotCompare => {
                c.problem.p = OneOrMany::One(100);
                c.problem.covariance = CovarianceConfig::Identity;
                c.problem.partition = PartitionMode::Equal;
                c.grid.k = KGrid::List(vec![20]);
            }
            ExperimentKind::WorstcaseScan => {
                c.problem.p = OneOrMany::One(100);
                c.problem.covariance = CovarianceConfig::Identity;
                c.problem.partition = PartitionMode::Equal;
                c.grid.k = KGrid::List(vec![2, 10, 50]);
                c.grid.alpha = vec![1000.0];
            }
            ExperimentKind::Empirical => {
                c.problem.partition = PartitionMode::Equal;
            }
        }
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        let ps = self.problem.p.values();
        if ps.is_empty() || ps.contains(&0) {
            return bad("problem.p must list positive dimensions");
        }
        if self.problem.n == 0 {
            return bad("problem.n must be positive");
        }
        if self.grid.k.is_empty() || self.grid.gamma.is_empty() || self.grid.rho.is_empty() || self.grid.alpha.is_empty()
        {
            return bad("grids must be nonempty");
        }
        if self.grid.gamma.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return bad("grid.gamma entries must lie in (0, 1)");
        }
        if self.grid.rho.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return bad("grid.rho entries must be nonnegative");
        }
        if self.grid.alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad("grid.alpha entries must be positive");
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.problem.scale_law().map_err(wrap)?;
        for &p in &ps {
            self.problem.covariance.spec(p).diagonal(p).map_err(wrap)?;
            if let BetaSpec::Fixed { values } = &self.problem.beta {
                if values.len() != p {
                    return bad("problem.beta has the wrong length");
                }
            }
        }
        if !(self.problem.sigma2 >= 0.0) {
            return bad("problem.sigma2 must be nonnegative");
        }
        match self.experiment {
            ExperimentKind::MultishotCompare if self.multishot.rounds == 0 => bad("multishot.rounds must be positive"),
            ExperimentKind::MultishotCompare if self.multishot.iteravg_rho.iter().any(|r| !(*r >= 0.0)) => {
                bad("multishot.iteravg_rho entries must be nonnegative")
            }
            ExperimentKind::WorstcaseScan if self.worstcase.c.is_empty() => bad("worstcase.c must be nonempty"),
            ExperimentKind::WorstcaseScan if self.worstcase.c.iter().any(|c| !(0.0..=1.0).contains(c)) => {
                bad("worstcase.c entries must lie in [0, 1]")
            }
            ExperimentKind::Empirical if !(self.empirical.corr_threshold > 0.0 && self.empirical.corr_threshold <= 1.0) => {
                bad("empirical.corr_threshold must lie in (0, 1]")
            }
            _ => Ok(()),
        }
    }
}

/// One long-format result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub method: String,
    /// `name=value` pairs separated by `;`, empty when the method has no parameters.
    pub param: String,
    pub round: Option<usize>,
    pub replicate: Option<usize>,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl ResultTable {
    pub const COLUMNS: [&'static str; 11] = [
        "experiment",
        "n",
        "p",
        "k",
        "method",
        "param",
        "round",
        "replicate",
        "seed",
        "metric",
        "value",
    ];

    pub fn extend(&mut self, other: ResultTable) {
        self.rows.extend(other.rows);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows with the given method and metric.
    pub fn select<'a>(&'a self, method: &'a str, metric: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method && r.metric == metric)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(Self::COLUMNS)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.rows)?;
        Ok(())
    }

    pub fn write<W: Write>(&self, format: Format, mut out: W) -> Result<()> {
        match format {
            Format::Csv => self.write_csv(&mut out),
            Format::Json => {
                self.write_json(&mut out)?;
                writeln!(out)?;
                Ok(())
            }
        }
    }
}

struct RowBuilder {
    experiment: &'static str,
    n: usize,
    p: usize,
    seed: u64,
    replicate: Option<usize>,
}

impl RowBuilder {
    fn row(&self, k: usize, method: &str, param: String, round: Option<usize>, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            experiment: self.experiment.to_string(),
            n: self.n,
            p: self.p,
            k,
            method: method.to_string(),
            param,
            round,
            replicate: self.replicate,
            seed: self.seed,
            metric: metric.to_string(),
            value,
        }
    }
}

/// Replicate tasks run on the pool and come back in index order.
fn collect_replicates<F>(replicates: usize, task: F) -> Result<Vec<ResultRow>>
where
    F: Fn(usize) -> Result<Vec<ResultRow>> + Sync + Send,
{
    let parts = (0..replicates).into_par_iter().map(task).collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn gaussian_points(cov: &[f64], count: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, "test-points", 0);
    let sd: Vec<f64> = cov.iter().map(|v| v.sqrt()).collect();
    let mut m = DMatrix::zeros(cov.len(), count);
    for t in 0..count {
        for j in 0..cov.len() {
            m[(j, t)] = sd[j] * Distribution::<f64>::sample(&StandardNormal, &mut r);
        }
    }
    m
}

fn partition_label(mode: PartitionMode) -> &'static str {
    match mode {
        PartitionMode::Equal => "equal",
        PartitionMode::RandomMinP => "random_min_p",
    }
}

/// `f(γ, G)·Σ 1/f(γ_i, G)` with `f` cached by local sample size.
struct AreCache {
    g: ScaleDistribution,
    p: usize,
    f_global: f64,
    by_size: HashMap<usize, f64>,
}

impl AreCache {
    fn new(g: ScaleDistribution, n: usize, p: usize) -> Result<Self> {
        let f_global = rmt::f_inverse_eta(p as f64 / n as f64, &g)?;
        Ok(Self {
            g,
            p,
            f_global,
            by_size: HashMap::new(),
        })
    }

    fn are(&mut self, sizes: &[usize]) -> Result<f64> {
        if sizes.iter().any(|&s| s <= self.p) {
            return Ok(0.0);
        }
        let mut h = 0.0;
        for &s in sizes {
            let f = match self.by_size.get(&s) {
                Some(&f) => f,
                None => {
                    let f = rmt::f_inverse_eta(self.p as f64 / s as f64, &self.g)?;
                    self.by_size.insert(s, f);
                    f
                }
            };
            h += 1.0 / f;
        }
        Ok(self.f_global * h)
    }
}

fn draw_design(cfg: &ExperimentConfig, p: usize, plan: PartitionPlan, seed: u64) -> Result<Dataset> {
    let spec = cfg.problem.spec(plan)?;
    sample_dataset(&spec, &cfg.problem.scale_law()?, &cfg.problem.covariance.spec(p), seed)
}

/// Finite-sample efficiencies, realized estimation ratios and limits for every
/// `(p, k, replicate)`.
pub fn run_oneshot_sweep(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let n = cfg.problem.n;
    let g = cfg.problem.scale_law()?;
    let mut table = ResultTable::default();
    for p in cfg.problem.p.values() {
        let ks = cfg.grid.k.for_sample(n, p)?;
        let rows = collect_replicates(cfg.replicates, |r| {
            oneshot_replicate(cfg, &g, p, &ks, r).map_err(|e| e.context(format!("oneshot p={p} replicate {r}")))
        })?;
        table.rows.extend(rows);
    }
    Ok(table)
}

fn oneshot_replicate(
    cfg: &ExperimentConfig,
    g: &ScaleDistribution,
    p: usize,
    ks: &[usize],
    r: usize,
) -> Result<Vec<ResultRow>> {
    let n = cfg.problem.n;
    let seed = rng::derive_seed(cfg.seed, &format!("oneshot/p{p}"), r as u64);
    let ds = draw_design(cfg, p, PartitionPlan::new(n, p, vec![n])?, seed)?;
    let beta = ds.beta_true.clone().expect("synthetic data carries its coefficients");
    let plans = ks
        .iter()
        .map(|&k| make_partition(n, p, k, cfg.problem.partition, seed))
        .collect::<Result<Vec<_>>>()?;
    let cov = cfg.problem.covariance.spec(p).diagonal(p)?;
    let tp = gaussian_points(&cov, cfg.oneshot.test_points, seed);
    let sweep = partition_sweep(&ds.x, Some(&ds.y), &plans, Some(&tp))?;
    let global_err = (estimators::ols(&ds.x, &ds.y)? - &beta).norm_squared();

    let mut cache = AreCache::new(g.clone(), n, p)?;
    let gamma = p as f64 / n as f64;
    let b = RowBuilder {
        experiment: ExperimentKind::OneshotSweep.label(),
        n,
        p,
        seed,
        replicate: Some(r),
    };
    let limit_param = format!(
        "partition={};scale={}",
        partition_label(cfg.problem.partition),
        serde_json::to_string(g)?
    );
    let mut out = Vec::new();
    for (plan, row) in plans.iter().zip(&sweep) {
        let k = plan.k();
        let oe = if row.oe.is_empty() {
            f64::NAN
        } else {
            row.oe.iter().sum::<f64>() / row.oe.len() as f64
        };
        for (metric, v) in [("re", row.re), ("fe", row.fe), ("ie", row.ie), ("ce", row.ce), ("oe", oe)] {
            out.push(b.row(k, "finite", String::new(), None, metric, v));
        }
        if let Some(bd) = &row.beta {
            let v = global_err / (bd - &beta).norm_squared();
            out.push(b.row(k, "realized", String::new(), None, "re", v));
        }
        out.push(b.row(k, "limit", limit_param.clone(), None, "re", cache.are(plan.sizes())?));
        if g.is_point_mass() {
            let gammas = plan.gammas();
            let reg = AsymptoticRegime::shared_law(gamma, gammas.clone(), g.clone())?;
            out.push(b.row(k, "limit", limit_param.clone(), None, "fe", rmt::fe_mp(gamma, &gammas)));
            out.push(b.row(k, "limit", limit_param.clone(), None, "ie", rmt::ie_limit(&reg)?));
            out.push(b.row(k, "limit", limit_param.clone(), None, "oe", rmt::oe_limit(&reg, 1.0)?));
        }
    }
    Ok(out)
}

/// Limiting efficiency curves in `k` for each `γ` of the grid.
pub fn run_asymptotic_curves(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let g = cfg.problem.scale_law()?;
    let b = RowBuilder {
        experiment: ExperimentKind::AsymptoticCurves.label(),
        n: 0,
        p: 0,
        seed: cfg.seed,
        replicate: None,
    };
    let mut table = ResultTable::default();
    for &gamma in &cfg.grid.gamma {
        let ks = cfg.grid.k.for_gamma(gamma);
        let k_max = ks.iter().copied().max().unwrap_or(0);
        let param = format!("gamma={gamma}");
        for pt in rmt::mp_curves(gamma, k_max) {
            let k = pt.x as usize;
            if ks.contains(&k) {
                table.rows.push(b.row(k, "mp", param.clone(), None, &pt.quantity, pt.value));
            }
        }
        if !g.is_point_mass() {
            for &k in &ks {
                let v = if (k as f64) * gamma < 1.0 {
                    rmt::are_limit(&AsymptoticRegime::equal_split(gamma, k, g.clone())?)?
                } else {
                    0.0
                };
                table.rows.push(b.row(k, "elliptical", param.clone(), None, "are", v));
            }
        }
    }
    Ok(table)
}

/// Estimation efficiency against global OLS per method and round, with the one-shot
/// baseline and a gradient-descent step-size scan.
pub fn run_multishot_compare(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let n = cfg.problem.n;
    let mut table = ResultTable::default();
    for p in cfg.problem.p.values() {
        for k in cfg.grid.k.for_sample(n, p)? {
            let rows = collect_replicates(cfg.replicates, |r| {
                multishot_replicate(cfg, p, k, r).map_err(|e| e.context(format!("multishot p={p} k={k} replicate {r}")))
            })?;
            table.rows.extend(rows);
        }
    }
    Ok(table)
}

fn multishot_replicate(cfg: &ExperimentConfig, p: usize, k: usize, r: usize) -> Result<Vec<ResultRow>> {
    let n = cfg.problem.n;
    let seed = rng::derive_seed(cfg.seed, &format!("multishot/p{p}/k{k}"), r as u64);
    let plan = make_partition(n, p, k, cfg.problem.partition, seed)?;
    let ds = draw_design(cfg, p, plan, seed)?;
    let beta = ds.beta_true.clone().expect("synthetic data carries its coefficients");
    let global_err = (multishot::global_ols(&ds)? - &beta).norm_squared();
    let b = RowBuilder {
        experiment: ExperimentKind::MultishotCompare.label(),
        n,
        p,
        seed,
        replicate: Some(r),
    };
    let mut out = Vec::new();

    let one_shot = distributed_fit(&ds, &WeightChoice::Optimal(FunctionalTask::Estimation))?;
    out.push(b.row(k, "oneshot", String::new(), None, "re", global_err / (&one_shot.beta_hat - &beta).norm_squared()));

    let eig = nalgebra::SymmetricEigen::new(linalg::gram(&ds.x)).eigenvalues;
    let (lambda_min, lambda_max) = (eig.min(), eig.max());
    let mut methods: Vec<(Method, String, Option<f64>)> = Vec::new();
    for &a in &cfg.grid.alpha {
        // the step is a fraction of 2/L with L = (2/k)·λ_max(XᵀX)
        let rate = (1.0 - 2.0 * a).abs().max((1.0 - 2.0 * a * lambda_min / lambda_max).abs());
        methods.push((Method::Dgd { alpha: a * k as f64 / lambda_max }, format!("alpha={a}"), Some(rate)));
    }
    for &rho in &cfg.grid.rho {
        methods.push((Method::Admm { rho }, format!("rho={rho}"), None));
        let eta = cfg.multishot.dane_eta;
        let rate = linalg::spectral_radius(&multishot::dane_recursion_matrix(&ds, eta, rho)?);
        methods.push((Method::Dane { eta, rho }, format!("eta={eta};rho={rho}"), Some(rate)));
    }
    for &rho in &cfg.multishot.iteravg_rho {
        let rhos = vec![rho; k];
        let rate = multishot::iteravg_fixed_point(&ds, &rhos)?.contraction;
        methods.push((Method::IterAvg { rhos }, format!("rho={rho}"), Some(rate)));
    }

    for (method, param, rate) in methods {
        let mut ac = AlgorithmConfig::new(method.clone(), cfg.multishot.rounds);
        ac.tol = cfg.multishot.tol;
        let (trace, diverged) = match multishot::run(&ac, &ds, Target::TrueBeta) {
            Ok(t) => (t, false),
            Err(Error::Diverged { trace, .. }) => (*trace, true),
            Err(e) => return Err(e),
        };
        for row in &trace.rows {
            let e2 = row.err_to_target * row.err_to_target;
            out.push(b.row(k, method.label(), param.clone(), Some(row.round), "re", global_err / e2));
        }
        out.push(b.row(k, method.label(), param.clone(), None, "diverged", f64::from(u8::from(diverged))));
        out.push(b.row(k, method.label(), param.clone(), None, "converged", f64::from(u8::from(trace.converged))));
        if let Some(rate) = rate {
            out.push(b.row(k, method.label(), param.clone(), None, "contraction", rate));
        }
    }
    Ok(out)
}

/// Worst-case two-point mixture limits over `(k, γ, c, α)`, optionally against simulation.
pub fn run_worstcase_scan(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let n = cfg.problem.n;
    let tau = cfg.worstcase.tau;
    let mut table = ResultTable::default();
    let mut cells = Vec::new();
    for &gamma in &cfg.grid.gamma {
        for k in cfg.grid.k.for_gamma(gamma) {
            for &c in &cfg.worstcase.c {
                for &alpha in &cfg.grid.alpha {
                    cells.push((gamma, k, c, alpha));
                }
            }
        }
    }
    for &(gamma, k, c, alpha) in &cells {
        let param = format!("gamma={gamma};c={c};alpha={alpha};tau={tau}");
        let v = rmt::worst_case_are(k, gamma, c, alpha, tau)?;
        let b = RowBuilder {
            experiment: ExperimentKind::WorstcaseScan.label(),
            n: 0,
            p: 0,
            seed: cfg.seed,
            replicate: None,
        };
        table.rows.push(b.row(k, "limit", param, None, "re", v));
    }
    if cfg.worstcase.empirical {
        for (ci, &(gamma, k, c, alpha)) in cells.iter().enumerate() {
            let p = (gamma * n as f64).round() as usize;
            if p == 0 || k * p >= n {
                continue;
            }
            let param = format!("gamma={gamma};c={c};alpha={alpha};tau={tau}");
            let rows = collect_replicates(cfg.replicates, |r| {
                let seed = rng::derive_seed(cfg.seed, &format!("worstcase/{ci}"), r as u64);
                let g = ScaleDistribution::worst_case_mixture(c, alpha, tau)?;
                let spec = ProblemSpec::new(PartitionPlan::new(n, p, vec![n])?, cfg.problem.sigma2, cfg.problem.beta.clone())?;
                let ds = sample_dataset(&spec, &g, &cfg.problem.covariance.spec(p), seed)?;
                let plan = make_partition(n, p, k, cfg.problem.partition, seed)?;
                let sweep = partition_sweep(&ds.x, None, &[plan], None)?;
                let b = RowBuilder {
                    experiment: ExperimentKind::WorstcaseScan.label(),
                    n,
                    p,
                    seed,
                    replicate: Some(r),
                };
                Ok(vec![b.row(k, "finite", param.clone(), None, "re", sweep[0].re)])
            })?;
            table.rows.extend(rows);
        }
    }
    Ok(table)
}

/// Cleaned numeric table from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericFrame {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || ["na", "nan", "null", "?"].contains(&t.to_ascii_lowercase().as_str())
}

/// Read a CSV, drop incomplete rows, and expand the listed categorical columns
/// into reference-coded indicators (the first level in sorted order is dropped).
pub fn load_frame(path: &Path, target: &str, one_hot: &[String]) -> Result<NumericFrame> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::Config(format!("target column '{target}' not found")))?;
    for name in one_hot {
        if !headers.contains(name) {
            return Err(Error::Config(format!("one-hot column '{name}' not found")));
        }
        if name == target {
            return Err(Error::Config("the target cannot be one-hot encoded".into()));
        }
    }
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Config(format!("row with {} fields, header has {}", rec.len(), headers.len())));
        }
        if rec.iter().any(is_missing) {
            continue;
        }
        records.push(rec.iter().map(|s| s.trim().to_string()).collect::<Vec<_>>());
    }
    if records.is_empty() {
        return Err(Error::Config("no complete rows".into()));
    }

    let parse_col = |j: usize| -> Result<Vec<f64>> {
        records
            .iter()
            .map(|r| {
                r[j].parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "column '{}' is non-numeric ('{}'); list it under one_hot",
                        headers[j], r[j]
                    ))
                })
            })
            .collect()
    };
    let y = DVector::from_vec(parse_col(target_idx)?);
    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (j, name) in headers.iter().enumerate() {
        if j == target_idx {
            continue;
        }
        if one_hot.contains(name) {
            let levels: BTreeSet<&str> = records.iter().map(|r| r[j].as_str()).collect();
            for level in levels.iter().skip(1) {
                names.push(format!("{name}={level}"));
                cols.push(records.iter().map(|r| f64::from(u8::from(r[j] == *level))).collect());
            }
        } else {
            names.push(name.clone());
            cols.push(parse_col(j)?);
        }
    }
    let m = records.len();
    let x = DMatrix::from_fn(m, cols.len(), |i, j| cols[j][i]);
    Ok(NumericFrame { names, x, y })
}

/// Greedy pruning: scan pairs `(i, j)`, `i < j`, in index order and drop `j` when
/// both are still kept and `|corr| > threshold`. Returns the kept column indices.
pub fn correlation_prune(x: &DMatrix<f64>, threshold: f64) -> Vec<usize> {
    let (m, p) = x.shape();
    let mut centered = x.clone();
    for j in 0..p {
        let mean = x.column(j).sum() / m as f64;
        centered.column_mut(j).add_scalar_mut(-mean);
    }
    let norms: Vec<f64> = (0..p).map(|j| centered.column(j).norm()).collect();
    let mut keep = vec![true; p];
    for i in 0..p {
        if !keep[i] {
            continue;
        }
        for j in i + 1..p {
            if !keep[j] {
                continue;
            }
            let r = centered.column(i).dot(&centered.column(j)) / (norms[i] * norms[j]);
            if r.abs() > threshold {
                keep[j] = false;
            }
        }
    }
    (0..p).filter(|&j| keep[j]).collect()
}

/// Realized out-of-sample efficiency on a real table, following the train/test protocol.
pub fn run_empirical(cfg: &ExperimentConfig, csv_path: &Path) -> Result<ResultTable> {
    cfg.validate()?;
    let frame = load_frame(csv_path, &cfg.empirical.target, &cfg.empirical.one_hot)?;
    let kept = correlation_prune(&frame.x, cfg.empirical.corr_threshold);
    let x = frame.x.select_columns(&kept);
    let (m, p) = x.shape();
    let n = cfg.empirical.n.unwrap_or(m / 2);
    if n == 0 || 2 * n > m {
        return Err(Error::Config(format!("need 2n ≤ {m} complete rows for train and test, n = {n}")));
    }
    let ks: Vec<usize> = match &cfg.grid.k {
        KGrid::Rule(KRule::Feasible) => (1..).take_while(|k| k * p <= n).collect(),
        grid => grid.for_sample(n, p)?,
    };
    if ks.is_empty() {
        return Err(Error::Config(format!("n = {n} is too small for p = {p} columns")));
    }

    let pipeline = RowBuilder {
        experiment: ExperimentKind::Empirical.label(),
        n,
        p,
        seed: cfg.seed,
        replicate: None,
    };
    let mut table = ResultTable::default();
    table.rows.push(pipeline.row(0, "pipeline", String::new(), None, "rows_complete", m as f64));
    table.rows.push(pipeline.row(0, "pipeline", String::new(), None, "columns_kept", p as f64));

    let rows = collect_replicates(cfg.replicates, |r| {
        let seed = rng::derive_seed(cfg.seed, "empirical", r as u64);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng::stream(seed, "split", 0));
        let x_tr = x.select_rows(&order[..n]);
        let y_tr = frame.y.select_rows(&order[..n]);
        let x_te = x.select_rows(&order[n..2 * n]);
        let y_te = frame.y.select_rows(&order[n..2 * n]);
        let global = estimators::ols(&x_tr, &y_tr)?;
        let global_err = (&y_te - &x_te * &global).norm_squared();
        let b = RowBuilder {
            experiment: ExperimentKind::Empirical.label(),
            n,
            p,
            seed,
            replicate: Some(r),
        };
        let gamma = p as f64 / n as f64;
        let mut out = Vec::new();
        for &k in &ks {
            let plan = make_partition(n, p, k, cfg.problem.partition, seed)?;
            let ds = Dataset::new(x_tr.clone(), y_tr.clone(), 1.0, plan)?;
            let fit = distributed_fit(&ds, &WeightChoice::Optimal(FunctionalTask::RegressionFunction))
                .map_err(|e| e.context(format!("empirical k={k}")))?;
            let dist_err = (&y_te - &x_te * &fit.beta_hat).norm_squared();
            out.push(b.row(k, "empirical", String::new(), None, "oe", global_err / dist_err));
            out.push(b.row(k, "limit", String::new(), None, "oe", rmt::oe_mp(gamma, k as f64)));
        }
        Ok(out)
    })?;
    table.rows.extend(rows);
    Ok(table)
}

/// Outcome of one self-test check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Fast invariant suite behind `distreg selftest`.
pub fn selftest(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut push = |name: &'static str, passed: bool, detail: String| checks.push(Check { name, passed, detail });

    let (n, p) = (400, 8);
    let cov = CovarianceSpec::Identity { p };
    let mp = ScaleDistribution::marchenko_pastur();
    let spec = ProblemSpec::new(make_partition(n, p, 4, PartitionMode::RandomMinP, seed)?, 1.0, BetaSpec::StandardNormal)?;
    let ds = sample_dataset(&spec, &mp, &cov, seed)?;
    let blocks: Vec<DMatrix<f64>> = ds.blocks().into_iter().map(|(x, _)| x).collect();

    let re = fs_efficiency::re_finite(&blocks)?;
    push("efficiency bound", re <= 1.0 + 1e-8 && re > 0.0, format!("re = {re}"));

    let same = vec![blocks[0].clone(); 3];
    let tight = fs_efficiency::re_finite(&same)?;
    push("identical blocks tight", (tight - 1.0).abs() < 1e-10, format!("re = {tight}"));

    let dof = fs_efficiency::dof_residual(&blocks)?;
    push("residual dof", dof == n - 4 * p, format!("dof = {dof}"));

    let gamma = 0.3;
    let e = rmt::solve_e(gamma, &mp)?.e;
    push("MP fixed point", (e - 1.0 / (1.0 - gamma)).abs() < 1e-12, format!("e = {e}"));

    let worst = (rmt::worst_case_are(2, 0.01, 0.3, 1e3, 1.0)? - rmt::worst_case_are(2, 0.01, 0.3, 1e3, 1e-3)?).abs();
    push("worst case scale invariance", worst < 1e-10, format!("diff = {worst:e}"));

    let trace = multishot::run(&AlgorithmConfig::new(Method::Admm { rho: 50.0 }, 3000), &ds, Target::GlobalOls)?;
    let err = trace.last().err_to_target;
    push("ADMM reaches global OLS", err < 1e-6, format!("error = {err:e}"));

    let star = multishot::iteravg_fixed_point(&ds, &[0.0; 4])?.beta_star;
    let naive = distributed_fit(&ds, &WeightChoice::Naive)?.beta_hat;
    let gap = (star - naive).amax();
    push("IterAvg limit at zero regularization", gap < 1e-8, format!("gap = {gap:e}"));

    Ok(checks)
}

#[derive(Debug, Parser)]
#[command(name = "distreg", version, about = "Distributed linear regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed; overrides DISTREG_SEED and the configuration.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as `y,x1..xp` CSV with a JSON sidecar.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-sample efficiency sweep over machine counts.
    Oneshot {
        #[command(flatten)]
        common: Common,
    },
    /// Limiting efficiency curves.
    Asymptotic {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        gamma: Vec<f64>,
        #[arg(long)]
        kmax: Option<usize>,
    },
    /// Iterative methods against the one-shot estimator.
    Multishot {
        #[command(flatten)]
        common: Common,
    },
    /// Worst-case scale mixtures.
    Worstcase {
        #[command(flatten)]
        common: Common,
    },
    /// Train/test pipeline on a CSV table.
    Empirical {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Run the fast invariant suite.
    Selftest {
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
    },
}

/// Configuration file (or the defaults for `kind`) with seed and output overrides applied.
fn load_config(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_for(kind),
    };
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    Ok(cfg)
}

fn resolve_config(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let cfg = load_config(common, kind)?;
    if cfg.experiment != kind {
        return Err(Error::Config(format!(
            "configuration is for '{}', not '{}'",
            cfg.experiment.label(),
            kind.label()
        )));
    }
    Ok(cfg)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn emit(table: &ResultTable, format: Format, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            table.write(format, &mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            table.write(format, stdout.lock())?;
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<i32> {
    let (table, cfg, format) = match cli.command {
        Command::Selftest { seed } => {
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let checks = selftest(seed)?;
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            return Ok(if ok { 0 } else { 3 });
        }
        Command::Gen { common } => {
            let cfg = load_config(&common, ExperimentKind::OneshotSweep)?;
            let out = cfg
                .output
                .clone()
                .ok_or_else(|| Error::Config("gen needs --out PATH".into()))?;
            generate(&cfg, &out)?;
            return Ok(0);
        }
        Command::Oneshot { common } => {
            let cfg = resolve_config(&common, ExperimentKind::OneshotSweep)?;
            (run_oneshot_sweep(&cfg)?, cfg, common.format)
        }
        Command::Asymptotic { common, gamma, kmax } => {
            let mut cfg = resolve_config(&common, ExperimentKind::AsymptoticCurves)?;
            if !gamma.is_empty() {
                cfg.grid.gamma = gamma;
            }
            if let Some(kmax) = kmax {
                cfg.grid.k = KGrid::List((1..=kmax).collect());
            }
            (run_asymptotic_curves(&cfg)?, cfg, common.format)
        }
        Command::Multishot { common } => {
            let cfg = resolve_config(&common, ExperimentKind::MultishotCompare)?;
            (run_multishot_compare(&cfg)?, cfg, common.format)
        }
        Command::Worstcase { common } => {
            let cfg = resolve_config(&common, ExperimentKind::WorstcaseScan)?;
            (run_worstcase_scan(&cfg)?, cfg, common.format)
        }
        Command::Empirical { common, input } => {
            let cfg = resolve_config(&common, ExperimentKind::Empirical)?;
            let path = input
                .or_else(|| cfg.empirical.input.clone())
                .ok_or_else(|| Error::Config("empirical needs --input PATH or empirical.input".into()))?;
            (run_empirical(&cfg, &path)?, cfg, common.format)
        }
    };
    emit(&table, format, cfg.output.as_deref())?;
    Ok(0)
}

/// Draw the configured synthetic dataset (first `p`, first `k` of the grid).
pub fn generate(cfg: &ExperimentConfig, csv_path: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.problem.n;
    let p = cfg.problem.p.values()[0];
    let k = cfg.grid.k.for_sample(n, p)?.first().copied().unwrap_or(1);
    let plan = make_partition(n, p, k, cfg.problem.partition, cfg.seed)?;
    let ds = draw_design(cfg, p, plan, cfg.seed)?;
    ds.write_csv(csv_path, &csv_path.with_extension("json"))?;
    Ok(ds)
}

/// Parse `argv` (program name first), run the command and return the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_validate_and_round_trip() {
        for kind in [
            ExperimentKind::OneshotSweep,
            ExperimentKind::AsymptoticCurves,
            ExperimentKind::MultishotCompare,
            ExperimentKind::WorstcaseScan,
            ExperimentKind::Empirical,
        ] {
            let c = ExperimentConfig::default_for(kind);
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn config_parses_sections() {
        let c = ExperimentConfig::from_toml(
            r#"
experiment = "oneshot_sweep"
replicates = 3
seed = 9

[problem]
n = 500
p = 10
scale = { kind = "uniform", lo = 0.0, hi = 1.0 }
covariance = { kind = "identity" }

[grid]
k = [1, 2, 5]
"#,
        )
        .unwrap();
        assert_eq!(c.problem.p.values(), vec![10]);
        assert_eq!(c.grid.k, KGrid::List(vec![1, 2, 5]));
        assert!(matches!(c.problem.scale_law().unwrap(), ScaleDistribution::Uniform { lo, .. } if lo > 0.0));
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in [
            "experiment = \"oneshot_sweep\"\nreplicates = 0\n",
            "experiment = \"oneshot_sweep\"\n[grid]\nk = []\n",
            "experiment = \"oneshot_sweep\"\n[grid]\ngamma = [1.5]\n",
            "experiment = \"oneshot_sweep\"\nbogus = 1\n",
            "experiment = \"nope\"\n",
        ] {
            let e = ExperimentConfig::from_toml(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn feasible_grid_is_strict() {
        assert_eq!(KGrid::Rule(KRule::Feasible).for_sample(100, 10).unwrap(), (1..10).collect::<Vec<_>>());
        assert_eq!(KGrid::Rule(KRule::Feasible).for_gamma(0.25), vec![1, 2, 3]);
        assert!(KGrid::List(vec![11]).for_sample(100, 10).is_err());
    }

    #[test]
    fn small_sweep_has_unit_efficiency_at_one_machine() {
        let mut c = ExperimentConfig::default_for(ExperimentKind::OneshotSweep);
        c.problem.n = 300;
        c.problem.p = OneOrMany::One(5);
        c.replicates = 2;
        c.grid.k = KGrid::List(vec![1, 3]);
        let t = run_oneshot_sweep(&c).unwrap();
        for row in t.rows.iter().filter(|r| r.k == 1 && r.method != "realized") {
            assert!((row.value - 1.0).abs() < 1e-10, "{row:?}");
        }
        assert!(t.rows.iter().all(|r| r.seed != 0 || c.seed == 0));
    }

    #[test]
    fn asymptotic_curves_match_closed_forms() {
        let mut c = ExperimentConfig::default_for(ExperimentKind::AsymptoticCurves);
        c.grid.k = KGrid::List(vec![1, 10, 99]);
        let t = run_asymptotic_curves(&c).unwrap();
        let are: Vec<f64> = t.select("mp", "are").map(|r| r.value).collect();
        assert_eq!(are.len(), 3);
        assert!((are[1] - (100.0 - 10.0) / 99.0).abs() < 1e-12);
    }

    #[test]
    fn pruning_drops_later_duplicate() {
        let x = DMatrix::from_fn(50, 3, |i, j| match j {
            0 => i as f64,
            1 => ((i * 7) % 11) as f64,
            _ => 2.0 * i as f64 + 1.0,
        });
        assert_eq!(correlation_prune(&x, 0.8), vec![0, 1]);
    }

    #[test]
    fn csv_output_has_fixed_header() {
        let t = ResultTable {
            rows: vec![ResultRow {
                experiment: "oneshot_sweep".into(),
                n: 10,
                p: 2,
                k: 1,
                method: "finite".into(),
                param: String::new(),
                round: None,
                replicate: Some(0),
                seed: 4,
                metric: "re".into(),
                value: 1.0,
            }],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "experiment,n,p,k,method,param,round,replicate,seed,metric,value\noneshot_sweep,10,2,1,finite,,,0,4,re,1.0\n"
        );
    }

    #[test]
    fn selftest_passes() {
        for c in selftest(1).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
