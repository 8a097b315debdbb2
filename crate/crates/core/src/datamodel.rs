//! Problem specifications, scale laws, partitions and seeded synthetic data.
//!
//! Synthetic designs follow the elliptical model `X = Γ^{1/2} Z Σ^{1/2}`:
//! `Z` has iid standard normal entries, `Γ` is diagonal with iid scales drawn
//! from a [`ScaleDistribution`] (then held fixed for the dataset), and `Σ` is
//! diagonal. The Marchenko–Pastur model is the `PointMass(1)` special case.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;
use crate::rng;

const WEIGHT_TOL: f64 = 1e-12;

/// Lower truncation applied to `Uniform(0, hi)` scale laws so that no scale
/// sits at the origin.
pub const UNIFORM_SCALE_FLOOR: f64 = 1e-6;

/// Law `G` of the per-sample scale parameters of an elliptical design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScaleDistribution {
    PointMass { scale: f64 },
    TwoPoint { w1: f64, s1: f64, w2: f64, s2: f64 },
    Uniform { lo: f64, hi: f64 },
    Discrete { atoms: Vec<(f64, f64)> },
}

impl ScaleDistribution {
    /// Marchenko–Pastur scales (all equal to one).
    pub fn marchenko_pastur() -> Self {
        ScaleDistribution::PointMass { scale: 1.0 }
    }

    /// `Uniform(lo, hi)` with `lo` raised to [`UNIFORM_SCALE_FLOOR`].
    pub fn uniform_truncated(lo: f64, hi: f64) -> Result<Self> {
        let g = ScaleDistribution::Uniform {
            lo: lo.max(UNIFORM_SCALE_FLOOR),
            hi,
        };
        g.validate()?;
        Ok(g)
    }

    /// Two-scale mixture `(1 - c)·δ_τ + c·δ_{ατ}`.
    pub fn worst_case_mixture(c: f64, alpha: f64, tau: f64) -> Result<Self> {
        let g = ScaleDistribution::TwoPoint {
            w1: 1.0 - c,
            s1: tau,
            w2: c,
            s2: alpha * tau,
        };
        g.validate()?;
        Ok(g)
    }

    /// Equal-weight empirical law of realized scales.
    pub fn empirical(scales: &[f64]) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidInput("empirical scale law needs at least one scale".into()));
        }
        let w = 1.0 / scales.len() as f64;
        let g = ScaleDistribution::Discrete {
            atoms: scales.iter().map(|&s| (w, s)).collect(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        match self {
            ScaleDistribution::Uniform { lo, hi } => {
                if !(*lo > 0.0 && lo < hi && hi.is_finite()) {
                    return bad(format!("uniform scale law needs 0 < lo < hi, got [{lo}, {hi}]"));
                }
                Ok(())
            }
            _ => {
                let atoms = self.atoms();
                let mut total = 0.0;
                for &(w, s) in &atoms {
                    if !(w >= 0.0 && w.is_finite()) {
                        return bad(format!("scale weight {w} is not a nonnegative number"));
                    }
                    if !(s > 0.0 && s.is_finite()) {
                        return bad(format!("scale atom {s} must be strictly positive"));
                    }
                    total += w;
                }
                if (total - 1.0).abs() > WEIGHT_TOL.max(1e-15 * atoms.len() as f64) {
                    return bad(format!("scale weights sum to {total}, not 1"));
                }
                Ok(())
            }
        }
    }

    /// Atoms `(weight, scale)` of a discrete law; empty for `Uniform`.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match self {
            ScaleDistribution::PointMass { scale } => vec![(1.0, *scale)],
            ScaleDistribution::TwoPoint { w1, s1, w2, s2 } => vec![(*w1, *s1), (*w2, *s2)],
            ScaleDistribution::Uniform { .. } => Vec::new(),
            ScaleDistribution::Discrete { atoms } => atoms.clone(),
        }
    }

    /// `E_G φ(T)`: exact for atomic laws, Gauss–Legendre for `Uniform`.
    pub fn expect<F: Fn(f64) -> f64>(&self, phi: F) -> f64 {
        match self {
            ScaleDistribution::Uniform { lo, hi } => {
                GaussLegendre::standard().integrate(*lo, *hi, &phi) / (hi - lo)
            }
            ScaleDistribution::PointMass { scale } => phi(*scale),
            ScaleDistribution::TwoPoint { w1, s1, w2, s2 } => w1 * phi(*s1) + w2 * phi(*s2),
            ScaleDistribution::Discrete { atoms } => atoms.iter().map(|&(w, s)| w * phi(s)).sum(),
        }
    }

    /// `E_G T`.
    pub fn mean(&self) -> f64 {
        match self {
            ScaleDistribution::Uniform { lo, hi } => 0.5 * (lo + hi),
            _ => self.expect(|s| s),
        }
    }

    /// η-transform `E_G 1/(1 + xT)`.
    pub fn eta(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 1.0;
        }
        match self {
            ScaleDistribution::Uniform { lo, hi } => {
                // E 1/(1+xT) = [ln(1+x·hi) - ln(1+x·lo)] / (x (hi - lo))
                ((x * hi).ln_1p() - (x * lo).ln_1p()) / (x * (hi - lo))
            }
            _ => self.expect(|s| 1.0 / (1.0 + x * s)),
        }
    }

    /// Smallest point of the support carrying positive mass.
    pub fn min_scale(&self) -> f64 {
        match self {
            ScaleDistribution::Uniform { lo, .. } => *lo,
            _ => self
                .atoms()
                .iter()
                .filter(|a| a.0 > 0.0)
                .map(|a| a.1)
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn max_scale(&self) -> f64 {
        match self {
            ScaleDistribution::Uniform { hi, .. } => *hi,
            _ => self
                .atoms()
                .iter()
                .filter(|a| a.0 > 0.0)
                .map(|a| a.1)
                .fold(0.0, f64::max),
        }
    }

    /// `true` when all mass sits on a single scale.
    pub fn is_point_mass(&self) -> bool {
        match self {
            ScaleDistribution::Uniform { .. } => false,
            _ => self.min_scale() == self.max_scale(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ScaleDistribution::PointMass { scale } => *scale,
            ScaleDistribution::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            _ => {
                let atoms = self.atoms();
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for &(w, s) in &atoms {
                    acc += w;
                    if u < acc {
                        return s;
                    }
                }
                atoms
                    .iter()
                    .rev()
                    .find(|a| a.0 > 0.0)
                    .map(|a| a.1)
                    .expect("validated law has positive mass")
            }
        }
    }
}

/// η-transform `η_G(x) = E_G 1/(1 + xT)` for `x ≥ 0`.
pub fn eta_transform(g: &ScaleDistribution, x: f64) -> f64 {
    g.eta(x)
}

/// Diagonal feature covariance `Σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    Identity { p: usize },
    Diagonal { entries: Vec<f64> },
    /// Entries drawn iid uniform on `[lo, hi]` from their own seed.
    UniformDiagonal { lo: f64, hi: f64, seed: u64 },
}

impl CovarianceSpec {
    /// Diagonal of `Σ` for dimension `p`.
    pub fn diagonal(&self, p: usize) -> Result<Vec<f64>> {
        let entries = match self {
            CovarianceSpec::Identity { p: q } => {
                if *q != p {
                    return Err(Error::InvalidInput(format!(
                        "identity covariance has dimension {q}, expected {p}"
                    )));
                }
                vec![1.0; p]
            }
            CovarianceSpec::Diagonal { entries } => {
                if entries.len() != p {
                    return Err(Error::InvalidInput(format!(
                        "diagonal covariance has {} entries, expected {p}",
                        entries.len()
                    )));
                }
                entries.clone()
            }
            CovarianceSpec::UniformDiagonal { lo, hi, seed } => {
                if !(*lo > 0.0 && lo < hi) {
                    return Err(Error::InvalidInput(format!(
                        "uniform covariance needs 0 < lo < hi, got [{lo}, {hi}]"
                    )));
                }
                let mut r = rng::stream(*seed, "covariance", 0);
                (0..p).map(|_| r.random_range(*lo..*hi)).collect()
            }
        };
        if let Some(bad) = entries.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!("covariance entry {bad} is not positive")));
        }
        Ok(entries)
    }

    /// Declared eigenvalue interval `[λ_lo, λ_hi]`.
    pub fn eigen_bounds(&self, p: usize) -> Result<(f64, f64)> {
        match self {
            CovarianceSpec::UniformDiagonal { lo, hi, .. } => Ok((*lo, *hi)),
            _ => {
                let d = self.diagonal(p)?;
                let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = d.iter().copied().fold(0.0, f64::max);
                Ok((lo, hi))
            }
        }
    }
}

/// Row split of `n` samples across `k` machines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    n: usize,
    p: usize,
    sizes: Vec<usize>,
}

impl PartitionPlan {
    pub fn new(n: usize, p: usize, sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidInput("partition needs at least one machine".into()));
        }
        let total: usize = sizes.iter().sum();
        if total != n {
            return Err(Error::InvalidInput(format!(
                "partition sizes sum to {total}, expected n = {n}"
            )));
        }
        if let Some((i, &ni)) = sizes.iter().enumerate().find(|(_, &ni)| ni < p) {
            return Err(Error::InvalidInput(format!(
                "machine {i} holds {ni} < p = {p} samples; local OLS undefined"
            )));
        }
        Ok(Self { n, p, sizes })
    }

    /// Partition without the `n_i ≥ p` requirement (iterative methods only
    /// need `n_i ≥ 1`).
    pub fn new_relaxed(n: usize, p: usize, sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidInput("every machine needs at least one sample".into()));
        }
        let total: usize = sizes.iter().sum();
        if total != n {
            return Err(Error::InvalidInput(format!(
                "partition sizes sum to {total}, expected n = {n}"
            )));
        }
        Ok(Self { n, p, sizes })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Every machine can fit its own OLS.
    pub fn locally_identified(&self) -> bool {
        self.sizes.iter().all(|&s| s >= self.p)
    }

    /// Aspect ratio `γ = p/n`.
    pub fn gamma(&self) -> f64 {
        self.p as f64 / self.n as f64
    }

    /// Local aspect ratios `γ_i = p/n_i`.
    pub fn gammas(&self) -> Vec<f64> {
        self.sizes.iter().map(|&s| self.p as f64 / s as f64).collect()
    }

    /// Contiguous row ranges of each machine.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.sizes
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect()
    }

    pub fn is_equal_split(&self) -> bool {
        self.sizes.iter().all(|&s| s == self.sizes[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// As even as possible, remainders to the lowest indices.
    Equal,
    /// `p` rows per machine, the remainder assigned uniformly at random.
    RandomMinP,
}

pub fn make_partition(n: usize, p: usize, k: usize, mode: PartitionMode, seed: u64) -> Result<PartitionPlan> {
    if k == 0 {
        return Err(Error::InvalidInput("need at least one machine".into()));
    }
    if k * p > n {
        return Err(Error::LocalOlsUndefined { n, p, k });
    }
    let sizes = match mode {
        PartitionMode::Equal => {
            let (q, r) = (n / k, n % k);
            (0..k).map(|i| q + usize::from(i < r)).collect()
        }
        PartitionMode::RandomMinP => {
            let mut sizes = vec![p; k];
            let mut r = rng::stream(seed, "partition", k as u64);
            for _ in 0..(n - k * p) {
                sizes[r.random_range(0..k)] += 1;
            }
            sizes
        }
    };
    PartitionPlan::new(n, p, sizes)
}

/// How the true coefficient vector is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSpec {
    Fixed { values: Vec<f64> },
    /// iid `N(0, 1)` entries.
    StandardNormal,
}

/// Everything needed to draw one synthetic dataset, apart from the design laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub partition: PartitionPlan,
    pub sigma2: f64,
    pub beta: BetaSpec,
}

impl ProblemSpec {
    pub fn new(partition: PartitionPlan, sigma2: f64, beta: BetaSpec) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidInput(format!("noise variance {sigma2} must be nonnegative")));
        }
        if let BetaSpec::Fixed { values } = &beta {
            if values.len() != partition.p() {
                return Err(Error::InvalidInput(format!(
                    "beta has {} entries, expected p = {}",
                    values.len(),
                    partition.p()
                )));
            }
        }
        Ok(Self { partition, sigma2, beta })
    }
}

/// Generation provenance kept alongside synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub seed: u64,
    pub scale_distribution: ScaleDistribution,
    pub covariance: CovarianceSpec,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub beta_true: Option<DVector<f64>>,
    pub sigma2: f64,
    pub scales: Option<Vec<f64>>,
    pub partition: PartitionPlan,
    pub origin: Option<Origin>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        sigma2: f64,
        partition: PartitionPlan,
    ) -> Result<Self> {
        let ds = Self {
            x,
            y,
            beta_true: None,
            sigma2,
            scales: None,
            partition,
            origin: None,
        };
        ds.check_dims()?;
        Ok(ds)
    }

    fn check_dims(&self) -> Result<()> {
        let (n, p) = self.x.shape();
        if n != self.partition.n() || p != self.partition.p() || self.y.len() != n {
            return Err(Error::InvalidInput(format!(
                "dataset is {n}x{p} with {} responses, partition expects {}x{}",
                self.y.len(),
                self.partition.n(),
                self.partition.p()
            )));
        }
        if let Some(b) = &self.beta_true {
            if b.len() != p {
                return Err(Error::InvalidInput("beta_true has the wrong length".into()));
            }
        }
        if let Some(s) = &self.scales {
            if s.len() != n || s.iter().any(|&g| !(g > 0.0)) {
                return Err(Error::InvalidInput("scales must be n positive values".into()));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.partition.k()
    }

    /// Same data under a different row split.
    pub fn with_partition(&self, partition: PartitionPlan) -> Result<Self> {
        let mut ds = self.clone();
        ds.partition = partition;
        ds.check_dims()?;
        Ok(ds)
    }

    /// Local design and response of machine `i`.
    pub fn block(&self, i: usize) -> (DMatrixView<'_, f64>, DVectorView<'_, f64>) {
        let r = self.partition.ranges()[i].clone();
        let len = r.end - r.start;
        (self.x.rows(r.start, len), self.y.rows(r.start, len))
    }

    pub fn blocks(&self) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        self.partition
            .ranges()
            .into_iter()
            .map(|r| {
                let len = r.end - r.start;
                (self.x.rows(r.start, len).clone_owned(), self.y.rows(r.start, len).clone_owned())
            })
            .collect()
    }

    /// Sidecar metadata for CSV export.
    pub fn metadata(&self) -> DatasetMetadata {
        DatasetMetadata {
            n: self.n(),
            p: self.p(),
            sigma2: self.sigma2,
            sizes: self.partition.sizes().to_vec(),
            beta_true: self.beta_true.as_ref().map(|b| b.iter().copied().collect()),
            scales: self.scales.clone(),
            origin: self.origin.clone(),
        }
    }

    /// Write `y,x1..xp` CSV plus a JSON sidecar.
    pub fn write_csv(&self, csv_path: &Path, meta_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(csv_path)?));
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.p()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(self.p() + 1);
        for i in 0..self.n() {
            row.clear();
            row.push(format!("{}", self.y[i]));
            row.extend((0..self.p()).map(|j| format!("{}", self.x[(i, j)])));
            w.write_record(&row)?;
        }
        w.flush()?;
        let meta = BufWriter::new(File::create(meta_path)?);
        serde_json::to_writer_pretty(meta, &self.metadata())?;
        Ok(())
    }

    /// Inverse of [`Dataset::write_csv`].
    pub fn read_csv(csv_path: &Path, meta_path: &Path) -> Result<Self> {
        let meta: DatasetMetadata = serde_json::from_reader(BufReader::new(File::open(meta_path)?))?;
        let mut r = csv::Reader::from_reader(BufReader::new(File::open(csv_path)?));
        let headers = r.headers()?.clone();
        if headers.len() != meta.p + 1 || &headers[0] != "y" {
            return Err(Error::InvalidInput(format!(
                "expected header y,x1..x{}, got {} columns",
                meta.p,
                headers.len()
            )));
        }
        let mut x = DMatrix::zeros(meta.n, meta.p);
        let mut y = DVector::zeros(meta.n);
        let mut rows = 0;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if i >= meta.n {
                return Err(Error::InvalidInput("CSV has more rows than metadata declares".into()));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("row {}: {e}", i + 1)))
            };
            y[i] = parse(&rec[0])?;
            for j in 0..meta.p {
                x[(i, j)] = parse(&rec[j + 1])?;
            }
            rows += 1;
        }
        if rows != meta.n {
            return Err(Error::InvalidInput(format!("CSV has {rows} rows, metadata declares {}", meta.n)));
        }
        let partition = PartitionPlan::new_relaxed(meta.n, meta.p, meta.sizes.clone())?;
        let ds = Dataset {
            x,
            y,
            beta_true: meta.beta_true.map(DVector::from_vec),
            sigma2: meta.sigma2,
            scales: meta.scales,
            partition,
            origin: meta.origin,
        };
        ds.check_dims()?;
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub n: usize,
    pub p: usize,
    pub sigma2: f64,
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub beta_true: Option<Vec<f64>>,
    #[serde(default)]
    pub scales: Option<Vec<f64>>,
    #[serde(default)]
    pub origin: Option<Origin>,
}

/// Draw `X = Γ^{1/2} Z Σ^{1/2}` and `Y = Xβ + ε`, fully determined by `seed`.
pub fn sample_dataset(
    spec: &ProblemSpec,
    scale_dist: &ScaleDistribution,
    cov: &CovarianceSpec,
    seed: u64,
) -> Result<Dataset> {
    scale_dist.validate()?;
    let (n, p) = (spec.partition.n(), spec.partition.p());
    let sd: Vec<f64> = cov.diagonal(p)?.into_iter().map(f64::sqrt).collect();

    let mut scale_rng = rng::stream(seed, "scales", 0);
    let scales: Vec<f64> = (0..n).map(|_| scale_dist.sample(&mut scale_rng)).collect();

    let mut design_rng = rng::stream(seed, "design", 0);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let g = scales[i].sqrt();
        for j in 0..p {
            let z: f64 = StandardNormal.sample(&mut design_rng);
            x[(i, j)] = g * z * sd[j];
        }
    }

    let beta = match &spec.beta {
        BetaSpec::Fixed { values } => DVector::from_column_slice(values),
        BetaSpec::StandardNormal => {
            let mut r = rng::stream(seed, "beta", 0);
            DVector::from_fn(p, |_, _| StandardNormal.sample(&mut r))
        }
    };

    let mut noise_rng = rng::stream(seed, "noise", 0);
    let sigma = spec.sigma2.sqrt();
    let noise = DVector::from_fn(n, |_, _| sigma * Distribution::<f64>::sample(&StandardNormal, &mut noise_rng));
    let y = &x * &beta + noise;

    let ds = Dataset {
        x,
        y,
        beta_true: Some(beta),
        sigma2: spec.sigma2,
        scales: Some(scales),
        partition: spec.partition.clone(),
        origin: Some(Origin {
            seed,
            scale_distribution: scale_dist.clone(),
            covariance: cov.clone(),
        }),
    };
    ds.check_dims()?;
    Ok(ds)
}

/// Fresh noise for a fixed design: `Y' = Xβ + ε'`.
pub fn redraw_noise(ds: &Dataset, seed: u64, replicate: u64) -> Result<DVector<f64>> {
    let beta = ds
        .beta_true
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("redrawing noise requires beta_true".into()))?;
    let mut r = rng::stream(seed, "noise-replicate", replicate);
    let sigma = ds.sigma2.sqrt();
    Ok(&ds.x * beta + DVector::from_fn(ds.n(), |_, _| sigma * Distribution::<f64>::sample(&StandardNormal, &mut r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mp_spec(n: usize, p: usize) -> ProblemSpec {
        ProblemSpec::new(
            PartitionPlan::new(n, p, vec![n]).unwrap(),
            1.0,
            BetaSpec::StandardNormal,
        )
        .unwrap()
    }

    #[test]
    fn equal_partition_splits_evenly() {
        let plan = make_partition(100, 10, 2, PartitionMode::Equal, 0).unwrap();
        assert_eq!(plan.sizes(), &[50, 50]);
        let plan = make_partition(103, 10, 4, PartitionMode::Equal, 0).unwrap();
        assert_eq!(plan.sizes(), &[26, 26, 26, 25]);
    }

    #[test]
    fn random_min_p_partition() {
        let plan = make_partition(10_000, 20, 3, PartitionMode::RandomMinP, 1).unwrap();
        assert_eq!(plan.sizes().iter().sum::<usize>(), 10_000);
        assert!(plan.sizes().iter().all(|&s| s >= 20));
        let again = make_partition(10_000, 20, 3, PartitionMode::RandomMinP, 1).unwrap();
        assert_eq!(plan, again);
    }

    #[test]
    fn partition_rejects_too_many_machines() {
        assert!(matches!(
            make_partition(30, 10, 4, PartitionMode::Equal, 0),
            Err(Error::LocalOlsUndefined { .. })
        ));
    }

    #[test]
    fn eta_examples() {
        let mp = ScaleDistribution::marchenko_pastur();
        assert_eq!(eta_transform(&mp, 1.0), 0.5);
        let two = ScaleDistribution::TwoPoint { w1: 0.5, s1: 1.0, w2: 0.5, s2: 2.0 };
        assert!((eta_transform(&two, 1.0) - 5.0 / 12.0).abs() < 1e-15);
        for g in [mp, two, ScaleDistribution::uniform_truncated(0.0, 1.0).unwrap()] {
            assert_eq!(eta_transform(&g, 0.0), 1.0);
        }
    }

    #[test]
    fn uniform_eta_closed_form_matches_quadrature() {
        let g = ScaleDistribution::uniform_truncated(0.0, 1.0).unwrap();
        for x in [1e-8, 1e-3, 0.5, 3.0, 1e4] {
            let quad = g.expect(|s| 1.0 / (1.0 + x * s));
            assert!((g.eta(x) - quad).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn scale_law_validation() {
        assert!(ScaleDistribution::Uniform { lo: 0.0, hi: 1.0 }.validate().is_err());
        assert!(ScaleDistribution::Uniform { lo: 2.0, hi: 1.0 }.validate().is_err());
        assert!(ScaleDistribution::TwoPoint { w1: 0.5, s1: 1.0, w2: 0.6, s2: 2.0 }
            .validate()
            .is_err());
        assert!(ScaleDistribution::Discrete { atoms: vec![(1.0, 0.0)] }.validate().is_err());
        assert!(ScaleDistribution::worst_case_mixture(0.015, 1e4, 1.0).unwrap().validate().is_ok());
    }

    #[test]
    fn mp_dataset_has_unit_scales_and_is_reproducible() {
        let spec = mp_spec(200, 10);
        let g = ScaleDistribution::marchenko_pastur();
        let cov = CovarianceSpec::Identity { p: 10 };
        let a = sample_dataset(&spec, &g, &cov, 7).unwrap();
        let b = sample_dataset(&spec, &g, &cov, 7).unwrap();
        assert!(a.scales.as_ref().unwrap().iter().all(|&s| s == 1.0));
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        let gram = crate::linalg::gram(&a.x) / 200.0;
        let eig = nalgebra::SymmetricEigen::new(gram).eigenvalues;
        assert!(eig.iter().all(|&l| l > 0.0 && l.is_finite()));
    }

    #[test]
    fn standardized_design_moments() {
        let n = 20_000;
        let p = 5;
        let spec = mp_spec(n, p);
        let ds = sample_dataset(
            &spec,
            &ScaleDistribution::marchenko_pastur(),
            &CovarianceSpec::Identity { p },
            3,
        )
        .unwrap();
        for j in 0..p {
            let col = ds.x.column(j);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.05, "column {j} mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "column {j} variance {var}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let spec = ProblemSpec::new(
            PartitionPlan::new(40, 3, vec![20, 20]).unwrap(),
            0.5,
            BetaSpec::StandardNormal,
        )
        .unwrap();
        let ds = sample_dataset(
            &spec,
            &ScaleDistribution::uniform_truncated(0.0, 1.0).unwrap(),
            &CovarianceSpec::UniformDiagonal { lo: 1.0, hi: 2.0, seed: 1 },
            11,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (c, m) = (dir.path().join("d.csv"), dir.path().join("d.json"));
        ds.write_csv(&c, &m).unwrap();
        let back = Dataset::read_csv(&c, &m).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.partition, ds.partition);
        assert_eq!(back.origin, ds.origin);
    }

    proptest! {
        #[test]
        fn partitions_satisfy_invariants(p in 1usize..30, k in 1usize..12, extra in 0usize..500, seed in any::<u64>(), random in any::<bool>()) {
            let n = k * p + extra;
            let mode = if random { PartitionMode::RandomMinP } else { PartitionMode::Equal };
            let plan = make_partition(n, p, k, mode, seed).unwrap();
            prop_assert_eq!(plan.k(), k);
            prop_assert_eq!(plan.sizes().iter().sum::<usize>(), n);
            prop_assert!(plan.sizes().iter().all(|&s| s >= p));
        }

        #[test]
        fn eta_strictly_decreasing(w in 0.01f64..0.99, s1 in 0.01f64..10.0, s2 in 0.01f64..10.0, x in 0.0f64..100.0, dx in 0.01f64..10.0) {
            let g = ScaleDistribution::TwoPoint { w1: w, s1, w2: 1.0 - w, s2 };
            prop_assert!(g.eta(x + dx) < g.eta(x));
            prop_assert!(g.eta(x) <= 1.0);
        }
    }
}
