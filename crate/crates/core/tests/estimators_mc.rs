use distreg::datamodel::{
    make_partition, redraw_noise, sample_dataset, BetaSpec, CovarianceSpec, Dataset, PartitionMode, PartitionPlan,
    ProblemSpec, ScaleDistribution,
};
use distreg::estimators::{
    distributed_fit, mse_general, ols, optimal_weights, EstimatorSpec, FunctionalTask, WeightChoice, WeightVector,
};
use distreg::fs_efficiency::{efficiency_general, re_finite};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn design(n: usize, p: usize, k: usize, mode: PartitionMode, seed: u64) -> Dataset {
    let plan = make_partition(n, p, k, mode, seed).unwrap();
    let spec = ProblemSpec::new(plan, 1.0, BetaSpec::StandardNormal).unwrap();
    let cov = CovarianceSpec::UniformDiagonal { lo: 1.0, hi: 2.0, seed: 3 };
    sample_dataset(&spec, &ScaleDistribution::marchenko_pastur(), &cov, seed).unwrap()
}

struct McSummary {
    mean: DVector<f64>,
    se: DVector<f64>,
    mse: f64,
    mse_se: f64,
}

fn monte_carlo(ds: &Dataset, choice: &WeightChoice, reps: u64) -> McSummary {
    let beta = ds.beta_true.clone().unwrap();
    let p = ds.p();
    let mut sum = DVector::zeros(p);
    let mut sq = DVector::zeros(p);
    let mut losses = Vec::with_capacity(reps as usize);
    for r in 0..reps {
        let y = redraw_noise(ds, 99, r).unwrap();
        let mut d = ds.clone();
        d.y = y;
        let b = distributed_fit(&d, choice).unwrap().beta_hat;
        sum += &b;
        sq += b.component_mul(&b);
        losses.push((&b - &beta).norm_squared());
    }
    let m = reps as f64;
    let mean = &sum / m;
    let var = (&sq / m - mean.component_mul(&mean)) * (m / (m - 1.0));
    let se = var.map(|v| (v / m).sqrt());
    let mse = losses.iter().sum::<f64>() / m;
    let lv = losses.iter().map(|l| (l - mse).powi(2)).sum::<f64>() / (m - 1.0);
    McSummary {
        mean,
        se,
        mse,
        mse_se: (lv / m).sqrt(),
    }
}

#[test]
fn weighted_averages_are_unbiased() {
    let ds = design(240, 6, 4, PartitionMode::RandomMinP, 5);
    let beta = ds.beta_true.clone().unwrap();
    for choice in [WeightChoice::Naive, WeightChoice::Optimal(FunctionalTask::Estimation)] {
        let mc = monte_carlo(&ds, &choice, 3000);
        for j in 0..ds.p() {
            let z = (mc.mean[j] - beta[j]) / mc.se[j];
            assert!(z.abs() < 5.0, "{choice:?} coordinate {j}: z = {z}");
        }
    }
}

#[test]
fn monte_carlo_mse_matches_closed_form() {
    let ds = design(200, 5, 5, PartitionMode::RandomMinP, 11);
    let task = FunctionalTask::Estimation;
    let w_opt = optimal_weights(&task, &ds).unwrap();
    for (choice, w) in [
        (WeightChoice::Naive, WeightVector::naive(ds.k())),
        (WeightChoice::Optimal(task.clone()), w_opt),
    ] {
        let exact = mse_general(&task, &EstimatorSpec::Distributed(w), &ds).unwrap();
        let mc = monte_carlo(&ds, &choice, 4000);
        let z = (mc.mse - exact) / mc.mse_se;
        assert!(z.abs() < 5.0, "{choice:?}: mc {} exact {exact} z {z}", mc.mse);
    }
}

#[test]
fn global_ols_mse_is_sigma2_trace_inverse() {
    let ds = design(150, 4, 1, PartitionMode::Equal, 2);
    let exact = mse_general(&FunctionalTask::Estimation, &EstimatorSpec::GlobalOls, &ds).unwrap();
    let inv = (ds.x.transpose() * &ds.x).try_inverse().unwrap();
    assert!((exact - ds.sigma2 * inv.trace()).abs() < 1e-12 * exact);
    let mc = monte_carlo(&ds, &WeightChoice::Naive, 4000);
    assert!(((mc.mse - exact) / mc.mse_se).abs() < 5.0);
}

#[test]
fn single_machine_reproduces_ols() {
    let ds = design(80, 3, 1, PartitionMode::Equal, 4);
    let fit = distributed_fit(&ds, &WeightChoice::Optimal(FunctionalTask::Estimation)).unwrap();
    let global = ols(&ds.x, &ds.y).unwrap();
    assert!((fit.beta_hat - global).norm() < 1e-10);
}

fn random_blocks(seed: u64, p: usize, sizes: &[usize]) -> Vec<DMatrix<f64>> {
    let n = sizes.iter().sum();
    let plan = PartitionPlan::new(n, p, sizes.to_vec()).unwrap();
    let spec = ProblemSpec::new(plan, 1.0, BetaSpec::StandardNormal).unwrap();
    let ds = sample_dataset(
        &spec,
        &ScaleDistribution::Uniform { lo: 0.5, hi: 2.0 },
        &CovarianceSpec::Identity { p },
        seed,
    )
    .unwrap();
    ds.blocks().into_iter().map(|(x, _)| x.transpose() * x).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn optimal_weights_sum_to_one_and_beat_naive(
        seed in 0u64..10_000,
        p in 1usize..6,
        extra in prop::collection::vec(0usize..30, 1..5),
    ) {
        let sizes: Vec<usize> = extra.iter().map(|e| p + 1 + e).collect();
        let n: usize = sizes.iter().sum();
        let plan = PartitionPlan::new(n, p, sizes).unwrap();
        let spec = ProblemSpec::new(plan, 1.0, BetaSpec::StandardNormal).unwrap();
        let ds = sample_dataset(&spec, &ScaleDistribution::marchenko_pastur(), &CovarianceSpec::Identity { p }, seed).unwrap();
        for task in [FunctionalTask::Estimation, FunctionalTask::RegressionFunction, FunctionalTask::InSample] {
            let w = optimal_weights(&task, &ds).unwrap();
            prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let opt = mse_general(&task, &EstimatorSpec::Distributed(w), &ds).unwrap();
            let naive = mse_general(&task, &EstimatorSpec::Distributed(WeightVector::naive(ds.k())), &ds).unwrap();
            let global = mse_general(&task, &EstimatorSpec::GlobalOls, &ds).unwrap();
            prop_assert!(opt <= naive * (1.0 + 1e-10));
            prop_assert!(global <= opt * (1.0 + 1e-10));
        }
    }

    #[test]
    fn relative_efficiency_lies_in_unit_interval(
        seed in 0u64..10_000,
        p in 1usize..8,
        extra in prop::collection::vec(0usize..40, 1..6),
    ) {
        let sizes: Vec<usize> = extra.iter().map(|e| p + e).collect();
        let blocks = random_blocks(seed, p, &sizes);
        let re = re_finite(&blocks).unwrap();
        prop_assert!(re > 0.0 && re <= 1.0 + 1e-8);
        let general = efficiency_general(&DMatrix::identity(p, p), &blocks).unwrap();
        prop_assert!((general - re).abs() <= 1e-9);
    }

    #[test]
    fn permuting_machines_leaves_efficiency_unchanged(
        seed in 0u64..10_000,
        p in 1usize..5,
        extra in prop::collection::vec(0usize..20, 2..5),
    ) {
        let sizes: Vec<usize> = extra.iter().map(|e| p + e).collect();
        let blocks = random_blocks(seed, p, &sizes);
        let mut reversed = blocks.clone();
        reversed.reverse();
        let a = re_finite(&blocks).unwrap();
        let b = re_finite(&reversed).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }
}
