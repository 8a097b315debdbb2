use distreg::datamodel::{
    make_partition, sample_dataset, BetaSpec, CovarianceSpec, Dataset, PartitionMode, ProblemSpec, ScaleDistribution,
};
use distreg::estimators::{mse_general, EstimatorSpec, FunctionalTask, WeightVector};
use distreg::multishot::{self, global_ols, iteravg_fixed_point, psi_curve, psi_prime_at_zero, AlgorithmConfig, Method, Target};
use proptest::prelude::*;

fn dataset(n: usize, p: usize, k: usize, seed: u64) -> Dataset {
    let plan = make_partition(n, p, k, PartitionMode::Equal, seed).unwrap();
    let spec = ProblemSpec::new(plan, 1.5, BetaSpec::StandardNormal).unwrap();
    let cov = CovarianceSpec::UniformDiagonal { lo: 0.5, hi: 3.0, seed };
    sample_dataset(&spec, &ScaleDistribution::marchenko_pastur(), &cov, seed).unwrap()
}

#[test]
fn psi_interpolates_between_naive_and_global() {
    let ds = dataset(240, 4, 4, 17);
    let task = FunctionalTask::Estimation;
    let naive = mse_general(&task, &EstimatorSpec::Distributed(WeightVector::naive(4)), &ds).unwrap();
    let global = mse_general(&task, &EstimatorSpec::GlobalOls, &ds).unwrap();
    let zero = iteravg_fixed_point(&ds, &[0.0; 4]).unwrap().psi;
    let large = iteravg_fixed_point(&ds, &[1e8; 4]).unwrap().psi;
    assert!((zero - naive).abs() <= 1e-10 * naive);
    assert!((large - global).abs() <= 1e-5 * global);
}

#[test]
fn single_machine_methods_reach_ols() {
    let ds = dataset(120, 5, 1, 3);
    let ols = global_ols(&ds).unwrap();
    for method in [Method::Admm { rho: 2.0 }, Method::IterAvg { rhos: vec![0.5] }] {
        let trace = multishot::run(&AlgorithmConfig::new(method.clone(), 400), &ds, Target::GlobalOls).unwrap();
        assert!((&trace.last().beta - &ols).norm() <= 1e-8 * ols.norm().max(1.0), "{method:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn psi_is_nonincreasing_and_bounded(seed in 0u64..10_000, p in 1usize..6, k in 2usize..6, per in 3usize..12) {
        let ds = dataset(k * p * per, p, k, seed);
        let grid: Vec<f64> = (0..25).map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / 24.0)).collect();
        let curve = psi_curve(&ds, &grid).unwrap();
        let global = mse_general(&FunctionalTask::Estimation, &EstimatorSpec::GlobalOls, &ds).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[1].psi <= w[0].psi * (1.0 + 1e-12));
        }
        for pt in &curve {
            prop_assert!(pt.psi_prime <= 1e-12 * pt.psi);
            prop_assert!(pt.psi >= global * (1.0 - 1e-9));
        }
        prop_assert!(psi_prime_at_zero(&ds).unwrap() <= 1e-12);
    }

    #[test]
    fn iteravg_contracts_and_reaches_its_fixed_point(seed in 0u64..10_000, rho in 0.05f64..5.0) {
        let ds = dataset(160, 4, 4, seed);
        let analysis = iteravg_fixed_point(&ds, &[rho; 4]).unwrap();
        prop_assert!(analysis.contraction < 1.0);
        let mut cfg = AlgorithmConfig::new(Method::IterAvg { rhos: vec![rho; 4] }, 3000);
        cfg.tol = 1e-12;
        let trace = multishot::run(&cfg, &ds, Target::GlobalOls).unwrap();
        let gap = (&trace.last().beta - &analysis.beta_star).norm();
        prop_assert!(gap <= 1e-8 * analysis.beta_star.norm().max(1.0), "gap {}", gap);
    }
}
