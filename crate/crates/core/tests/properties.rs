//! Randomized structural properties of the basis, update and metric code.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lisreduce_core::forward::{DofKind, DofLabel, ObservationOperator};
use lisreduce_core::gaussian::{exact_posterior, foerstner_distance, ConjugateUpdate, DEFAULT_NULL_TOL};
use lisreduce_core::reduction::{lis_basis, reduce_petrov_galerkin, MeanLifting, OlrApproximation};
use lisreduce_core::{GaussianBelief, LinearForwardProblem, StaticLinearSystem};

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn spd(rng: &mut ChaCha8Rng, d: usize, shift: f64) -> DMatrix<f64> {
    let a = normal(rng, d, d);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * shift
}

fn inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().cholesky().expect("SPD").inverse()
}

fn min_eig(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigenvalues().min()
}

/// Random forward problem with a dense SPD stiffness and a prior factor of
/// width `k` (rank-deficient when `k < d`).
fn random_problem(d: usize, m: usize, k: usize, seed: u64) -> LinearForwardProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stiffness = spd(&mut rng, d, 1.0);
    let labels = (0..d)
        .map(|i| DofLabel {
            kind: DofKind::Translation,
            z: i as f64,
        })
        .collect();
    let system = StaticLinearSystem::new(stiffness, labels).unwrap();
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, d, m).into_vec();
    idx.sort_unstable();
    let obs = ObservationOperator::new(idx, d).unwrap();
    let mean = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let prior = GaussianBelief::new(mean, normal(&mut rng, d, k)).unwrap();
    let noise = GaussianBelief::from_covariance(DVector::zeros(m), &(spd(&mut rng, m, 0.5) * 0.05)).unwrap();
    LinearForwardProblem::new(system, obs, Arc::new(prior), noise).unwrap()
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (3usize..=14).prop_flat_map(|d| (Just(d), 1usize..=d.min(4), d.min(3)..=d, any::<u64>()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lis_basis_structure((d, m, k, seed) in dims(), r_frac in 0.0f64..1.0) {
        let prob = random_problem(d, m, k, seed);
        let g = prob.forward_matrix().unwrap();
        let full = m.min(k);
        let r = 1 + ((full - 1) as f64 * r_frac) as usize;
        let basis = lis_basis(g, prob.prior().sqrt_factor(), prob.noise().sqrt_factor(), r).unwrap();
        prop_assert!(basis.biorthogonality_defect() <= 1e-8);
        let p = basis.projector();
        prop_assert!((&p * &p - &p).norm() <= 1e-8 * p.norm());
        let delta = basis.values();
        prop_assert!(delta.as_slice().windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(delta.iter().all(|&v| v > 0.0));
        // V lies in the range of the prior covariance
        let s = prob.prior().sqrt_factor();
        let coef = s.clone().svd(true, true).solve(basis.trial(), 1e-14).unwrap();
        prop_assert!((s * coef - basis.trial()).norm() <= 1e-8 * basis.trial().norm());
    }

    #[test]
    fn exact_update_matches_precision_form(seed in any::<u64>(), d in 2usize..=20, m in 1usize..=5) {
        let m = m.min(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = normal(&mut rng, m, d);
        let gamma = spd(&mut rng, d, 0.5);
        let gamma_obs = spd(&mut rng, m, 0.5) * 0.1;
        let mu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let prior = Arc::new(GaussianBelief::from_covariance(mu.clone(), &gamma).unwrap());
        let noise = GaussianBelief::from_covariance(DVector::zeros(m), &gamma_obs).unwrap();
        let (mean, cov) = exact_posterior(&prior, &g, &noise, &y).unwrap();

        let prec = inverse(&gamma);
        let prec_obs = inverse(&gamma_obs);
        let post = inverse(&(&prec + g.transpose() * &prec_obs * &g));
        let post_mean = &post * (&prec * &mu + g.transpose() * &prec_obs * &y);
        prop_assert!((&mean - &post_mean).norm() <= 1e-10 * post_mean.norm());
        prop_assert!((cov.covariance() - &post).norm() <= 1e-10 * post.norm());
    }

    #[test]
    fn covariances_are_loewner_ordered((d, m, k, seed) in dims()) {
        let prob = random_problem(d, m, k, seed);
        let g = prob.forward_matrix().unwrap();
        let full = m.min(k);
        let gamma = prob.prior().covariance();
        let tol = 1e-10 * gamma.norm();
        let exact = ConjugateUpdate::new(prob.prior().clone(), g, prob.noise()).unwrap();
        let exact_cov = exact.downdate().covariance();
        prop_assert!(min_eig(&(&gamma - &exact_cov)) >= -tol);
        prop_assert!(min_eig(&exact_cov) >= -tol);
        for r in 1..=full {
            let basis = lis_basis(g, prob.prior().sqrt_factor(), prob.noise().sqrt_factor(), r).unwrap();
            let olr = OlrApproximation::new(&prob, &basis).unwrap();
            let approx = olr.update().downdate().covariance();
            // exact posterior ≤ rank-r optimal posterior ≤ prior
            prop_assert!(min_eig(&(&approx - &exact_cov)) >= -tol);
            prop_assert!(min_eig(&(&gamma - &approx)) >= -tol);
        }
    }

    #[test]
    fn posterior_mean_is_affine_in_data((d, m, k, seed) in dims(), a in -3.0f64..3.0) {
        let prob = random_problem(d, m, k, seed);
        let g = prob.forward_matrix().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let y1 = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y2 = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let zero = DVector::zeros(m);
        let combo = &y1 * a + &y2;

        let exact = ConjugateUpdate::new(prob.prior().clone(), g, prob.noise()).unwrap();
        let e = |y: &DVector<f64>| exact.mean(y).unwrap() - exact.mean(&zero).unwrap();
        let lhs = e(&combo);
        let rhs = e(&y1) * a + e(&y2);
        prop_assert!((&lhs - &rhs).norm() <= 1e-9 * (1.0 + rhs.norm()));

        let basis = lis_basis(g, prob.prior().sqrt_factor(), prob.noise().sqrt_factor(), 1).unwrap();
        let red = reduce_petrov_galerkin(&prob, &basis).unwrap();
        let rm = |y: &DVector<f64>| {
            red.posterior(y, MeanLifting::Affine).unwrap().mean - red.posterior(&zero, MeanLifting::Affine).unwrap().mean
        };
        let lhs = rm(&combo);
        let rhs = rm(&y1) * a + rm(&y2);
        prop_assert!((&lhs - &rhs).norm() <= 1e-9 * (1.0 + rhs.norm()));
    }

    #[test]
    fn foerstner_invariances(seed in any::<u64>(), d in 2usize..=10, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = spd(&mut rng, d, 0.3);
        let b = spd(&mut rng, d, 0.3);
        let ab = foerstner_distance(&a, &b, DEFAULT_NULL_TOL).unwrap();
        let ba = foerstner_distance(&b, &a, DEFAULT_NULL_TOL).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        let scaled = foerstner_distance(&(&a * c), &(&b * c), DEFAULT_NULL_TOL).unwrap();
        prop_assert!((ab - scaled).abs() <= 1e-9 * (1.0 + ab));
        let inv = foerstner_distance(&inverse(&a), &inverse(&b), DEFAULT_NULL_TOL).unwrap();
        prop_assert!((ab - inv).abs() <= 1e-8 * (1.0 + ab));
        let self_scaled = foerstner_distance(&a, &(&a * c), DEFAULT_NULL_TOL).unwrap();
        let expected = (d as f64).sqrt() * c.ln().abs();
        prop_assert!((self_scaled - expected).abs() <= 1e-9 * (1.0 + expected));
        // congruence invariance
        let t = normal(&mut rng, d, d) + DMatrix::identity(d, d) * 3.0;
        let ta = &t * &a * t.transpose();
        let tb = &t * &b * t.transpose();
        let cong = foerstner_distance(&ta, &tb, DEFAULT_NULL_TOL).unwrap();
        prop_assert!((ab - cong).abs() <= 1e-7 * (1.0 + ab));
    }
}
