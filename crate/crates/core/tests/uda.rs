use nalgebra::DMatrix;
use neuroadapt::tensor::Tensor;
use neuroadapt::uda::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_spd(rng: &mut ChaCha8Rng, dim: usize) -> SpdMatrix {
    let a = gaussian(rng, dim, dim);
    SpdMatrix::new(&a * a.transpose() / dim as f64 + DMatrix::identity(dim, dim) * 0.05).unwrap()
}

fn to_trial(x: &DMatrix<f64>) -> Tensor {
    let (c, t) = x.shape();
    let data = (0..c)
        .flat_map(|i| (0..t).map(move |j| (i, j)))
        .map(|(i, j)| x[(i, j)] as f32)
        .collect();
    Tensor::new(vec![c, t], data).unwrap()
}

#[test]
fn whitening_reconstructs_identity_on_random_spd() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let c = random_spd(&mut rng, 8);
        let m = whitening_transform(&c, DEFAULT_EIG_FLOOR).unwrap();
        assert!((&m - m.transpose()).amax() < 1e-12);
        let recon = &m * c.matrix() * m.transpose();
        assert!((recon - DMatrix::identity(8, 8)).amax() < 1e-4);
    }
}

#[test]
fn whitening_of_identity_is_identity() {
    let m = whitening_transform(&SpdMatrix::identity(5), DEFAULT_EIG_FLOOR).unwrap();
    assert!((m - DMatrix::identity(5, 5)).amax() < 1e-14);
}

#[test]
fn fixed_point_under_both_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for metric in [Metric::Euclidean, Metric::Riemannian] {
        let c = random_spd(&mut rng, 6);
        let mut r = CovReference::with_reference(c.clone(), DEFAULT_BETA, metric).unwrap();
        r.update(&c).unwrap();
        assert!(
            (r.reference().unwrap().matrix() - c.matrix()).amax() < 1e-10,
            "{metric:?}"
        );
    }
}

#[test]
fn euclidean_update_is_linear_on_diagonals() {
    let base = SpdMatrix::from_diagonal(&[1.0, 2.0, 3.0]).unwrap();
    let trial = [0.5, 4.0, 1.5];
    let contribution = |alpha: f64| {
        let scaled: Vec<f64> = trial.iter().map(|v| v * alpha).collect();
        let mut r = CovReference::with_reference(base.clone(), 0.9, Metric::Euclidean).unwrap();
        r.update(&SpdMatrix::from_diagonal(&scaled).unwrap()).unwrap();
        r.reference().unwrap().matrix() - base.matrix() * 0.9
    };
    let one = contribution(1.0);
    let three = contribution(3.0);
    assert!((three - one * 3.0).amax() < 1e-12);
}

#[test]
fn riemannian_agrees_with_euclidean_to_first_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = random_spd(&mut rng, 4);
    let dir = {
        let a = gaussian(&mut rng, 4, 4);
        (&a + a.transpose()) * 0.5
    };
    let gap = |scale: f64| {
        let t = SpdMatrix::new(c.matrix() + &dir * scale).unwrap();
        let mut e = CovReference::with_reference(c.clone(), 0.9, Metric::Euclidean).unwrap();
        let mut r = CovReference::with_reference(c.clone(), 0.9, Metric::Riemannian).unwrap();
        e.update(&t).unwrap();
        r.update(&t).unwrap();
        (e.reference().unwrap().matrix() - r.reference().unwrap().matrix()).norm()
    };
    let (g1, g2) = (gap(1e-2), gap(1e-3));
    // shrinking the perturbation tenfold shrinks the gap about a hundredfold
    let ratio = g1 / g2;
    assert!((50.0..200.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn spd_preserved_over_long_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for metric in [Metric::Euclidean, Metric::Riemannian] {
        let mut r = CovReference::new(DEFAULT_BETA, metric).unwrap();
        for _ in 0..2_000 {
            r.update(&random_spd(&mut rng, 4)).unwrap();
        }
        assert!(r.reference().unwrap().min_eigenvalue().unwrap() > 0.0);
        assert_eq!(r.trial_count(), 2_000);
    }
}

#[test]
fn white_noise_covariance_is_near_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(&mut rng, 2, 20_000);
    let c = trial_covariance(&to_trial(&x), 1e-6).unwrap();
    assert!((c.matrix()[(0, 1)]).abs() < 0.1);
    assert!((c.matrix()[(0, 0)] - 1.0).abs() < 0.1);
    assert!((c.matrix()[(1, 1)] - 1.0).abs() < 0.1);
}

#[test]
fn duplicated_channels_stay_spd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let row = gaussian(&mut rng, 1, 64);
    let x = DMatrix::from_rows(&[row.row(0).into_owned(), row.row(0).into_owned()]);
    let c = regularized_covariance(&to_trial(&x)).unwrap();
    assert!(c.min_eigenvalue().unwrap() > 0.0);
    let m = whitening_transform(&c, DEFAULT_EIG_FLOOR).unwrap();
    assert!(m.iter().all(|v| v.is_finite()));
}

#[test]
fn streaming_alignment_whitens_mixed_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..3 {
        let a = gaussian(&mut rng, 4, 4) + DMatrix::identity(4, 4) * 2.0;
        let mut r = CovReference::new(DEFAULT_BETA, Metric::Euclidean).unwrap();
        let mut aligned_cov = DMatrix::zeros(4, 4);
        let n = 200;
        for i in 0..n {
            let trial = to_trial(&(&a * gaussian(&mut rng, 4, 128)));
            r.update(&regularized_covariance(&trial).unwrap()).unwrap();
            let y = align_trial(&r.whitening().unwrap(), &trial).unwrap();
            if i >= n / 2 {
                aligned_cov += trial_covariance(&y, 0.0).unwrap().matrix() / (n / 2) as f64;
            }
        }
        let dist = (aligned_cov - DMatrix::identity(4, 4)).norm();
        assert!(dist < 0.2, "Frobenius distance {dist}");
    }
}

#[test]
fn identity_alignment_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let trial = to_trial(&gaussian(&mut rng, 3, 16));
    assert_eq!(align_trial(&DMatrix::identity(3, 3), &trial).unwrap(), trial);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reference_stays_spd(seed in any::<u64>(), dim in 2usize..6, steps in 1usize..40, riem in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let metric = if riem { Metric::Riemannian } else { Metric::Euclidean };
        let mut r = CovReference::new(DEFAULT_BETA, metric).unwrap();
        for _ in 0..steps {
            r.update(&random_spd(&mut rng, dim)).unwrap();
        }
        let c = r.reference().unwrap();
        prop_assert!(c.min_eigenvalue().unwrap() > 0.0);
        prop_assert!((c.matrix() - c.matrix().transpose()).amax() < 1e-9);
    }

    #[test]
    fn whitening_inverts_square_root(seed in any::<u64>(), dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_spd(&mut rng, dim);
        let m = whitening_transform(&c, DEFAULT_EIG_FLOOR).unwrap();
        let recon = &m * c.matrix() * &m;
        prop_assert!((recon - DMatrix::identity(dim, dim)).amax() < 1e-6);
    }

    #[test]
    fn covariance_is_spd_for_any_trial(seed in any::<u64>(), c in 1usize..6, t in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trial = to_trial(&gaussian(&mut rng, c, t));
        let cov = regularized_covariance(&trial).unwrap();
        prop_assert!(cov.min_eigenvalue().unwrap() > 0.0);
    }
}
