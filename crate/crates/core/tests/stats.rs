use neuroadapt::stats::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    x: Vec<f64>,
    y: Vec<f64>,
    p: f64,
}

fn reference_cases() -> Vec<Case> {
    let text = include_str!("fixtures/ttest_reference.json");
    serde_json::from_str(text).unwrap()
}

#[test]
fn t_test_matches_reference_implementation() {
    let cases = reference_cases();
    assert!(cases.len() >= 101);
    for (i, c) in cases.iter().enumerate() {
        let p = paired_t_test_one_sided(&c.x, &c.y).unwrap();
        assert!((p - c.p).abs() < 1e-6, "case {i}: {p} vs {}", c.p);
    }
}

#[test]
fn t_test_worked_example() {
    let d = [0.05, -0.01, 0.03, 0.02, 0.04, 0.01];
    let zeros = [0.0; 6];
    let p = paired_t_test_one_sided(&d, &zeros).unwrap();
    assert!((p - 0.0228295618907058).abs() < 1e-6, "{p}");
}

#[test]
fn t_test_degenerate_conventions() {
    let x = [0.7, 0.8, 0.9];
    assert_eq!(paired_t_test_one_sided(&x, &x).unwrap(), 0.5);
    let up = [0.8, 0.9, 1.0, 1.1];
    let base = [0.7, 0.8, 0.9, 1.0];
    assert!(paired_t_test_one_sided(&up, &base).unwrap() < 0.001);
    assert!(paired_t_test_one_sided(&base, &up).unwrap() > 0.999);
}

#[test]
fn t_test_rejects_bad_shapes() {
    assert!(paired_t_test_one_sided(&[0.1, 0.2], &[0.0, 0.1]).is_err());
    assert!(paired_t_test_one_sided(&[0.1, 0.2, 0.3], &[0.0, 0.1]).is_err());
}

#[test]
fn bh_hand_computed_step_up() {
    assert_eq!(bh_adjust(&[0.01, 0.02, 0.03]).unwrap(), vec![0.03, 0.03, 0.03]);
    assert_eq!(bh_adjust(&[0.2]).unwrap(), vec![0.2]);
    let adj = bh_adjust(&[0.04, 0.001, 0.9, 0.03]).unwrap();
    let expected = [0.04 * 4.0 / 3.0, 0.004, 0.9, 0.04 * 4.0 / 3.0];
    for (a, e) in adj.iter().zip(expected) {
        assert!((a - e).abs() < 1e-12, "{adj:?}");
    }
    assert!(bh_adjust(&[0.5, 1.5]).is_err());
    assert!(bh_adjust(&[]).unwrap().is_empty());
}

/// Definition-level BH: q_(i) = min over j ≥ i of m·p_(j)/j, capped at 1.
fn brute_force_bh(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    p.iter()
        .map(|&pi| {
            let rank_i = p.iter().filter(|&&q| q <= pi).count();
            let mut best = f64::INFINITY;
            for &pj in p {
                let rank_j = p.iter().filter(|&&q| q <= pj).count();
                if rank_j >= rank_i {
                    best = best.min(pj * m as f64 / rank_j as f64);
                }
            }
            best.min(1.0)
        })
        .collect()
}

#[test]
fn bh_matches_brute_force_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let m = rng.random_range(1..=20);
        let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let fast = bh_adjust(&p).unwrap();
        let slow = brute_force_bh(&p);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{p:?}: {fast:?} vs {slow:?}");
        }
    }
}

#[test]
fn significance_stars() {
    assert_eq!(stars(0.004), "**");
    assert_eq!(stars(0.0009), "***");
    assert_eq!(stars(0.049), "*");
    assert_eq!(stars(0.05), "");
    assert_eq!(stars(0.01), "*");
}

#[test]
fn mean_and_sample_std() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
}

proptest! {
    #[test]
    fn bh_is_bounded_and_permutation_invariant(
        p in proptest::collection::vec(0.0f64..=1.0, 1..30),
        rotate in 0usize..30,
    ) {
        let adj = bh_adjust(&p).unwrap();
        for (a, x) in adj.iter().zip(&p) {
            prop_assert!(*a >= *x - 1e-15 && *a <= 1.0);
        }
        let k = rotate % p.len();
        let mut shuffled = p.clone();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let adj_shuffled = bh_adjust(&shuffled).unwrap();
        let mut back = adj_shuffled.clone();
        back.reverse();
        back.rotate_right(k);
        for (a, b) in adj.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn t_test_p_is_a_probability_and_flips_with_direction(
        d in proptest::collection::vec(-1.0f64..1.0, 3..20),
    ) {
        let zeros = vec![0.0; d.len()];
        let p = paired_t_test_one_sided(&d, &zeros).unwrap();
        let q = paired_t_test_one_sided(&zeros, &d).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p + q - 1.0).abs() < 1e-9);
    }
}
