//! Distribution tails and the slope test against statrs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::ln_gamma as statrs_ln_gamma;

use skinbias_core::stats::{ln_gamma, normal_two_sided, slope_t_test, student_t_two_sided};

#[test]
fn ln_gamma_matches_statrs() {
    for i in 1..400 {
        let x = i as f64 * 0.137;
        let (a, b) = (ln_gamma(x), statrs_ln_gamma(x));
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{x}: {a} vs {b}");
    }
}

#[test]
fn t_tails_match_statrs() {
    for dof in [1.0, 2.0, 3.0, 5.0, 8.0, 23.0, 123.0] {
        let dist = StudentsT::new(0.0, 1.0, dof).unwrap();
        for i in 0..60 {
            let t = i as f64 * 0.25;
            let want = 2.0 * (1.0 - dist.cdf(t));
            let got = student_t_two_sided(t, dof);
            assert!((got - want).abs() < 1e-8, "dof {dof}, t {t}: {got} vs {want}");
        }
    }
}

#[test]
fn normal_tail_matches_statrs() {
    let n = Normal::new(0.0, 1.0).unwrap();
    for i in 0..80 {
        let z = i as f64 * 0.1;
        let want = 2.0 * n.cdf(-z);
        let got = normal_two_sided(z);
        assert!((got - want).abs() < 1e-10, "{z}: {got} vs {want}");
    }
}

#[test]
fn slope_test_p_values_match_statrs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let n = rng.gen_range(3..40);
        let x: Vec<f64> = (0..n).map(|i| [0.0, 0.25, 0.5, 0.75, 1.0][i % 5]).collect();
        if x.iter().all(|&v| v == x[0]) {
            continue;
        }
        let slope = rng.gen_range(-0.2..0.2);
        let y: Vec<f64> = x.iter().map(|&v| 0.7 + slope * v + rng.gen_range(-0.1..0.1)).collect();
        let t = slope_t_test(&x, &y).unwrap();
        let dist = StudentsT::new(0.0, 1.0, t.dof as f64).unwrap();
        let want = 2.0 * (1.0 - dist.cdf(t.t_statistic.abs()));
        assert!((t.p_value - want).abs() < 1e-8, "{} vs {want}", t.p_value);
    }
}
