use proptest::prelude::*;

use super::*;
use crate::objective::{Hessian, Objective};
use crate::rng::seeded;

fn origin(d: usize) -> ParamVector {
    ParamVector::zeros(d)
}

fn diag28() -> Objective {
    Objective::quadratic_diag(&[2.0, 8.0]).unwrap()
}

/// Brute-force maxima over a polar grid of the 2-D ball; independent of the
/// ascent code.
fn grid_max_2d(obj: &Objective, rho: f64) -> (f64, f64) {
    let mut best_f = f64::NEG_INFINITY;
    let mut best_g = 0.0f64;
    let base = obj.loss(&origin(2), None).unwrap();
    for ri in 0..=50 {
        let r = rho * ri as f64 / 50.0;
        for ai in 0..720 {
            let a = ai as f64 * std::f64::consts::PI / 360.0;
            let p = ParamVector::new(vec![r * a.cos(), r * a.sin()]);
            best_f = best_f.max(obj.loss(&p, None).unwrap() - base);
            best_g = best_g.max(obj.grad(&p, None).unwrap().norm());
        }
    }
    (best_f, rho * best_g)
}

#[test]
fn grid_oracle_on_diag28() {
    let (r0, r1) = grid_max_2d(&diag28(), 0.1);
    assert!((r0 - 0.04).abs() < 1e-12);
    assert!((r1 - 0.08).abs() < 1e-12);
}

#[test]
fn quadratic_ball_maxima() {
    let b = BallBudget::default();
    let r0 = zeroth_order_flatness(&diag28(), &origin(2), 0.1, None, &b, 1).unwrap();
    let r1 = first_order_flatness(&diag28(), &origin(2), 0.1, None, &b, 1).unwrap();
    assert!((r0 - 0.04).abs() < 1e-6, "r0 = {r0}");
    assert!((r1 - 0.08).abs() < 1e-5, "r1 = {r1}");
}

#[test]
fn degenerate_radius_and_flat_landscapes() {
    let b = BallBudget::default();
    assert_eq!(zeroth_order_flatness(&diag28(), &origin(2), 0.0, None, &b, 0).unwrap(), 0.0);
    assert_eq!(first_order_flatness(&diag28(), &origin(2), 0.0, None, &b, 0).unwrap(), 0.0);
    let flat = Objective::Constant { dim: 3, value: 4.0 };
    assert_eq!(zeroth_order_flatness(&flat, &origin(3), 0.3, None, &b, 0).unwrap(), 0.0);
    assert_eq!(first_order_flatness(&flat, &origin(3), 0.3, None, &b, 0).unwrap(), 0.0);
}

#[test]
fn linear_first_order_flatness_is_exact() {
    let lin = Objective::Linear(vec![3.0, -4.0]);
    let r1 = first_order_flatness(&lin, &origin(2), 0.2, None, &BallBudget::default(), 5).unwrap();
    assert!((r1 - 0.2 * 5.0).abs() < 1e-15);
}

#[test]
fn zero_budget_is_rejected() {
    let b = BallBudget {
        n_random: 0,
        ..Default::default()
    };
    assert!(matches!(
        zeroth_order_flatness(&diag28(), &origin(2), 0.1, None, &b, 0),
        Err(Error::Budget(_))
    ));
    assert!(matches!(
        first_order_flatness(&diag28(), &origin(2), 0.1, None, &b, 0),
        Err(Error::Budget(_))
    ));
}

#[test]
fn regularizer_and_identity() {
    assert_eq!(fad_regularizer(0.04, 0.08, 1.0).unwrap(), 0.04);
    assert_eq!(fad_regularizer(0.04, 0.08, 0.0).unwrap(), 0.08);
    assert!((fad_regularizer(0.04, 0.08, 0.5).unwrap() - 0.06).abs() < 1e-15);
    assert!(fad_regularizer(0.04, 0.08, 1.2).is_err());

    assert!((lambda_max_from_fad(0.06, 0.1, 0.5).unwrap() - 8.0).abs() < 1e-12);
    let (r0, r1, rho) = (0.013, 0.029, 0.07);
    assert!((lambda_max_from_fad(r0, rho, 1.0).unwrap() - 2.0 * r0 / (rho * rho)).abs() < 1e-12);
    assert!((lambda_max_from_fad(r1, rho, 0.0).unwrap() - r1 / (rho * rho)).abs() < 1e-12);
    assert!(lambda_max_from_fad(0.06, 0.0, 0.5).is_err());
}

#[test]
fn total_objective_values() {
    let b = BallBudget::default();
    let q = diag28();
    let p = ParamVector::new(vec![0.3, -0.2]);
    let loss = q.loss(&p, None).unwrap();
    assert_eq!(total_objective(&q, &p, 0.1, 0.5, 0.0, None, &b, 0).unwrap(), loss);
    assert_eq!(total_objective(&q, &p, 0.0, 0.5, 3.0, None, &b, 0).unwrap(), loss);
    let v = total_objective(&q, &origin(2), 0.1, 0.5, 2.0, None, &b, 0).unwrap();
    assert!((v - 0.12).abs() < 1e-5, "{v}");
}

#[test]
fn report_is_internally_consistent() {
    let rep = flatness_report(&diag28(), &origin(2), None, &FlatnessSettings {
        rho: 0.1,
        ..Default::default()
    }, 4)
    .unwrap();
    assert_eq!(rep.r_fad, rep.alpha * rep.r0 + (1.0 - rep.alpha) * rep.r1);
    assert!((rep.lambda_max - 8.0).abs() < 1e-6);
    assert!((rep.trace - 10.0).abs() < 1e-12);
    assert!((rep.lambda_max_from_fad.unwrap() - 8.0).abs() < 1e-3);
    assert!(rep.budget.evaluations > 0);
    assert_eq!(rep.top_eigs[0], rep.lambda_max);
}

#[test]
fn estimates_are_seed_deterministic() {
    let h = Hessian::Dense(vec![vec![2.0, 1.0], vec![1.0, 8.0]]);
    let q = Objective::quadratic(h).unwrap();
    let s = FlatnessSettings::default();
    let a = flatness_report(&q, &origin(2), None, &s, 9).unwrap();
    let b = flatness_report(&q, &origin(2), None, &s, 9).unwrap();
    assert_eq!(a, b);
}

fn random_pd(seed: u64, d: usize) -> (Objective, f64) {
    // H = A^T A + 0.1 I; top eigenvalue from a dense solver.
    let mut rng = seeded(seed);
    let a = nalgebra::DMatrix::<f64>::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let h = a.transpose() * &a + nalgebra::DMatrix::<f64>::identity(d, d) * 0.1;
    let h = (&h + h.transpose()) * 0.5;
    let lmax = h.clone().symmetric_eigen().eigenvalues.max();
    let rows = (0..d).map(|i| (0..d).map(|j| h[(i, j)]).collect()).collect();
    (Objective::quadratic(Hessian::Dense(rows)).unwrap(), lmax)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flatness_is_monotone_in_rho(seed in 0u64..10_000, d in 2usize..6) {
        let (q, _) = random_pd(seed, d);
        let p = ParamVector::new((0..d).map(|i| 0.1 * i as f64).collect());
        let b = BallBudget::default();
        let mut prev = (0.0, 0.0);
        for rho in [0.01, 0.05, 0.1, 0.2] {
            let r0 = zeroth_order_flatness(&q, &p, rho, None, &b, seed).unwrap();
            let r1 = first_order_flatness(&q, &p, rho, None, &b, seed).unwrap();
            prop_assert!(r0 >= prev.0 && r1 >= prev.1);
            prev = (r0, r1);
        }
    }

    #[test]
    fn zeroth_order_estimate_is_sound(seed in 0u64..10_000, d in 2usize..11) {
        let (q, lmax) = random_pd(seed, d);
        let truth = 0.5 * lmax * 0.01;
        let r0 = zeroth_order_flatness(&q, &origin(d), 0.1, None, &BallBudget::default(), seed).unwrap();
        prop_assert!(r0 <= truth + 1e-8);
        prop_assert!(r0 >= 0.999 * truth, "r0 {} truth {}", r0, truth);
    }
}
