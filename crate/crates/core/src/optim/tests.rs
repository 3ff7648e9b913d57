use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::data::Dataset;
use crate::objective::{Hessian, MlpSpec, Objective};
use crate::rng::seeded;

fn p(v: &[f64]) -> ParamVector {
    ParamVector::new(v.to_vec())
}

fn diag28() -> Objective {
    Objective::quadratic_diag(&[2.0, 8.0]).unwrap()
}

fn cfg(method: Method) -> OptimizerConfig {
    OptimizerConfig {
        eta0: 0.1,
        rho0: 0.1,
        xi: 0.0,
        ..OptimizerConfig::with_method(method)
    }
}

fn close(a: &ParamVector, b: &[f64], tol: f64) -> bool {
    a.max_abs_diff(&p(b)) < tol
}

// Frozen from an independent numpy evaluation of the closed-form steps on
// H = diag(2, 8), theta = (1, 1), rho = 0.1, xi = 0.
const TILDE1: [f64; 2] = [1.024_253_56, 1.097_014_25];
const G1: [f64; 2] = [2.048_507_13, 8.776_114_00];
const H0: [f64; 2] = [0.048_507_13, 0.776_114_00];
const H0_NORM: f64 = 0.777_628_370_3;
const TILDE2: [f64; 2] = [1.006_237_83, 1.099_805_26];
const H1: [f64; 2] = [0.044_594_51, 0.779_859_78];

#[test]
fn fad_hand_example() {
    let obj = diag28();
    let theta = p(&[1.0, 1.0]);
    let mut state = OptimizerState::new(2, 0);
    let config = OptimizerConfig {
        alpha: 0.5,
        beta: 1.0,
        ..cfg(Method::Fad)
    };
    let (next, tr) = fad_step(&obj, &theta, None, &mut state, &config).unwrap();
    assert_eq!(tr.g0, p(&[2.0, 8.0]));
    assert!((tr.norm_g0 - 68f64.sqrt()).abs() < 1e-12);
    // g1 = H * tilde1, so tilde1 = g1 / diag(H)
    let g1 = tr.g1.clone().unwrap();
    assert!(close(&p(&[g1[0] / 2.0, g1[1] / 8.0]), &TILDE1, 1e-8));
    assert!(close(&g1, &G1, 1e-8));
    assert!(close(&tr.h0, &H0, 1e-8));
    assert!((tr.norm_h0 - H0_NORM).abs() < 1e-9);
    let g2 = tr.g2.clone().unwrap();
    assert!(close(&p(&[g2[0] / 2.0, g2[1] / 8.0]), &TILDE2, 1e-8));
    assert!(close(&tr.h1, &H1, 1e-8));
    assert!(close(&next, &[0.795_344_92, 0.122_201_31], 1e-8));
    assert!(tr.fad_applied);
    assert_eq!(state.t, 1);
}

#[test]
fn sam_hand_example() {
    let mut state = OptimizerState::new(2, 0);
    let (next, tr) = sam_step(&diag28(), &p(&[1.0, 1.0]), None, &mut state, &cfg(Method::Sam)).unwrap();
    assert!(close(&tr.delta, &G1, 1e-8));
    assert!(close(&tr.h0, &H0, 1e-8));
    assert!(close(&next, &[1.0 - 0.1 * G1[0], 1.0 - 0.1 * G1[1]], 1e-9));
}

#[test]
fn gam_hand_example() {
    let mut state = OptimizerState::new(2, 0);
    let config = OptimizerConfig {
        beta: 0.5,
        ..cfg(Method::Gam)
    };
    let (next, tr) = gam_step(&diag28(), &p(&[1.0, 1.0]), None, &mut state, &config).unwrap();
    let g2 = tr.g2.clone().unwrap();
    let expected_tilde2 = [1.0 + 0.1 * H0[0] / H0_NORM, 1.0 + 0.1 * H0[1] / H0_NORM];
    assert!(close(&p(&[g2[0] / 2.0, g2[1] / 8.0]), &expected_tilde2, 1e-8));
    assert!(close(&tr.delta, &[2.0 + 0.5 * H1[0], 8.0 + 0.5 * H1[1]], 1e-8));
    assert!(close(&next, &[1.0 - 0.1 * tr.delta[0], 1.0 - 0.1 * tr.delta[1]], 1e-15));
}

#[test]
fn adam_first_step_is_sign_like() {
    let obj = Objective::Linear(vec![1.0, -2.0]);
    let mut state = OptimizerState::new(2, 0);
    let config = OptimizerConfig::with_method(Method::Adam);
    let config = OptimizerConfig { eta0: 0.1, ..config };
    let (next, _) = adam_step(&obj, &p(&[0.0, 0.0]), None, &mut state, &config).unwrap();
    assert!(close(&next, &[-0.1, 0.1], 1e-6), "{next:?}");
}

#[test]
fn adamw_decays_weights_before_update() {
    let obj = Objective::Constant { dim: 2, value: 0.0 };
    let mut state = OptimizerState::new(2, 0);
    let config = OptimizerConfig {
        eta0: 0.1,
        weight_decay: 0.5,
        ..OptimizerConfig::with_method(Method::Adamw)
    };
    // zero gradient: only the decoupled decay acts
    let (next, _) = adamw_step(&obj, &p(&[2.0, -4.0]), None, &mut state, &config).unwrap();
    assert!(close(&next, &[2.0 * 0.95, -4.0 * 0.95], 1e-15));
}

#[test]
fn momentum_accumulates_velocity() {
    let obj = Objective::Linear(vec![1.0]);
    let mut state = OptimizerState::new(1, 0);
    let config = OptimizerConfig {
        eta0: 1.0,
        momentum: 0.5,
        ..OptimizerConfig::with_method(Method::MomentumSgd)
    };
    let (a, _) = momentum_sgd_step(&obj, &p(&[0.0]), None, &mut state, &config).unwrap();
    let (b, tr) = momentum_sgd_step(&obj, &a, None, &mut state, &config).unwrap();
    assert_eq!(a, p(&[-1.0]));
    assert_eq!(tr.delta, p(&[1.5]));
    assert_eq!(b, p(&[-2.5]));
}

#[test]
fn zero_gradient_is_safe_for_flatness_methods() {
    let obj = diag28();
    let zero = p(&[0.0, 0.0]);
    for m in [Method::Sam, Method::Gam, Method::Fad] {
        let config = OptimizerConfig {
            xi: DEFAULT_XI,
            ..cfg(m)
        };
        let mut state = OptimizerState::new(2, 0);
        let (next, tr) = step(&obj, &zero, None, &mut state, &config).unwrap();
        assert_eq!(next, zero);
        assert_eq!(tr.norm_delta, 0.0);
    }
}

#[test]
fn nonfinite_gradient_reports_step() {
    let obj = Objective::quadratic_diag(&[1e300]).unwrap();
    let mut state = OptimizerState::new(1, 0);
    state.t = 6;
    let err = sgd_step(&obj, &p(&[1e300]), None, &mut state, &cfg(Method::Sgd)).unwrap_err();
    assert!(matches!(err, Error::Numerical { step: Some(7), .. }), "{err}");
}

#[test]
fn config_validation() {
    let ok = OptimizerConfig::default();
    assert!(ok.validate().is_ok());
    let bad = [
        OptimizerConfig { alpha: 1.5, ..ok.clone() },
        OptimizerConfig { fad_ratio: -0.1, ..ok.clone() },
        OptimizerConfig { xi: 0.0, ..ok.clone() },
        OptimizerConfig { eta0: 0.0, ..ok.clone() },
        OptimizerConfig { momentum: 1.0, ..ok.clone() },
        OptimizerConfig { rho0: f64::NAN, ..ok.clone() },
    ];
    for b in bad {
        assert!(b.validate().is_err(), "{b:?}");
    }
    let unknown = r#"{"method": "fad", "gamma": 1.0}"#;
    assert!(serde_json::from_str::<OptimizerConfig>(unknown).is_err());
    let parsed: OptimizerConfig = serde_json::from_str(r#"{"method": "momentum_sgd"}"#).unwrap();
    assert_eq!(parsed.method, Method::MomentumSgd);
}

#[test]
fn inverse_sqrt_schedule() {
    let config = OptimizerConfig {
        eta0: 0.3,
        rho0: 0.07,
        schedule: Schedule::InverseSqrt,
        ..Default::default()
    };
    for t in 1..2000 {
        let s = (t as f64).sqrt();
        assert!((config.eta_at(t) * s - 0.3).abs() <= 4.0 * f64::EPSILON * 0.3);
        assert!((config.rho_at(t) * s - 0.07).abs() <= 4.0 * f64::EPSILON * 0.07);
    }
    assert_eq!(config.eta_at(1), 0.3);
}

/// Records the batch of every gradient call.
struct Instrumented {
    inner: Objective,
    seen: Mutex<Vec<Vec<usize>>>,
}

impl GradientOracle for Instrumented {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn loss_grad(&self, theta: &ParamVector, batch: Option<&Batch>) -> Result<(f64, ParamVector)> {
        self.seen
            .lock()
            .unwrap()
            .push(batch.map(|b| b.indices().to_vec()).unwrap_or_default());
        self.inner.loss_grad(theta, batch)
    }
    fn num_samples(&self) -> Option<usize> {
        self.inner.num_samples()
    }
}

fn toy_mlp(seed: u64) -> Objective {
    let mut rng = seeded(seed);
    let inputs: Vec<Vec<f64>> = (0..24)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let labels = inputs.iter().map(|x| usize::from(x[0] * x[1] > 0.0)).collect();
    let data = Arc::new(Dataset::new(inputs, labels, None).unwrap());
    Objective::mlp(&MlpSpec { layer_sizes: vec![2, 4, 2] }, data).unwrap()
}

#[test]
fn fad_uses_one_batch_for_all_four_gradients() {
    let obj = Instrumented {
        inner: toy_mlp(1),
        seen: Mutex::new(Vec::new()),
    };
    let theta = obj.inner.as_mlp().unwrap().init(0);
    let config = OptimizerConfig {
        method: Method::Fad,
        ..Default::default()
    };
    let spec = RunSpec {
        iterations: 5,
        batch_size: Some(6),
        ..Default::default()
    };
    run_training(&obj, &theta, &config, &spec, &mut NullSink).unwrap();
    let seen = obj.seen.lock().unwrap();
    assert_eq!(seen.len(), 20);
    for step in seen.chunks(4) {
        assert!(step.iter().all(|b| b == &step[0] && b.len() == 6));
    }
    assert_ne!(seen[0], seen[4]);
}

#[test]
fn quadratic_sgd_converges() {
    let config = OptimizerConfig {
        eta0: 0.05,
        ..OptimizerConfig::with_method(Method::Sgd)
    };
    let spec = RunSpec {
        iterations: 500,
        ..Default::default()
    };
    let (theta, rec) = run_training(&diag28(), &p(&[1.0, 1.0]), &config, &spec, &mut NullSink).unwrap();
    assert!(theta.norm() < 1e-6);
    // eta < 2 / lambda_max: loss never increases on full-batch steps
    assert!(rec.losses.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn single_iteration_matches_single_step() {
    let obj = toy_mlp(3);
    let theta = obj.as_mlp().unwrap().init(1);
    let config = OptimizerConfig {
        method: Method::Fad,
        ..Default::default()
    };
    let spec = RunSpec {
        iterations: 1,
        seed: 9,
        capture_traces: true,
        ..Default::default()
    };
    let (after, rec) = run_training(&obj, &theta, &config, &spec, &mut NullSink).unwrap();
    let mut state = OptimizerState::new(obj.dim(), rng::derive_seed(9, &[1]));
    let (direct, tr) = fad_step(&obj, &theta, None, &mut state, &config).unwrap();
    assert_eq!(after, direct);
    assert_eq!(rec.traces[0], tr);
}

#[test]
fn runs_are_deterministic() {
    let obj = toy_mlp(4);
    let theta = obj.as_mlp().unwrap().init(2);
    let config = OptimizerConfig {
        method: Method::Fad,
        fad_ratio: 0.5,
        ..Default::default()
    };
    let spec = RunSpec {
        iterations: 30,
        batch_size: Some(8),
        seed: 77,
        capture_traces: true,
        ..Default::default()
    };
    let mut log_a = Vec::new();
    let mut log_b = Vec::new();
    let a = run_training(&obj, &theta, &config, &spec, &mut log_a).unwrap();
    let b = run_training(&obj, &theta, &config, &spec, &mut log_b).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert!(a.1.fad_steps > 0 && a.1.fad_steps < 30);
}

#[test]
fn fad_ratio_extremes() {
    let obj = toy_mlp(5);
    let theta = obj.as_mlp().unwrap().init(3);
    let spec = RunSpec {
        iterations: 40,
        batch_size: Some(8),
        seed: 5,
        capture_traces: true,
        ..Default::default()
    };
    let sgd = OptimizerConfig::with_method(Method::Sgd);
    let fad0 = OptimizerConfig {
        method: Method::Fad,
        fad_ratio: 0.0,
        ..sgd.clone()
    };
    let (ta, ra) = run_training(&obj, &theta, &sgd, &spec, &mut NullSink).unwrap();
    let (tb, rb) = run_training(&obj, &theta, &fad0, &spec, &mut NullSink).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(ra, rb);
    let fad1 = OptimizerConfig {
        fad_ratio: 1.0,
        ..fad0
    };
    let (_, rc) = run_training(&obj, &theta, &fad1, &spec, &mut NullSink).unwrap();
    assert_eq!(rc.fad_steps, 40);
}

#[test]
fn abort_flushes_partial_log() {
    // Rosenbrock with a huge step diverges within a few iterations.
    let obj = Objective::rosenbrock(2).unwrap();
    let config = OptimizerConfig {
        eta0: 1.0,
        ..OptimizerConfig::with_method(Method::Sgd)
    };
    let spec = RunSpec {
        iterations: 50,
        ..Default::default()
    };
    let mut log = Vec::new();
    let err = run_training(&obj, &p(&[3.0, -3.0]), &config, &spec, &mut log).unwrap_err();
    let Error::Numerical { step: Some(t), .. } = err else {
        panic!("unexpected {err}");
    };
    assert_eq!(log.len(), t - 1);
}

#[test]
fn csv_log_format() {
    let mut log = CsvLog::new(Vec::new()).unwrap();
    let spec = RunSpec {
        iterations: 3,
        ..Default::default()
    };
    run_training(&diag28(), &p(&[1.0, 1.0]), &OptimizerConfig::default(), &spec, &mut log).unwrap();
    let text = String::from_utf8(log.into_inner()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], LOG_HEADER);
    assert!(lines[1].starts_with("run,sgd,0,1,0.05,0.05,5,"));
    assert!(lines[1].ends_with(",0,0"));
}

#[test]
fn convergence_check_edge_cases() {
    let obj = diag28();
    let config = OptimizerConfig {
        method: Method::Fad,
        beta: 0.0,
        schedule: Schedule::InverseSqrt,
        ..Default::default()
    };
    let spec = RunSpec {
        iterations: 50,
        capture_traces: true,
        ..Default::default()
    };
    let (_, rec) = run_training(&obj, &p(&[0.0, 0.0]), &config, &spec, &mut NullSink).unwrap();
    let rep = convergence_check(&rec.traces, config.eta0, config.rho0).unwrap();
    assert_eq!(rep.cumulative, 0.0);
    assert_eq!((rep.c1, rep.c2), (0.0, 0.0));
    assert!(rep.schedule_ok && rep.warning.is_none());

    let constant = OptimizerConfig {
        schedule: Schedule::Constant,
        ..config
    };
    let (_, rec) = run_training(&obj, &p(&[1.0, 1.0]), &constant, &spec, &mut NullSink).unwrap();
    let rep = convergence_check(&rec.traces, constant.eta0, constant.rho0).unwrap();
    assert!(!rep.schedule_ok);
    assert!(rep.warning.is_some());

    assert!(matches!(
        convergence_check(&rec.traces[..9], 0.05, 0.05),
        Err(Error::InsufficientData { needed: 10, got: 9 })
    ));
}

fn random_quadratic(rng: &mut crate::rng::Rng, d: usize) -> Objective {
    let mut m = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let v = rng.random_range(-2.0..2.0);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Objective::quadratic(Hessian::Dense(m)).unwrap()
}

fn random_instance(seed: u64) -> (Objective, ParamVector, Option<Batch>, OptimizerConfig) {
    let mut rng = seeded(seed);
    let obj = if seed % 2 == 0 {
        let d = rng.random_range(1..8);
        random_quadratic(&mut rng, d)
    } else {
        toy_mlp(seed)
    };
    let theta = ParamVector::new((0..obj.dim()).map(|_| rng.random_range(-1.0..1.0)).collect());
    let batch = obj
        .num_samples()
        .map(|n| crate::data::sample_indices(n, 7, &mut rng).unwrap());
    let config = OptimizerConfig {
        eta0: rng.random_range(0.001..0.5),
        rho0: rng.random_range(0.0..0.5),
        alpha: rng.random_range(0.0..=1.0),
        beta: rng.random_range(0.0..2.0),
        weight_decay: if rng.random_bool(0.5) { 0.0 } else { 1e-3 },
        ..Default::default()
    };
    (obj, theta, batch, config)
}

fn run_one(
    f: fn(&Objective, &ParamVector, Option<&Batch>, &mut OptimizerState, &OptimizerConfig) -> Result<(ParamVector, StepTrace)>,
    obj: &Objective,
    theta: &ParamVector,
    batch: Option<&Batch>,
    config: &OptimizerConfig,
) -> (ParamVector, StepTrace) {
    let mut state = OptimizerState::new(theta.dim(), 0);
    f(obj, theta, batch, &mut state, config).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reduction_identities(seed in 0u64..1_000_000) {
        let (obj, theta, batch, config) = random_instance(seed);
        let b = batch.as_ref();

        let (sgd, _) = run_one(sgd_step, &obj, &theta, b, &config);
        let (fad, _) = run_one(fad_step, &obj, &theta, b, &OptimizerConfig { beta: 0.0, ..config.clone() });
        prop_assert!(sgd.max_abs_diff(&fad) <= 1e-12);

        let (gam, _) = run_one(gam_step, &obj, &theta, b, &config);
        let (fad, _) = run_one(fad_step, &obj, &theta, b, &OptimizerConfig { alpha: 0.0, ..config.clone() });
        prop_assert!(gam.max_abs_diff(&fad) <= 1e-12);

        let (sam, _) = run_one(sam_step, &obj, &theta, b, &config);
        let (fad, _) = run_one(fad_step, &obj, &theta, b, &OptimizerConfig { alpha: 1.0, beta: 1.0, ..config.clone() });
        prop_assert!(sam.max_abs_diff(&fad) <= 1e-12);

        let (mom, _) = run_one(momentum_sgd_step, &obj, &theta, b, &OptimizerConfig { momentum: 0.0, ..config.clone() });
        prop_assert!(sgd.max_abs_diff(&mom) <= 1e-12);

        let no_decay = OptimizerConfig { weight_decay: 0.0, ..config.clone() };
        let (adam, _) = run_one(adam_step, &obj, &theta, b, &no_decay);
        let (adamw, _) = run_one(adamw_step, &obj, &theta, b, &no_decay);
        prop_assert!(adam.max_abs_diff(&adamw) <= 1e-12);
    }

    #[test]
    fn delta_identity_is_exact(seed in 0u64..1_000_000) {
        let (obj, theta, batch, config) = random_instance(seed);
        let (_, tr) = run_one(fad_step, &obj, &theta, batch.as_ref(), &config);
        for i in 0..theta.dim() {
            let expected = tr.g0[i] + config.beta * (config.alpha * tr.h0[i] + (1.0 - config.alpha) * tr.h1[i]);
            prop_assert_eq!(tr.delta[i].to_bits(), expected.to_bits());
        }
    }
}
