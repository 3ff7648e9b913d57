//! Hessian spectrum probes built on finite-difference Hessian-vector products.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::objective::{hvp_fd_at, GradientOracle};
use crate::param::ParamVector;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerSettings {
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
}

impl Default for PowerSettings {
    fn default() -> Self {
        PowerSettings {
            k: 1,
            tol: 1e-8,
            max_iter: 1000,
            fd_step: crate::objective::DEFAULT_FD_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenpair {
    pub value: f64,
    pub iterations: usize,
    /// False when `max_iter` was reached before the Rayleigh quotient settled.
    pub converged: bool,
    #[serde(skip)]
    pub vector: ParamVector,
}

pub(crate) fn rademacher(dim: usize, rng: &mut Rng) -> ParamVector {
    ParamVector::new(
        (0..dim)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect(),
    )
}

/// Gram-Schmidt: remove the components of `v` along the (orthonormal) `basis`.
fn project_out(v: &mut ParamVector, basis: &[ParamVector]) {
    for b in basis {
        let c = v.dot(b);
        v.axpy(-c, b);
    }
}

/// Top-`k` Hessian eigenvalues by magnitude via power iteration with deflation.
///
/// Each eigenpair starts from a seeded Rademacher vector and is iterated on
/// the Hessian with previously found eigenvectors projected out. Iteration
/// stops once successive Rayleigh quotients differ by less than
/// `tol * max(1, |lambda|)`. The result is sorted in descending order.
pub fn power_iteration<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    settings: &PowerSettings,
    seed: u64,
) -> Result<Vec<Eigenpair>> {
    let d = obj.dim();
    if settings.k == 0 || settings.k > d {
        return Err(Error::Budget(format!(
            "top-k must lie in [1, {d}], got {}",
            settings.k
        )));
    }
    if !(settings.tol > 0.0) {
        return Err(Error::Budget(format!("tolerance must be positive, got {}", settings.tol)));
    }
    if settings.max_iter == 0 {
        return Err(Error::Budget("max_iter must be at least 1".into()));
    }
    let g0 = obj.grad(theta, batch)?;
    let mut rng = rng::derived(seed, &[0x5eed]);
    let mut basis: Vec<ParamVector> = Vec::with_capacity(settings.k);
    let mut pairs = Vec::with_capacity(settings.k);

    for _ in 0..settings.k {
        let mut v = rademacher(d, &mut rng);
        project_out(&mut v, &basis);
        let n = v.norm();
        if n == 0.0 {
            // Rademacher vector fell in the span of the basis; pick the first axis not in it.
            v = ParamVector::zeros(d);
            v[basis.len()] = 1.0;
            project_out(&mut v, &basis);
        }
        v = v.scale(1.0 / v.norm());

        let mut lambda = 0.0;
        let mut prev: Option<f64> = None;
        let mut converged = false;
        let mut iterations = 0;
        for it in 1..=settings.max_iter {
            iterations = it;
            let mut w = hvp_fd_at(obj, theta, &g0, &v, batch, settings.fd_step)?;
            project_out(&mut w, &basis);
            lambda = v.dot(&w);
            let wn = w.norm();
            if wn == 0.0 {
                converged = true;
                break;
            }
            if let Some(p) = prev {
                if (lambda - p).abs() < settings.tol * lambda.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            prev = Some(lambda);
            let mut next = w.scale(1.0 / wn);
            project_out(&mut next, &basis);
            let nn = next.norm();
            v = next.scale(1.0 / nn);
        }
        if !lambda.is_finite() {
            return Err(Error::numerical("power iteration"));
        }
        basis.push(v.clone());
        pairs.push(Eigenpair {
            value: lambda,
            iterations,
            converged,
            vector: v,
        });
    }
    pairs.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_probes: usize,
}

/// Hutchinson estimate of the Hessian trace: mean of `v^T H v` over
/// Rademacher probes. Probe `i` draws from its own stream so results do not
/// depend on how probes are scheduled.
pub fn hutchinson_trace<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    n_probes: usize,
    fd_step: f64,
    seed: u64,
) -> Result<TraceEstimate> {
    if n_probes < 2 {
        return Err(Error::Budget(format!("need at least 2 probes, got {n_probes}")));
    }
    let g0 = obj.grad(theta, batch)?;
    let samples: Vec<f64> = (0..n_probes)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::derived(seed, &[0x7ace, i as u64]);
            let v = rademacher(obj.dim(), &mut rng);
            hvp_fd_at(obj, theta, &g0, &v, batch, fd_step).map(|hv| v.dot(&hv))
        })
        .collect::<Result<_>>()?;

    // Welford, in probe order.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, x) in samples.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (n_probes - 1) as f64;
    let std_error = (var / n_probes as f64).sqrt();
    if !(mean.is_finite() && std_error.is_finite()) {
        return Err(Error::numerical("hutchinson trace"));
    }
    Ok(TraceEstimate {
        mean,
        std_error,
        n_probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{Hessian, Objective};

    #[test]
    fn diag_spectrum() {
        let q = Objective::quadratic_diag(&[2.0, 8.0]).unwrap();
        let origin = ParamVector::zeros(2);
        let top = power_iteration(&q, &origin, None, &PowerSettings::default(), 1).unwrap();
        assert!((top[0].value - 8.0).abs() < 1e-6);
        assert!(top[0].converged && top[0].iterations <= 200);
        let both = power_iteration(
            &q,
            &origin,
            None,
            &PowerSettings {
                k: 2,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert!((both[0].value - 8.0).abs() < 1e-5);
        assert!((both[1].value - 2.0).abs() < 1e-5);
    }

    #[test]
    fn invalid_budgets() {
        let q = Objective::quadratic_diag(&[2.0, 8.0]).unwrap();
        let origin = ParamVector::zeros(2);
        let bad_k = PowerSettings {
            k: 3,
            ..Default::default()
        };
        assert!(matches!(
            power_iteration(&q, &origin, None, &bad_k, 0),
            Err(Error::Budget(_))
        ));
        assert!(matches!(
            hutchinson_trace(&q, &origin, None, 1, 1e-4, 0),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn hutchinson_is_exact_on_diagonal() {
        let q = Objective::quadratic_diag(&[2.0, 8.0]).unwrap();
        let est = hutchinson_trace(&q, &ParamVector::zeros(2), None, 64, 1e-4, 3).unwrap();
        assert!((est.mean - 10.0).abs() < 1e-12);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn hutchinson_identity_gives_dimension() {
        let d = 7;
        let q = Objective::quadratic_diag(&vec![1.0; d]).unwrap();
        let est = hutchinson_trace(&q, &ParamVector::zeros(d), None, 16, 1e-4, 0).unwrap();
        assert!((est.mean - d as f64).abs() < 1e-12);
    }

    #[test]
    fn hutchinson_off_diagonal_within_three_sigma() {
        let h = Hessian::Dense(vec![vec![2.0, 1.0], vec![1.0, 8.0]]);
        let q = Objective::quadratic(h).unwrap();
        let est = hutchinson_trace(&q, &ParamVector::zeros(2), None, 1000, 1e-4, 11).unwrap();
        assert!(est.std_error > 0.0);
        assert!((est.mean - 10.0).abs() <= 3.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn zero_hessian_converges_immediately() {
        let c = Objective::Constant { dim: 3, value: 2.0 };
        let top = power_iteration(&c, &ParamVector::zeros(3), None, &PowerSettings::default(), 0).unwrap();
        assert_eq!(top[0].value, 0.0);
        assert!(top[0].converged);
    }
}
