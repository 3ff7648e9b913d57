//! Loss-landscape flatness at a parameter point.
//!
//! `R0` is the largest loss increase inside a radius-`rho` ball, `R1` is
//! `rho` times the largest gradient norm inside the same ball, and the
//! combined regularizer is `alpha R0 + (1 - alpha) R1`. At a local minimum
//! of a locally quadratic loss, `R0 = lambda_max rho^2 / 2` and
//! `R1 = lambda_max rho^2`, which [`lambda_max_from_fad`] inverts.
//!
//! The ball maxima are estimated by multi-restart projected gradient
//! ascent. Restart `i` draws its start from its own seeded stream and the
//! restarts are reduced with `max`, so the estimate does not depend on
//! scheduling.

mod spectrum;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand_distr::{Distribution, StandardNormal};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use spectrum::{hutchinson_trace, power_iteration, Eigenpair, PowerSettings, TraceEstimate};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::objective::{hvp_fd_at, GradientOracle, DEFAULT_FD_STEP};
use crate::param::ParamVector;
use crate::rng::{self, Rng};

/// Search budget for the ball-maximum estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BallBudget {
    /// Independent uniform-in-ball starting points.
    pub n_random: usize,
    /// Projected ascent steps per start.
    pub n_ascent_steps: usize,
    /// Ascent step length as a multiple of `rho`.
    pub ascent_step: f64,
    /// Finite-difference step for the gradient-norm ascent direction.
    pub fd_step: f64,
}

impl Default for BallBudget {
    fn default() -> Self {
        BallBudget {
            n_random: 16,
            n_ascent_steps: 200,
            ascent_step: 1.0,
            fd_step: DEFAULT_FD_STEP,
        }
    }
}

impl BallBudget {
    fn validate(&self) -> Result<()> {
        if self.n_random == 0 {
            return Err(Error::Budget("at least one random start is required".into()));
        }
        if !(self.ascent_step > 0.0 && self.ascent_step.is_finite()) {
            return Err(Error::Budget(format!("ascent_step must be positive, got {}", self.ascent_step)));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::Budget(format!("fd_step must be positive, got {}", self.fd_step)));
        }
        Ok(())
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho >= 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("rho must be a non-negative number, got {rho}")))
    }
}

/// Uniform sample from the ball of radius `rho` in `dim` dimensions.
fn uniform_in_ball(dim: usize, rho: f64, rng: &mut Rng) -> ParamVector {
    loop {
        let dir = ParamVector::new((0..dim).map(|_| StandardNormal.sample(rng)).collect());
        let n = dir.norm();
        if n > 0.0 {
            let r = rho * rng.random::<f64>().powf(1.0 / dim as f64);
            return dir.scale(r / n);
        }
    }
}

/// Pull `eps` back onto the ball if it left it.
fn project(eps: &mut ParamVector, rho: f64) {
    let n = eps.norm();
    if n > rho {
        *eps = eps.scale(rho / n);
    }
}

fn restart_rng(seed: u64, which: u64, i: usize) -> Rng {
    rng::derived(seed, &[which, i as u64])
}

/// Estimate `max_{|eps| <= rho} L(theta + eps) - L(theta)`, clamped below at 0.
pub fn zeroth_order_flatness<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    rho: f64,
    batch: Option<&Batch>,
    budget: &BallBudget,
    seed: u64,
) -> Result<f64> {
    check_rho(rho)?;
    budget.validate()?;
    if rho == 0.0 {
        return Ok(0.0);
    }
    let base = obj.loss(theta, batch)?;
    let step = budget.ascent_step * rho;
    let best = (0..budget.n_random)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut rng = restart_rng(seed, 0, i);
            let mut eps = uniform_in_ball(theta.dim(), rho, &mut rng);
            let mut best = f64::NEG_INFINITY;
            for k in 0..=budget.n_ascent_steps {
                let (f, g) = obj.loss_grad(&theta.add(&eps), batch)?;
                best = best.max(f - base);
                let gn = g.norm();
                if k == budget.n_ascent_steps || gn == 0.0 {
                    break;
                }
                eps.axpy(step / gn, &g);
                project(&mut eps, rho);
            }
            Ok(best)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(best)
}

/// Estimate `rho * max_{|eps| <= rho} |grad L(theta + eps)|`.
///
/// The ascent direction for the gradient norm is `H g / |g|`, taken by
/// finite differences of gradients.
pub fn first_order_flatness<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    rho: f64,
    batch: Option<&Batch>,
    budget: &BallBudget,
    seed: u64,
) -> Result<f64> {
    check_rho(rho)?;
    budget.validate()?;
    if rho == 0.0 {
        return Ok(0.0);
    }
    let step = budget.ascent_step * rho;
    let best = (0..budget.n_random)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut rng = restart_rng(seed, 1, i);
            let mut eps = uniform_in_ball(theta.dim(), rho, &mut rng);
            let mut point = theta.add(&eps);
            let mut g = obj.grad(&point, batch)?;
            let mut best = g.norm();
            for _ in 0..budget.n_ascent_steps {
                let gn = g.norm();
                if gn == 0.0 {
                    break;
                }
                let dir = hvp_fd_at(obj, &point, &g, &g, batch, budget.fd_step)?;
                let dn = dir.norm();
                if dn == 0.0 {
                    break;
                }
                eps.axpy(step / dn, &dir);
                project(&mut eps, rho);
                point = theta.add(&eps);
                g = obj.grad(&point, batch)?;
                best = best.max(g.norm());
            }
            Ok(best)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(rho * best)
}

/// `alpha * r0 + (1 - alpha) * r1`
pub fn fad_regularizer(r0: f64, r1: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(alpha * r0 + (1.0 - alpha) * r1)
}

/// Loss plus the weighted flatness regularizer, `L + beta * R_fad`.
#[allow(clippy::too_many_arguments)]
pub fn total_objective<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    rho: f64,
    alpha: f64,
    beta: f64,
    batch: Option<&Batch>,
    budget: &BallBudget,
    seed: u64,
) -> Result<f64> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    check_rho(rho)?;
    let loss = obj.loss(theta, batch)?;
    if beta == 0.0 || rho == 0.0 {
        fad_regularizer(0.0, 0.0, alpha)?;
        return Ok(loss);
    }
    let r0 = zeroth_order_flatness(obj, theta, rho, batch, budget, seed)?;
    let r1 = first_order_flatness(obj, theta, rho, batch, budget, seed)?;
    Ok(loss + beta * fad_regularizer(r0, r1, alpha)?)
}

/// Dominant Hessian eigenvalue implied by the regularizer value at a local
/// minimum: `r_fad / (rho^2 (1 - alpha / 2))`.
pub fn lambda_max_from_fad(r_fad: f64, rho: f64, alpha: f64) -> Result<f64> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!("rho must be positive for the eigenvalue identity, got {rho}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(r_fad / (rho * rho * (1.0 - alpha / 2.0)))
}

/// Counts gradient evaluations passing through it.
pub struct Counting<'a, O: ?Sized> {
    inner: &'a O,
    calls: AtomicUsize,
}

impl<'a, O: GradientOracle + ?Sized> Counting<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        Counting {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<O: GradientOracle + ?Sized> GradientOracle for Counting<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn loss_grad(&self, theta: &ParamVector, batch: Option<&Batch>) -> Result<(f64, ParamVector)> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.loss_grad(theta, batch)
    }

    fn loss(&self, theta: &ParamVector, batch: Option<&Batch>) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.loss(theta, batch)
    }

    fn num_samples(&self) -> Option<usize> {
        self.inner.num_samples()
    }
}

/// What to measure for a [`FlatnessReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlatnessSettings {
    pub rho: f64,
    pub alpha: f64,
    pub ball: BallBudget,
    pub power: PowerSettings,
    pub n_probes: usize,
    /// Skip the ball estimators (`r0`, `r1`); they dominate the cost on large models.
    pub skip_ball: bool,
}

impl Default for FlatnessSettings {
    fn default() -> Self {
        FlatnessSettings {
            rho: 0.05,
            alpha: 0.5,
            ball: BallBudget::default(),
            power: PowerSettings::default(),
            n_probes: 100,
            skip_ball: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeBudget {
    pub n_random: usize,
    pub n_ascent_steps: usize,
    pub ascent_step: f64,
    pub fd_step: f64,
    pub top_k: usize,
    pub power_tol: f64,
    pub power_max_iter: usize,
    pub power_converged: bool,
    pub n_probes: usize,
    /// Loss/gradient evaluations spent on the whole report.
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub rho: f64,
    pub alpha: f64,
    pub r0: f64,
    pub r1: f64,
    pub r_fad: f64,
    pub lambda_max: f64,
    pub top_eigs: Vec<f64>,
    pub trace: f64,
    pub trace_stderr: f64,
    pub budget: ProbeBudget,
    pub seed: u64,
    /// Eigenvalue implied by `r_fad` through the minimum identity; present when `rho > 0`.
    pub lambda_max_from_fad: Option<f64>,
}

/// Measure every flatness quantity at `theta`.
pub fn flatness_report<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    settings: &FlatnessSettings,
    seed: u64,
) -> Result<FlatnessReport> {
    theta.check_dim(obj.dim())?;
    let counted = Counting::new(obj);
    let (r0, r1) = if settings.skip_ball {
        (0.0, 0.0)
    } else {
        (
            zeroth_order_flatness(&counted, theta, settings.rho, batch, &settings.ball, seed)?,
            first_order_flatness(&counted, theta, settings.rho, batch, &settings.ball, seed)?,
        )
    };
    let r_fad = fad_regularizer(r0, r1, settings.alpha)?;
    let eigs = power_iteration(&counted, theta, batch, &settings.power, seed)?;
    let trace = hutchinson_trace(&counted, theta, batch, settings.n_probes, settings.ball.fd_step, seed)?;
    let lambda_max_from_fad = if settings.rho > 0.0 && !settings.skip_ball {
        Some(lambda_max_from_fad(r_fad, settings.rho, settings.alpha)?)
    } else {
        None
    };
    Ok(FlatnessReport {
        rho: settings.rho,
        alpha: settings.alpha,
        r0,
        r1,
        r_fad,
        lambda_max: eigs[0].value,
        top_eigs: eigs.iter().map(|e| e.value).collect(),
        trace: trace.mean,
        trace_stderr: trace.std_error,
        budget: ProbeBudget {
            n_random: settings.ball.n_random,
            n_ascent_steps: settings.ball.n_ascent_steps,
            ascent_step: settings.ball.ascent_step,
            fd_step: settings.ball.fd_step,
            top_k: settings.power.k,
            power_tol: settings.power.tol,
            power_max_iter: settings.power.max_iter,
            power_converged: eigs.iter().all(|e| e.converged),
            n_probes: settings.n_probes,
            evaluations: counted.calls(),
        },
        seed,
        lambda_max_from_fad,
    })
}

#[cfg(test)]
mod tests;
