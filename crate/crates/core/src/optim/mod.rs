//! Optimizer step rules and the training loop.
//!
//! Every step function has the same shape: it reads `theta`, evaluates the
//! oracle on one batch, mutates only its own [`OptimizerState`] and returns
//! the new point together with a [`StepTrace`].

mod convergence;
mod train;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use convergence::{convergence_check, ConvergenceReport};
pub use train::{run_training, CsvLog, LogRow, LogSink, NullSink, RunRecord, RunSpec, LOG_HEADER};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::objective::GradientOracle;
use crate::param::ParamVector;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgd,
    MomentumSgd,
    Adam,
    Adamw,
    Sam,
    Gam,
    Fad,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Sgd,
        Method::MomentumSgd,
        Method::Adam,
        Method::Adamw,
        Method::Sam,
        Method::Gam,
        Method::Fad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::MomentumSgd => "momentum_sgd",
            Method::Adam => "adam",
            Method::Adamw => "adamw",
            Method::Sam => "sam",
            Method::Gam => "gam",
            Method::Fad => "fad",
        }
    }

    /// Gradient evaluations per step when every correction is applied.
    pub fn grads_per_step(self) -> usize {
        match self {
            Method::Sam => 2,
            Method::Gam | Method::Fad => 4,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `eta0 / sqrt(t)` and `rho0 / sqrt(t)` with 1-indexed `t`.
    InverseSqrt,
}

pub const DEFAULT_XI: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub eta0: f64,
    pub rho0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub xi: f64,
    pub schedule: Schedule,
    pub fad_ratio: f64,
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: Method::Sgd,
            eta0: 0.05,
            rho0: 0.05,
            alpha: 0.5,
            beta: 1.0,
            xi: DEFAULT_XI,
            schedule: Schedule::Constant,
            fad_ratio: 1.0,
            momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn with_method(method: Method) -> Self {
        OptimizerConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let all = [
            self.eta0,
            self.rho0,
            self.alpha,
            self.beta,
            self.xi,
            self.fad_ratio,
            self.momentum,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.weight_decay,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return fail("optimizer hyperparameters must be finite".into());
        }
        if self.eta0 <= 0.0 {
            return fail(format!("eta0 must be positive, got {}", self.eta0));
        }
        if self.rho0 < 0.0 {
            return fail(format!("rho0 must be non-negative, got {}", self.rho0));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.beta < 0.0 {
            return fail(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.xi <= 0.0 {
            return fail(format!("xi must be positive, got {}", self.xi));
        }
        if !(0.0..=1.0).contains(&self.fad_ratio) {
            return fail(format!("fad_ratio must lie in [0, 1], got {}", self.fad_ratio));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.adam_eps <= 0.0 {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.weight_decay < 0.0 {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }

    /// Learning rate at 1-indexed step `t`.
    pub fn eta_at(&self, t: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.eta0,
            Schedule::InverseSqrt => self.eta0 / (t as f64).sqrt(),
        }
    }

    /// Perturbation radius at 1-indexed step `t`.
    pub fn rho_at(&self, t: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.rho0,
            Schedule::InverseSqrt => self.rho0 / (t as f64).sqrt(),
        }
    }
}

/// Mutable per-run buffers. Owned by exactly one run.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    /// Number of completed steps.
    pub t: usize,
    velocity: ParamVector,
    first_moment: ParamVector,
    second_moment: ParamVector,
    rng: Rng,
}

impl OptimizerState {
    pub fn new(dim: usize, seed: u64) -> Self {
        OptimizerState {
            t: 0,
            velocity: ParamVector::zeros(dim),
            first_moment: ParamVector::zeros(dim),
            second_moment: ParamVector::zeros(dim),
            rng: rng::seeded(seed),
        }
    }

    pub fn dim(&self) -> usize {
        self.velocity.dim()
    }
}

/// Everything one step computed. Vectors that a method never evaluates are
/// `None` (for `g1..g3`) or zero (for `h0`, `h1`).
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// 1-indexed step number.
    pub t: usize,
    pub g0: ParamVector,
    pub g1: Option<ParamVector>,
    pub g2: Option<ParamVector>,
    pub g3: Option<ParamVector>,
    pub h0: ParamVector,
    pub h1: ParamVector,
    /// Update direction: `theta' = theta - eta_t * (delta + coupled decay)`.
    pub delta: ParamVector,
    pub norm_g0: f64,
    pub norm_h0: f64,
    pub norm_h1: f64,
    pub norm_delta: f64,
    pub eta_t: f64,
    pub rho_t: f64,
    pub loss_before: f64,
    pub fad_applied: bool,
}

impl StepTrace {
    fn new(t: usize, eta_t: f64, rho_t: f64, loss_before: f64, g0: ParamVector) -> Self {
        let dim = g0.dim();
        StepTrace {
            t,
            norm_g0: g0.norm(),
            delta: g0.clone(),
            norm_delta: 0.0,
            g0,
            g1: None,
            g2: None,
            g3: None,
            h0: ParamVector::zeros(dim),
            h1: ParamVector::zeros(dim),
            norm_h0: 0.0,
            norm_h1: 0.0,
            eta_t,
            rho_t,
            loss_before,
            fad_applied: false,
        }
    }

    fn finish(mut self) -> Self {
        self.norm_h0 = self.h0.norm();
        self.norm_h1 = self.h1.norm();
        self.norm_delta = self.delta.norm();
        self
    }
}

struct StepContext {
    t: usize,
    eta: f64,
    rho: f64,
}

fn begin(state: &OptimizerState, theta: &ParamVector, config: &OptimizerConfig) -> Result<StepContext> {
    if state.dim() != theta.dim() {
        return Err(Error::Dimension {
            expected: state.dim(),
            got: theta.dim(),
        });
    }
    if !theta.is_finite() {
        return Err(Error::numerical("parameters").at_step(state.t + 1));
    }
    let t = state.t + 1;
    Ok(StepContext {
        t,
        eta: config.eta_at(t),
        rho: config.rho_at(t),
    })
}

fn grad_at<O: GradientOracle + ?Sized>(obj: &O, p: &ParamVector, batch: Option<&Batch>, t: usize) -> Result<ParamVector> {
    obj.grad(p, batch).map_err(|e| e.at_step(t))
}

/// `p + rho * d / (|d| + xi)`
fn ascend(p: &ParamVector, d: &ParamVector, rho: f64, xi: f64) -> ParamVector {
    p.add_scaled(rho / (d.norm() + xi), d)
}

/// `theta - eta * (direction + wd * theta)`, the SGD-family update with coupled decay.
fn descend(theta: &ParamVector, direction: &ParamVector, eta: f64, wd: f64) -> ParamVector {
    if wd == 0.0 {
        theta.add_scaled(-eta, direction)
    } else {
        theta.add_scaled(-eta, &direction.add_scaled(wd, theta))
    }
}

fn commit(state: &mut OptimizerState, next: ParamVector, trace: StepTrace) -> Result<(ParamVector, StepTrace)> {
    if !next.is_finite() {
        return Err(Error::numerical("updated parameters").at_step(trace.t));
    }
    state.t = trace.t;
    Ok((next, trace.finish()))
}

pub fn sgd_step<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<(ParamVector, StepTrace)> {
    let cx = begin(state, theta, config)?;
    let (loss, g0) = obj.loss_grad(theta, batch).map_err(|e| e.at_step(cx.t))?;
    let trace = StepTrace::new(cx.t, cx.eta, cx.rho, loss, g0);
    let next = descend(theta, &trace.delta, cx.eta, config.weight_decay);
    commit(state, next, trace)
}

pub fn momentum_sgd_step<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<(ParamVector, StepTrace)> {
    let cx = begin(state, theta, config)?;
    let (loss, g0) = obj.loss_grad(theta, batch).map_err(|e| e.at_step(cx.t))?;
    let mut trace = StepTrace::new(cx.t, cx.eta, cx.rho, loss, g0);
    let g = if config.weight_decay == 0.0 {
        trace.g0.clone()
    } else {
        trace.g0.add_scaled(config.weight_decay, theta)
    };
    let mu = config.momentum;
    for (v, gi) in state.velocity.as_mut_slice().iter_mut().zip(g.iter()) {
        *v = mu * *v + gi;
    }
    trace.delta = state.velocity.clone();
    let next = theta.add_scaled(-cx.eta, &trace.delta);
    commit(state, next, trace)
}

fn adam_like<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    decoupled: bool,
) -> Result<(ParamVector, StepTrace)> {
    let cx = begin(state, theta, config)?;
    let (loss, g0) = obj.loss_grad(theta, batch).map_err(|e| e.at_step(cx.t))?;
    let mut trace = StepTrace::new(cx.t, cx.eta, cx.rho, loss, g0);
    let wd = config.weight_decay;
    let g = if decoupled || wd == 0.0 {
        trace.g0.clone()
    } else {
        trace.g0.add_scaled(wd, theta)
    };
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let bias1 = 1.0 - b1.powi(cx.t as i32);
    let bias2 = 1.0 - b2.powi(cx.t as i32);
    let mut dir = ParamVector::zeros(theta.dim());
    for i in 0..theta.dim() {
        let m = &mut state.first_moment[i];
        *m = b1 * *m + (1.0 - b1) * g[i];
        let v = &mut state.second_moment[i];
        *v = b2 * *v + (1.0 - b2) * g[i] * g[i];
        let m_hat = state.first_moment[i] / bias1;
        let v_hat = state.second_moment[i] / bias2;
        dir[i] = m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    let next = if decoupled {
        let decayed = theta.scale(1.0 - cx.eta * wd);
        trace.delta = if wd == 0.0 { dir.clone() } else { dir.add_scaled(wd, theta) };
        decayed.add_scaled(-cx.eta, &dir)
    } else {
        trace.delta = dir;
        theta.add_scaled(-cx.eta, &trace.delta)
    };
    commit(state, next, trace)
}

/// Adam with bias-corrected moments; weight decay is added to the gradient.
pub fn adam_step<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<(ParamVector, StepTrace)> {
    adam_like(obj, theta, batch, state, config, false)
}

/// Adam with decoupled weight decay: `theta <- theta (1 - eta wd)` before the Adam update.
pub fn adamw_step<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<(ParamVector, StepTrace)> {
    adam_like(obj, theta, batch, state, config, true)
}

/// Sharpness-aware step: descend along the gradient taken at the ascent point
/// `theta + rho g0 / (|g0| + xi)`.
pub fn sam_step<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<(ParamVector, StepTrace)> {
    let cx = begin(state, theta, config)?;
    let (loss, g0) = obj.loss_grad(theta, batch).map_err(|e| e.at_step(cx.t))?;
    let mut trace = StepTrace::new(cx.t, cx.eta, cx.rho, loss, g0);
    let g1 = grad_at(obj, &ascend(theta, &trace.g0, cx.rho, config.xi), batch, cx.t)?;
    trace.h0 = g1.sub(&trace.g0);
    trace.delta = g1.clone();
    trace.g1 = Some(g1);
    let next = descend(theta, &trace.delta, cx.eta, config.weight_decay);
    commit(state, next, trace)
}

/// The four-gradient flatness probe shared by GAM and FAD: fills `g1..g3`,
/// `h0 = g1 - g0` (zeroth-order flatness gradient) and `h1 = g3 - g2`
/// (first-order flatness gradient). All evaluations use the same batch.
fn flatness_probe<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    trace: &mut StepTrace,
    rho: f64,
    xi: f64,
) -> Result<()> {
    let t = trace.t;
    let g0 = &trace.g0;
    let g1 = grad_at(obj, &ascend(theta, g0, rho, xi), batch, t)?;
    let h0 = g1.sub(g0);
    let probe = ascend(theta, &h0, rho, xi);
    let g2 = grad_at(obj, &probe, batch, t)?;
    let g3 = grad_at(obj, &ascend(&probe, &g2, rho, xi), batch, t)?;
    trace.h1 = g3.sub(&g2);
    trace.h0 = h0;
    trace.g1 = Some(g1);
    trace.g2 = Some(g2);
    trace.g3 = Some(g3);
    Ok(())
}

/// First-order-flatness step in its Hessian-free form: `delta = g0 + beta h1`.
pub fn gam_step<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<(ParamVector, StepTrace)> {
    let cx = begin(state, theta, config)?;
    let (loss, g0) = obj.loss_grad(theta, batch).map_err(|e| e.at_step(cx.t))?;
    let mut trace = StepTrace::new(cx.t, cx.eta, cx.rho, loss, g0);
    flatness_probe(obj, theta, batch, &mut trace, cx.rho, config.xi)?;
    trace.delta = trace.g0.add_scaled(config.beta, &trace.h1);
    trace.fad_applied = true;
    let next = descend(theta, &trace.delta, cx.eta, config.weight_decay);
    commit(state, next, trace)
}

/// Flatness-aware step: `delta = g0 + beta (alpha h0 + (1 - alpha) h1)`.
///
/// With probability `1 - fad_ratio` (one uniform draw per step from the
/// state's generator) the correction is skipped and the step is plain SGD.
pub fn fad_step<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<(ParamVector, StepTrace)> {
    let cx = begin(state, theta, config)?;
    let apply = state.rng.random::<f64>() < config.fad_ratio;
    let (loss, g0) = obj.loss_grad(theta, batch).map_err(|e| e.at_step(cx.t))?;
    let mut trace = StepTrace::new(cx.t, cx.eta, cx.rho, loss, g0);
    if apply {
        flatness_probe(obj, theta, batch, &mut trace, cx.rho, config.xi)?;
        let (a, b) = (config.alpha, config.beta);
        let mut delta = ParamVector::zeros(theta.dim());
        for i in 0..theta.dim() {
            delta[i] = trace.g0[i] + b * (a * trace.h0[i] + (1.0 - a) * trace.h1[i]);
        }
        trace.delta = delta;
        trace.fad_applied = true;
    }
    let next = descend(theta, &trace.delta, cx.eta, config.weight_decay);
    commit(state, next, trace)
}

/// Dispatch on `config.method`.
pub fn step<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    batch: Option<&Batch>,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<(ParamVector, StepTrace)> {
    let f = match config.method {
        Method::Sgd => sgd_step::<O>,
        Method::MomentumSgd => momentum_sgd_step::<O>,
        Method::Adam => adam_step::<O>,
        Method::Adamw => adamw_step::<O>,
        Method::Sam => sam_step::<O>,
        Method::Gam => gam_step::<O>,
        Method::Fad => fad_step::<O>,
    };
    f(obj, theta, batch, state, config)
}

#[cfg(test)]
mod tests;
