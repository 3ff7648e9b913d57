//! Gradient oracles.
//!
//! Every objective is a pure function of `(theta, batch)`: evaluating twice
//! with the same inputs gives bitwise-identical loss and gradient. Analytic
//! objectives ignore the batch; the MLP averages over it (`None` = full data).

mod mlp;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use mlp::{Mlp, MlpSpec};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::param::ParamVector;

/// Anything that can report a loss and its gradient at a parameter point.
pub trait GradientOracle: Sync {
    fn dim(&self) -> usize;

    fn loss_grad(&self, theta: &ParamVector, batch: Option<&Batch>) -> Result<(f64, ParamVector)>;

    fn loss(&self, theta: &ParamVector, batch: Option<&Batch>) -> Result<f64> {
        self.loss_grad(theta, batch).map(|(l, _)| l)
    }

    fn grad(&self, theta: &ParamVector, batch: Option<&Batch>) -> Result<ParamVector> {
        self.loss_grad(theta, batch).map(|(_, g)| g)
    }

    /// Number of samples minibatches are drawn from, or `None` for analytic
    /// objectives that have no data.
    fn num_samples(&self) -> Option<usize> {
        None
    }
}

/// Hessian of a quadratic objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hessian {
    Diagonal(Vec<f64>),
    /// Row-major square matrix.
    Dense(Vec<Vec<f64>>),
}

impl Hessian {
    pub fn dim(&self) -> usize {
        match self {
            Hessian::Diagonal(d) => d.len(),
            Hessian::Dense(m) => m.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::Config("quadratic Hessian is empty".into()));
        }
        match self {
            Hessian::Diagonal(v) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Config("quadratic Hessian has non-finite entries".into()));
                }
            }
            Hessian::Dense(m) => {
                for (i, row) in m.iter().enumerate() {
                    if row.len() != d {
                        return Err(Error::Config(format!("Hessian row {i} has length {}", row.len())));
                    }
                    if row.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Config("quadratic Hessian has non-finite entries".into()));
                    }
                    for j in 0..i {
                        if m[i][j] != m[j][i] {
                            return Err(Error::Config(format!(
                                "Hessian is not symmetric at ({i}, {j})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Hessian::Diagonal(h) => h.iter().zip(v).map(|(a, b)| a * b).collect(),
            Hessian::Dense(m) => m
                .iter()
                .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            Hessian::Diagonal(h) => h.iter().sum(),
            Hessian::Dense(m) => (0..m.len()).map(|i| m[i][i]).sum(),
        }
    }
}

/// Two quadratic basins in one dimension; the loss is the lower of the two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleWell {
    pub sharp_center: f64,
    pub sharp_curvature: f64,
    pub flat_center: f64,
    pub flat_curvature: f64,
    /// Added to the flat basin; negative values make it the deeper one.
    #[serde(default)]
    pub flat_offset: f64,
}

impl Default for DoubleWell {
    fn default() -> Self {
        DoubleWell {
            sharp_center: -1.0,
            sharp_curvature: 50.0,
            flat_center: 1.0,
            flat_curvature: 2.0,
            flat_offset: 0.0,
        }
    }
}

impl DoubleWell {
    fn eval(&self, x: f64) -> (f64, f64) {
        let ds = x - self.sharp_center;
        let df = x - self.flat_center;
        let sharp = 0.5 * self.sharp_curvature * ds * ds;
        let flat = 0.5 * self.flat_curvature * df * df + self.flat_offset;
        if sharp <= flat {
            (sharp, self.sharp_curvature * ds)
        } else {
            (flat, self.flat_curvature * df)
        }
    }
}

#[derive(Debug, Clone)]
pub enum Objective {
    /// `0.5 * theta^T H theta`
    Quadratic(Hessian),
    /// Chained Rosenbrock, `sum_i 100 (x_{i+1} - x_i^2)^2 + (1 - x_i)^2`.
    Rosenbrock { dim: usize },
    DoubleWell(DoubleWell),
    /// `c^T theta`
    Linear(Vec<f64>),
    Constant { dim: usize, value: f64 },
    Mlp(Arc<Mlp>),
}

impl Objective {
    pub fn quadratic(h: Hessian) -> Result<Objective> {
        h.validate()?;
        Ok(Objective::Quadratic(h))
    }

    pub fn quadratic_diag(diag: &[f64]) -> Result<Objective> {
        Objective::quadratic(Hessian::Diagonal(diag.to_vec()))
    }

    pub fn rosenbrock(dim: usize) -> Result<Objective> {
        if dim < 2 {
            return Err(Error::Config("rosenbrock needs at least 2 dimensions".into()));
        }
        Ok(Objective::Rosenbrock { dim })
    }

    pub fn mlp(spec: &MlpSpec, data: Arc<Dataset>) -> Result<Objective> {
        Ok(Objective::Mlp(Arc::new(Mlp::new(spec, data)?)))
    }

    pub fn param_count(&self) -> usize {
        match self {
            Objective::Quadratic(h) => h.dim(),
            Objective::Rosenbrock { dim } => *dim,
            Objective::DoubleWell(_) => 1,
            Objective::Linear(c) => c.len(),
            Objective::Constant { dim, .. } => *dim,
            Objective::Mlp(m) => m.num_params(),
        }
    }

    pub fn as_mlp(&self) -> Option<&Mlp> {
        match self {
            Objective::Mlp(m) => Some(m),
            _ => None,
        }
    }

    fn analytic(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self {
            Objective::Quadratic(h) => {
                let hx = h.apply(x);
                let f = 0.5 * x.iter().zip(&hx).map(|(a, b)| a * b).sum::<f64>();
                (f, hx)
            }
            Objective::Rosenbrock { dim } => {
                let mut f = 0.0;
                let mut g = vec![0.0; *dim];
                for i in 0..dim - 1 {
                    let a = x[i + 1] - x[i] * x[i];
                    let b = 1.0 - x[i];
                    f += 100.0 * a * a + b * b;
                    g[i] += -400.0 * a * x[i] - 2.0 * b;
                    g[i + 1] += 200.0 * a;
                }
                (f, g)
            }
            Objective::DoubleWell(w) => {
                let (f, g) = w.eval(x[0]);
                (f, vec![g])
            }
            Objective::Linear(c) => (c.iter().zip(x).map(|(a, b)| a * b).sum(), c.clone()),
            Objective::Constant { dim, value } => (*value, vec![0.0; *dim]),
            Objective::Mlp(_) => unreachable!("mlp is not analytic"),
        }
    }
}

impl GradientOracle for Objective {
    fn dim(&self) -> usize {
        self.param_count()
    }

    fn loss_grad(&self, theta: &ParamVector, batch: Option<&Batch>) -> Result<(f64, ParamVector)> {
        theta.check_dim(self.param_count())?;
        let (f, g) = match self {
            Objective::Mlp(m) => m.loss_grad(theta.as_slice(), batch)?,
            _ => self.analytic(theta.as_slice()),
        };
        if !f.is_finite() {
            return Err(Error::numerical("loss"));
        }
        let g = ParamVector::new(g);
        if !g.is_finite() {
            return Err(Error::numerical("gradient"));
        }
        Ok((f, g))
    }

    fn loss(&self, theta: &ParamVector, batch: Option<&Batch>) -> Result<f64> {
        theta.check_dim(self.param_count())?;
        let f = match self {
            Objective::Mlp(m) => m.loss(theta.as_slice(), batch)?,
            _ => self.analytic(theta.as_slice()).0,
        };
        if f.is_finite() {
            Ok(f)
        } else {
            Err(Error::numerical("loss"))
        }
    }

    fn num_samples(&self) -> Option<usize> {
        self.as_mlp().map(|m| m.data().len())
    }
}

/// Mean per-sample loss over the batch, or `f(theta)` for analytic objectives.
pub fn eval_loss(obj: &impl GradientOracle, theta: &ParamVector, batch: Option<&Batch>) -> Result<f64> {
    obj.loss(theta, batch)
}

pub fn eval_grad(obj: &impl GradientOracle, theta: &ParamVector, batch: Option<&Batch>) -> Result<ParamVector> {
    obj.grad(theta, batch)
}

/// Default finite-difference step, applied after normalizing the direction.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Forward-difference Hessian-vector product:
/// `(grad(theta + h v/|v|) - grad(theta)) * |v| / h`.
pub fn hvp_fd<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    v: &ParamVector,
    batch: Option<&Batch>,
    h: f64,
) -> Result<ParamVector> {
    let g0 = obj.grad(theta, batch)?;
    hvp_fd_at(obj, theta, &g0, v, batch, h)
}

/// [`hvp_fd`] with the base gradient already known, saving one evaluation.
pub fn hvp_fd_at<O: GradientOracle + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    grad_at_theta: &ParamVector,
    v: &ParamVector,
    batch: Option<&Batch>,
    h: f64,
) -> Result<ParamVector> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    theta.check_dim(obj.dim())?;
    v.check_dim(obj.dim())?;
    let vn = v.norm();
    if vn == 0.0 {
        return Err(Error::DegenerateDirection);
    }
    if !vn.is_finite() {
        return Err(Error::numerical("hvp direction"));
    }
    let shifted = theta.add_scaled(h / vn, v);
    let g1 = obj.grad(&shifted, batch)?;
    let out = g1.sub(grad_at_theta).scale(vn / h);
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::numerical("hessian-vector product"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn p(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    /// Central differences, independent of any analytic gradient code.
    fn fd_grad(obj: &Objective, theta: &ParamVector, h: f64) -> ParamVector {
        let mut g = ParamVector::zeros(theta.dim());
        for i in 0..theta.dim() {
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[i] += h;
            b[i] -= h;
            g[i] = (obj.loss(&a, None).unwrap() - obj.loss(&b, None).unwrap()) / (2.0 * h);
        }
        g
    }

    #[test]
    fn quadratic_values() {
        let q = Objective::quadratic_diag(&[2.0, 8.0]).unwrap();
        assert_eq!(eval_loss(&q, &p(&[0.0, 0.0]), None).unwrap(), 0.0);
        // 0.5 * (2*1 + 8*1)
        assert_eq!(eval_loss(&q, &p(&[1.0, 1.0]), None).unwrap(), 5.0);
        assert_eq!(eval_grad(&q, &p(&[1.0, 1.0]), None).unwrap(), p(&[2.0, 8.0]));
    }

    #[test]
    fn rosenbrock_minimum() {
        let r = Objective::rosenbrock(2).unwrap();
        assert_eq!(eval_loss(&r, &p(&[1.0, 1.0]), None).unwrap(), 0.0);
        assert_eq!(eval_grad(&r, &p(&[1.0, 1.0]), None).unwrap(), p(&[0.0, 0.0]));
        assert!(Objective::rosenbrock(1).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let q = Objective::quadratic_diag(&[2.0, 8.0]).unwrap();
        assert!(matches!(
            eval_loss(&q, &p(&[1.0]), None),
            Err(Error::Dimension { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn overflow_is_numerical_error() {
        let q = Objective::quadratic_diag(&[2.0]).unwrap();
        let err = eval_loss(&q, &p(&[1e200]), None).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn asymmetric_hessian_rejected() {
        let h = Hessian::Dense(vec![vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(Objective::quadratic(h).is_err());
    }

    #[test]
    fn dense_quadratic_gradient_is_h_theta() {
        let h = Hessian::Dense(vec![vec![2.0, 1.0], vec![1.0, 8.0]]);
        let q = Objective::quadratic(h).unwrap();
        assert_eq!(q.grad(&p(&[1.0, -1.0]), None).unwrap(), p(&[1.0, -7.0]));
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut rng = seeded(5);
        let objs = vec![
            Objective::quadratic_diag(&[2.0, 8.0, 0.5]).unwrap(),
            Objective::quadratic(Hessian::Dense(vec![
                vec![3.0, -1.0, 0.5],
                vec![-1.0, 2.0, 0.0],
                vec![0.5, 0.0, 1.0],
            ]))
            .unwrap(),
            Objective::rosenbrock(4).unwrap(),
            Objective::DoubleWell(DoubleWell::default()),
            Objective::Linear(vec![1.0, -2.0]),
            Objective::Constant { dim: 3, value: 1.5 },
        ];
        for obj in &objs {
            for _ in 0..100 {
                let theta = ParamVector::new(
                    (0..obj.param_count())
                        .map(|_| rng.random_range(-1.5..1.5))
                        .collect(),
                );
                let g = obj.grad(&theta, None).unwrap();
                let fd = fd_grad(obj, &theta, 1e-5);
                assert!(g.max_abs_diff(&fd) < 1e-4, "{obj:?} at {theta:?}");
            }
        }
    }

    #[test]
    fn double_well_basins() {
        let w = Objective::DoubleWell(DoubleWell::default());
        assert_eq!(w.loss(&p(&[-1.0]), None).unwrap(), 0.0);
        assert_eq!(w.loss(&p(&[1.0]), None).unwrap(), 0.0);
        assert!((w.grad(&p(&[-0.9]), None).unwrap()[0] - 5.0).abs() < 1e-12);
        assert!((w.grad(&p(&[0.8]), None).unwrap()[0] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn hvp_on_quadratic() {
        let q = Objective::quadratic_diag(&[2.0, 8.0]).unwrap();
        let theta = p(&[0.3, -0.7]);
        for h in [1e-6, 1e-4, 1e-3, 1.0] {
            let hv = hvp_fd(&q, &theta, &p(&[1.0, 0.0]), None, h).unwrap();
            assert!(hv.max_abs_diff(&p(&[2.0, 0.0])) < 1e-8, "h={h}: {hv:?}");
        }
        let hv = hvp_fd(&q, &theta, &p(&[0.0, 3.0]), None, 1e-4).unwrap();
        assert!((hv[1] - 24.0).abs() / 24.0 < 1e-8);
        assert!(hv[0].abs() < 1e-8);
    }

    #[test]
    fn hvp_rejects_zero_direction() {
        let q = Objective::quadratic_diag(&[2.0, 8.0]).unwrap();
        assert!(matches!(
            hvp_fd(&q, &p(&[0.0, 0.0]), &p(&[0.0, 0.0]), None, 1e-4),
            Err(Error::DegenerateDirection)
        ));
        assert!(hvp_fd(&q, &p(&[0.0, 0.0]), &p(&[1.0, 0.0]), None, 0.0).is_err());
    }
}
