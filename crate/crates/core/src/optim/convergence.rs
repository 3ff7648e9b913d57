use serde::{Deserialize, Serialize};

use super::StepTrace;
use crate::error::{Error, Result};

const MIN_TRACES: usize = 10;

/// Relative tolerance for recognizing the `1/sqrt(t)` schedule in logged values.
const SCHEDULE_RTOL: f64 = 1e-12;

pub const SCHEDULE_WARNING: &str =
    "schedule violates the convergence hypotheses: eta_t and rho_t must equal eta0/sqrt(t) and rho0/sqrt(t)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    /// `C(T) = sum_t |delta_t|^2` over the whole run.
    pub cumulative: f64,
    /// Least-squares fit of `C(T') sqrt(T') ~ c1 + c2 log T'` over the second half.
    pub c1: f64,
    pub c2: f64,
    /// Sum of squared fit residuals.
    pub residual: f64,
    pub r_squared: f64,
    pub fit_start: usize,
    pub fit_end: usize,
    pub min_delta_sq: f64,
    pub first_decile_min: f64,
    pub last_decile_min: f64,
    /// `last_decile_min / first_decile_min`; absent when the first decile is all zero.
    pub decile_ratio: Option<f64>,
    pub schedule_ok: bool,
    pub warning: Option<String>,
}

/// Summarize `|delta_t|^2` along a run recorded under the inverse-sqrt schedule.
pub fn convergence_check(traces: &[StepTrace], eta0: f64, rho0: f64) -> Result<ConvergenceReport> {
    let n = traces.len();
    if n < MIN_TRACES {
        return Err(Error::InsufficientData {
            needed: MIN_TRACES,
            got: n,
        });
    }
    let schedule_ok = traces.iter().all(|tr| {
        let s = (tr.t as f64).sqrt();
        close(tr.eta_t * s, eta0) && close(tr.rho_t * s, rho0)
    });

    let sq: Vec<f64> = traces.iter().map(|tr| tr.delta.norm_sq()).collect();
    let cumulative: Vec<f64> = sq
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect();

    // T' runs over the second half, 1-indexed.
    let fit_start = n / 2 + 1;
    let (xs, ys): (Vec<f64>, Vec<f64>) = (fit_start..=n)
        .map(|tp| {
            let tpf = tp as f64;
            (tpf.ln(), cumulative[tp - 1] * tpf.sqrt())
        })
        .unzip();
    let fit = least_squares_line(&xs, &ys);

    let decile = (n / 10).max(1);
    let min_of = |s: &[f64]| s.iter().cloned().fold(f64::INFINITY, f64::min);
    let first = min_of(&sq[..decile]);
    let last = min_of(&sq[n - decile..]);

    Ok(ConvergenceReport {
        iterations: n,
        cumulative: cumulative[n - 1],
        c1: fit.intercept,
        c2: fit.slope,
        residual: fit.ss_res,
        r_squared: fit.r_squared,
        fit_start,
        fit_end: n,
        min_delta_sq: min_of(&sq),
        first_decile_min: first,
        last_decile_min: last,
        decile_ratio: (first > 0.0).then(|| last / first),
        schedule_ok,
        warning: (!schedule_ok).then(|| SCHEDULE_WARNING.to_string()),
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= SCHEDULE_RTOL * b.abs().max(f64::MIN_POSITIVE)
}

struct LineFit {
    intercept: f64,
    slope: f64,
    ss_res: f64,
    r_squared: f64,
}

fn least_squares_line(xs: &[f64], ys: &[f64]) -> LineFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    LineFit {
        intercept,
        slope,
        ss_res,
        r_squared,
    }
}
