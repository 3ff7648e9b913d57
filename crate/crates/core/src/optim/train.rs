use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{step, OptimizerConfig, OptimizerState, StepTrace};
use crate::data::sample_indices;
use crate::error::{Error, Result};
use crate::objective::GradientOracle;
use crate::param::ParamVector;
use crate::rng;

/// Column order of the per-iteration log.
pub const LOG_HEADER: &str =
    "run_id,method,seed,t,eta_t,rho_t,loss,norm_g0,norm_h0,norm_h1,norm_delta,fad_applied,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub run_id: String,
    pub method: &'static str,
    pub seed: u64,
    pub t: usize,
    pub eta_t: f64,
    pub rho_t: f64,
    pub loss: f64,
    pub norm_g0: f64,
    pub norm_h0: f64,
    pub norm_h1: f64,
    pub norm_delta: f64,
    pub fad_applied: bool,
    /// Milliseconds since the loop started; zero when timing is disabled.
    pub wall_ms: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.method,
            self.seed,
            self.t,
            self.eta_t,
            self.rho_t,
            self.loss,
            self.norm_g0,
            self.norm_h0,
            self.norm_h1,
            self.norm_delta,
            u8::from(self.fad_applied),
            self.wall_ms
        )
    }
}

pub trait LogSink {
    fn record(&mut self, row: &LogRow) -> Result<()>;

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl LogSink for NullSink {
    fn record(&mut self, _: &LogRow) -> Result<()> {
        Ok(())
    }
}

impl LogSink for Vec<LogRow> {
    fn record(&mut self, row: &LogRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// CSV writer for [`LogRow`]s; the header is written on construction.
pub struct CsvLog<W: Write> {
    out: W,
}

impl<W: Write> CsvLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{LOG_HEADER}")?;
        Ok(CsvLog { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> LogSink for CsvLog<W> {
    fn record(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub run_id: String,
    pub iterations: usize,
    /// Minibatch size; `None` means full batch. Ignored by analytic objectives.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Keep every [`StepTrace`] in the returned record.
    pub capture_traces: bool,
    /// Fill the `wall_ms` log column. Off by default so logs are byte-reproducible.
    pub log_wall_time: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            run_id: "run".into(),
            iterations: 100,
            batch_size: None,
            seed: 0,
            capture_traces: false,
            log_wall_time: false,
        }
    }
}

/// Deterministic summary of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    /// Batch loss before each step.
    pub losses: Vec<f64>,
    /// `|delta_t|^2` for each step.
    pub delta_norms_sq: Vec<f64>,
    pub fad_steps: usize,
    pub traces: Vec<StepTrace>,
}

/// Apply `spec.iterations` steps of `config.method` starting at `theta0`.
///
/// One log row per step goes to `sink`. On a numerical failure the rows
/// written so far are flushed and the error carries the failing step.
pub fn run_training<O: GradientOracle + ?Sized>(
    obj: &O,
    theta0: &ParamVector,
    config: &OptimizerConfig,
    spec: &RunSpec,
    sink: &mut dyn LogSink,
) -> Result<(ParamVector, RunRecord)> {
    config.validate()?;
    if spec.iterations == 0 {
        return Err(Error::Config("iterations must be at least 1".into()));
    }
    if spec.run_id.contains([',', '"', '\n', '\r']) {
        return Err(Error::Config("run_id must not contain commas, quotes or newlines".into()));
    }
    theta0.check_dim(obj.dim())?;
    if !theta0.is_finite() {
        return Err(Error::numerical("initial parameters"));
    }
    let batch_size = match (spec.batch_size, obj.num_samples()) {
        (Some(b), Some(n)) => {
            if b == 0 || b > n {
                return Err(Error::BatchSize {
                    requested: b,
                    available: n,
                });
            }
            Some((b, n))
        }
        _ => None,
    };

    let mut state = OptimizerState::new(obj.dim(), rng::derive_seed(spec.seed, &[1]));
    let mut batch_rng = rng::derived(spec.seed, &[2]);
    let mut theta = theta0.clone();
    let mut record = RunRecord {
        losses: Vec::with_capacity(spec.iterations),
        delta_norms_sq: Vec::with_capacity(spec.iterations),
        fad_steps: 0,
        traces: Vec::new(),
    };
    let start = Instant::now();

    for _ in 0..spec.iterations {
        let batch = match batch_size {
            Some((b, n)) => Some(sample_indices(n, b, &mut batch_rng)?),
            None => None,
        };
        let (next, trace) = match step(obj, &theta, batch.as_ref(), &mut state, config) {
            Ok(out) => out,
            Err(e) => {
                sink.flush()?;
                return Err(e);
            }
        };
        let row = LogRow {
            run_id: spec.run_id.clone(),
            method: config.method.name(),
            seed: spec.seed,
            t: trace.t,
            eta_t: trace.eta_t,
            rho_t: trace.rho_t,
            loss: trace.loss_before,
            norm_g0: trace.norm_g0,
            norm_h0: trace.norm_h0,
            norm_h1: trace.norm_h1,
            norm_delta: trace.norm_delta,
            fad_applied: trace.fad_applied,
            wall_ms: if spec.log_wall_time {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        sink.record(&row)?;
        record.losses.push(trace.loss_before);
        record.delta_norms_sq.push(trace.delta.norm_sq());
        record.fad_steps += usize::from(trace.fad_applied);
        if spec.capture_traces {
            record.traces.push(trace);
        }
        theta = next;
    }
    sink.flush()?;
    Ok((theta, record))
}
