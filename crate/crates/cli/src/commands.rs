use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use flatmin::bench::{generate_domains, run_protocol, BenchResult};
use flatmin::flatness::{flatness_report, power_iteration, FlatnessReport};
use flatmin::objective::{eval_loss, Mlp};
use flatmin::optim::{convergence_check, run_training, ConvergenceReport, CsvLog, NullSink, RunSpec, Schedule};
use flatmin::{Dataset, Error, Objective, ParamVector};
use serde::Serialize;

use crate::config::{initial_point, BenchConfig, ConvergeConfig, FlatnessConfig, SweepConfig, TrainConfig};
use crate::output::{with_config, write_atomic};
use crate::CliError;

pub const SWEEP_HEADER: &str = "value,test_accuracy,lambda_max,wall_ms,status";

/// Files a command wrote and a one-line summary for the terminal.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: f64,
    pub fad_steps: usize,
    pub final_theta: ParamVector,
}

pub fn cmd_train(cfg: &TrainConfig, out_dir: &Path) -> Result<Outputs, CliError> {
    let obj = cfg.objective.build()?;
    let theta0 = initial_point(&obj, cfg.theta0.as_deref(), cfg.run.seed)?;
    let log_path = out_dir.join("train_log.csv");
    let mut log = CsvLog::new(Vec::new())?;
    let outcome = run_training(&obj, &theta0, &cfg.optimizer, &cfg.run, &mut log);
    write_atomic(&log_path, &log.into_inner())?;
    let (theta, record) = outcome?;
    let summary = TrainSummary {
        iterations: cfg.run.iterations,
        final_loss: eval_loss(&obj, &theta, None)?,
        fad_steps: record.fad_steps,
        final_theta: theta,
    };
    let result_path = out_dir.join("train_result.json");
    write_atomic(&result_path, with_config(cfg, &summary)?.as_bytes())?;
    Ok(Outputs {
        files: vec![log_path, result_path],
        summary: format!(
            "{} steps of {}: final loss {:.6e}",
            summary.iterations, cfg.optimizer.method, summary.final_loss
        ),
    })
}

pub fn cmd_flatness(cfg: &FlatnessConfig, out_dir: &Path) -> Result<Outputs, CliError> {
    let obj = cfg.objective.build()?;
    let theta = initial_point(&obj, cfg.theta.as_deref(), cfg.seed)?;
    let report: FlatnessReport = flatness_report(&obj, &theta, None, &cfg.settings, cfg.seed)?;
    let path = out_dir.join("flatness_report.json");
    write_atomic(&path, with_config(cfg, &report)?.as_bytes())?;
    Ok(Outputs {
        files: vec![path],
        summary: format!(
            "lambda_max {:.6e}, trace {:.6e}, r_fad {:.6e}",
            report.lambda_max, report.trace, report.r_fad
        ),
    })
}

pub fn cmd_converge(cfg: &ConvergeConfig, out_dir: &Path) -> Result<Outputs, CliError> {
    if cfg.optimizer.schedule != Schedule::InverseSqrt {
        return Err(CliError::Usage(
            "converge requires \"schedule\": \"inverse_sqrt\"; the convergence guarantee assumes \
             eta_t = eta0/sqrt(t) and rho_t = rho0/sqrt(t)"
                .into(),
        ));
    }
    let obj = cfg.objective.build()?;
    let theta0 = initial_point(&obj, cfg.theta0.as_deref(), cfg.run.seed)?;
    let run = RunSpec {
        capture_traces: true,
        ..cfg.run.clone()
    };
    let log_path = out_dir.join("converge_log.csv");
    let mut log = CsvLog::new(Vec::new())?;
    let outcome = run_training(&obj, &theta0, &cfg.optimizer, &run, &mut log);
    write_atomic(&log_path, &log.into_inner())?;
    let (_, record) = outcome?;
    let report: ConvergenceReport = convergence_check(&record.traces, cfg.optimizer.eta0, cfg.optimizer.rho0)?;
    let path = out_dir.join("convergence_report.json");
    write_atomic(&path, with_config(cfg, &report)?.as_bytes())?;
    Ok(Outputs {
        files: vec![log_path, path],
        summary: format!(
            "c1 {:.4e}, c2 {:.4e}, r^2 {:.4}, min |delta|^2 {:.4e}",
            report.c1, report.c2, report.r_squared, report.min_delta_sq
        ),
    })
}

pub fn cmd_bench(cfg: &BenchConfig, out_dir: &Path) -> Result<Outputs, CliError> {
    let md = generate_domains(&cfg.domains, cfg.data_seed)?;
    let result: BenchResult = run_protocol(&md, &cfg.methods, &cfg.protocol, &cfg.model)?;
    let json_path = out_dir.join("bench_result.json");
    let csv_path = out_dir.join("bench_table.csv");
    write_atomic(&json_path, with_config(cfg, &result)?.as_bytes())?;
    write_atomic(&csv_path, result.to_csv_table().as_bytes())?;
    let mut files = vec![json_path, csv_path];
    for (name, json) in result.hparam_sidecars()? {
        let p = out_dir.join("hparams").join(name);
        write_atomic(&p, json.as_bytes())?;
        files.push(p);
    }
    Ok(Outputs {
        files,
        summary: format!(
            "{} methods x {} held-out domains",
            result.methods.len(),
            result.test_domains.len()
        ),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub test_accuracy: Option<f64>,
    pub lambda_max: Option<f64>,
    pub wall_ms: f64,
    pub wall_ms_runs: Vec<f64>,
    pub status: String,
}

impl SweepRow {
    fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{:.3},{}",
            self.value,
            opt(self.test_accuracy),
            opt(self.lambda_max),
            self.wall_ms,
            self.status
        )
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Runs are sequential so that timings do not compete for cores.
pub fn cmd_sweep(cfg: &SweepConfig, out_dir: &Path) -> Result<Outputs, CliError> {
    if cfg.values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    if cfg.repeats == 0 {
        return Err(CliError::Usage("repeats must be at least 1".into()));
    }
    let md = generate_domains(&cfg.domains, cfg.data_seed)?;
    if cfg.test_domain >= md.domains.len() {
        return Err(Error::Config(format!("test_domain {} does not exist", cfg.test_domain)).into());
    }
    let train = Dataset::concat(
        md.domains
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != cfg.test_domain)
            .map(|(_, d)| d),
    )?;
    let test = &md.domains[cfg.test_domain];
    let spec = cfg.model.mlp_spec(md.feature_dim(), md.num_classes);
    let obj = Objective::mlp(&spec, Arc::new(train))?;
    let mlp: &Mlp = obj.as_mlp().expect("built as mlp");
    let theta0 = mlp.init(cfg.seed);
    let run = RunSpec {
        run_id: "sweep".into(),
        iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        capture_traces: false,
        log_wall_time: false,
    };

    let configs: Vec<_> = cfg
        .values
        .iter()
        .map(|&value| {
            let mut opt = cfg.optimizer.clone();
            cfg.parameter.apply(&mut opt, value);
            opt.validate().map(|_| opt)
        })
        .collect::<flatmin::Result<_>>()?;

    // Untimed warm-up, then timed repeats interleaved across values so that
    // drift in machine load hits every value alike.
    let mut outcomes: Vec<_> = configs
        .iter()
        .map(|opt| run_training(&obj, &theta0, opt, &run, &mut NullSink))
        .collect();
    let mut times = vec![Vec::with_capacity(cfg.repeats); configs.len()];
    for _ in 0..cfg.repeats {
        for (i, opt) in configs.iter().enumerate() {
            let start = Instant::now();
            outcomes[i] = run_training(&obj, &theta0, opt, &run, &mut NullSink);
            times[i].push(start.elapsed().as_secs_f64() * 1e3);
        }
    }

    let mut rows = Vec::with_capacity(configs.len());
    for ((&value, outcome), times) in cfg.values.iter().zip(outcomes).zip(times) {
        let (test_accuracy, lambda_max, status) = match outcome {
            Ok((theta, _)) => {
                let eig = power_iteration(&obj, &theta, None, &cfg.flatness, cfg.seed)?;
                (Some(mlp.accuracy(&theta, test)), Some(eig[0].value), "ok")
            }
            Err(e) if e.is_numerical() => (None, None, "diverged"),
            Err(e) => return Err(e.into()),
        };
        rows.push(SweepRow {
            value,
            test_accuracy,
            lambda_max,
            wall_ms: median(&times),
            wall_ms_runs: times,
            status: status.into(),
        });
    }

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    let csv_path = out_dir.join("sweep.csv");
    let json_path = out_dir.join("sweep_result.json");
    write_atomic(&csv_path, csv.as_bytes())?;
    write_atomic(&json_path, with_config(cfg, &rows)?.as_bytes())?;
    Ok(Outputs {
        files: vec![csv_path, json_path],
        summary: format!("{} values of {:?}", rows.len(), cfg.parameter),
    })
}
