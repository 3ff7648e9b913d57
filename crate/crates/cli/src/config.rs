//! JSON configuration documents, one per command.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use flatmin::bench::{generate_domains, DomainSpec, ModelSpec, ProtocolConfig};
use flatmin::flatness::FlatnessSettings;
use flatmin::objective::{DoubleWell, Hessian, MlpSpec};
use flatmin::optim::{OptimizerConfig, RunSpec};
use flatmin::{Dataset, Error, Objective, ParamVector, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A dataset JSON file; relative paths resolve against the config file.
    File { path: PathBuf },
    /// Pool of synthetic domains; `domains` selects which ones (all by default).
    Generated {
        #[serde(default)]
        spec: DomainSpec,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        domains: Option<Vec<usize>>,
    },
}

impl DataSource {
    fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::File { path } => Dataset::load(path),
            DataSource::Generated { spec, seed, domains } => {
                let md = generate_domains(spec, *seed)?;
                let pick: Vec<usize> = domains.clone().unwrap_or_else(|| (0..md.domains.len()).collect());
                if let Some(&bad) = pick.iter().find(|&&d| d >= md.domains.len()) {
                    return Err(Error::Config(format!("domain {bad} does not exist")));
                }
                Dataset::concat(pick.iter().map(|&d| &md.domains[d]))
            }
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DataSource::File { path } = self {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    /// `0.5 theta^T H theta`, from either `diag` or a dense symmetric `matrix`.
    Quadratic {
        #[serde(default)]
        diag: Option<Vec<f64>>,
        #[serde(default)]
        matrix: Option<Vec<Vec<f64>>>,
    },
    Rosenbrock { dim: usize },
    DoubleWell {
        #[serde(default)]
        params: DoubleWell,
    },
    Linear { coeffs: Vec<f64> },
    Constant { dim: usize, value: f64 },
    Mlp { layer_sizes: Vec<usize>, data: DataSource },
}

impl ObjectiveSpec {
    pub fn build(&self) -> Result<Objective> {
        match self {
            ObjectiveSpec::Quadratic { diag, matrix } => match (diag, matrix) {
                (Some(d), None) => Objective::quadratic(Hessian::Diagonal(d.clone())),
                (None, Some(m)) => Objective::quadratic(Hessian::Dense(m.clone())),
                _ => Err(Error::Config("quadratic needs exactly one of `diag` or `matrix`".into())),
            },
            ObjectiveSpec::Rosenbrock { dim } => Objective::rosenbrock(*dim),
            ObjectiveSpec::DoubleWell { params } => Ok(Objective::DoubleWell(*params)),
            ObjectiveSpec::Linear { coeffs } => {
                if coeffs.is_empty() {
                    return Err(Error::Config("linear objective needs coefficients".into()));
                }
                Ok(Objective::Linear(coeffs.clone()))
            }
            ObjectiveSpec::Constant { dim, value } => {
                if *dim == 0 {
                    return Err(Error::Config("constant objective needs dim >= 1".into()));
                }
                Ok(Objective::Constant { dim: *dim, value: *value })
            }
            ObjectiveSpec::Mlp { layer_sizes, data } => {
                let spec = MlpSpec {
                    layer_sizes: layer_sizes.clone(),
                };
                Objective::mlp(&spec, Arc::new(data.load()?))
            }
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let ObjectiveSpec::Mlp { data, .. } = self {
            data.resolve_paths(base);
        }
    }
}

/// Starting point: the given vector, else the Glorot init for an MLP, else zeros.
pub fn initial_point(obj: &Objective, theta0: Option<&[f64]>, seed: u64) -> Result<ParamVector> {
    let dim = obj.param_count();
    match theta0 {
        Some(v) => {
            if v.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: v.len(),
                });
            }
            ParamVector::try_new(v.to_vec())
        }
        None => Ok(match obj.as_mlp() {
            Some(m) => m.init(seed),
            None => ParamVector::zeros(dim),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatnessConfig {
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default)]
    pub settings: FlatnessSettings,
    #[serde(default)]
    pub seed: u64,
}

/// Same shape as [`TrainConfig`]; the optimizer must use the inverse-sqrt schedule.
pub type ConvergeConfig = TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub domains: DomainSpec,
    #[serde(default)]
    pub data_seed: u64,
    pub methods: Vec<OptimizerConfig>,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub model: ModelSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Rho,
    Alpha,
    Beta,
    FadRatio,
}

impl SweepParam {
    pub fn apply(self, cfg: &mut OptimizerConfig, value: f64) {
        match self {
            SweepParam::Rho => cfg.rho0 = value,
            SweepParam::Alpha => cfg.alpha = value,
            SweepParam::Beta => cfg.beta = value,
            SweepParam::FadRatio => cfg.fad_ratio = value,
        }
    }
}

fn default_repeats() -> usize {
    3
}

fn default_iterations() -> usize {
    1000
}

/// One-parameter ablation: train on every domain except `test_domain`, test on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub domains: DomainSpec,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub test_domain: usize,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub parameter: SweepParam,
    pub values: Vec<f64>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Minibatch size; full batch when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Timed training runs per value; `wall_ms` is their median.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub flatness: flatmin::flatness::PowerSettings,
}

pub trait Config: Serialize + DeserializeOwned {
    fn resolve_paths(&mut self, _base: &Path) {}
    fn set_seed(&mut self, seed: u64);
}

impl Config for TrainConfig {
    fn resolve_paths(&mut self, base: &Path) {
        self.objective.resolve_paths(base);
    }

    fn set_seed(&mut self, seed: u64) {
        self.run.seed = seed;
    }
}

impl Config for FlatnessConfig {
    fn resolve_paths(&mut self, base: &Path) {
        self.objective.resolve_paths(base);
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

impl Config for BenchConfig {
    fn set_seed(&mut self, seed: u64) {
        self.protocol.seed = seed;
    }
}

impl Config for SweepConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

/// Parse a config file, resolve relative paths and apply a seed override.
pub fn load<C: Config>(path: &Path, seed: Option<u64>) -> Result<C> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg: C = serde_json::from_str(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.resolve_paths(&base);
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}
