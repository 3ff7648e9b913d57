use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::domains::{leave_one_out_splits, MultiDomainDataset};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flatness::{flatness_report, FlatnessReport, FlatnessSettings};
use crate::objective::{Mlp, MlpSpec, Objective};
use crate::optim::{run_training, Method, NullSink, OptimizerConfig, RunSpec};
use crate::param::ParamVector;
use crate::rng;

const TAG_HPARAM: u64 = 0x6870;
const TAG_TRAIN: u64 = 0x7472;
const TAG_VAL: u64 = 0x7661;
const TAG_FLAT: u64 = 0x666c;

/// Distributions the random hyperparameter search draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    /// Batch size is `floor(2^u)`, `u ~ Uniform(lo, hi)`.
    pub batch_size_log2: [f64; 2],
    pub lr_log10: [f64; 2],
    /// Sampled only for `momentum_sgd`.
    pub momentum_log10: [f64; 2],
    pub weight_decay_log10: [f64; 2],
    pub sam_rho: Vec<f64>,
    /// Radius set for `fad` and `gam`.
    pub fad_rho: Vec<f64>,
    pub fad_alpha: Vec<f64>,
    /// Penalty weight set for `fad` and `gam`.
    pub fad_beta: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            batch_size_log2: [3.0, 5.5],
            lr_log10: [-5.0, -3.5],
            momentum_log10: [-1.0, 0.0],
            weight_decay_log10: [-6.0, -3.0],
            sam_rho: vec![0.01, 0.05, 0.1, 0.2, 0.5, 1.0],
            fad_rho: vec![0.05, 0.1, 0.2, 0.5, 1.0, 2.0],
            fad_alpha: (1..=10).map(|k| k as f64 / 10.0).collect(),
            fad_beta: vec![0.01, 0.05, 0.1, 0.2, 0.5, 1.0],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("batch_size_log2", self.batch_size_log2),
            ("lr_log10", self.lr_log10),
            ("momentum_log10", self.momentum_log10),
            ("weight_decay_log10", self.weight_decay_log10),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} must be a finite [lo, hi] range")));
            }
        }
        if self.batch_size_log2[0] < 0.0 {
            return Err(Error::Config("batch_size_log2 must be nonnegative".into()));
        }
        if self.momentum_log10[1] > 0.0 {
            return Err(Error::Config("momentum must stay below 1".into()));
        }
        for (name, set) in [
            ("sam_rho", &self.sam_rho),
            ("fad_rho", &self.fad_rho),
            ("fad_alpha", &self.fad_alpha),
            ("fad_beta", &self.fad_beta),
        ] {
            if set.is_empty() || set.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!("{name} must be a nonempty set of nonnegative values")));
            }
        }
        if self.fad_alpha.iter().any(|&a| a > 1.0) {
            return Err(Error::Config("fad_alpha values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn sample(&self, template: &OptimizerConfig, rng: &mut rng::Rng) -> HParams {
        let uniform = |rng: &mut rng::Rng, [lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..hi) };
        let mut cfg = template.clone();
        let batch_size = (2f64.powf(uniform(rng, self.batch_size_log2)) as usize).max(1);
        cfg.eta0 = 10f64.powf(uniform(rng, self.lr_log10));
        cfg.weight_decay = 10f64.powf(uniform(rng, self.weight_decay_log10));
        let pick = |rng: &mut rng::Rng, set: &[f64]| *set.choose(rng).expect("validated nonempty");
        match cfg.method {
            Method::MomentumSgd => cfg.momentum = 10f64.powf(uniform(rng, self.momentum_log10)),
            Method::Sam => cfg.rho0 = pick(rng, &self.sam_rho),
            Method::Gam => {
                cfg.rho0 = pick(rng, &self.fad_rho);
                cfg.beta = pick(rng, &self.fad_beta);
            }
            Method::Fad => {
                cfg.rho0 = pick(rng, &self.fad_rho);
                cfg.alpha = pick(rng, &self.fad_alpha);
                cfg.beta = pick(rng, &self.fad_beta);
            }
            Method::Sgd | Method::Adam | Method::Adamw => {}
        }
        HParams {
            batch_size,
            optimizer: cfg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub n_hparam_trials: usize,
    pub val_fraction: f64,
    pub seeds_per_trial: usize,
    pub iterations: usize,
    pub seed: u64,
    pub search_space: SearchSpace,
    /// Per-method replacement for `search_space`, keyed by method name (e.g. `"adam"`).
    pub method_search_spaces: BTreeMap<String, SearchSpace>,
    /// Settings for the report attached to every final point. Measured full batch on the training split.
    pub flatness: FlatnessSettings,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_hparam_trials: 20,
            val_fraction: 0.2,
            seeds_per_trial: 1,
            iterations: 500,
            seed: 0,
            search_space: SearchSpace::default(),
            method_search_spaces: BTreeMap::new(),
            flatness: FlatnessSettings::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_hparam_trials == 0 {
            return Err(Error::Config("n_hparam_trials must be at least 1".into()));
        }
        if self.seeds_per_trial == 0 {
            return Err(Error::Config("seeds_per_trial must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        for (name, space) in &self.method_search_spaces {
            if !Method::ALL.iter().any(|m| m.name() == name) {
                return Err(Error::Config(format!("unknown method {name:?} in method_search_spaces")));
            }
            space.validate()?;
        }
        self.search_space.validate()
    }

    pub fn search_space_for(&self, method: Method) -> &SearchSpace {
        self.method_search_spaces.get(method.name()).unwrap_or(&self.search_space)
    }
}

/// Hidden-layer widths; input and output widths come from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { hidden: vec![16] }
    }
}

impl ModelSpec {
    pub fn mlp_spec(&self, feature_dim: usize, num_classes: usize) -> MlpSpec {
        let mut layer_sizes = vec![feature_dim];
        layer_sizes.extend_from_slice(&self.hidden);
        layer_sizes.push(num_classes);
        MlpSpec { layer_sizes }
    }
}

/// One sampled configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HParams {
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

/// What selection is allowed to see about a trial: its validation metric and nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub hparams: HParams,
    /// `None` when training failed; such trials are excluded from selection.
    pub val_accuracy: Option<f64>,
    pub failure: Option<String>,
}

/// Proof that a trial was chosen from validation metrics. Only
/// [`select_trial`] constructs one, and the sealed test domain can only be
/// read by presenting it.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    trial: usize,
    val_accuracy: f64,
}

impl Selection {
    pub fn trial(&self) -> usize {
        self.trial
    }

    pub fn val_accuracy(&self) -> f64 {
        self.val_accuracy
    }
}

/// Highest validation accuracy wins; ties go to the lowest trial index.
pub fn select_trial(outcomes: &[TrialOutcome]) -> Result<Selection> {
    let mut best: Option<Selection> = None;
    let mut sorted: Vec<&TrialOutcome> = outcomes.iter().collect();
    sorted.sort_by_key(|o| o.trial);
    for o in sorted {
        if let Some(acc) = o.val_accuracy {
            if best.as_ref().is_none_or(|b| acc > b.val_accuracy) {
                best = Some(Selection {
                    trial: o.trial,
                    val_accuracy: acc,
                });
            }
        }
    }
    best.ok_or_else(|| Error::Protocol(format!("all {} trials failed", outcomes.len())))
}

struct SealedTest {
    data: Dataset,
    reads: AtomicUsize,
}

impl SealedTest {
    fn accuracy(&self, _selection: &Selection, mlp: &Mlp, theta: &ParamVector) -> f64 {
        self.reads.fetch_add(1, Ordering::SeqCst);
        mlp.accuracy(theta, &self.data)
    }

    fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

/// Sample identity across the whole multi-domain dataset.
type SampleId = (usize, usize);

struct PreparedSplit {
    test_domain: usize,
    train: Arc<Dataset>,
    val: Dataset,
    test: SealedTest,
    train_ids: Vec<SampleId>,
    val_ids: Vec<SampleId>,
    test_ids: Vec<SampleId>,
}

impl PreparedSplit {
    fn new(md: &MultiDomainDataset, split_idx: usize, train_domains: &[usize], test_domain: usize, protocol: &ProtocolConfig) -> Result<Self> {
        // (domain, class) -> sample ids, in a fixed order.
        let mut groups: BTreeMap<(usize, usize), Vec<SampleId>> = BTreeMap::new();
        for &d in train_domains {
            let data = &md.domains[d];
            for i in 0..data.len() {
                groups.entry((d, data.label(i))).or_default().push((d, i));
            }
        }
        let mut rng = rng::derived(protocol.seed, &[TAG_VAL, split_idx as u64]);
        let mut train_ids = Vec::new();
        let mut val_ids = Vec::new();
        for (_, mut ids) in groups {
            ids.shuffle(&mut rng);
            let n = ids.len();
            let mut n_val = (protocol.val_fraction * n as f64).round() as usize;
            if n >= 2 {
                n_val = n_val.clamp(1, n - 1);
            }
            val_ids.extend_from_slice(&ids[..n_val]);
            train_ids.extend_from_slice(&ids[n_val..]);
        }
        train_ids.sort_unstable();
        val_ids.sort_unstable();
        let gather = |ids: &[SampleId]| -> Result<Dataset> {
            let mut parts = Vec::new();
            for &d in train_domains {
                let local: Vec<usize> = ids.iter().filter(|(dd, _)| *dd == d).map(|&(_, i)| i).collect();
                parts.push(md.domains[d].subset(&local));
            }
            Dataset::concat(&parts)
        };
        let test_data = md.domains[test_domain].clone();
        let test_ids = (0..test_data.len()).map(|i| (test_domain, i)).collect();
        let split = PreparedSplit {
            test_domain,
            train: Arc::new(gather(&train_ids)?),
            val: gather(&val_ids)?,
            test: SealedTest {
                data: test_data,
                reads: AtomicUsize::new(0),
            },
            train_ids,
            val_ids,
            test_ids,
        };
        split.verify_disjoint()?;
        Ok(split)
    }

    fn verify_disjoint(&self) -> Result<()> {
        let train: HashSet<&SampleId> = self.train_ids.iter().collect();
        let val: HashSet<&SampleId> = self.val_ids.iter().collect();
        if train.len() != self.train_ids.len() || val.len() != self.val_ids.len() {
            return Err(Error::Protocol("duplicate sample in a split".into()));
        }
        for id in &self.test_ids {
            if train.contains(id) || val.contains(id) {
                return Err(Error::Protocol(format!("test sample {id:?} leaked into training data")));
            }
        }
        if self.val_ids.iter().any(|id| train.contains(id)) {
            return Err(Error::Protocol("validation sample also in the training split".into()));
        }
        Ok(())
    }
}

/// Hygiene record for one (method, held-out domain) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAudit {
    pub trials_total: usize,
    pub trials_valid: usize,
    /// Index-level disjointness checks of train/validation/test that passed for this cell.
    pub disjoint_checks: usize,
    /// Reads of the held-out domain performed before selection; always 0.
    pub test_reads_before_selection: usize,
    pub test_reads_after_selection: usize,
    pub selection_metric: String,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// `(domain, index)` of every validation sample.
    pub val_samples: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub method: String,
    pub test_domain: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std_accuracy: f64,
    pub test_accuracies: Vec<f64>,
    pub final_val_accuracies: Vec<f64>,
    pub selected_trial: usize,
    pub selected_val_accuracy: f64,
    pub hparams: HParams,
    pub trials: Vec<TrialOutcome>,
    pub flatness: Vec<FlatnessReport>,
    pub median_lambda_max: f64,
    pub median_trace: f64,
    pub audit: CellAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub dataset: String,
    pub methods: Vec<String>,
    pub test_domains: Vec<usize>,
    pub cells: Vec<BenchCell>,
}

impl BenchResult {
    pub fn cell(&self, method: &str, test_domain: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.method == method && c.test_domain == test_domain)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rows are held-out domains plus an `avg` row; accuracy cells are
    /// percentages as `mean±std`, followed by one median `lambda_max` column per method.
    pub fn to_csv_table(&self) -> String {
        let mut out = String::from("test_domain");
        for m in &self.methods {
            out.push_str(&format!(",{m}"));
        }
        for m in &self.methods {
            out.push_str(&format!(",{m}_lambda_max"));
        }
        out.push('\n');
        for &d in &self.test_domains {
            out.push_str(&d.to_string());
            for m in &self.methods {
                match self.cell(m, d) {
                    Some(c) => out.push_str(&format!(",{:.1}±{:.1}", 100.0 * c.mean_accuracy, 100.0 * c.std_accuracy)),
                    None => out.push(','),
                }
            }
            for m in &self.methods {
                match self.cell(m, d) {
                    Some(c) => out.push_str(&format!(",{:.6}", c.median_lambda_max)),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out.push_str("avg");
        for m in &self.methods {
            let accs: Vec<f64> = self.cells.iter().filter(|c| &c.method == m).map(|c| c.mean_accuracy).collect();
            out.push_str(&format!(",{:.1}", 100.0 * mean(&accs)));
        }
        for m in &self.methods {
            let l: Vec<f64> = self.cells.iter().filter(|c| &c.method == m).map(|c| c.median_lambda_max).collect();
            out.push_str(&format!(",{:.6}", median(&l)));
        }
        out.push('\n');
        out
    }

    /// `(file name, JSON)` of the selected hyperparameters for every cell.
    pub fn hparam_sidecars(&self) -> Result<Vec<(String, String)>> {
        self.cells
            .iter()
            .map(|c| {
                let doc = serde_json::json!({
                    "method": c.method,
                    "test_domain": c.test_domain,
                    "selected_trial": c.selected_trial,
                    "selected_val_accuracy": c.selected_val_accuracy,
                    "hparams": c.hparams,
                });
                Ok((format!("hparams_{}_domain{}.json", c.method, c.test_domain), serde_json::to_string_pretty(&doc)?))
            })
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub(crate) fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn method_labels(methods: &[OptimizerConfig]) -> Vec<String> {
    let mut labels = Vec::with_capacity(methods.len());
    for (i, m) in methods.iter().enumerate() {
        let base = m.method.name();
        let dup = methods.iter().filter(|o| o.method == m.method).count() > 1;
        labels.push(if dup { format!("{base}_{i}") } else { base.to_string() });
    }
    labels
}

fn train_seed(protocol: &ProtocolConfig, method: usize, split: usize, trial: usize, seed_idx: usize) -> u64 {
    rng::derive_seed(protocol.seed, &[TAG_TRAIN, method as u64, split as u64, trial as u64, seed_idx as u64])
}

struct Trained {
    theta: ParamVector,
    obj: Objective,
}

impl Trained {
    fn mlp(&self) -> &Mlp {
        self.obj.as_mlp().expect("trained objectives are mlps")
    }
}

fn train_one(split: &PreparedSplit, mlp_spec: &MlpSpec, hp: &HParams, iterations: usize, seed: u64) -> Result<Trained> {
    let obj = Objective::mlp(mlp_spec, split.train.clone())?;
    let theta0 = obj.as_mlp().expect("built as mlp").init(seed);
    let run = RunSpec {
        run_id: String::new(),
        iterations,
        batch_size: Some(hp.batch_size.min(split.train.len())),
        seed,
        capture_traces: false,
        log_wall_time: false,
    };
    let (theta, _) = run_training(&obj, &theta0, &hp.optimizer, &run, &mut NullSink)?;
    Ok(Trained { theta, obj })
}

/// Leave-one-domain-out evaluation of each optimizer template with random
/// hyperparameter search and validation-only model selection.
///
/// Hyperparameters for trial `k` of a method are shared across held-out
/// domains. Seed 0 of the final evaluation is the selected trial's own run.
pub fn run_protocol(
    md: &MultiDomainDataset,
    methods: &[OptimizerConfig],
    protocol: &ProtocolConfig,
    model: &ModelSpec,
) -> Result<BenchResult> {
    md.validate()?;
    protocol.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods to compare".into()));
    }
    for m in methods {
        m.validate()?;
    }
    let mlp_spec = model.mlp_spec(md.feature_dim(), md.num_classes);
    let labels = method_labels(methods);
    let splits_desc = leave_one_out_splits(md);
    let splits: Vec<PreparedSplit> = splits_desc
        .iter()
        .enumerate()
        .map(|(s, sp)| PreparedSplit::new(md, s, &sp.train_domains, sp.test_domain, protocol))
        .collect::<Result<_>>()?;

    let hparams: Vec<Vec<HParams>> = methods
        .iter()
        .enumerate()
        .map(|(mi, template)| {
            (0..protocol.n_hparam_trials)
                .map(|k| {
                    let mut rng = rng::derived(protocol.seed, &[TAG_HPARAM, mi as u64, k as u64]);
                    protocol.search_space_for(template.method).sample(template, &mut rng)
                })
                .collect()
        })
        .collect();

    // Phase 1: every trial of every cell, selection inputs only.
    let trial_jobs: Vec<(usize, usize, usize)> = (0..methods.len())
        .flat_map(|m| (0..splits.len()).flat_map(move |s| (0..protocol.n_hparam_trials).map(move |k| (m, s, k))))
        .collect();
    let trial_runs: Vec<Result<(TrialOutcome, Option<Trained>)>> = trial_jobs
        .par_iter()
        .map(|&(m, s, k)| {
            let split = &splits[s];
            split.verify_disjoint()?;
            let hp = hparams[m][k].clone();
            match train_one(split, &mlp_spec, &hp, protocol.iterations, train_seed(protocol, m, s, k, 0)) {
                Ok(trained) => {
                    let acc = trained.mlp().accuracy(&trained.theta, &split.val);
                    let outcome = TrialOutcome {
                        trial: k,
                        hparams: hp,
                        val_accuracy: Some(acc),
                        failure: None,
                    };
                    Ok((outcome, Some(trained)))
                }
                Err(e) if e.is_numerical() => Ok((
                    TrialOutcome {
                        trial: k,
                        hparams: hp,
                        val_accuracy: None,
                        failure: Some(e.to_string()),
                    },
                    None,
                )),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut trial_runs = trial_runs.into_iter();

    struct CellState {
        outcomes: Vec<TrialOutcome>,
        selection: Selection,
        selected_run: Trained,
        reads_at_selection: usize,
    }
    let mut cells_state: Vec<CellState> = Vec::with_capacity(methods.len() * splits.len());
    for m in 0..methods.len() {
        for (s, split) in splits.iter().enumerate() {
            let mut outcomes = Vec::with_capacity(protocol.n_hparam_trials);
            let mut runs = Vec::with_capacity(protocol.n_hparam_trials);
            for _ in 0..protocol.n_hparam_trials {
                let (o, r) = trial_runs.next().expect("one result per job")?;
                outcomes.push(o);
                runs.push(r);
            }
            let selection = select_trial(&outcomes).map_err(|e| {
                Error::Protocol(format!("{} with domain {} held out: {e}", labels[m], splits_desc[s].test_domain))
            })?;
            let selected_run = runs.swap_remove(selection.trial()).expect("selected trial trained");
            cells_state.push(CellState {
                outcomes,
                selection,
                selected_run,
                reads_at_selection: split.test.reads(),
            });
        }
    }

    // Phase 2: selected configs over seeds, test accuracy and flatness.
    let n_seeds = protocol.seeds_per_trial;
    let final_jobs: Vec<(usize, usize)> = (0..cells_state.len()).flat_map(|c| (0..n_seeds).map(move |i| (c, i))).collect();
    let finals: Vec<Result<(f64, f64, FlatnessReport)>> = final_jobs
        .par_iter()
        .map(|&(c, i)| {
            let (m, s) = (c / splits.len(), c % splits.len());
            let state = &cells_state[c];
            let split = &splits[s];
            split.verify_disjoint()?;
            let k = state.selection.trial();
            let retrained;
            let run = if i == 0 {
                &state.selected_run
            } else {
                retrained = train_one(split, &mlp_spec, &hparams[m][k], protocol.iterations, train_seed(protocol, m, s, k, i))
                    .map_err(|e| Error::Protocol(format!("{} retraining seed {i} failed: {e}", labels[m])))?;
                &retrained
            };
            let val = run.mlp().accuracy(&run.theta, &split.val);
            let test = split.test.accuracy(&state.selection, run.mlp(), &run.theta);
            let fseed = rng::derive_seed(protocol.seed, &[TAG_FLAT, m as u64, s as u64, i as u64]);
            let report = flatness_report(&run.obj, &run.theta, None, &protocol.flatness, fseed)
                .map_err(|e| Error::Protocol(format!("{} flatness report failed: {e}", labels[m])))?;
            Ok((test, val, report))
        })
        .collect();
    let mut finals = finals.into_iter();

    let mut cells = Vec::with_capacity(cells_state.len());
    for (c, state) in cells_state.into_iter().enumerate() {
        let (m, s) = (c / splits.len(), c % splits.len());
        let split = &splits[s];
        let mut tests = Vec::with_capacity(n_seeds);
        let mut vals = Vec::with_capacity(n_seeds);
        let mut reports = Vec::with_capacity(n_seeds);
        for _ in 0..n_seeds {
            let (t, v, r) = finals.next().expect("one result per job")?;
            tests.push(t);
            vals.push(v);
            reports.push(r);
        }
        let lambdas: Vec<f64> = reports.iter().map(|r| r.lambda_max).collect();
        let traces: Vec<f64> = reports.iter().map(|r| r.trace).collect();
        let k = state.selection.trial();
        cells.push(BenchCell {
            method: labels[m].clone(),
            test_domain: split.test_domain,
            mean_accuracy: mean(&tests),
            std_accuracy: sample_std(&tests),
            test_accuracies: tests,
            final_val_accuracies: vals,
            selected_trial: k,
            selected_val_accuracy: state.selection.val_accuracy(),
            hparams: hparams[m][k].clone(),
            audit: CellAudit {
                trials_total: state.outcomes.len(),
                trials_valid: state.outcomes.iter().filter(|o| o.val_accuracy.is_some()).count(),
                disjoint_checks: 1 + protocol.n_hparam_trials + n_seeds,
                test_reads_before_selection: state.reads_at_selection,
                test_reads_after_selection: n_seeds,
                selection_metric: "validation_accuracy".into(),
                train_size: split.train_ids.len(),
                val_size: split.val_ids.len(),
                test_size: split.test_ids.len(),
                val_samples: split.val_ids.clone(),
            },
            trials: state.outcomes,
            flatness: reports,
            median_lambda_max: median(&lambdas),
            median_trace: median(&traces),
        });
    }
    Ok(BenchResult {
        dataset: md.name.clone(),
        methods: labels,
        test_domains: splits.iter().map(|s| s.test_domain).collect(),
        cells,
    })
}
