//! Experiment matrices: perturb, fit AUR and WUR, score, summarize.
//!
//! One dataset is split 80/20 once per master seed. For every
//! `(set, ρ, perturbation seed)` cell a perturbation `Δ` is drawn by
//! hit-and-run (nested outside the previous ρ level when enabled), added to
//! the training design, and both models are fitted and scored on the clean
//! test split.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, CleanDataset, SyntheticSpec};
use crate::geometry::{unflatten, PenaltyMode, SetKind, UncertaintySet};
use crate::regression::{fit_aur, fit_wur, select_lambda_cv, CvSpec, Method, RegressionProblem};
use crate::rng::{derive_seed, short_digest};
use crate::sampling::{hit_and_run, nested_level_sample, SamplerConfig};
use crate::stats::RunningStats;
use crate::{Error, Result};

/// Perturbation strengths used when the config does not list any.
pub const DEFAULT_RHO_LIST: [f64; 6] = [0.001, 0.01, 0.05, 0.1, 0.2, 0.3];

/// Budget cap as a fraction of ρ.
pub const DEFAULT_GAMMA_RATIO: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        target: String,
        #[serde(default)]
        drop_columns: Vec<String>,
        #[serde(default)]
        id: Option<String>,
    },
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    pub fn id(&self) -> String {
        match self {
            DatasetSource::Csv { id: Some(id), .. } => id.clone(),
            DatasetSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            DatasetSource::Synthetic(spec) => spec.id(),
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self, DatasetSource::Synthetic(_))
    }

    pub fn load(&self) -> Result<CleanDataset> {
        match self {
            DatasetSource::Csv {
                path,
                target,
                drop_columns,
                ..
            } => dataio::preprocess_with(&dataio::ingest_csv(path, target)?, drop_columns),
            DatasetSource::Synthetic(spec) => dataio::make_synthetic(spec),
        }
    }
}

/// How a model's penalty is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    TheoremPaper,
    TheoremDerived,
    Cv,
}

impl std::fmt::Display for LambdaPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LambdaPolicy::TheoremPaper => "theorem_paper",
            LambdaPolicy::TheoremDerived => "theorem_derived",
            LambdaPolicy::Cv => "cv",
        })
    }
}

impl std::str::FromStr for LambdaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theorem_paper" => Ok(LambdaPolicy::TheoremPaper),
            "theorem_derived" => Ok(LambdaPolicy::TheoremDerived),
            "cv" => Ok(LambdaPolicy::Cv),
            other => Err(Error::Config(format!("unknown lambda policy `{other}`"))),
        }
    }
}

fn default_sets() -> Vec<SetKind> {
    SetKind::ALL.to_vec()
}

fn default_rho_list() -> Vec<f64> {
    DEFAULT_RHO_LIST.to_vec()
}

fn default_gamma_ratio() -> f64 {
    DEFAULT_GAMMA_RATIO
}

fn default_aur_policies() -> Vec<LambdaPolicy> {
    vec![LambdaPolicy::TheoremDerived, LambdaPolicy::Cv]
}

fn default_wur_policy() -> LambdaPolicy {
    LambdaPolicy::Cv
}

fn default_burn_in() -> usize {
    1000
}

fn default_thinning() -> usize {
    10
}

/// JSON experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_sets")]
    pub sets: Vec<SetKind>,
    #[serde(default = "default_rho_list")]
    pub rho_list: Vec<f64>,
    #[serde(default = "default_gamma_ratio")]
    pub gamma_ratio: f64,
    /// Perturbation seeds; 20 for synthetic data and 10 otherwise when absent.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Penalty policies run for AUR.
    #[serde(default = "default_aur_policies")]
    pub lambda_policy: Vec<LambdaPolicy>,
    #[serde(default = "default_wur_policy")]
    pub wur_lambda_policy: LambdaPolicy,
    #[serde(default)]
    pub cv: CvSpec,
    /// Exclude the previous ρ level's set; defaults to true for synthetic data.
    #[serde(default)]
    pub nesting: Option<bool>,
    #[serde(default)]
    pub master_seed: u64,
    /// Perturb the full design before splitting, so test rows are perturbed
    /// too. By default only the training design is perturbed.
    #[serde(default)]
    pub perturb_before_split: bool,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thinning")]
    pub thinning: usize,
    /// Store wall-clock times in records. Off by default so results files
    /// are byte-reproducible.
    #[serde(default)]
    pub record_runtime: bool,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        Self {
            dataset,
            sets: default_sets(),
            rho_list: default_rho_list(),
            gamma_ratio: default_gamma_ratio(),
            seeds: None,
            lambda_policy: default_aur_policies(),
            wur_lambda_policy: default_wur_policy(),
            cv: CvSpec::default(),
            nesting: None,
            master_seed: 0,
            perturb_before_split: false,
            burn_in: default_burn_in(),
            thinning: default_thinning(),
            record_runtime: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| {
            let count = if self.dataset.is_synthetic() { 20 } else { 10 };
            (0..count).collect()
        })
    }

    pub fn nesting(&self) -> bool {
        self.nesting.unwrap_or(self.dataset.is_synthetic())
    }

    /// Digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        short_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.sets.is_empty() {
            return Err(Error::Config("at least one set kind is required".into()));
        }
        if self.rho_list.is_empty() {
            return Err(Error::Config("rho_list must be nonempty".into()));
        }
        if self.rho_list.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("rho values must be finite and nonnegative".into()));
        }
        if self.rho_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("rho_list must be strictly increasing".into()));
        }
        if !(self.gamma_ratio > 0.5 && self.gamma_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "gamma_ratio must lie in (0.5, 1], got {}",
                self.gamma_ratio
            )));
        }
        if self.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.lambda_policy.is_empty() {
            return Err(Error::Config("at least one AUR lambda policy is required".into()));
        }
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be at least 1".into()));
        }
        self.cv.validate()
    }

    /// Descriptor of the set of kind `kind` at radius `rho` for an `n × k` design.
    pub fn set_for(&self, kind: SetKind, rho: f64, n: usize, k: usize) -> Result<UncertaintySet> {
        let gamma = (kind == SetKind::Budget).then_some(self.gamma_ratio * rho);
        UncertaintySet::new(kind, rho, gamma, n, k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub dataset: String,
    pub set: SetKind,
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub seed: u64,
    pub method: Method,
    pub lambda_policy: LambdaPolicy,
    pub lambda_used: f64,
    pub n_train: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub runtime_ms: u64,
}

/// Canonical record order: dataset, set, ρ, seed, method, policy.
pub fn sort_records(records: &mut [ExperimentRecord]) {
    records.sort_by(|a, b| {
        a.dataset
            .cmp(&b.dataset)
            .then(a.set.cmp(&b.set))
            .then(a.rho.total_cmp(&b.rho))
            .then(a.seed.cmp(&b.seed))
            .then(a.method.cmp(&b.method))
            .then(a.lambda_policy.cmp(&b.lambda_policy))
    });
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub set: SetKind,
    pub rho: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub dataset: String,
    pub records: Vec<ExperimentRecord>,
    pub failures: Vec<CellFailure>,
}

/// First line of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsHeader {
    pub version: String,
    pub dataset: String,
    pub master_seed: u64,
    pub config_digest: String,
    /// How train/test splits relate to perturbation seeds.
    pub split_policy: String,
    pub perturbation: String,
}

const HEADER_KEY: &str = "aurlab_results";

struct Prepared {
    dataset_id: String,
    full: CleanDataset,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    train: CleanDataset,
    test: RegressionProblem,
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let full = config.dataset.load()?;
    let (train_idx, test_idx) = dataio::split_indices(full.n(), config.master_seed)?;
    let train = full.select_rows(&train_idx);
    let test = full.select_rows(&test_idx).problem()?;
    Ok(Prepared {
        dataset_id: config.dataset.id(),
        full,
        train_idx,
        test_idx,
        train,
        test,
    })
}

fn theorem_lambda(set: Option<&UncertaintySet>, mode: PenaltyMode) -> Result<f64> {
    match set {
        Some(s) => s.ridge_lambda(mode),
        None => Ok(0.0),
    }
}

fn run_cell(
    config: &ExperimentConfig,
    prep: &Prepared,
    kind: SetKind,
    rho_index: usize,
    seed: u64,
) -> Result<Vec<ExperimentRecord>> {
    let started = Instant::now();
    let rho = config.rho_list[rho_index];
    let k = prep.full.k();
    let n_train = prep.train.n();
    let n_sample = if config.perturb_before_split {
        prep.full.n()
    } else {
        n_train
    };

    // ρ = 0 is a degenerate smoke-test level: no perturbation, no penalty.
    let sample_set = (rho > 0.0)
        .then(|| config.set_for(kind, rho, n_sample, k))
        .transpose()?;
    let lambda_set = (rho > 0.0).then(|| config.set_for(kind, rho, n_train, k)).transpose()?;
    let cell_key = format!("{}/{}/{}/{}", prep.dataset_id, kind, rho, seed);
    let sampler = SamplerConfig::new(derive_seed(config.master_seed, &cell_key))
        .with_burn_in(config.burn_in)
        .with_thinning(config.thinning);

    let delta = match &sample_set {
        None => DMatrix::zeros(n_sample, k),
        Some(set) => {
            let previous = rho_index
                .checked_sub(1)
                .map(|i| config.rho_list[i])
                .filter(|r| *r > 0.0 && config.nesting());
            let batch = match previous {
                Some(prev) => nested_level_sample(&config.set_for(kind, prev, n_sample, k)?, set, &sampler, 1)?,
                None => hit_and_run(set, &sampler, 1)?,
            };
            unflatten(batch.sample(0), n_sample, k)
        }
    };

    // Perturbing before the split also corrupts the test rows.
    let (train, perturbed_test) = if config.perturb_before_split {
        let x = &prep.full.x + &delta;
        let train = RegressionProblem::new(x.select_rows(prep.train_idx.iter()), prep.train.y.clone())?;
        let test = RegressionProblem::new(x.select_rows(prep.test_idx.iter()), prep.test.y().clone())?;
        (train, Some(test))
    } else {
        (
            RegressionProblem::new(&prep.train.x + &delta, prep.train.y.clone())?,
            None,
        )
    };
    let test = perturbed_test.as_ref().unwrap_or(&prep.test);

    let choose = |policy: LambdaPolicy, method: Method| -> Result<f64> {
        match policy {
            LambdaPolicy::TheoremPaper => theorem_lambda(lambda_set.as_ref(), PenaltyMode::Paper),
            LambdaPolicy::TheoremDerived => theorem_lambda(lambda_set.as_ref(), PenaltyMode::Derived),
            LambdaPolicy::Cv => Ok(select_lambda_cv(&train, method, &config.cv)?.lambda),
        }
    };

    let mut fits = Vec::new();
    for &policy in &config.lambda_policy {
        let lambda = choose(policy, Method::Aur)?;
        fits.push((Method::Aur, policy, fit_aur(&train, lambda)?));
    }
    let wur_policy = config.wur_lambda_policy;
    let lambda = choose(wur_policy, Method::Wur)?;
    fits.push((Method::Wur, wur_policy, fit_wur(&train, lambda)?));

    let runtime_ms = if config.record_runtime {
        started.elapsed().as_millis() as u64
    } else {
        0
    };
    Ok(fits
        .into_iter()
        .map(|(method, policy, fit)| {
            let beta = fit.beta_vector();
            ExperimentRecord {
                dataset: prep.dataset_id.clone(),
                set: kind,
                rho,
                gamma: (kind == SetKind::Budget).then_some(config.gamma_ratio * rho),
                seed,
                method,
                lambda_policy: policy,
                lambda_used: fit.lambda_used,
                n_train,
                train_mse: train.mse(&beta),
                test_mse: test.mse(&beta),
                runtime_ms,
            }
        })
        .collect())
}

/// Runs every `(set, ρ, seed)` cell. A failing cell is logged and reported
/// in [`ExperimentOutcome::failures`]; the remaining cells still run.
///
/// `workers` caps parallelism; `None` uses the global rayon pool.
pub fn run_experiment(config: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentOutcome> {
    config.validate()?;
    let prep = prepare(config)?;
    let seeds = config.seeds();
    let cells: Vec<(SetKind, usize, u64)> = config
        .sets
        .iter()
        .flat_map(|&kind| {
            let seeds = &seeds;
            (0..config.rho_list.len()).flat_map(move |r| seeds.iter().map(move |&s| (kind, r, s)))
        })
        .collect();

    let work = || -> Vec<(SetKind, usize, u64, Result<Vec<ExperimentRecord>>)> {
        cells
            .par_iter()
            .map(|&(kind, r, s)| (kind, r, s, run_cell(config, &prep, kind, r, s)))
            .collect()
    };
    let results = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (kind, r, seed, result) in results {
        match result {
            Ok(mut recs) => records.append(&mut recs),
            Err(e) => {
                let rho = config.rho_list[r];
                log::warn!("cell {kind}/rho={rho}/seed={seed} failed: {e}");
                failures.push(CellFailure {
                    set: kind,
                    rho,
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    sort_records(&mut records);
    Ok(ExperimentOutcome {
        dataset: prep.dataset_id,
        records,
        failures,
    })
}

pub fn results_header(config: &ExperimentConfig) -> ResultsHeader {
    ResultsHeader {
        version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: config.dataset.id(),
        master_seed: config.master_seed,
        config_digest: config.digest(),
        split_policy: "one 80/20 split per dataset per master seed, shared by all perturbation seeds".into(),
        perturbation: if config.perturb_before_split {
            "full design perturbed before splitting".into()
        } else {
            "training design only".into()
        },
    }
}

/// Writes a header line and the records (sorted) to a fresh results file.
pub fn write_results(path: impl AsRef<Path>, header: &ResultsHeader, records: &[ExperimentRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut text = serde_json::to_string(&serde_json::json!({ HEADER_KEY: header }))?;
    text.push('\n');
    for r in &sorted {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    // Write to a sibling temp file and rename so readers never see a partial file.
    let tmp = path.with_extension("jsonl.tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads records from a results file, skipping header lines.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ExperimentRecord>> {
    dataio::read_jsonl(path, |v| v.get(HEADER_KEY).is_some())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub set: SetKind,
    /// AUR penalty policy compared against WUR.
    pub policy: LambdaPolicy,
    pub rho: f64,
    /// Mean over cells of `100·(mse_WUR − mse_AUR)/mse_WUR` on the test split.
    pub mean_improvement: f64,
    pub stderr: f64,
    pub count: usize,
    /// Largest number of distinct AUR penalties chosen across perturbation
    /// seeds for any one dataset.
    pub lambda_distinct_count: usize,
}

type CellKey = (String, SetKind, u64, u64);

fn cell_key(r: &ExperimentRecord) -> CellKey {
    (r.dataset.clone(), r.set, r.rho.to_bits(), r.seed)
}

fn describe(key: &CellKey) -> String {
    format!("{}/{}/rho={}/seed={}", key.0, key.1, f64::from_bits(key.2), key.3)
}

/// Percentage improvement of AUR over WUR per `(set, AUR policy, ρ)`.
pub fn summarize(records: &[ExperimentRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::Data("no records to summarize".into()));
    }
    let mut wur: BTreeMap<CellKey, f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.method == Method::Wur) {
        if wur.insert(cell_key(r), r.test_mse).is_some() {
            return Err(Error::Data(format!(
                "more than one WUR record for {}",
                describe(&cell_key(r))
            )));
        }
    }
    let mut aur_cells: BTreeSet<CellKey> = BTreeSet::new();
    let mut missing = Vec::new();
    // (set, policy, rho bits) → (improvements, dataset → distinct λ bits)
    let mut groups: BTreeMap<SummaryKey, (RunningStats, BTreeMap<String, BTreeSet<u64>>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.method == Method::Aur) {
        let key = cell_key(r);
        aur_cells.insert(key.clone());
        let Some(&w) = wur.get(&key) else {
            missing.push(format!("WUR for {}", describe(&key)));
            continue;
        };
        let improvement = if w == r.test_mse {
            0.0
        } else if w == 0.0 {
            return Err(Error::Data(format!("WUR test MSE is zero for {}", describe(&key))));
        } else {
            100.0 * (w - r.test_mse) / w
        };
        let entry = groups.entry((r.set, r.lambda_policy, r.rho.to_bits())).or_default();
        entry.0.push(improvement);
        entry
            .1
            .entry(r.dataset.clone())
            .or_default()
            .insert(r.lambda_used.to_bits());
    }
    for key in wur.keys().filter(|k| !aur_cells.contains(*k)) {
        missing.push(format!("AUR for {}", describe(key)));
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "unmatched records: missing {}",
            missing.join(", ")
        )));
    }
    Ok(groups
        .into_iter()
        .map(|((set, policy, rho), (stats, lambdas))| SummaryRow {
            set,
            policy,
            rho: f64::from_bits(rho),
            mean_improvement: stats.mean(),
            stderr: stats.std_error(),
            count: stats.count() as usize,
            lambda_distinct_count: lambdas.values().map(BTreeSet::len).max().unwrap_or(0),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaStabilityRow {
    pub dataset: String,
    pub set: SetKind,
    pub rho: f64,
    pub method: Method,
    pub policy: LambdaPolicy,
    pub seeds: usize,
    pub distinct_lambdas: usize,
}

type SummaryKey = (SetKind, LambdaPolicy, u64);
type StabilityKey = (String, SetKind, u64, Method, LambdaPolicy);

/// Distinct penalties chosen across perturbation seeds, per
/// `(dataset, set, ρ, method, policy)`.
pub fn lambda_stability(records: &[ExperimentRecord]) -> Vec<LambdaStabilityRow> {
    let mut groups: BTreeMap<StabilityKey, (usize, BTreeSet<u64>)> = BTreeMap::new();
    for r in records {
        let entry = groups
            .entry((r.dataset.clone(), r.set, r.rho.to_bits(), r.method, r.lambda_policy))
            .or_default();
        entry.0 += 1;
        entry.1.insert(r.lambda_used.to_bits());
    }
    groups
        .into_iter()
        .map(
            |((dataset, set, rho, method, policy), (seeds, lambdas))| LambdaStabilityRow {
                dataset,
                set,
                rho: f64::from_bits(rho),
                method,
                policy,
                seeds,
                distinct_lambdas: lambdas.len(),
            },
        )
        .collect()
}

/// Share of `(dataset, ρ)` groups with each distinct-λ count, per set kind,
/// for one method and policy. Keys: set → (count → fraction).
pub fn lambda_frequency(
    rows: &[LambdaStabilityRow],
    method: Method,
    policy: LambdaPolicy,
) -> BTreeMap<SetKind, BTreeMap<usize, f64>> {
    let mut counts: BTreeMap<SetKind, BTreeMap<usize, usize>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.method == method && r.policy == policy) {
        *counts.entry(r.set).or_default().entry(r.distinct_lambdas).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(set, hist)| {
            let total: usize = hist.values().sum();
            (
                set,
                hist.into_iter().map(|(c, m)| (c, m as f64 / total as f64)).collect(),
            )
        })
        .collect()
}

const PLOT_HEADER: [&str; 7] = [
    "set",
    "policy",
    "rho",
    "mean_improvement",
    "stderr",
    "n",
    "lambda_distinct_count",
];

/// Tidy CSV of the summary, sorted by set, policy and ρ. Floats are written
/// in shortest round-trip form.
pub fn emit_plot_data(summary: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, plot_data_csv(summary)?).map_err(|e| Error::io(path, e))
}

/// The bytes [`emit_plot_data`] writes.
pub fn plot_data_csv(summary: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut rows = summary.to_vec();
    rows.sort_by(|a, b| {
        a.set
            .cmp(&b.set)
            .then(a.policy.cmp(&b.policy))
            .then(a.rho.total_cmp(&b.rho))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PLOT_HEADER)?;
    for r in &rows {
        w.write_record([
            r.set.to_string(),
            r.policy.to_string(),
            r.rho.to_string(),
            r.mean_improvement.to_string(),
            r.stderr.to_string(),
            r.count.to_string(),
            r.lambda_distinct_count.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv buffer: {e}")))
}

/// Reads a file written by [`emit_plot_data`].
pub fn read_plot_data(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != PLOT_HEADER {
        return Err(Error::Data(format!("unexpected plot-data header {header:?}")));
    }
    let parse_f = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::Data(format!("bad number `{s}`: {e}")))
    };
    let parse_u = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::Data(format!("bad count `{s}`: {e}")))
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(SummaryRow {
            set: rec[0].parse()?,
            policy: rec[1].parse()?,
            rho: parse_f(&rec[2])?,
            mean_improvement: parse_f(&rec[3])?,
            stderr: parse_f(&rec[4])?,
            count: parse_u(&rec[5])?,
            lambda_distinct_count: parse_u(&rec[6])?,
        });
    }
    Ok(out)
}

/// Writes the λ-stability rows as CSV.
pub fn write_lambda_stability(rows: &[LambdaStabilityRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset", "set", "rho", "method", "policy", "seeds", "distinct_lambdas"])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.set.to_string(),
            r.rho.to_string(),
            r.method.to_string(),
            r.policy.to_string(),
            r.seeds.to_string(),
            r.distinct_lambdas.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv buffer: {e}")))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize, k: usize) -> DatasetSource {
        DatasetSource::Synthetic(SyntheticSpec {
            n_samples: n,
            n_informative: k,
            n_features: k,
            noise_sd: 0.5,
            seed: 1,
        })
    }

    fn small_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(synthetic(60, 3));
        c.rho_list = vec![0.05, 0.1];
        c.seeds = Some(vec![0, 1, 2]);
        c.burn_in = 50;
        c.cv = CvSpec {
            grid: vec![0.0, 0.5, 1.0],
            folds: 3,
            seed: 0,
        };
        c
    }

    fn record(
        set: SetKind,
        seed: u64,
        method: Method,
        policy: LambdaPolicy,
        mse: f64,
        lambda: f64,
    ) -> ExperimentRecord {
        ExperimentRecord {
            dataset: "d".into(),
            set,
            rho: 0.1,
            gamma: None,
            seed,
            method,
            lambda_policy: policy,
            lambda_used: lambda,
            n_train: 10,
            train_mse: mse,
            test_mse: mse,
            runtime_ms: 0,
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = ExperimentConfig::from_json(
            r#"{"dataset": {"synthetic": {"n_samples": 30, "n_informative": 2, "n_features": 2}}}"#,
        )
        .unwrap();
        assert_eq!(c.rho_list, DEFAULT_RHO_LIST.to_vec());
        assert_eq!(c.gamma_ratio, 0.8);
        assert_eq!(c.seeds().len(), 20);
        assert!(c.nesting());
        assert_eq!(c.cv.grid.len(), 21);
        let csv = ExperimentConfig::new(DatasetSource::Csv {
            path: "x.csv".into(),
            target: "y".into(),
            drop_columns: vec![],
            id: None,
        });
        assert_eq!(csv.seeds().len(), 10);
        assert!(!csv.nesting());
        assert_eq!(csv.dataset.id(), "x");

        let mut bad = small_config();
        bad.rho_list = vec![0.2, 0.1];
        assert!(bad.validate().is_err());
        bad.rho_list = vec![0.1];
        bad.gamma_ratio = 0.5;
        assert!(bad.validate().is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"dataset": {"synthetic": {"n_samples": 30, "n_informative": 2, "n_features": 2}}, "bogus": 1}"#
        )
        .is_err());
    }

    #[test]
    fn budget_cells_use_the_gamma_ratio() {
        let c = small_config();
        let set = c.set_for(SetKind::Budget, 0.3, 4, 2).unwrap();
        assert_eq!(set.gamma(), Some(0.8 * 0.3));
    }

    #[test]
    fn zero_radius_reduces_to_ols() {
        let mut c = small_config();
        c.rho_list = vec![0.0];
        c.lambda_policy = vec![LambdaPolicy::TheoremDerived];
        c.wur_lambda_policy = LambdaPolicy::TheoremDerived;
        let out = run_experiment(&c, Some(2)).unwrap();
        assert!(out.failures.is_empty());
        for pair in out.records.chunks(2) {
            assert_eq!(pair[0].lambda_used, 0.0);
            assert!((pair[0].test_mse - pair[1].test_mse).abs() < 1e-9);
        }
    }

    #[test]
    fn derived_policy_uses_training_n() {
        let c = small_config();
        let out = run_experiment(&c, Some(2)).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        assert_eq!(out.records.len(), 4 * 2 * 3 * 3);
        for r in out
            .records
            .iter()
            .filter(|r| r.lambda_policy == LambdaPolicy::TheoremDerived)
        {
            let set = c.set_for(r.set, r.rho, r.n_train, 3).unwrap();
            assert_eq!(r.lambda_used, set.ridge_lambda(PenaltyMode::Derived).unwrap());
            assert_eq!(r.n_train, 48);
        }
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let c = small_config();
        let a = run_experiment(&c, Some(1)).unwrap();
        let b = run_experiment(&c, Some(4)).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn failing_cells_do_not_abort_the_run() {
        let mut c = small_config();
        // 48 training rows cannot be cut into 100 folds; every CV cell fails.
        c.cv.folds = 100;
        c.lambda_policy = vec![LambdaPolicy::TheoremDerived];
        c.sets = vec![SetKind::Box];
        let out = run_experiment(&c, None).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.failures.len(), 2 * 3);
    }

    #[test]
    fn identical_methods_give_zero_improvement() {
        let records = vec![
            record(SetKind::Box, 0, Method::Aur, LambdaPolicy::Cv, 0.5, 0.1),
            record(SetKind::Box, 0, Method::Wur, LambdaPolicy::Cv, 0.5, 0.1),
        ];
        let s = summarize(&records).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_improvement, 0.0);
    }

    #[test]
    fn improvement_arithmetic() {
        let records = vec![
            record(SetKind::Box, 0, Method::Aur, LambdaPolicy::TheoremDerived, 0.99, 0.2),
            record(SetKind::Box, 0, Method::Wur, LambdaPolicy::Cv, 1.0, 0.3),
        ];
        let s = summarize(&records).unwrap();
        assert!((s[0].mean_improvement - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_cv_choice_counts_once() {
        let mut records = Vec::new();
        for seed in 0..10 {
            records.push(record(SetKind::Diamond, seed, Method::Aur, LambdaPolicy::Cv, 0.4, 0.05));
            records.push(record(SetKind::Diamond, seed, Method::Wur, LambdaPolicy::Cv, 0.5, 0.05));
        }
        let s = summarize(&records).unwrap();
        assert_eq!(s[0].lambda_distinct_count, 1);
        assert_eq!(s[0].count, 10);
        let stability = lambda_stability(&records);
        assert!(stability.iter().all(|r| r.distinct_lambdas == 1 && r.seeds == 10));
        let freq = lambda_frequency(&stability, Method::Aur, LambdaPolicy::Cv);
        assert_eq!(freq[&SetKind::Diamond][&1], 1.0);
    }

    #[test]
    fn unmatched_pairs_are_reported() {
        let records = vec![
            record(SetKind::Box, 0, Method::Aur, LambdaPolicy::Cv, 0.5, 0.1),
            record(SetKind::Box, 1, Method::Wur, LambdaPolicy::Cv, 0.5, 0.1),
        ];
        match summarize(&records) {
            Err(Error::Data(msg)) => {
                assert!(msg.contains("seed=0") && msg.contains("seed=1"), "{msg}");
            }
            other => panic!("expected unmatched error, got {other:?}"),
        }
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn plot_data_files() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        emit_plot_data(&[], &empty).unwrap();
        assert_eq!(std::fs::read_to_string(&empty).unwrap().lines().count(), 1);

        let row = SummaryRow {
            set: SetKind::Budget,
            policy: LambdaPolicy::TheoremDerived,
            rho: 0.1,
            mean_improvement: 1.0 / 3.0,
            stderr: 0.123_456_789_012_345_68,
            count: 7,
            lambda_distinct_count: 1,
        };
        let one = dir.path().join("one.csv");
        emit_plot_data(std::slice::from_ref(&row), &one).unwrap();
        assert_eq!(std::fs::read_to_string(&one).unwrap().lines().count(), 2);
        assert_eq!(read_plot_data(&one).unwrap(), vec![row]);
    }

    #[test]
    fn results_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let c = small_config();
        let records = vec![
            record(SetKind::Box, 1, Method::Wur, LambdaPolicy::Cv, 0.5, 0.1),
            record(SetKind::Box, 0, Method::Aur, LambdaPolicy::Cv, 0.5, 0.1),
        ];
        write_results(&path, &results_header(&c), &records).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].seed, 0);
    }
}
