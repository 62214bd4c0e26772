//! Seeded sweeps over the meta-class count `N`, the learner count `N_L` and
//! the sharing strategy.
//!
//! For every repetition a single-model baseline is trained once. Then for
//! each `(N, strategy)` one ensemble with the largest requested `N_L` is
//! trained and every smaller `N_L` is scored on its first learners (prefix
//! reuse). Columns are drawn independently, so a prefix is itself a valid
//! random ensemble. Setting `prefix_reuse = false` retrains per `N_L`.
//!
//! Seed derivations (all from the top-level `seed`, SplitMix-mixed):
//!
//! | stream               | path                                   |
//! |----------------------|----------------------------------------|
//! | blob data            | `dataset.seed` or `[DATA]`             |
//! | train/test, dev cuts | `[SPLIT]`, `[DEV]`                     |
//! | baseline, rep `r`    | `[BASELINE, r]`                        |
//! | matrix, `N`, rep `r` | `matrix.seed` or `seed`, `[MATRIX, N, r]` |
//! | ensemble training    | `[ENSEMBLE, N, strategy, r]`           |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coding::generate_coding_matrix;
use crate::data::{self, Dataset};
use crate::ensemble::{
    decode_code_rows, evaluate_accuracy, predict_ensemble, train_ensemble, EnsembleOptions, ShareKind, SharingStrategy,
};
use crate::learners::{self, NetworkSpec, TrainConfig};
use crate::seed;
use crate::{Error, Result};

const DATA: u64 = 1;
const SPLIT: u64 = 2;
const DEV: u64 = 3;
const BASELINE: u64 = 4;
const MATRIX: u64 = 5;
const ENSEMBLE: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Blobs {
        n_classes: usize,
        per_class: usize,
        dims: usize,
        spread: f64,
        /// Share of the generated samples held out for testing.
        test_fraction: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `train_limit` training samples.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        label_column: String,
        /// Used when no separate test file is given.
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

impl DatasetSource {
    /// Train and test sets, with aligned class counts.
    pub fn load(&self, master_seed: u64) -> Result<(Dataset, Dataset)> {
        let split_seed = seed::derive(master_seed, &[SPLIT]);
        let (train, test) = match self {
            DatasetSource::Blobs { n_classes, per_class, dims, spread, test_fraction, seed: s } => {
                let data_seed = s.unwrap_or_else(|| seed::derive(master_seed, &[DATA]));
                let all = data::synth_blobs(*n_classes, *per_class, *dims, *spread, data_seed)?;
                data::dev_split(&all, *test_fraction, split_seed)?
            }
            DatasetSource::Idx { train_images, train_labels, test_images, test_labels, train_limit, test_limit } => {
                let train = data::load_idx(train_images, train_labels)?;
                let test = data::load_idx(test_images, test_labels)?;
                (
                    train_limit.map_or_else(|| train.clone(), |n| train.take(n)),
                    test_limit.map_or_else(|| test.clone(), |n| test.take(n)),
                )
            }
            DatasetSource::Csv { train, test, label_column, test_fraction } => {
                let (train_set, map) = data::load_csv(train, label_column)?;
                match test {
                    Some(path) => {
                        let (test_set, test_map) = data::load_csv(path, label_column)?;
                        if test_map.keys().any(|k| !map.contains_key(k)) {
                            return Err(Error::InvalidConfig("test CSV has labels absent from train CSV".into()));
                        }
                        // Re-express test labels in the train mapping.
                        let inverse: Vec<i64> = test_map.keys().copied().collect();
                        let labels = test_set.labels().iter().map(|&l| map[&inverse[l]]).collect();
                        let test_set =
                            Dataset::new(test_set.features().clone(), labels, train_set.n_classes(), test_set.name)?;
                        (train_set, test_set)
                    }
                    None => data::dev_split(&train_set, *test_fraction, split_seed)?,
                }
            }
        };
        let n = train.n_classes().max(test.n_classes());
        Ok((train.with_n_classes(n)?, test.with_n_classes(n)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSweep {
    pub n_meta: Vec<usize>,
    pub n_learners: Vec<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_dev_fraction() -> Option<f64> {
    Some(0.1)
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSource,
    /// Share of training samples held out for model selection; `null`
    /// disables the dev set.
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: Option<f64>,
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// `input_dim` and `output_dim` may be left at 0 to infer them.
    pub spec: NetworkSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune_epochs: Option<usize>,
    pub matrix: MatrixSweep,
    pub strategies: Vec<ShareKind>,
    #[serde(default)]
    pub shared_layer_count: Option<usize>,
    #[serde(default = "default_one")]
    pub repetitions: usize,
    #[serde(default = "default_true")]
    pub prefix_reuse: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if self.strategies.is_empty() {
            return bad("at least one sharing strategy is required".into());
        }
        if self.matrix.n_meta.is_empty() || self.matrix.n_learners.is_empty() {
            return bad("n_meta and n_learners sweeps must be non-empty".into());
        }
        if let Some(&n) = self.matrix.n_meta.iter().find(|&&n| n < 2 || n > n_classes) {
            return Err(Error::InvalidArity { n_classes, n_meta: n });
        }
        if self.matrix.n_learners.contains(&0) {
            return bad("n_learners values must be >= 1".into());
        }
        self.train.validate()
    }

    pub fn strategy(&self, kind: ShareKind, spec: &NetworkSpec) -> SharingStrategy {
        match (kind, self.shared_layer_count) {
            (ShareKind::PartialShare, Some(k)) => SharingStrategy::partial_share(k),
            _ => SharingStrategy::for_kind(kind, spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub accuracies: Vec<f64>,
    pub seeds: Vec<u64>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub n_meta: usize,
    pub n_learners: usize,
    pub strategy: ShareKind,
    pub shared_layer_count: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub accuracies: Vec<f64>,
    pub baseline_mean_accuracy: f64,
    pub baseline_std_accuracy: f64,
    pub train_seeds: Vec<u64>,
    pub matrix_seeds: Vec<u64>,
    /// Seconds spent training the ensembles this cell was scored from.
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub repetitions: usize,
    pub prefix_reuse: bool,
    pub baseline: BaselineReport,
    pub cells: Vec<CellReport>,
    /// False when the run aborted and this holds partial results.
    pub complete: bool,
}

impl ExperimentReport {
    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> ExperimentReport {
        let mut r = self.clone();
        r.baseline.wall_clock_seconds = 0.0;
        for c in &mut r.cells {
            c.wall_clock_seconds = 0.0;
        }
        r
    }

    pub fn cell(&self, n_meta: usize, n_learners: usize, strategy: ShareKind) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.n_meta == n_meta && c.n_learners == n_learners && c.strategy == strategy)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidConfig(format!("unknown report format {other:?}"))),
        }
    }
}

pub const CSV_HEADER: &str = "n_meta,n_learners,strategy,shared_layer_count,mean_accuracy,std_accuracy,\
baseline_mean_accuracy,baseline_std_accuracy,repetitions,wall_clock_seconds";

pub fn emit_report(report: &ExperimentReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report is always serializable") + "\n",
        ReportFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for c in &report.cells {
                writeln!(
                    out,
                    "{},{},{},{},{:.10},{:.10},{:.10},{:.10},{},{:.3}",
                    c.n_meta,
                    c.n_learners,
                    c.strategy,
                    c.shared_layer_count,
                    c.mean_accuracy,
                    c.std_accuracy,
                    c.baseline_mean_accuracy,
                    c.baseline_std_accuracy,
                    c.accuracies.len(),
                    c.wall_clock_seconds
                )
                .expect("writing to a String cannot fail");
            }
            out
        }
    }
}

/// Splits and preprocessing shared by every cell of a run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub dev: Option<Dataset>,
    pub test: Dataset,
    /// The configured spec with inferred dimensions filled in.
    pub spec: NetworkSpec,
}

/// Load, split and standardize the configured dataset. Deterministic in the
/// config.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test) = config.dataset.load(config.seed)?;
    let (train, dev) = match config.dev_fraction {
        Some(f) => {
            let (t, d) = data::dev_split(&train, f, seed::derive(config.seed, &[DEV]))?;
            (t, Some(d))
        }
        None => (train, None),
    };
    let (train, dev, test) = if config.standardize {
        let mut others = vec![&test];
        if let Some(d) = &dev {
            others.push(d);
        }
        let (train, mut rest, _) = data::standardize(&train, &others)?;
        let dev = dev.as_ref().map(|_| rest.pop().expect("dev standardized"));
        let test = rest.pop().expect("test standardized");
        (train, dev, test)
    } else {
        (train, dev, test)
    };

    let mut spec = config.spec.clone();
    if spec.input_dim == 0 {
        spec.input_dim = train.dims();
    }
    if spec.output_dim == 0 {
        spec.output_dim = train.n_classes();
    }
    if spec.input_dim != train.dims() {
        return Err(Error::ShapeMismatch(format!(
            "spec input_dim {} but data has {} features",
            spec.input_dim,
            train.dims()
        )));
    }
    Ok(PreparedData { train, dev, test, spec })
}

fn strategy_index(kind: ShareKind) -> u64 {
    match kind {
        ShareKind::NoShare => 0,
        ShareKind::PartialShare => 1,
        ShareKind::FullShare => 2,
    }
}

/// Run the full sweep. If `config.output` is set the report is written
/// there as JSON, including a partial report when a cell fails.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let p = prepare_data(config)?;
    let n_classes = p.train.n_classes();
    config.validate(n_classes)?;

    let mut report = ExperimentReport {
        name: config.name.clone(),
        seed: config.seed,
        n_classes,
        n_train: p.train.len(),
        n_dev: p.dev.as_ref().map_or(0, Dataset::len),
        n_test: p.test.len(),
        repetitions: config.repetitions,
        prefix_reuse: config.prefix_reuse,
        baseline: BaselineReport {
            mean_accuracy: 0.0,
            std_accuracy: 0.0,
            accuracies: Vec::new(),
            seeds: Vec::new(),
            wall_clock_seconds: 0.0,
        },
        cells: Vec::new(),
        complete: false,
    };

    let result = sweep(config, &p, &mut report);
    if result.is_ok() {
        report.complete = true;
    }
    if let Some(path) = &config.output {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, emit_report(&report, ReportFormat::Json))?;
    }
    result.map(|_| report)
}

fn sweep(config: &ExperimentConfig, p: &PreparedData, report: &mut ExperimentReport) -> Result<()> {
    let single_spec = p.spec.with_output_dim(p.train.n_classes());
    let dev_batch = p.dev.as_ref().map(Dataset::batch);

    let started = Instant::now();
    let mut baselines = Vec::with_capacity(config.repetitions);
    for r in 0..config.repetitions {
        let s = seed::derive(config.seed, &[BASELINE, r as u64]);
        let model = learners::fit(&single_spec, &config.train.with_seed(s), &p.train.batch(), dev_batch.as_ref())
            .map_err(|e| e.context(format!("baseline repetition {r}")))?;
        let acc = evaluate_accuracy(&learners::predict(&model, p.test.features().view())?, p.test.labels())?;
        report.baseline.accuracies.push(acc);
        report.baseline.seeds.push(s);
        baselines.push(model);
    }
    let (bm, bs) = mean_std(&report.baseline.accuracies);
    report.baseline.mean_accuracy = bm;
    report.baseline.std_accuracy = bs;
    report.baseline.wall_clock_seconds = started.elapsed().as_secs_f64();

    let mut learner_counts = config.matrix.n_learners.clone();
    learner_counts.sort_unstable();
    learner_counts.dedup();
    let max_learners = *learner_counts.last().expect("validated non-empty");
    let matrix_base = config.matrix.seed.unwrap_or(config.seed);

    for &n_meta in &config.matrix.n_meta {
        for &kind in &config.strategies {
            let strategy = config.strategy(kind, &p.spec);
            let mut accs = vec![Vec::with_capacity(config.repetitions); learner_counts.len()];
            let mut seconds = vec![0.0; learner_counts.len()];
            let mut train_seeds = Vec::new();
            let mut matrix_seeds = Vec::new();

            for (r, baseline) in baselines.iter().enumerate() {
                let ctx = |e: Error| e.context(format!("cell N={n_meta} strategy={kind} repetition={r}"));
                let matrix_seed = seed::derive(matrix_base, &[MATRIX, n_meta as u64, r as u64]);
                let train_seed = seed::derive(config.seed, &[ENSEMBLE, n_meta as u64, strategy_index(kind), r as u64]);
                matrix_seeds.push(matrix_seed);
                train_seeds.push(train_seed);

                let matrix =
                    generate_coding_matrix(p.train.n_classes(), max_learners, n_meta, matrix_seed).map_err(ctx)?;
                let cfg = config.train.with_seed(train_seed);
                let opts =
                    EnsembleOptions { finetune_epochs: config.finetune_epochs, pretrained: Some(baseline.clone()) };

                if config.prefix_reuse {
                    let t = Instant::now();
                    let model = train_ensemble(&p.train, p.dev.as_ref(), &matrix, strategy, &p.spec, &cfg, &opts)
                        .map_err(ctx)?;
                    let elapsed = t.elapsed().as_secs_f64();
                    let codes = model.learner_codes(p.test.features().view()).map_err(ctx)?;
                    for (i, &k) in learner_counts.iter().enumerate() {
                        let prefix = matrix.prefix(k).map_err(ctx)?;
                        let sub = codes.slice(ndarray::s![.., ..k]).to_owned();
                        let pred = decode_code_rows(&prefix, &sub).map_err(ctx)?;
                        accs[i].push(evaluate_accuracy(&pred, p.test.labels())?);
                        seconds[i] += elapsed;
                    }
                } else {
                    for (i, &k) in learner_counts.iter().enumerate() {
                        let t = Instant::now();
                        let prefix = matrix.prefix(k).map_err(ctx)?;
                        let model = train_ensemble(&p.train, p.dev.as_ref(), &prefix, strategy, &p.spec, &cfg, &opts)
                            .map_err(ctx)?;
                        let pred = predict_ensemble(&model, p.test.features().view()).map_err(ctx)?;
                        accs[i].push(evaluate_accuracy(&pred, p.test.labels())?);
                        seconds[i] += t.elapsed().as_secs_f64();
                    }
                }
            }

            for (i, &k) in learner_counts.iter().enumerate() {
                if !config.matrix.n_learners.contains(&k) {
                    continue;
                }
                let (mean, std) = mean_std(&accs[i]);
                report.cells.push(CellReport {
                    n_meta,
                    n_learners: k,
                    strategy: kind,
                    shared_layer_count: strategy.trunk_depth(&p.spec).unwrap_or(0),
                    mean_accuracy: mean,
                    std_accuracy: std,
                    accuracies: accs[i].clone(),
                    baseline_mean_accuracy: bm,
                    baseline_std_accuracy: bs,
                    train_seeds: train_seeds.clone(),
                    matrix_seeds: matrix_seeds.clone(),
                    wall_clock_seconds: seconds[i],
                });
            }
        }
    }
    Ok(())
}
