//! `naryecoc` command line: matrix generation, training, evaluation and sweeps.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use naryecoc::{
    emit_report, evaluate_accuracy, generate_coding_matrix, predict_ensemble, prepare_data, run_experiment,
    train_ensemble, CodingMatrix, EnsembleModel, EnsembleOptions, ExperimentConfig, ExperimentReport, ReportFormat,
    ShareKind,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "naryecoc", version, about = "N-ary error correcting output code ensembles")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random balanced coding matrix and write it as CSV.
    GenMatrix {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        learners: usize,
        #[arg(long)]
        meta: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (stdout if omitted).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train one ensemble and write a checkpoint directory.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint directory.
        #[arg(long, short)]
        out: PathBuf,
        /// Use this coding matrix instead of generating one.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split of a config's dataset.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the configured grid and write a report.
    Sweep {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        repetitions: Option<usize>,
        /// Report path; overrides the config's `output`.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: ReportFormat,
        /// Retrain for every N_L instead of scoring prefixes.
        #[arg(long)]
        no_prefix_reuse: bool,
    },
    /// Convert a JSON report to CSV or pretty JSON.
    Report {
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Config file plus flags that override its keys.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Meta-class counts (comma separated).
    #[arg(long, value_delimiter = ',')]
    meta: Option<Vec<usize>>,
    /// Learner counts (comma separated).
    #[arg(long, value_delimiter = ',')]
    learners: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<ShareKind>>,
    #[arg(long)]
    shared_layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = &self.meta {
            cfg.matrix.n_meta = v.clone();
        }
        if let Some(v) = &self.learners {
            cfg.matrix.n_learners = v.clone();
        }
        if let Some(v) = &self.strategy {
            cfg.strategies = v.clone();
        }
        if self.shared_layers.is_some() {
            cfg.shared_layer_count = self.shared_layers;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.base_lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if self.finetune_epochs.is_some() {
            cfg.finetune_epochs = self.finetune_epochs;
        }
        Ok(cfg)
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn gen_matrix(classes: usize, learners: usize, meta: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let m = generate_coding_matrix(classes, learners, meta, seed)?;
    let mut buf = Vec::new();
    m.write_csv(&mut buf)?;
    write_output(out, std::str::from_utf8(&buf)?)
}

fn train(common: &ConfigArgs, out: &Path, matrix_path: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let data = prepare_data(&cfg)?;
    let n_classes = data.train.n_classes();
    let kind = *cfg.strategies.first().context("config lists no strategy")?;
    let strategy = cfg.strategy(kind, &data.spec);

    let matrix = match matrix_path {
        Some(p) => {
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            CodingMatrix::read_csv(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?
        }
        None => {
            let n_meta = *cfg.matrix.n_meta.first().context("config lists no n_meta value")?;
            let n_learners = *cfg.matrix.n_learners.iter().max().context("config lists no n_learners value")?;
            generate_coding_matrix(n_classes, n_learners, n_meta, cfg.matrix.seed.unwrap_or(cfg.seed))?
        }
    };
    if matrix.n_classes() != n_classes {
        bail!("matrix has {} rows but the dataset has {} classes", matrix.n_classes(), n_classes);
    }

    let train_cfg = cfg.train.with_seed(cfg.seed);
    let opts = EnsembleOptions { finetune_epochs: cfg.finetune_epochs, pretrained: None };
    let model = train_ensemble(&data.train, data.dev.as_ref(), &matrix, strategy, &data.spec, &train_cfg, &opts)?;
    model.save(out).with_context(|| format!("writing checkpoint {}", out.display()))?;

    let test_acc = evaluate_accuracy(&predict_ensemble(&model, data.test.features().view())?, data.test.labels())?;
    println!(
        "{}",
        json!({
            "checkpoint": out,
            "n_classes": n_classes,
            "n_meta": matrix.n_meta(),
            "n_learners": matrix.n_learners(),
            "strategy": kind,
            "test_accuracy": test_acc,
        })
    );
    Ok(())
}

fn eval(common: &ConfigArgs, model_dir: &Path) -> Result<()> {
    let cfg = common.load()?;
    let data = prepare_data(&cfg)?;
    let mut model =
        EnsembleModel::load(model_dir).with_context(|| format!("loading checkpoint {}", model_dir.display()))?;
    if let Some(k) = common.learners.as_ref().and_then(|v| v.first()) {
        model = model.prefix(*k)?;
    }
    let pred = predict_ensemble(&model, data.test.features().view())?;
    let acc = evaluate_accuracy(&pred, data.test.labels())?;
    println!("{}", json!({ "n_learners": model.n_learners(), "n_test": data.test.len(), "accuracy": acc }));
    Ok(())
}

fn sweep(
    common: &ConfigArgs,
    repetitions: Option<usize>,
    output: Option<PathBuf>,
    format: ReportFormat,
    no_prefix_reuse: bool,
) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(r) = repetitions {
        cfg.repetitions = r;
    }
    if no_prefix_reuse {
        cfg.prefix_reuse = false;
    }
    let target = output.or_else(|| cfg.output.clone());
    // The library writes JSON itself, including partial reports on failure.
    cfg.output = if format == ReportFormat::Json { target.clone() } else { None };
    let report = run_experiment(&cfg)?;
    match (format, target) {
        (ReportFormat::Json, Some(_)) => {}
        (f, t) => write_output(t.as_deref(), &emit_report(&report, f))?,
    }
    Ok(())
}

fn report(input: &Path, format: ReportFormat, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let report = ExperimentReport::from_json(&text).with_context(|| format!("parsing {}", input.display()))?;
    write_output(out, &emit_report(&report, format))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    match cli.command {
        Command::GenMatrix { classes, learners, meta, seed, out } => {
            gen_matrix(classes, learners, meta, seed, out.as_deref())
        }
        Command::Train { common, out, matrix } => train(&common, &out, matrix.as_deref()),
        Command::Eval { common, model } => eval(&common, &model),
        Command::Sweep { common, repetitions, output, format, no_prefix_reuse } => {
            sweep(&common, repetitions, output, format, no_prefix_reuse)
        }
        Command::Report { input, format, out } => report(&input, format, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
