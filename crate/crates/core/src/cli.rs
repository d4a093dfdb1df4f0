//! Command-line front end: `synth`, `train`, `infer`, `oracle`, `eval`.
//!
//! Every command writes a `manifest.json` next to its outputs echoing the
//! parsed configuration and the SHA-256 of each input file.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_corpus, save_corpus, Corpus, Locale};
use crate::error::{Error, Result};
use crate::eval::{
    average_precision, binary_predictions, compare_at_recalls, pr_curve, token_accuracy, write_curve_csv, EvalSummary,
};
use crate::global_model::{load_model, save_model, train_maxent, train_naive_bayes, GlobalModel, MaxentOptions};
use crate::oracle::{exact_label_posterior, OracleResult, DEFAULT_CAP};
use crate::scoped_discriminative::cond_em_infer;
use crate::scoped_generative::{map_em_infer, variational_infer, InferenceConfig, ScopedResult};
use crate::synth::{load_spec, sample_corpus, save_truth};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_MALFORMED: i32 = 4;
pub const EXIT_DIMENSION: i32 = 5;
pub const EXIT_ORACLE_CAP: i32 = 6;
pub const EXIT_OPTIMIZER: i32 = 7;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Io(_) => EXIT_IO,
        Error::Malformed { .. } | Error::Json(_) | Error::Unlabeled { .. } => EXIT_MALFORMED,
        Error::DimensionMismatch(_) | Error::OutOfRange { .. } => EXIT_DIMENSION,
        Error::OracleCap { .. } => EXIT_ORACLE_CAP,
        Error::NotConverged { .. } => EXIT_OPTIMIZER,
        _ => EXIT_OTHER,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Algorithm {
    Global,
    MapEm,
    Variational,
    CondEm,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModelKind {
    NaiveBayes,
    Maxent,
}

#[derive(Debug, Parser)]
#[command(name = "scoped", version, about = "Scoped learning over locales")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Sample a labeled corpus and its ground truth from a spec file.
    Synth(SynthArgs),
    /// Fit a global model on a labeled corpus.
    Train(TrainArgs),
    /// Label every locale of a corpus.
    Infer(InferArgs),
    /// Exact label marginals by enumeration.
    Oracle(OracleArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// JSON spec file.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory; the model is written to `model.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "naive_bayes")]
    pub kind: ModelKind,
    /// Additive smoothing for naive Bayes.
    #[arg(long, default_value_t = 1.0)]
    pub smoothing: f64,
    /// Gaussian prior variance for maxent weights.
    #[arg(long, default_value_t = 1.0)]
    pub prior_variance: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct InferenceArgs {
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Pseudo-count added to every cell in the MAP-EM M-step.
    #[arg(long, default_value_t = 1e-6)]
    pub smoothing: f64,
    /// Gaussian prior variance of the local model in conditional EM.
    #[arg(long, default_value_t = 1.0)]
    pub local_prior_variance: f64,
}

impl InferenceArgs {
    fn config(&self) -> InferenceConfig {
        InferenceConfig {
            max_iters: self.max_iters,
            rel_tolerance: self.tol,
            m_step_smoothing: self.smoothing,
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory; reports go to `report.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "variational")]
    pub algo: Algorithm,
    #[command(flatten)]
    #[serde(flatten)]
    pub inference: InferenceArgs,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    pub oracle_cap: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory; results go to `oracle.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    pub oracle_cap: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Corpus carrying gold labels.
    #[arg(long)]
    pub corpus: PathBuf,
    /// `report.jsonl` from `infer`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Optional baseline `report.jsonl` for error-reduction figures.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub positive_class: usize,
    /// Recall levels for error reduction.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.9])]
    pub recall: Vec<f64>,
}

/// One line of `report.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocaleReport {
    pub locale: String,
    #[serde(flatten)]
    pub result: ScopedResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_evidence: Option<f64>,
}

/// One line of `oracle.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocaleOracle {
    pub locale: String,
    #[serde(flatten)]
    pub result: OracleResult,
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a Command,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn write_manifest(dir: &Path, command: &Command, seed: Option<u64>, inputs: &[&Path], outputs: &[&str]) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        inputs,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<LocaleReport>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            location: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn check_model_dims(model: &GlobalModel, corpus: &Corpus) -> Result<()> {
    let d = corpus.dims();
    if model.classes() != d.k || model.vocab() != d.v {
        return Err(Error::DimensionMismatch(format!(
            "model has K={}, V={} but corpus has {d}",
            model.classes(),
            model.vocab()
        )));
    }
    Ok(())
}

/// Settings for [`infer_locale`] beyond the shared inference config.
#[derive(Debug, Clone, Copy)]
pub struct InferOptions {
    pub config: InferenceConfig,
    pub local_prior_variance: f64,
    pub oracle_cap: u64,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            config: InferenceConfig::default(),
            local_prior_variance: 1.0,
            oracle_cap: DEFAULT_CAP,
        }
    }
}

/// Runs one algorithm on one locale.
pub fn infer_locale(
    algo: Algorithm,
    model: &GlobalModel,
    locale: &Locale,
    f: usize,
    opts: &InferOptions,
) -> Result<LocaleReport> {
    let wrong_model = |need: &str| {
        Err(Error::InvalidArgument(format!(
            "algorithm {algo:?} needs a {need} global model"
        )))
    };
    let (result, log_evidence) = match (algo, model) {
        (Algorithm::Global, m) => {
            let post = locale.instances.iter().map(|i| m.posterior(i)).collect::<Result<Vec<_>>>()?;
            (ScopedResult::from_posteriors(post, Vec::new(), true), None)
        }
        (Algorithm::MapEm, GlobalModel::NaiveBayes(g)) => (map_em_infer(g, locale, f, &opts.config)?.1, None),
        (Algorithm::Variational, GlobalModel::NaiveBayes(g)) => (variational_infer(g, locale, f, &opts.config)?.1, None),
        (Algorithm::Oracle, GlobalModel::NaiveBayes(g)) => {
            let o = exact_label_posterior(g, locale, f, opts.config.alpha, opts.oracle_cap)?;
            (ScopedResult::from_posteriors(o.marginals, Vec::new(), true), Some(o.log_evidence))
        }
        (Algorithm::CondEm, GlobalModel::Maxent(g)) => {
            let prior = g.class_prior().to_vec();
            (cond_em_infer(g, &prior, locale, f, opts.local_prior_variance, &opts.config)?.1, None)
        }
        (Algorithm::CondEm, _) => return wrong_model("maxent"),
        _ => return wrong_model("naive Bayes"),
    };
    Ok(LocaleReport {
        locale: locale.id.clone(),
        result,
        log_evidence,
    })
}

fn with_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Err(Error::InvalidArgument("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(pool.install(job))
}

/// Runs one algorithm on every locale with `threads` workers. Reports are
/// ordered by locale id.
pub fn infer_corpus(
    algo: Algorithm,
    model: &GlobalModel,
    corpus: &Corpus,
    opts: &InferOptions,
    threads: usize,
) -> Result<Vec<LocaleReport>> {
    check_model_dims(model, corpus)?;
    opts.config.validate()?;
    let f = corpus.dims().f;
    let mut reports = with_pool(threads, || {
        corpus
            .locales()
            .par_iter()
            .map(|loc| infer_locale(algo, model, loc, f, opts))
            .collect::<Result<Vec<_>>>()
    })??;
    reports.sort_by(|a, b| a.locale.cmp(&b.locale));
    Ok(reports)
}

/// Flattens reports into instance order of `corpus` and pairs them with gold
/// labels.
pub fn align_with_gold(corpus: &Corpus, reports: &[LocaleReport]) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
    let by_id: HashMap<&str, &LocaleReport> = reports.iter().map(|r| (r.locale.as_str(), r)).collect();
    let (mut post, mut labels, mut gold) = (Vec::new(), Vec::new(), Vec::new());
    for loc in corpus.locales() {
        let rep = by_id
            .get(loc.id.as_str())
            .ok_or_else(|| Error::DimensionMismatch(format!("no predictions for locale `{}`", loc.id)))?;
        if rep.result.posteriors.len() != loc.len() {
            return Err(Error::DimensionMismatch(format!(
                "locale `{}` has {} instances but {} predictions",
                loc.id,
                loc.len(),
                rep.result.posteriors.len()
            )));
        }
        for (n, inst) in loc.instances.iter().enumerate() {
            gold.push(inst.label.ok_or_else(|| Error::Unlabeled {
                locale: loc.id.clone(),
                instance: n,
            })?);
        }
        post.extend(rep.result.posteriors.iter().cloned());
        labels.extend(rep.result.labels.iter().copied());
    }
    Ok((post, labels, gold))
}

fn run_synth(args: &SynthArgs, cmd: &Command) -> Result<()> {
    let mut spec = load_spec(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let out = sample_corpus(&spec)?;
    fs::create_dir_all(&args.out)?;
    save_corpus(&out.test, args.out.join("test.jsonl"))?;
    let mut outputs = vec!["test.jsonl", "truth.json"];
    if let Some(train) = &out.train {
        save_corpus(train, args.out.join("train.jsonl"))?;
        outputs.push("train.jsonl");
    }
    save_truth(&out.truth, args.out.join("truth.json"))?;
    write_manifest(&args.out, cmd, Some(spec.seed), &[&args.spec], &outputs)
}

fn run_train(args: &TrainArgs, cmd: &Command) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let model = match args.kind {
        ModelKind::NaiveBayes => GlobalModel::NaiveBayes(train_naive_bayes(&corpus, args.smoothing)?),
        ModelKind::Maxent => GlobalModel::Maxent(train_maxent(
            &corpus,
            MaxentOptions {
                prior_variance: args.prior_variance,
                ..MaxentOptions::default()
            },
        )?),
    };
    fs::create_dir_all(&args.out)?;
    save_model(&model, args.out.join("model.json"))?;
    write_manifest(&args.out, cmd, None, &[&args.corpus], &["model.json"])
}

fn run_infer(args: &InferArgs, cmd: &Command) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let model = load_model(&args.model)?;
    let opts = InferOptions {
        config: args.inference.config(),
        local_prior_variance: args.inference.local_prior_variance,
        oracle_cap: args.oracle_cap,
    };
    let reports = infer_corpus(args.algo, &model, &corpus, &opts, args.threads)?;
    fs::create_dir_all(&args.out)?;
    write_jsonl(&args.out.join("report.jsonl"), &reports)?;
    write_manifest(&args.out, cmd, None, &[&args.corpus, &args.model], &["report.jsonl"])
}

fn run_oracle(args: &OracleArgs, cmd: &Command) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let global = load_model(&args.model)?;
    check_model_dims(&global, &corpus)?;
    let GlobalModel::NaiveBayes(model) = &global else {
        return Err(Error::InvalidArgument("the oracle needs a naive Bayes global model".into()));
    };
    let f = corpus.dims().f;
    let mut rows = with_pool(args.threads, || {
        corpus
            .locales()
            .par_iter()
            .map(|loc| {
                Ok(LocaleOracle {
                    locale: loc.id.clone(),
                    result: exact_label_posterior(model, loc, f, args.alpha, args.oracle_cap)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    rows.sort_by(|a, b| a.locale.cmp(&b.locale));
    fs::create_dir_all(&args.out)?;
    write_jsonl(&args.out.join("oracle.jsonl"), &rows)?;
    write_manifest(&args.out, cmd, None, &[&args.corpus, &args.model], &["oracle.jsonl"])
}

fn run_eval(args: &EvalArgs, cmd: &Command) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    if args.positive_class >= corpus.dims().k {
        return Err(Error::InvalidArgument(format!(
            "positive class {} outside K={}",
            args.positive_class,
            corpus.dims().k
        )));
    }
    let (post, labels, gold) = align_with_gold(&corpus, &read_reports(&args.predictions)?)?;
    let preds = binary_predictions(&post, &gold, args.positive_class)?;
    let curve = pr_curve(&preds)?;
    let mut summary = EvalSummary {
        instances: gold.len(),
        positive_class: args.positive_class,
        accuracy: token_accuracy(&labels, &gold)?,
        average_precision: average_precision(&preds)?,
        error_reductions: Vec::new(),
    };
    fs::create_dir_all(&args.out)?;
    let mut outputs = vec!["curve.csv", "summary.json"];
    let mut inputs: Vec<&Path> = vec![&args.corpus, &args.predictions];
    if let Some(base) = &args.baseline {
        let (bpost, _, _) = align_with_gold(&corpus, &read_reports(base)?)?;
        let bcurve = pr_curve(&binary_predictions(&bpost, &gold, args.positive_class)?)?;
        summary.error_reductions = compare_at_recalls(&bcurve, &curve, &args.recall)?;
        let mut w = BufWriter::new(File::create(args.out.join("baseline_curve.csv"))?);
        write_curve_csv(&bcurve, &mut w)?;
        w.flush()?;
        outputs.push("baseline_curve.csv");
        inputs.push(base);
    }
    let mut w = BufWriter::new(File::create(args.out.join("curve.csv"))?);
    write_curve_csv(&curve, &mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(args.out.join("summary.json"))?);
    serde_json::to_writer_pretty(&mut w, &summary)?;
    writeln!(w)?;
    w.flush()?;
    write_manifest(&args.out, cmd, None, &inputs, &outputs)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cmd = &cli.command;
    match cmd {
        Command::Synth(a) => run_synth(a, cmd),
        Command::Train(a) => run_train(a, cmd),
        Command::Infer(a) => run_infer(a, cmd),
        Command::Oracle(a) => run_oracle(a, cmd),
        Command::Eval(a) => run_eval(a, cmd),
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
