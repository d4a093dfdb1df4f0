//! Python bindings for `scoped_core`.

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;

use scoped_core::cli::{self, Algorithm, InferOptions, LocaleReport};
use scoped_core::error::Error;
use scoped_core::eval::{average_precision, binary_predictions, token_accuracy};
use scoped_core::global_model::{self, MaxentOptions};
use scoped_core::{numerics, oracle, synth, InferenceConfig};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_algorithm(name: &str) -> PyResult<Algorithm> {
    Ok(match name {
        "global" => Algorithm::Global,
        "map_em" => Algorithm::MapEm,
        "variational" => Algorithm::Variational,
        "cond_em" => Algorithm::CondEm,
        "oracle" => Algorithm::Oracle,
        other => return Err(PyValueError::new_err(format!("unknown algorithm `{other}`"))),
    })
}

#[pyclass(module = "scoped_learning", frozen)]
struct Corpus {
    inner: scoped_core::Corpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        scoped_core::corpus::load_corpus(path).map(|inner| Corpus { inner }).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        scoped_core::corpus::save_corpus(&self.inner, path).map_err(to_py)
    }

    /// `(K, V, F)`.
    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims();
        (d.k, d.v, d.f)
    }

    #[getter]
    fn locale_ids(&self) -> Vec<String> {
        self.inner.locales().iter().map(|l| l.id.clone()).collect()
    }

    #[getter]
    fn instance_count(&self) -> usize {
        self.inner.instance_count()
    }

    /// Gold labels in corpus order; `None` for unlabeled instances.
    fn labels(&self) -> Vec<Option<usize>> {
        self.inner.instances().map(|i| i.label).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.locales().len()
    }

    fn __repr__(&self) -> String {
        format!("Corpus({} locales, {})", self.inner.locales().len(), self.inner.dims())
    }
}

#[pyclass(module = "scoped_learning", frozen)]
struct GlobalModel {
    inner: scoped_core::GlobalModel,
}

#[pymethods]
impl GlobalModel {
    #[staticmethod]
    #[pyo3(signature = (corpus, smoothing = 1.0))]
    fn train_naive_bayes(corpus: &Corpus, smoothing: f64) -> PyResult<Self> {
        global_model::train_naive_bayes(&corpus.inner, smoothing)
            .map(|m| GlobalModel {
                inner: scoped_core::GlobalModel::NaiveBayes(m),
            })
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (corpus, prior_variance = 1.0))]
    fn train_maxent(corpus: &Corpus, prior_variance: f64) -> PyResult<Self> {
        let opts = MaxentOptions {
            prior_variance,
            ..MaxentOptions::default()
        };
        global_model::train_maxent(&corpus.inner, opts)
            .map(|m| GlobalModel {
                inner: scoped_core::GlobalModel::Maxent(m),
            })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        global_model::load_model(path).map(|inner| GlobalModel { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        global_model::model_from_json(text).map(|inner| GlobalModel { inner }).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        global_model::save_model(&self.inner, path).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        global_model::model_to_json(&self.inner).map_err(to_py)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner {
            scoped_core::GlobalModel::NaiveBayes(_) => "naive_bayes",
            scoped_core::GlobalModel::Maxent(_) => "maxent",
        }
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }

    /// Class posterior for one bag of global feature ids.
    fn posterior(&self, global_feats: Vec<usize>) -> PyResult<Vec<f64>> {
        let inst = scoped_core::Instance::new(global_feats, Vec::new(), None);
        self.inner.posterior(&inst).map_err(to_py)
    }
}

#[pyclass(module = "scoped_learning", frozen, get_all)]
struct LocaleResult {
    locale: String,
    posteriors: Vec<Vec<f64>>,
    labels: Vec<usize>,
    objective_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    log_evidence: Option<f64>,
}

impl From<LocaleReport> for LocaleResult {
    fn from(r: LocaleReport) -> Self {
        LocaleResult {
            locale: r.locale,
            posteriors: r.result.posteriors,
            labels: r.result.labels,
            objective_trace: r.result.objective_trace,
            iterations: r.result.iterations,
            converged: r.result.converged,
            log_evidence: r.log_evidence,
        }
    }
}

impl LocaleResult {
    fn to_report(&self) -> LocaleReport {
        LocaleReport {
            locale: self.locale.clone(),
            result: scoped_core::ScopedResult {
                posteriors: self.posteriors.clone(),
                labels: self.labels.clone(),
                objective_trace: self.objective_trace.clone(),
                iterations: self.iterations,
                converged: self.converged,
            },
            log_evidence: self.log_evidence,
        }
    }
}

#[pymethods]
impl LocaleResult {
    fn __repr__(&self) -> String {
        format!(
            "LocaleResult(locale={:?}, instances={}, iterations={}, converged={})",
            self.locale,
            self.labels.len(),
            self.iterations,
            self.converged
        )
    }
}

/// Runs one algorithm over every locale; results are ordered by locale id.
#[pyfunction]
#[pyo3(signature = (
    model, corpus, algo = "variational", alpha = 1.0, max_iters = 100, tol = 1e-6,
    smoothing = 1e-6, local_prior_variance = 1.0, oracle_cap = oracle::DEFAULT_CAP, threads = 1
))]
#[allow(clippy::too_many_arguments)]
fn infer(
    py: Python<'_>,
    model: &GlobalModel,
    corpus: &Corpus,
    algo: &str,
    alpha: f64,
    max_iters: usize,
    tol: f64,
    smoothing: f64,
    local_prior_variance: f64,
    oracle_cap: u64,
    threads: usize,
) -> PyResult<Vec<LocaleResult>> {
    let algo = parse_algorithm(algo)?;
    let opts = InferOptions {
        config: InferenceConfig {
            max_iters,
            rel_tolerance: tol,
            m_step_smoothing: smoothing,
            alpha,
        },
        local_prior_variance,
        oracle_cap,
    };
    let reports = py
        .detach(|| cli::infer_corpus(algo, &model.inner, &corpus.inner, &opts, threads))
        .map_err(to_py)?;
    Ok(reports.into_iter().map(LocaleResult::from).collect())
}

/// Exact marginals for one locale: `(marginals, log_evidence)`.
#[pyfunction]
#[pyo3(signature = (model, corpus, locale_id, alpha = 1.0, cap = oracle::DEFAULT_CAP))]
fn exact_posterior(
    model: &GlobalModel,
    corpus: &Corpus,
    locale_id: &str,
    alpha: f64,
    cap: u64,
) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let scoped_core::GlobalModel::NaiveBayes(g) = &model.inner else {
        return Err(PyValueError::new_err("the oracle needs a naive Bayes model"));
    };
    let locale = corpus
        .inner
        .locale(locale_id)
        .ok_or_else(|| PyKeyError::new_err(locale_id.to_string()))?;
    let res = oracle::exact_label_posterior(g, locale, corpus.inner.dims().f, alpha, cap).map_err(to_py)?;
    Ok((res.marginals, res.log_evidence))
}

/// Samples `(train, test, truth_json)` from a JSON spec; `train` is `None`
/// when the spec asks for no training locales.
#[pyfunction]
fn synthesize(spec_json: &str) -> PyResult<(Option<Corpus>, Corpus, String)> {
    let spec = synth::SynthSpec::from_json(spec_json).map_err(to_py)?;
    let out = synth::sample_corpus(&spec).map_err(to_py)?;
    let mut truth = Vec::new();
    synth::write_truth(&out.truth, &mut truth).map_err(to_py)?;
    Ok((
        out.train.map(|inner| Corpus { inner }),
        Corpus { inner: out.test },
        String::from_utf8(truth).expect("JSON is UTF-8"),
    ))
}

/// `(accuracy, average_precision)` of results against the corpus gold labels.
#[pyfunction]
#[pyo3(signature = (corpus, results, positive_class = 0))]
fn evaluate(corpus: &Corpus, results: Vec<PyRef<'_, LocaleResult>>, positive_class: usize) -> PyResult<(f64, f64)> {
    let reports: Vec<LocaleReport> = results.iter().map(|r| r.to_report()).collect();
    let (post, labels, gold) = cli::align_with_gold(&corpus.inner, &reports).map_err(to_py)?;
    let acc = token_accuracy(&labels, &gold).map_err(to_py)?;
    let ap = average_precision(&binary_predictions(&post, &gold, positive_class).map_err(to_py)?).map_err(to_py)?;
    Ok((acc, ap))
}

#[pyfunction]
fn digamma(x: f64) -> PyResult<f64> {
    numerics::digamma(x).map_err(to_py)
}

#[pyfunction]
fn log_gamma(x: f64) -> PyResult<f64> {
    numerics::log_gamma(x).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (counts, alpha = 1.0))]
fn polya_log_marginal(counts: Vec<Vec<u64>>, alpha: f64) -> PyResult<f64> {
    oracle::polya_log_marginal(&counts, alpha).map_err(to_py)
}

#[pymodule]
fn scoped_learning(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<GlobalModel>()?;
    m.add_class::<LocaleResult>()?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(exact_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(digamma, m)?)?;
    m.add_function(wrap_pyfunction!(log_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(polya_log_marginal, m)?)?;
    Ok(())
}
