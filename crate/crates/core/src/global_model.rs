//! Global classifiers over the iid features.
//!
//! Both models are trained on labeled instances pooled across locales; local
//! features and locale boundaries are ignored entirely.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClassId, Corpus, Instance};
use crate::error::{Error, Result};
use crate::numerics::{argmax, normalize_log_in_place};
use crate::optim::{bag_counts, fit_softmax, FitOptions, SoftmaxObjective, SoftmaxParams, SparseRow};

/// Class prior `eta` and class-conditional global feature distributions
/// `beta`, as trained by naive Bayes.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeGlobalModel {
    eta: Vec<f64>,
    beta: Vec<Vec<f64>>,
    smoothing: f64,
    log_eta: Vec<f64>,
    log_beta: Vec<Vec<f64>>,
}

impl GenerativeGlobalModel {
    /// Builds a model from explicit parameters. Rows must lie on the simplex.
    pub fn new(eta: Vec<f64>, beta: Vec<Vec<f64>>, smoothing: f64) -> Result<Self> {
        let k = eta.len();
        if k == 0 || beta.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "eta has {k} classes, beta has {} rows",
                beta.len()
            )));
        }
        let v = beta[0].len();
        if v == 0 || beta.iter().any(|row| row.len() != v) {
            return Err(Error::DimensionMismatch("beta rows differ in length".into()));
        }
        check_simplex("eta", &eta)?;
        for (c, row) in beta.iter().enumerate() {
            check_simplex(&format!("beta[{c}]"), row)?;
        }
        let log_eta = eta.iter().map(|p| p.ln()).collect();
        let log_beta = beta.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        Ok(GenerativeGlobalModel {
            eta,
            beta,
            smoothing,
            log_eta,
            log_beta,
        })
    }

    pub fn classes(&self) -> usize {
        self.eta.len()
    }

    pub fn vocab(&self) -> usize {
        self.beta[0].len()
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn beta(&self) -> &[Vec<f64>] {
        &self.beta
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// `ln eta[c] + sum over the bag of ln beta[c][w]`, per class.
    pub fn log_joint(&self, instance: &Instance) -> Result<Vec<f64>> {
        self.check_instance(instance)?;
        Ok(self.log_joint_unchecked(instance))
    }

    pub(crate) fn log_joint_unchecked(&self, instance: &Instance) -> Vec<f64> {
        (0..self.classes())
            .map(|c| {
                let row = &self.log_beta[c];
                self.log_eta[c] + instance.global_feats.iter().map(|&w| row[w]).sum::<f64>()
            })
            .collect()
    }

    fn check_instance(&self, instance: &Instance) -> Result<()> {
        if instance.global_feats.is_empty() {
            return Err(Error::InvalidArgument("empty global feature bag".into()));
        }
        if let Some(&w) = instance.global_feats.iter().find(|&&w| w >= self.vocab()) {
            return Err(Error::DimensionMismatch(format!(
                "global feature {w} outside model vocabulary of {}",
                self.vocab()
            )));
        }
        Ok(())
    }
}

fn check_simplex(what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidArgument(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn labeled(corpus: &Corpus) -> Result<Vec<(&Instance, ClassId)>> {
    let mut out = Vec::with_capacity(corpus.instance_count());
    for locale in corpus.locales() {
        for (n, inst) in locale.instances.iter().enumerate() {
            match inst.label {
                Some(y) => out.push((inst, y)),
                None => {
                    return Err(Error::Unlabeled {
                        locale: locale.id.clone(),
                        instance: n,
                    })
                }
            }
        }
    }
    Ok(out)
}

/// Trains naive Bayes with additive smoothing on every labeled instance.
pub fn train_naive_bayes(corpus: &Corpus, smoothing: f64) -> Result<GenerativeGlobalModel> {
    if !(smoothing > 0.0) || !smoothing.is_finite() {
        return Err(Error::InvalidArgument(format!("smoothing must be positive, got {smoothing}")));
    }
    let dims = corpus.dims();
    let (k, v) = (dims.k, dims.v);
    let mut class_counts = vec![0.0; k];
    let mut feat_counts = vec![vec![0.0; v]; k];
    for (inst, y) in labeled(corpus)? {
        class_counts[y] += 1.0;
        for &w in &inst.global_feats {
            feat_counts[y][w] += 1.0;
        }
    }
    let n: f64 = class_counts.iter().sum();
    let eta = class_counts
        .iter()
        .map(|&nc| (nc + smoothing) / (n + k as f64 * smoothing))
        .collect();
    let beta = feat_counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            row.into_iter()
                .map(|cnt| (cnt + smoothing) / (total + v as f64 * smoothing))
                .collect()
        })
        .collect();
    GenerativeGlobalModel::new(eta, beta, smoothing)
}

/// Class posterior of one instance under the generative global model.
pub fn global_posterior_generative(model: &GenerativeGlobalModel, instance: &Instance) -> Result<Vec<f64>> {
    let mut lp = model.log_joint(instance)?;
    normalize_log_in_place(&mut lp)?;
    Ok(lp)
}

/// Multinomial logistic regression over global feature counts plus a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminativeGlobalModel {
    weights: SoftmaxParams,
    prior_variance: f64,
    class_prior: Vec<f64>,
}

impl DiscriminativeGlobalModel {
    pub fn new(weights: Vec<Vec<f64>>, prior_variance: f64, class_prior: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || class_prior.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "weights have {k} classes, class prior has {}",
                class_prior.len()
            )));
        }
        let stride = weights[0].len();
        if stride < 2 || weights.iter().any(|r| r.len() != stride) {
            return Err(Error::DimensionMismatch("weight rows must have V + 1 entries".into()));
        }
        if weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite".into()));
        }
        check_simplex("class prior", &class_prior)?;
        if class_prior.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidArgument("class prior must be strictly positive".into()));
        }
        Ok(DiscriminativeGlobalModel {
            weights: SoftmaxParams {
                classes: k,
                dim: stride - 1,
                values: weights.into_iter().flatten().collect(),
            },
            prior_variance,
            class_prior,
        })
    }

    pub fn classes(&self) -> usize {
        self.weights.classes
    }

    pub fn vocab(&self) -> usize {
        self.weights.dim
    }

    pub fn prior_variance(&self) -> f64 {
        self.prior_variance
    }

    /// Smoothed empirical label frequency, the fixed `p(c)` of the
    /// discriminative pipeline.
    pub fn class_prior(&self) -> &[f64] {
        &self.class_prior
    }

    pub fn params(&self) -> &SoftmaxParams {
        &self.weights
    }

    /// Rows of `V + 1` weights, bias last.
    pub fn weight_rows(&self) -> Vec<Vec<f64>> {
        self.weights
            .values
            .chunks(self.weights.stride())
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// `ln p(c | global bag)` per class.
    pub fn log_posterior(&self, instance: &Instance) -> Result<Vec<f64>> {
        if instance.global_feats.is_empty() {
            return Err(Error::InvalidArgument("empty global feature bag".into()));
        }
        if let Some(&w) = instance.global_feats.iter().find(|&&w| w >= self.vocab()) {
            return Err(Error::DimensionMismatch(format!(
                "global feature {w} outside model vocabulary of {}",
                self.vocab()
            )));
        }
        Ok(self.weights.log_posterior(&bag_counts(&instance.global_feats)))
    }
}

/// Settings for [`train_maxent`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxentOptions {
    pub prior_variance: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for MaxentOptions {
    fn default() -> Self {
        MaxentOptions {
            prior_variance: 1.0,
            grad_tol: 1e-5,
            max_iters: 2000,
        }
    }
}

fn maxent_problem(corpus: &Corpus) -> Result<(Vec<SparseRow>, Vec<Vec<f64>>, Vec<f64>)> {
    let k = corpus.dims().k;
    let data = labeled(corpus)?;
    let mut counts = vec![0.0; k];
    let mut rows = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for (inst, y) in data {
        counts[y] += 1.0;
        rows.push(bag_counts(&inst.global_feats));
        let mut t = vec![0.0; k];
        t[y] = 1.0;
        targets.push(t);
    }
    Ok((rows, targets, counts))
}

fn maxent_fit_options(opts: MaxentOptions) -> FitOptions {
    // the bias is left unpenalized so a strong prior shrinks toward the
    // class frequencies rather than toward uniform
    FitOptions {
        prior_variance: opts.prior_variance,
        penalize_bias: false,
        grad_tol: opts.grad_tol,
        max_iters: opts.max_iters,
    }
}

/// Penalized conditional log-likelihood of the labeled corpus at `model`.
pub fn maxent_objective(corpus: &Corpus, model: &DiscriminativeGlobalModel) -> Result<f64> {
    let (rows, targets, _) = maxent_problem(corpus)?;
    let opts = maxent_fit_options(MaxentOptions {
        prior_variance: model.prior_variance,
        ..MaxentOptions::default()
    });
    let obj = SoftmaxObjective::new(&rows, &targets, model.classes(), model.vocab(), opts);
    Ok(obj.value(&model.weights.values))
}

/// Fits the maximum-entropy classifier with a Gaussian prior on the weights.
pub fn train_maxent(corpus: &Corpus, opts: MaxentOptions) -> Result<DiscriminativeGlobalModel> {
    if !(opts.prior_variance > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "prior variance must be positive, got {}",
            opts.prior_variance
        )));
    }
    let dims = corpus.dims();
    let (rows, targets, counts) = maxent_problem(corpus)?;
    if let Some(c) = counts.iter().position(|&n| n == 0.0) {
        return Err(Error::InvalidArgument(format!("class {c} has no training instances")));
    }
    let out = fit_softmax(&rows, &targets, SoftmaxParams::zeros(dims.k, dims.v), maxent_fit_options(opts));
    if !out.converged {
        return Err(Error::NotConverged {
            iterations: out.iterations,
            grad_norm: out.grad_norm,
        });
    }
    let n: f64 = counts.iter().sum();
    let class_prior = counts
        .iter()
        .map(|&c| (c + 1.0) / (n + dims.k as f64))
        .collect();
    Ok(DiscriminativeGlobalModel {
        weights: out.params,
        prior_variance: opts.prior_variance,
        class_prior,
    })
}

/// Class posterior of one instance under the maxent model.
pub fn global_posterior_discriminative(
    model: &DiscriminativeGlobalModel,
    instance: &Instance,
) -> Result<Vec<f64>> {
    Ok(model.log_posterior(instance)?.into_iter().map(f64::exp).collect())
}

/// Either kind of trained global model.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalModel {
    NaiveBayes(GenerativeGlobalModel),
    Maxent(DiscriminativeGlobalModel),
}

impl GlobalModel {
    pub fn classes(&self) -> usize {
        match self {
            GlobalModel::NaiveBayes(m) => m.classes(),
            GlobalModel::Maxent(m) => m.classes(),
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            GlobalModel::NaiveBayes(m) => m.vocab(),
            GlobalModel::Maxent(m) => m.vocab(),
        }
    }

    pub fn posterior(&self, instance: &Instance) -> Result<Vec<f64>> {
        match self {
            GlobalModel::NaiveBayes(m) => global_posterior_generative(m, instance),
            GlobalModel::Maxent(m) => global_posterior_discriminative(m, instance),
        }
    }

    pub fn predict(&self, instance: &Instance) -> Result<ClassId> {
        Ok(argmax(&self.posterior(instance)?))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelFile {
    NaiveBayes {
        #[serde(rename = "K")]
        k: usize,
        #[serde(rename = "V")]
        v: usize,
        smoothing: f64,
        eta: Vec<f64>,
        beta: Vec<Vec<f64>>,
    },
    Maxent {
        #[serde(rename = "K")]
        k: usize,
        #[serde(rename = "V")]
        v: usize,
        prior_variance: f64,
        class_prior: Vec<f64>,
        weights: Vec<Vec<f64>>,
    },
}

impl From<&GlobalModel> for ModelFile {
    fn from(m: &GlobalModel) -> Self {
        match m {
            GlobalModel::NaiveBayes(m) => ModelFile::NaiveBayes {
                k: m.classes(),
                v: m.vocab(),
                smoothing: m.smoothing,
                eta: m.eta.clone(),
                beta: m.beta.clone(),
            },
            GlobalModel::Maxent(m) => ModelFile::Maxent {
                k: m.classes(),
                v: m.vocab(),
                prior_variance: m.prior_variance,
                class_prior: m.class_prior.clone(),
                weights: m.weight_rows(),
            },
        }
    }
}

impl TryFrom<ModelFile> for GlobalModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let model = match f {
            ModelFile::NaiveBayes {
                smoothing, eta, beta, ..
            } => GlobalModel::NaiveBayes(GenerativeGlobalModel::new(eta, beta, smoothing)?),
            ModelFile::Maxent {
                prior_variance,
                class_prior,
                weights,
                ..
            } => GlobalModel::Maxent(DiscriminativeGlobalModel::new(weights, prior_variance, class_prior)?),
        };
        Ok(model)
    }
}

pub fn model_to_json(model: &GlobalModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelFile::from(model))?)
}

pub fn model_from_json(text: &str) -> Result<GlobalModel> {
    let file: ModelFile = serde_json::from_str(text)?;
    let (k, v) = match &file {
        ModelFile::NaiveBayes { k, v, .. } | ModelFile::Maxent { k, v, .. } => (*k, *v),
    };
    let model = GlobalModel::try_from(file)?;
    if model.classes() != k || model.vocab() != v {
        return Err(Error::DimensionMismatch(format!(
            "header says K={k}, V={v} but parameters have K={}, V={}",
            model.classes(),
            model.vocab()
        )));
    }
    Ok(model)
}

pub fn save_model(model: &GlobalModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(model_to_json(model)?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GlobalModel> {
    let mut text = String::new();
    std::io::Read::read_to_string(&mut BufReader::new(File::open(path)?), &mut text)?;
    model_from_json(&text)
}
