//! Per-locale conditional EM for the discriminative variant.
//!
//! The local model is a multinomial logistic regression `p(c | f; phi)` over
//! local feature counts, fit per locale. It is combined with a global maxent
//! classifier through `p(c | w, f) ∝ p(c | f) p(c | w) / p(c)`, where the
//! class prior `p(c)` is a fixed input and never re-estimated here.

use crate::corpus::Locale;
use crate::error::{Error, Result};
use crate::global_model::DiscriminativeGlobalModel;
use crate::numerics::{log_sum_exp, normalize_log_in_place};
use crate::optim::{bag_counts, fit_softmax, FitOptions, SoftmaxObjective, SoftmaxParams, SparseRow};
use crate::scoped_generative::{has_converged, InferenceConfig, ScopedResult};

/// Local conditional model: `K` rows of `F + 1` weights, bias last.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalConditionalModel {
    params: SoftmaxParams,
    prior_variance: f64,
}

impl LocalConditionalModel {
    /// All-zero weights: the uniform local posterior.
    pub fn zeros(k: usize, f: usize, prior_variance: f64) -> Self {
        LocalConditionalModel {
            params: SoftmaxParams::zeros(k, f),
            prior_variance,
        }
    }

    pub fn from_weights(weights: Vec<Vec<f64>>, prior_variance: f64) -> Result<Self> {
        let k = weights.len();
        let stride = weights.first().map_or(0, Vec::len);
        if k == 0 || stride < 2 || weights.iter().any(|r| r.len() != stride) {
            return Err(Error::DimensionMismatch("local weights must be K rows of F + 1".into()));
        }
        if weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("local weights must be finite".into()));
        }
        Ok(LocalConditionalModel {
            params: SoftmaxParams {
                classes: k,
                dim: stride - 1,
                values: weights.into_iter().flatten().collect(),
            },
            prior_variance,
        })
    }

    pub fn classes(&self) -> usize {
        self.params.classes
    }

    pub fn values(&self) -> usize {
        self.params.dim
    }

    pub fn prior_variance(&self) -> f64 {
        self.prior_variance
    }

    pub fn weight_rows(&self) -> Vec<Vec<f64>> {
        self.params.values.chunks(self.params.stride()).map(<[f64]>::to_vec).collect()
    }

    /// `ln p(c | local bag)` per class.
    pub fn log_posterior(&self, local_feats: &[usize]) -> Vec<f64> {
        self.params.log_posterior(&bag_counts(local_feats))
    }

    /// Gaussian penalty `sum w^2 / (2 prior_variance)` over all weights.
    pub fn penalty(&self) -> f64 {
        self.params.values.iter().map(|w| w * w).sum::<f64>() / (2.0 * self.prior_variance)
    }
}

fn fit_options(prior_variance: f64) -> FitOptions {
    FitOptions {
        prior_variance,
        penalize_bias: true,
        grad_tol: 1e-5,
        max_iters: 1000,
    }
}

fn local_rows(locale: &Locale, f: usize) -> Result<Vec<SparseRow>> {
    locale
        .instances
        .iter()
        .enumerate()
        .map(|(n, inst)| {
            if let Some(&l) = inst.local_feats.iter().find(|&&l| l >= f) {
                return Err(Error::DimensionMismatch(format!(
                    "locale `{}`, instance {n}: local feature {l} outside F={f}",
                    locale.id
                )));
            }
            Ok(bag_counts(&inst.local_feats))
        })
        .collect()
}

fn check_prior(prior: &[f64], k: usize) -> Result<Vec<f64>> {
    if prior.len() != k {
        return Err(Error::DimensionMismatch(format!("prior has {} classes, expected {k}", prior.len())));
    }
    if prior.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument("class prior must be strictly positive".into()));
    }
    Ok(prior.iter().map(|p| p.ln()).collect())
}

/// `ln p(c | w_n) - ln p(c)` per instance: the global likelihood factors
/// `ln p(w_n | c)` up to the per-instance constant `ln p(w_n)`.
pub fn rewritten_global_factors(
    global: &DiscriminativeGlobalModel,
    prior: &[f64],
    locale: &Locale,
) -> Result<Vec<Vec<f64>>> {
    let log_prior = check_prior(prior, global.classes())?;
    locale
        .instances
        .iter()
        .map(|inst| {
            let mut lp = global.log_posterior(inst)?;
            lp.iter_mut().zip(&log_prior).for_each(|(x, p)| *x -= p);
            Ok(lp)
        })
        .collect()
}

fn posterior_rows(local: &LocalConditionalModel, factors: &[Vec<f64>], rows: &[SparseRow]) -> Result<Vec<Vec<f64>>> {
    factors
        .iter()
        .zip(rows)
        .enumerate()
        .map(|(n, (h, row))| {
            let mut r = local.params.log_posterior(row);
            r.iter_mut().zip(h).for_each(|(x, y)| *x += y);
            normalize_log_in_place(&mut r).map_err(|_| Error::ZeroProbability { instance: n })?;
            Ok(r)
        })
        .collect()
}

/// E-step: `p(c | w_n, f_n) ∝ p(c | f_n) p(c | w_n) / p(c)`, normalized per
/// instance.
pub fn cond_e_step(
    local: &LocalConditionalModel,
    global: &DiscriminativeGlobalModel,
    prior: &[f64],
    locale: &Locale,
) -> Result<Vec<Vec<f64>>> {
    if local.classes() != global.classes() {
        return Err(Error::DimensionMismatch(format!(
            "local model has {} classes, global has {}",
            local.classes(),
            global.classes()
        )));
    }
    let factors = rewritten_global_factors(global, prior, locale)?;
    let rows = local_rows(locale, local.values())?;
    posterior_rows(local, &factors, &rows)
}

/// M-step: maximizes the weighted log-likelihood
/// `sum_n sum_c resp[n][c] ln p(c | f_n)` minus the Gaussian penalty,
/// starting from `init`.
pub fn cond_m_step(
    resp: &[Vec<f64>],
    locale: &Locale,
    init: &LocalConditionalModel,
) -> Result<LocalConditionalModel> {
    let rows = local_rows(locale, init.values())?;
    m_step_rows(resp, &rows, init)
}

fn m_step_rows(resp: &[Vec<f64>], rows: &[SparseRow], init: &LocalConditionalModel) -> Result<LocalConditionalModel> {
    if resp.len() != rows.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} responsibility rows for {} instances",
            resp.len(),
            rows.len()
        )));
    }
    let out = fit_softmax(rows, resp, init.params.clone(), fit_options(init.prior_variance));
    if !out.converged {
        return Err(Error::NotConverged {
            iterations: out.iterations,
            grad_norm: out.grad_norm,
        });
    }
    Ok(LocalConditionalModel {
        params: out.params,
        prior_variance: init.prior_variance,
    })
}

/// The weighted log-likelihood `J` the M-step maximizes, without penalty.
pub fn weighted_local_log_likelihood(resp: &[Vec<f64>], locale: &Locale, local: &LocalConditionalModel) -> Result<f64> {
    let rows = local_rows(locale, local.values())?;
    let obj = SoftmaxObjective::new(
        &rows,
        resp,
        local.classes(),
        local.values(),
        fit_options(local.prior_variance),
    );
    Ok(obj.weighted_log_likelihood(&local.params.values))
}

/// `sum_n ln sum_c p(c | f_n; phi) p(w_n | c)`, with `global_log_factors[n][c]`
/// holding `ln p(w_n | c)` (possibly shifted by a per-instance constant).
pub fn conditional_log_likelihood(
    local: &LocalConditionalModel,
    global_log_factors: &[Vec<f64>],
    locale: &Locale,
) -> Result<f64> {
    if global_log_factors.len() != locale.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} factor rows for {} instances",
            global_log_factors.len(),
            locale.len()
        )));
    }
    let rows = local_rows(locale, local.values())?;
    cond_ll_rows(local, global_log_factors, &rows)
}

fn cond_ll_rows(local: &LocalConditionalModel, factors: &[Vec<f64>], rows: &[SparseRow]) -> Result<f64> {
    let mut total = 0.0;
    for (n, (h, row)) in factors.iter().zip(rows).enumerate() {
        let mut r = local.params.log_posterior(row);
        r.iter_mut().zip(h).for_each(|(x, y)| *x += y);
        total += log_sum_exp(&r).map_err(|_| Error::ZeroProbability { instance: n })?;
    }
    Ok(total)
}

/// Plug-in estimate of the mutual information between global and local
/// features carried through the class channel:
/// `mean_n ln [p(w_n, f_n; phi) / (p(w_n) p(f_n))]`, which with the
/// fixed-prior rewrite is `mean_n ln sum_c p(c | f_n) p(c | w_n) / p(c)`.
pub fn mutual_information_diagnostic(
    local: &LocalConditionalModel,
    global: &DiscriminativeGlobalModel,
    prior: &[f64],
    locale: &Locale,
) -> Result<f64> {
    if locale.is_empty() {
        return Err(Error::Empty(format!("locale `{}` has no instances", locale.id)));
    }
    let factors = rewritten_global_factors(global, prior, locale)?;
    Ok(conditional_log_likelihood(local, &factors, locale)? / locale.len() as f64)
}

/// Conditional EM on one locale, from the uniform local model.
///
/// The objective trace records the conditional log-likelihood (up to the
/// constant `sum_n ln p(w_n)`) minus the local model's Gaussian penalty,
/// which is the quantity the penalized M-step makes non-decreasing.
pub fn cond_em_infer(
    global: &DiscriminativeGlobalModel,
    prior: &[f64],
    locale: &Locale,
    f: usize,
    local_prior_variance: f64,
    config: &InferenceConfig,
) -> Result<(LocalConditionalModel, ScopedResult)> {
    config.validate()?;
    if !(local_prior_variance > 0.0) {
        return Err(Error::InvalidArgument("local prior variance must be positive".into()));
    }
    if locale.is_empty() {
        return Err(Error::Empty(format!("locale `{}` has no instances", locale.id)));
    }
    let factors = rewritten_global_factors(global, prior, locale)?;
    let rows = local_rows(locale, f)?;

    let mut local = LocalConditionalModel::zeros(global.classes(), f, local_prior_variance);
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iters {
        let resp = posterior_rows(&local, &factors, &rows)?;
        local = m_step_rows(&resp, &rows, &local)?;
        let obj = cond_ll_rows(&local, &factors, &rows)? - local.penalty();
        if let Some(&prev) = trace.last() {
            converged = has_converged(prev, obj, config.rel_tolerance);
        }
        trace.push(obj);
        if converged {
            break;
        }
    }
    let post = posterior_rows(&local, &factors, &rows)?;
    Ok((local, ScopedResult::from_posteriors(post, trace, converged)))
}
