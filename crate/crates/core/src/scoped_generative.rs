//! Per-locale inference of the latent local parameters under the generative
//! model: point estimation by EM, and variational Bayes integration.
//!
//! Both procedures hold the global model fixed and only touch the locale at
//! hand, so distinct locales can be processed independently.

use serde::{Deserialize, Serialize};

use crate::corpus::{ClassId, Locale};
use crate::error::{Error, Result};
use crate::global_model::GenerativeGlobalModel;
use crate::numerics::{argmax, digamma_unchecked, log_gamma_unchecked, log_sum_exp, normalize_log_in_place};

/// Iteration and prior settings shared by the per-locale algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub max_iters: usize,
    pub rel_tolerance: f64,
    /// Additive smoothing applied in the EM M-step. Zero gives the
    /// unsmoothed update.
    pub m_step_smoothing: f64,
    /// Symmetric Dirichlet hyperparameter on each row of the local parameters.
    pub alpha: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            max_iters: 100,
            rel_tolerance: 1e-6,
            m_step_smoothing: 1e-6,
            alpha: 1.0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        if !(self.rel_tolerance > 0.0) {
            return Err(Error::InvalidArgument("rel_tolerance must be positive".into()));
        }
        if !(self.m_step_smoothing >= 0.0) || !self.m_step_smoothing.is_finite() {
            return Err(Error::InvalidArgument("m_step_smoothing must be non-negative".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Per-class distributions over local feature values (`K` rows of length `F`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalParams {
    pub phi: Vec<Vec<f64>>,
}

impl LocalParams {
    pub fn uniform(k: usize, f: usize) -> Self {
        LocalParams {
            phi: vec![vec![1.0 / f as f64; f]; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.phi.len()
    }

    pub fn values(&self) -> usize {
        self.phi.first().map_or(0, Vec::len)
    }
}

/// Variational Dirichlet parameters `gamma` (`K x F`) and per-instance class
/// distributions `mu` (`N x K`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub gamma: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
}

/// Output of one per-locale inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopedResult {
    pub posteriors: Vec<Vec<f64>>,
    pub labels: Vec<ClassId>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ScopedResult {
    pub(crate) fn from_posteriors(
        posteriors: Vec<Vec<f64>>,
        objective_trace: Vec<f64>,
        converged: bool,
    ) -> Self {
        let labels = posteriors.iter().map(|p| argmax(p)).collect();
        ScopedResult {
            iterations: objective_trace.len(),
            posteriors,
            labels,
            objective_trace,
            converged,
        }
    }
}

/// Relative-change stopping rule shared by every iterative procedure.
pub(crate) fn has_converged(prev: f64, cur: f64, rel_tolerance: f64) -> bool {
    (cur - prev).abs() <= rel_tolerance * prev.abs().max(f64::MIN_POSITIVE)
}

/// Global log joint per instance and class, checked against the locale.
pub(crate) fn global_log_joints(global: &GenerativeGlobalModel, locale: &Locale) -> Result<Vec<Vec<f64>>> {
    locale
        .instances
        .iter()
        .map(|inst| global.log_joint(inst))
        .collect()
}

fn check_local_range(locale: &Locale, f: usize) -> Result<()> {
    for (n, inst) in locale.instances.iter().enumerate() {
        if let Some(&l) = inst.local_feats.iter().find(|&&l| l >= f) {
            return Err(Error::DimensionMismatch(format!(
                "locale `{}`, instance {n}: local feature {l} outside F={f}",
                locale.id
            )));
        }
    }
    Ok(())
}

fn check_phi(phi: &LocalParams, global: &GenerativeGlobalModel, locale: &Locale) -> Result<()> {
    if phi.classes() != global.classes() {
        return Err(Error::DimensionMismatch(format!(
            "phi has {} classes, global model has {}",
            phi.classes(),
            global.classes()
        )));
    }
    check_local_range(locale, phi.values())
}

fn normalize_rows(rows: &mut [Vec<f64>]) -> Result<()> {
    for (n, row) in rows.iter_mut().enumerate() {
        normalize_log_in_place(row).map_err(|_| Error::ZeroProbability { instance: n })?;
    }
    Ok(())
}

fn log_phi(phi: &LocalParams) -> Vec<Vec<f64>> {
    phi.phi.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect()
}

/// Unnormalized `ln p(c, w_n, f_n | phi)` per instance and class.
fn local_log_joints(joints: &[Vec<f64>], log_phi: &[Vec<f64>], locale: &Locale) -> Vec<Vec<f64>> {
    joints
        .iter()
        .zip(&locale.instances)
        .map(|(g, inst)| {
            g.iter()
                .enumerate()
                .map(|(c, &gc)| gc + inst.local_feats.iter().map(|&f| log_phi[c][f]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// EM E-step: class responsibilities given the current local parameters.
pub fn em_e_step(phi: &LocalParams, global: &GenerativeGlobalModel, locale: &Locale) -> Result<Vec<Vec<f64>>> {
    check_phi(phi, global, locale)?;
    let joints = global_log_joints(global, locale)?;
    let mut rows = local_log_joints(&joints, &log_phi(phi), locale);
    normalize_rows(&mut rows)?;
    Ok(rows)
}

/// EM M-step: expected local-value counts per class, smoothed by `smoothing`
/// and normalized. A class row with no mass at all comes out uniform.
pub fn em_m_step(resp: &[Vec<f64>], locale: &Locale, f: usize, smoothing: f64) -> Result<LocalParams> {
    if resp.len() != locale.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} responsibility rows for {} instances",
            resp.len(),
            locale.len()
        )));
    }
    check_local_range(locale, f)?;
    let k = resp.first().map_or(0, Vec::len);
    let mut counts = vec![vec![smoothing; f]; k];
    for (r, inst) in resp.iter().zip(&locale.instances) {
        for &l in &inst.local_feats {
            for c in 0..k {
                counts[c][l] += r[c];
            }
        }
    }
    for row in &mut counts {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|x| *x /= total);
        } else {
            row.iter_mut().for_each(|x| *x = 1.0 / f as f64);
        }
    }
    Ok(LocalParams { phi: counts })
}

/// `sum_n sum_c p(c | w_n, f_n; phi) sum_{f in bag_n} ln phi[c][f]`, with the
/// responsibilities computed at `phi` itself.
pub fn expected_log_likelihood(phi: &LocalParams, global: &GenerativeGlobalModel, locale: &Locale) -> Result<f64> {
    let resp = em_e_step(phi, global, locale)?;
    let lp = log_phi(phi);
    let mut total = 0.0;
    for (r, inst) in resp.iter().zip(&locale.instances) {
        for (c, &rc) in r.iter().enumerate() {
            if rc == 0.0 {
                continue;
            }
            for &f in &inst.local_feats {
                total += rc * lp[c][f];
            }
        }
    }
    Ok(total)
}

/// The objective EM ascends: `ln p(w, f | phi)` plus the log-density of the
/// smoothing pseudo-counts, `pseudo * sum ln phi`.
pub fn map_log_likelihood(
    phi: &LocalParams,
    global: &GenerativeGlobalModel,
    locale: &Locale,
    pseudo_count: f64,
) -> Result<f64> {
    check_phi(phi, global, locale)?;
    let joints = global_log_joints(global, locale)?;
    let lp = log_phi(phi);
    map_objective(&joints, &lp, locale, pseudo_count)
}

fn map_objective(joints: &[Vec<f64>], log_phi: &[Vec<f64>], locale: &Locale, pseudo_count: f64) -> Result<f64> {
    let rows = local_log_joints(joints, log_phi, locale);
    let mut total = 0.0;
    for (n, row) in rows.iter().enumerate() {
        total += log_sum_exp(row).map_err(|_| Error::ZeroProbability { instance: n })?;
    }
    if pseudo_count > 0.0 {
        total += pseudo_count * log_phi.iter().flatten().sum::<f64>();
    }
    Ok(total)
}

/// Pseudo-count used by the EM M-step: the configured smoothing plus the
/// Dirichlet mode shift `alpha - 1` when `alpha > 1`.
pub fn em_pseudo_count(config: &InferenceConfig) -> f64 {
    config.m_step_smoothing + (config.alpha - 1.0).max(0.0)
}

/// Point-estimates the local parameters of one locale by EM, starting from
/// uniform, then labels each instance with the resulting posterior.
pub fn map_em_infer(
    global: &GenerativeGlobalModel,
    locale: &Locale,
    f: usize,
    config: &InferenceConfig,
) -> Result<(LocalParams, ScopedResult)> {
    config.validate()?;
    if locale.is_empty() {
        return Err(Error::Empty(format!("locale `{}` has no instances", locale.id)));
    }
    check_local_range(locale, f)?;
    let k = global.classes();
    let pseudo = em_pseudo_count(config);
    let joints = global_log_joints(global, locale)?;

    let mut phi = LocalParams::uniform(k, f);
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iters {
        let mut resp = local_log_joints(&joints, &log_phi(&phi), locale);
        normalize_rows(&mut resp)?;
        phi = em_m_step(&resp, locale, f, pseudo)?;
        let obj = map_objective(&joints, &log_phi(&phi), locale, pseudo)?;
        if let Some(&prev) = trace.last() {
            converged = has_converged(prev, obj, config.rel_tolerance);
        }
        trace.push(obj);
        if converged {
            break;
        }
    }
    let mut post = local_log_joints(&joints, &log_phi(&phi), locale);
    normalize_rows(&mut post)?;
    Ok((phi, ScopedResult::from_posteriors(post, trace, converged)))
}

/// `gamma[i][j] = alpha + sum over occurrences of local value j of mu[n][i]`.
pub fn vb_update_gamma(mu: &[Vec<f64>], locale: &Locale, k: usize, f: usize, alpha: f64) -> Result<Vec<Vec<f64>>> {
    if mu.len() != locale.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} mu rows for {} instances",
            mu.len(),
            locale.len()
        )));
    }
    check_local_range(locale, f)?;
    let mut gamma = vec![vec![alpha; f]; k];
    for (m, inst) in mu.iter().zip(&locale.instances) {
        for &l in &inst.local_feats {
            for c in 0..k {
                gamma[c][l] += m[c];
            }
        }
    }
    Ok(gamma)
}

/// `E_q[ln phi[c][f]] = digamma(gamma[c][f]) - digamma(sum_f gamma[c][f])`.
pub fn expected_log_phi(gamma: &[Vec<f64>]) -> Vec<Vec<f64>> {
    gamma
        .iter()
        .map(|row| {
            let total = digamma_unchecked(row.iter().sum());
            row.iter().map(|&g| digamma_unchecked(g) - total).collect()
        })
        .collect()
}

fn check_gamma(gamma: &[Vec<f64>], k: usize) -> Result<usize> {
    if gamma.len() != k {
        return Err(Error::DimensionMismatch(format!("gamma has {} rows, expected {k}", gamma.len())));
    }
    let f = gamma[0].len();
    if f == 0 || gamma.iter().any(|r| r.len() != f) {
        return Err(Error::DimensionMismatch("gamma rows differ in length".into()));
    }
    if gamma.iter().flatten().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::InvalidArgument("gamma entries must be positive".into()));
    }
    Ok(f)
}

/// Variational class distributions given the Dirichlet parameters.
pub fn vb_update_mu(gamma: &[Vec<f64>], global: &GenerativeGlobalModel, locale: &Locale) -> Result<Vec<Vec<f64>>> {
    let f = check_gamma(gamma, global.classes())?;
    check_local_range(locale, f)?;
    let joints = global_log_joints(global, locale)?;
    let mut mu = local_log_joints(&joints, &expected_log_phi(gamma), locale);
    normalize_rows(&mut mu)?;
    Ok(mu)
}

/// Evidence lower bound `E_q[ln p(phi, c, w, f)] - E_q[ln q(phi, c)]` for one
/// locale, with a symmetric `Dirichlet(alpha)` prior on each row of `phi`.
pub fn elbo(
    gamma: &[Vec<f64>],
    mu: &[Vec<f64>],
    global: &GenerativeGlobalModel,
    locale: &Locale,
    alpha: f64,
) -> Result<f64> {
    let f = check_gamma(gamma, global.classes())?;
    check_local_range(locale, f)?;
    if mu.len() != locale.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} mu rows for {} instances",
            mu.len(),
            locale.len()
        )));
    }
    let joints = global_log_joints(global, locale)?;
    Ok(elbo_from_joints(gamma, mu, &joints, locale, alpha))
}

fn elbo_from_joints(gamma: &[Vec<f64>], mu: &[Vec<f64>], joints: &[Vec<f64>], locale: &Locale, alpha: f64) -> f64 {
    let f = gamma[0].len() as f64;
    let elog = expected_log_phi(gamma);
    let mut total = 0.0;

    // E[ln p(phi)] - E[ln q(phi)], per class
    let prior_norm = log_gamma_unchecked(f * alpha) - f * log_gamma_unchecked(alpha);
    for (row, el) in gamma.iter().zip(&elog) {
        let sum: f64 = row.iter().sum();
        let q_norm = log_gamma_unchecked(sum) - row.iter().map(|&g| log_gamma_unchecked(g)).sum::<f64>();
        let cross: f64 = row.iter().zip(el).map(|(&g, &e)| (alpha - g) * e).sum();
        total += prior_norm - q_norm + cross;
    }

    // E[ln p(c, w, f | phi)] - E[ln q(c)]
    for ((m, g), inst) in mu.iter().zip(joints).zip(&locale.instances) {
        for (c, &mc) in m.iter().enumerate() {
            if mc <= 0.0 {
                continue;
            }
            let local: f64 = inst.local_feats.iter().map(|&l| elog[c][l]).sum();
            total += mc * (g[c] + local - mc.ln());
        }
    }
    total
}

/// Coordinate ascent on the variational parameters of one locale.
pub fn variational_infer(
    global: &GenerativeGlobalModel,
    locale: &Locale,
    f: usize,
    config: &InferenceConfig,
) -> Result<(VariationalState, ScopedResult)> {
    config.validate()?;
    if locale.is_empty() {
        return Err(Error::Empty(format!("locale `{}` has no instances", locale.id)));
    }
    check_local_range(locale, f)?;
    let k = global.classes();
    let joints = global_log_joints(global, locale)?;

    let mut mu = joints.clone();
    normalize_rows(&mut mu)?;
    let mut gamma = vec![vec![config.alpha; f]; k];
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iters {
        gamma = vb_update_gamma(&mu, locale, k, f, config.alpha)?;
        mu = local_log_joints(&joints, &expected_log_phi(&gamma), locale);
        normalize_rows(&mut mu)?;
        let obj = elbo_from_joints(&gamma, &mu, &joints, locale, config.alpha);
        if let Some(&prev) = trace.last() {
            converged = has_converged(prev, obj, config.rel_tolerance);
        }
        trace.push(obj);
        if converged {
            break;
        }
    }
    let result = ScopedResult::from_posteriors(mu.clone(), trace, converged);
    Ok((VariationalState { gamma, mu }, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Instance;
    use crate::global_model::global_posterior_generative;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-word global model whose single-word posteriors under a uniform
    /// prior are exactly the given rows.
    fn global_from_posteriors(rows: &[[f64; 2]], eta: [f64; 2]) -> GenerativeGlobalModel {
        // word n has beta[c][n] proportional to rows[n][c] / eta[c]; one
        // extra filler word absorbs the remaining mass
        let v = rows.len();
        let load = (0..2).map(|c| rows.iter().map(|r| r[c] / eta[c]).sum::<f64>()).fold(0.0, f64::max);
        let scale = 1.0 / (load + 1.0);
        let mut beta = vec![vec![0.0; v + 1]; 2];
        for (w, r) in rows.iter().enumerate() {
            for c in 0..2 {
                beta[c][w] = scale * r[c] / eta[c];
            }
        }
        for row in &mut beta {
            row[v] = 1.0 - row[..v].iter().sum::<f64>();
        }
        GenerativeGlobalModel::new(eta.to_vec(), beta, 1.0).unwrap()
    }

    fn locale(items: &[(usize, &[usize])]) -> Locale {
        Locale::new(
            "t",
            items
                .iter()
                .map(|&(w, l)| Instance::new(vec![w], l.to_vec(), None))
                .collect(),
        )
    }

    fn random_case(rng: &mut ChaCha8Rng, k: usize, v: usize, f: usize) -> (GenerativeGlobalModel, Locale) {
        let mut simplex = |n: usize| {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = x.iter().sum();
            x.into_iter().map(|y| y / s).collect::<Vec<_>>()
        };
        let eta = simplex(k);
        let beta = (0..k).map(|_| simplex(v)).collect();
        let global = GenerativeGlobalModel::new(eta, beta, 1.0).unwrap();
        let n = rng.random_range(1..8);
        let instances = (0..n)
            .map(|_| {
                let g = (0..rng.random_range(1..3)).map(|_| rng.random_range(0..v)).collect();
                let l = (0..rng.random_range(0..3)).map(|_| rng.random_range(0..f)).collect();
                Instance::new(g, l, None)
            })
            .collect();
        (global, Locale::new("r", instances))
    }

    #[test]
    fn e_step_with_uniform_phi_is_global_posterior() {
        let g = global_from_posteriors(&[[0.8, 0.2], [0.3, 0.7]], [0.5, 0.5]);
        let loc = locale(&[(0, &[0]), (1, &[1, 2])]);
        let r = em_e_step(&LocalParams::uniform(2, 3), &g, &loc).unwrap();
        for (row, inst) in r.iter().zip(&loc.instances) {
            let want = global_posterior_generative(&g, inst).unwrap();
            assert_abs_diff_eq!(row[0], want[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn e_step_hand_cases() {
        let g = global_from_posteriors(&[[0.8, 0.2]], [0.5, 0.5]);
        let loc = locale(&[(0, &[0])]);
        let phi = LocalParams {
            phi: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        assert_abs_diff_eq!(em_e_step(&phi, &g, &loc).unwrap()[0][0], 0.8, epsilon = 1e-12);

        let flat = global_from_posteriors(&[[0.5, 0.5]], [0.5, 0.5]);
        let phi = LocalParams {
            phi: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
        };
        assert_abs_diff_eq!(em_e_step(&phi, &flat, &loc).unwrap()[0][0], 0.9, epsilon = 1e-12);
    }

    #[test]
    fn e_step_reports_zero_probability_rows() {
        let g = global_from_posteriors(&[[0.5, 0.5]], [0.5, 0.5]);
        let loc = locale(&[(0, &[1])]);
        let phi = LocalParams {
            phi: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        };
        assert!(matches!(em_e_step(&phi, &g, &loc), Err(Error::ZeroProbability { instance: 0 })));
    }

    #[test]
    fn m_step_hand_cases() {
        let loc = locale(&[(0, &[0]), (0, &[0])]);
        let resp = vec![vec![0.5, 0.5], vec![0.0, 1.0]];
        let phi = em_m_step(&resp, &loc, 2, 0.0).unwrap();
        assert_eq!(phi.phi[0], vec![1.0, 0.0]);
        assert_eq!(phi.phi[1], vec![1.0, 0.0]);

        // class 1 carries no mass anywhere: smoothing alone makes it uniform
        let resp = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let phi = em_m_step(&resp, &loc, 3, 1e-6).unwrap();
        for &p in &phi.phi[1] {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let phi = em_m_step(&resp, &loc, 3, 0.0).unwrap();
        assert_eq!(phi.phi[1], vec![1.0 / 3.0; 3]);

        let loc = locale(&[(0, &[0, 0]), (0, &[0, 1])]);
        let resp = vec![vec![0.5, 0.5]; 2];
        let phi = em_m_step(&resp, &loc, 2, 0.0).unwrap();
        assert_abs_diff_eq!(phi.phi[0][0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(phi.phi[1][1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn expected_log_likelihood_hand_cases() {
        let g = global_from_posteriors(&[[0.8, 0.2], [0.4, 0.6]], [0.5, 0.5]);
        let loc = locale(&[(0, &[0, 1]), (1, &[1]), (0, &[])]);
        let ld = expected_log_likelihood(&LocalParams::uniform(2, 2), &g, &loc).unwrap();
        assert_abs_diff_eq!(ld, 3.0 * 0.5f64.ln(), epsilon = 1e-12);

        // a decisive global model puts all responsibility on class 0
        let sure = GenerativeGlobalModel::new(vec![1.0, 0.0], vec![vec![1.0], vec![1.0]], 1.0).unwrap();
        let phi = LocalParams {
            phi: vec![vec![0.9, 0.1], vec![0.5, 0.5]],
        };
        let ld = expected_log_likelihood(&phi, &sure, &locale(&[(0, &[0])])).unwrap();
        assert_abs_diff_eq!(ld, 0.9f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn map_em_single_instance_reduces_to_global() {
        let g = global_from_posteriors(&[[0.3, 0.7]], [0.6, 0.4]);
        let loc = locale(&[(0, &[2])]);
        let cfg = InferenceConfig {
            m_step_smoothing: 0.0,
            ..InferenceConfig::default()
        };
        let (_, res) = map_em_infer(&g, &loc, 3, &cfg).unwrap();
        let want = global_posterior_generative(&g, &loc.instances[0]).unwrap();
        assert_abs_diff_eq!(res.posteriors[0][0], want[0], epsilon = 1e-12);
        assert_eq!(res.labels[0], argmax(&want));
    }

    #[test]
    fn map_em_default_smoothing_is_close_to_global_for_single_instance() {
        let g = global_from_posteriors(&[[0.3, 0.7]], [0.6, 0.4]);
        let loc = locale(&[(0, &[2])]);
        let (_, res) = map_em_infer(&g, &loc, 3, &InferenceConfig::default()).unwrap();
        let want = global_posterior_generative(&g, &loc.instances[0]).unwrap();
        // the reduction holds only up to O(smoothing)
        assert_abs_diff_eq!(res.posteriors[0][0], want[0], epsilon = 1e-5);
    }

    #[test]
    fn map_em_identical_bags_reduce_to_global() {
        let g = global_from_posteriors(&[[0.9, 0.1], [0.2, 0.8], [0.55, 0.45]], [0.5, 0.5]);
        let loc = locale(&[(0, &[1, 0]), (1, &[1, 0]), (2, &[1, 0])]);
        let cfg = InferenceConfig {
            m_step_smoothing: 0.0,
            ..InferenceConfig::default()
        };
        let (_, res) = map_em_infer(&g, &loc, 3, &cfg).unwrap();
        for (row, inst) in res.posteriors.iter().zip(&loc.instances) {
            let want = global_posterior_generative(&g, inst).unwrap();
            assert_abs_diff_eq!(row[0], want[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn map_em_flips_the_dissenting_instance() {
        // three confident class-0 instances on local value 0, three confident
        // class-1 instances on value 1, and one instance leaning class 1 that
        // carries value 0
        let g = global_from_posteriors(&[[0.9, 0.1], [0.1, 0.9], [0.4, 0.6]], [0.5, 0.5]);
        let loc = locale(&[(0, &[0]), (0, &[0]), (0, &[0]), (1, &[1]), (1, &[1]), (1, &[1]), (2, &[0])]);
        let (_, res) = map_em_infer(&g, &loc, 2, &InferenceConfig::default()).unwrap();
        assert_eq!(res.labels, vec![0, 0, 0, 1, 1, 1, 0]);
        let oracle = crate::oracle::exact_label_posterior(&g, &loc, 2, 1.0, 1 << 20).unwrap();
        let oracle_labels: Vec<_> = oracle.marginals.iter().map(|m| argmax(m)).collect();
        assert_eq!(oracle_labels, res.labels);
    }

    #[test]
    fn shared_local_value_cannot_move_map_em_but_moves_the_oracle() {
        let g = global_from_posteriors(&[[0.9, 0.1], [0.4, 0.6]], [0.5, 0.5]);
        let loc = locale(&[(0, &[0]), (0, &[0]), (0, &[0]), (1, &[0])]);
        let cfg = InferenceConfig {
            m_step_smoothing: 0.0,
            ..InferenceConfig::default()
        };
        let (_, res) = map_em_infer(&g, &loc, 4, &cfg).unwrap();
        assert_abs_diff_eq!(res.posteriors[3][1], 0.6, epsilon = 1e-12);
        let oracle = crate::oracle::exact_label_posterior(&g, &loc, 4, 1.0, 1 << 20).unwrap();
        assert!(oracle.marginals[3][0] > 0.5);
    }

    #[test]
    fn map_em_objective_is_monotone_on_random_locales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (g, loc) = random_case(&mut rng, 3, 5, 4);
            let (phi, res) = map_em_infer(&g, &loc, 4, &InferenceConfig::default()).unwrap();
            for w in res.objective_trace.windows(2) {
                assert!(w[1] - w[0] >= -1e-9, "{} -> {}", w[0], w[1]);
            }
            for row in &phi.phi {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gamma_update_hand_cases() {
        let empty = Locale::new("e", vec![]);
        assert_eq!(vb_update_gamma(&[], &empty, 2, 2, 1.0).unwrap(), vec![vec![1.0; 2]; 2]);

        let loc = locale(&[(0, &[1])]);
        let g = vb_update_gamma(&[vec![1.0, 0.0]], &loc, 2, 3, 1.0).unwrap();
        assert_eq!(g, vec![vec![1.0, 2.0, 1.0], vec![1.0; 3]]);

        let loc = locale(&[(0, &[0]), (0, &[0])]);
        let g = vb_update_gamma(&[vec![0.5, 0.5], vec![1.0, 0.0]], &loc, 2, 2, 1.0).unwrap();
        assert_abs_diff_eq!(g[0][0], 2.5, epsilon = 1e-15);
    }

    #[test]
    fn mu_update_hand_cases() {
        let flat = global_from_posteriors(&[[0.5, 0.5]], [0.5, 0.5]);
        let loc = locale(&[(0, &[0])]);
        let gamma = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        let mu = vb_update_mu(&gamma, &flat, &loc).unwrap();
        // factors e^{-1/2} and e^{-3/2}
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert_abs_diff_eq!(mu[0][0], want, epsilon = 1e-12);
        assert_abs_diff_eq!(mu[0][0], 0.7311, epsilon = 1e-4);

        let g = global_from_posteriors(&[[0.7, 0.3]], [0.5, 0.5]);
        let same = vec![vec![3.0, 1.5], vec![3.0, 1.5]];
        assert_abs_diff_eq!(vb_update_mu(&same, &g, &loc).unwrap()[0][0], 0.7, epsilon = 1e-12);
        let no_local = locale(&[(0, &[])]);
        assert_abs_diff_eq!(vb_update_mu(&gamma, &g, &no_local).unwrap()[0][0], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn each_coordinate_update_raises_the_elbo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (g, loc) = random_case(&mut rng, 2, 4, 3);
            let k = g.classes();
            let mut mu: Vec<Vec<f64>> = loc
                .instances
                .iter()
                .map(|i| global_posterior_generative(&g, i).unwrap())
                .collect();
            let mut gamma = vec![vec![1.0; 3]; k];
            let mut prev = elbo(&gamma, &mu, &g, &loc, 1.0).unwrap();
            for _ in 0..20 {
                gamma = vb_update_gamma(&mu, &loc, k, 3, 1.0).unwrap();
                let a = elbo(&gamma, &mu, &g, &loc, 1.0).unwrap();
                assert!(a - prev >= -1e-9);
                mu = vb_update_mu(&gamma, &g, &loc).unwrap();
                let b = elbo(&gamma, &mu, &g, &loc, 1.0).unwrap();
                assert!(b - a >= -1e-9);
                prev = b;
                assert!(gamma.iter().flatten().all(|&x| x >= 1.0));
            }
        }
    }

    #[test]
    fn variational_single_instance_keeps_global_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (g, mut loc) = random_case(&mut rng, 3, 5, 3);
            loc.instances.truncate(1);
            let (_, res) = variational_infer(&g, &loc, 3, &InferenceConfig::default()).unwrap();
            let want = global_posterior_generative(&g, &loc.instances[0]).unwrap();
            assert_eq!(res.labels[0], argmax(&want));
        }
    }

    #[test]
    fn variational_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (g, loc) = random_case(&mut rng, 2, 5, 3);
        let a = variational_infer(&g, &loc, 3, &InferenceConfig::default()).unwrap();
        let b = variational_infer(&g, &loc, 3, &InferenceConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn both_algorithms_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let (g, loc) = random_case(&mut rng, 2, 5, 3);
            let mut rev = loc.clone();
            rev.instances.reverse();
            let n = loc.len();
            let cfg = InferenceConfig::default();
            let (_, a) = map_em_infer(&g, &loc, 3, &cfg).unwrap();
            let (_, b) = map_em_infer(&g, &rev, 3, &cfg).unwrap();
            let (_, c) = variational_infer(&g, &loc, 3, &cfg).unwrap();
            let (_, d) = variational_infer(&g, &rev, 3, &cfg).unwrap();
            for i in 0..n {
                assert_abs_diff_eq!(a.posteriors[i][0], b.posteriors[n - 1 - i][0], epsilon = 1e-9);
                assert_abs_diff_eq!(c.posteriors[i][0], d.posteriors[n - 1 - i][0], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig::default().validate().is_ok());
        let bad = InferenceConfig {
            alpha: 0.0,
            ..InferenceConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = InferenceConfig {
            m_step_smoothing: -1.0,
            ..InferenceConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_locale_is_rejected() {
        let g = global_from_posteriors(&[[0.5, 0.5]], [0.5, 0.5]);
        let empty = Locale::new("e", vec![]);
        assert!(matches!(
            map_em_infer(&g, &empty, 2, &InferenceConfig::default()),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            variational_infer(&g, &empty, 2, &InferenceConfig::default()),
            Err(Error::Empty(_))
        ));
    }
}
