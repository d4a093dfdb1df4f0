//! Exact label posterior for small locales.
//!
//! Enumerates every joint class assignment and integrates the local
//! parameters out in closed form with the Dirichlet-multinomial marginal.
//! Exponential in the locale size; only meant as ground truth for tests.

use serde::{Deserialize, Serialize};

use crate::corpus::Locale;
use crate::error::{Error, Result};
use crate::global_model::GenerativeGlobalModel;
use crate::numerics::log_gamma_unchecked;
use crate::scoped_generative::global_log_joints;

/// Default enumeration cap, `2^20` assignments.
pub const DEFAULT_CAP: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub marginals: Vec<Vec<f64>>,
    pub log_evidence: f64,
    pub assignment_count: u64,
}

/// `ln` of the Dirichlet-multinomial marginal of per-class local-value
/// counts, with a symmetric `Dirichlet(alpha)` on each class row.
pub fn polya_log_marginal(counts: &[Vec<u64>], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let mut total = 0.0;
    for row in counts {
        let f = row.len() as f64;
        let n: u64 = row.iter().sum();
        if n == 0 {
            continue;
        }
        total += log_gamma_unchecked(f * alpha) - log_gamma_unchecked(f * alpha + n as f64);
        for &c in row.iter().filter(|&&c| c > 0) {
            total += log_gamma_unchecked(alpha + c as f64) - log_gamma_unchecked(alpha);
        }
    }
    Ok(total)
}

/// Exact per-instance class marginals and log evidence `ln p(w, f)` for one
/// locale, by enumeration over all `K^N` assignments.
pub fn exact_label_posterior(
    global: &GenerativeGlobalModel,
    locale: &Locale,
    f: usize,
    alpha: f64,
    cap: u64,
) -> Result<OracleResult> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if locale.is_empty() {
        return Err(Error::Empty(format!("locale `{}` has no instances", locale.id)));
    }
    let k = global.classes();
    let n = locale.len();
    let required = (k as f64).powi(n as i32);
    if required > cap as f64 {
        return Err(Error::OracleCap { required, cap });
    }
    let total = k.pow(n as u32) as u64;
    let joints = global_log_joints(global, locale)?;
    let bags: Vec<Vec<(usize, u64)>> = locale
        .instances
        .iter()
        .map(|inst| {
            let mut counts = vec![0u64; f];
            for &l in &inst.local_feats {
                if l >= f {
                    return Err(Error::DimensionMismatch(format!(
                        "locale `{}`: local feature {l} outside F={f}",
                        locale.id
                    )));
                }
                counts[l] += 1;
            }
            Ok(counts
                .into_iter()
                .enumerate()
                .filter(|(_, c)| *c > 0)
                .collect())
        })
        .collect::<Result<_>>()?;

    // lgamma tables indexed by occurrence count
    let occurrences = locale.local_occurrences();
    let fa = f as f64 * alpha;
    let row_term: Vec<f64> = (0..=occurrences)
        .map(|m| log_gamma_unchecked(fa) - log_gamma_unchecked(fa + m as f64))
        .collect();
    let cell_term: Vec<f64> = (0..=occurrences)
        .map(|m| log_gamma_unchecked(alpha + m as f64) - log_gamma_unchecked(alpha))
        .collect();

    let mut assign = vec![0usize; n];
    let mut counts = vec![vec![0usize; f]; k];
    let mut row_totals = vec![0usize; k];
    for bag in &bags {
        for &(l, m) in bag {
            counts[0][l] += m as usize;
            row_totals[0] += m as usize;
        }
    }

    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut marg = vec![vec![0.0; k]; n];
    for step in 0..total {
        let mut lw: f64 = assign.iter().zip(&joints).map(|(&c, g)| g[c]).sum();
        for c in 0..k {
            if row_totals[c] == 0 {
                continue;
            }
            lw += row_term[row_totals[c]];
            lw += counts[c].iter().map(|&m| cell_term[m]).sum::<f64>();
        }
        if lw > max {
            if max > f64::NEG_INFINITY {
                let scale = (max - lw).exp();
                sum *= scale;
                marg.iter_mut().flatten().for_each(|x| *x *= scale);
            }
            max = lw;
        }
        let w = (lw - max).exp();
        sum += w;
        for (row, &c) in marg.iter_mut().zip(&assign) {
            row[c] += w;
        }

        if step + 1 == total {
            break;
        }
        // advance the base-K odometer, moving local counts with each digit
        for (i, digit) in assign.iter_mut().enumerate() {
            let old = *digit;
            let new = (old + 1) % k;
            for &(l, m) in &bags[i] {
                counts[old][l] -= m as usize;
                counts[new][l] += m as usize;
                row_totals[old] -= m as usize;
                row_totals[new] += m as usize;
            }
            *digit = new;
            if new != 0 {
                break;
            }
        }
    }

    if max == f64::NEG_INFINITY {
        return Err(Error::ZeroProbability { instance: 0 });
    }
    for row in &mut marg {
        row.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(OracleResult {
        marginals: marg,
        log_evidence: max + sum.ln(),
        assignment_count: total,
    })
}
