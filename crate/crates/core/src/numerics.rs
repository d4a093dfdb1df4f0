//! Special functions and log-space helpers shared by the inference code.
//!
//! Everything that multiplies probabilities over a locale is accumulated in
//! log space; products over a few dozen instances already underflow `f64`.

use crate::error::{Error, Result};

/// A natural-log probability. Finite or `-inf`, never NaN.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogProb(f64);

impl LogProb {
    pub const ZERO: LogProb = LogProb(f64::NEG_INFINITY);
    pub const ONE: LogProb = LogProb(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value == f64::INFINITY {
            return Err(Error::InvalidArgument(format!("not a log probability: {value}")));
        }
        Ok(LogProb(value))
    }

    pub fn from_prob(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("not a probability: {p}")));
        }
        Ok(LogProb(p.ln()))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }
}

// Shift target for the digamma asymptotic series.
const DIGAMMA_SHIFT: f64 = 6.0;
// Shift target for the Stirling series of log-gamma.
const LGAMMA_SHIFT: f64 = 10.0;

/// Digamma function for `x > 0`, absolute error below 1e-10.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidArgument(format!("digamma needs x > 0, got {x}")));
    }
    Ok(digamma_unchecked(x))
}

/// Digamma without the domain check. Callers guarantee `x > 0`.
pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < DIGAMMA_SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_2k / (2k x^2k), k = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

/// Natural log of the gamma function for `x > 0`, absolute error below 1e-10.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidArgument(format!("log_gamma needs x > 0, got {x}")));
    }
    Ok(log_gamma_unchecked(x))
}

pub(crate) fn log_gamma_unchecked(mut x: f64) -> f64 {
    // lgamma(x) = lgamma(x + m) - ln(x (x+1) ... (x+m-1))
    let mut prod = 1.0;
    while x < LGAMMA_SHIFT {
        prod *= x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2
                        * (1.0 / 1260.0
                            - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0 - inv2 * 691.0 / 360360.0)))));
    let half_ln_2pi = 0.918_938_533_204_672_8;
    (x - 0.5) * x.ln() - x + half_ln_2pi + series - prod.ln()
}

/// Stable `ln(sum(exp(v)))`.
///
/// Errors on an empty slice or when every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() || max == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument(
            "log_sum_exp needs at least one finite entry".into(),
        ));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument("log_sum_exp input contains NaN".into()));
    }
    if max == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Exponentiates and normalizes a log-weight vector onto the simplex.
pub fn normalize_log(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    normalize_log_in_place(&mut out)?;
    Ok(out)
}

/// In-place variant of [`normalize_log`]; returns the log normalizer.
pub fn normalize_log_in_place(v: &mut [f64]) -> Result<f64> {
    let lse = log_sum_exp(v)?;
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - lse).exp();
        total += *x;
    }
    // one more pass pins the sum to 1 at the last ulp
    for x in v.iter_mut() {
        *x /= total;
    }
    Ok(lse)
}

/// Index of the largest entry, ties going to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    // Reference values evaluated at 30 significant digits.
    const DIGAMMA_REF: [(f64, f64); 8] = [
        (0.5, -1.963_510_026_021_423_5),
        (1.0, -0.577_215_664_901_532_9),
        (2.0, 0.422_784_335_098_467_1),
        (4.0, 1.256_117_668_431_800_5),
        (5.5, 1.611_093_148_581_751_1),
        (10.0, 2.251_752_589_066_721_1),
        (100.0, 4.600_161_852_738_087_4),
        (0.001, -1_000.575_571_931_810_3),
    ];
    const LGAMMA_REF: [(f64, f64); 7] = [
        (0.5, 0.572_364_942_924_700_1),
        (1.0, 0.0),
        (2.0, 0.0),
        (4.0, 1.791_759_469_228_055),
        (10.0, 12.801_827_480_081_469),
        (100.0, 359.134_205_369_575_4),
        (0.001, 6.907_178_885_383_853_7),
    ];

    #[test]
    fn digamma_reference_values() {
        for (x, want) in DIGAMMA_REF {
            assert_abs_diff_eq!(digamma(x).unwrap(), want, epsilon = 1e-10);
        }
    }

    #[test]
    fn digamma_half_identity() {
        let euler = 0.577_215_664_901_532_9;
        let want = -euler - 2.0 * std::f64::consts::LN_2;
        assert_abs_diff_eq!(digamma(0.5).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn digamma_recurrence() {
        for x in [0.5, 1.0, 2.0, 10.0, 100.0] {
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            assert_abs_diff_eq!(d, 1.0 / x, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_gamma_reference_values() {
        for (x, want) in LGAMMA_REF {
            assert_abs_diff_eq!(log_gamma(x).unwrap(), want, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(log_gamma(4.0).unwrap(), 6f64.ln(), epsilon = 1e-12);
        let half = 0.5 * std::f64::consts::PI.ln();
        assert_abs_diff_eq!(log_gamma(0.5).unwrap(), half, epsilon = 1e-12);
    }

    #[test]
    fn special_functions_reject_nonpositive() {
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.5).is_err());
        assert!(log_gamma(0.0).is_err());
        assert!(log_gamma(f64::NAN).is_err());
    }

    #[test]
    fn log_sum_exp_cases() {
        assert_abs_diff_eq!(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(
            log_sum_exp(&[-1e6, -1e6]).unwrap(),
            -1e6 + 2f64.ln(),
            epsilon = 1e-9
        );
        assert_eq!(log_sum_exp(&[1e300, 0.0]).unwrap(), 1e300);
        assert_abs_diff_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, 1.5]).unwrap(),
            1.5,
            epsilon = 0.0
        );
        assert!(log_sum_exp(&[]).is_err());
        assert!(log_sum_exp(&[f64::NEG_INFINITY; 3]).is_err());
    }

    #[test]
    fn normalize_log_cases() {
        let p = normalize_log(&[3f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-15);
        assert!(normalize_log(&[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.3, 0.7]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn log_prob_rejects_nan() {
        assert!(LogProb::new(f64::NAN).is_err());
        assert_eq!(LogProb::new(f64::NEG_INFINITY).unwrap(), LogProb::ZERO);
        assert_abs_diff_eq!(LogProb::from_prob(0.25).unwrap().prob(), 0.25, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn normalize_log_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..8),
            shift in -1e4f64..1e4,
        ) {
            let a = normalize_log(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let b = normalize_log(&shifted).unwrap();
            let sum: f64 = a.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn digamma_agrees_with_statrs(x in 0.05f64..500.0) {
            let want = statrs::function::gamma::digamma(x);
            prop_assert!((digamma(x).unwrap() - want).abs() <= 1e-9);
        }

        #[test]
        fn log_gamma_agrees_with_statrs(x in 0.05f64..500.0) {
            let want = statrs::function::gamma::ln_gamma(x);
            prop_assert!((log_gamma(x).unwrap() - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }
}
