//! Predicted rates, stepsizes and compute-optimal allocations.
//!
//! Every `Θ(·)` is evaluated with constant one. The numbers are rate shapes for
//! comparison against fits and plots, not absolute risk predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sgd::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Power-law spectrum with isotropic prior.
    PowerLaw,
    /// Power-law spectrum with source-condition prior of exponent `b`.
    Source,
    /// Logarithmic power-law spectrum with isotropic prior.
    LogPowerLaw,
}

/// Whether the exponents act on `M, N` or on `log M, log N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentScale {
    Power,
    Logarithmic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePrediction {
    pub regime: Regime,
    pub variant: Variant,
    pub a: f64,
    pub b: Option<f64>,
    pub m: usize,
    pub n: usize,
    pub gamma0: f64,
    pub sigma2: f64,
    /// `N / log2 N` for the last iterate, `N` for the averaged iterate.
    pub n_eff: f64,
    pub approx_rate: f64,
    pub bias_rate: f64,
    pub variance_rate: f64,
    /// `σ² + approx + bias + σ² · variance`
    pub total: f64,
    /// Predicted `(a1, a2)` in `Risk ≈ σ² + c1 M^{-a1} + c2 N^{-a2}`.
    pub exponents: (f64, f64),
    pub exponent_scale: ExponentScale,
    /// False when `b ≥ a + 1`, where upper and lower bounds do not match.
    pub matching: bool,
}

fn check_a(a: f64) -> Result<()> {
    if !(a > 1.0) || !a.is_finite() {
        return Err(Error::InvalidParameter(format!("a must be finite and > 1, got {a}")));
    }
    Ok(())
}

fn source_b(regime: Regime, b: Option<f64>) -> Result<Option<f64>> {
    match (regime, b) {
        (Regime::Source, Some(b)) if b > 1.0 && b.is_finite() => Ok(Some(b)),
        (Regime::Source, Some(b)) => Err(Error::InvalidParameter(format!(
            "source exponent b must be finite and > 1, got {b}"
        ))),
        (Regime::Source, None) => Err(Error::InvalidParameter(
            "source regime needs an exponent b".into(),
        )),
        (_, Some(_)) => Err(Error::InvalidParameter(
            "exponent b only applies to the source regime".into(),
        )),
        (_, None) => Ok(None),
    }
}

/// Effective sample size of a variant.
pub fn effective_samples(variant: Variant, n: usize) -> f64 {
    let nf = n as f64;
    match variant {
        Variant::LastIterate => nf / nf.log2(),
        Variant::Averaged => nf,
    }
}

/// Unit-constant evaluation of the approximation, bias and variance rates.
#[allow(clippy::too_many_arguments)]
pub fn predicted_rates(
    regime: Regime,
    variant: Variant,
    a: f64,
    b: Option<f64>,
    m: usize,
    n: usize,
    gamma0: f64,
    sigma2: f64,
) -> Result<RatePrediction> {
    check_a(a)?;
    let b = source_b(regime, b)?;
    if m == 0 {
        return Err(Error::InvalidParameter("M must be at least 1".into()));
    }
    let min_n = if variant == Variant::LastIterate { 2 } else { 1 };
    if n < min_n {
        return Err(Error::InvalidParameter(format!(
            "N must be at least {min_n} for {variant:?}"
        )));
    }
    if !(gamma0 > 0.0) {
        return Err(Error::InvalidParameter(format!("γ must be > 0, got {gamma0}")));
    }
    let n_eff = effective_samples(variant, n);
    let k = n_eff * gamma0;
    let mf = m as f64;

    let (approx_rate, bias_rate, variance_rate, exponents, exponent_scale, matching) = match regime
    {
        Regime::PowerLaw => (
            mf.powf(1.0 - a),
            k.powf((1.0 - a) / a),
            mf.min(k.powf(1.0 / a)) / n_eff,
            (a - 1.0, (a - 1.0) / a),
            ExponentScale::Power,
            true,
        ),
        Regime::Source => {
            let b = b.expect("checked above");
            (
                mf.powf(1.0 - b),
                k.powf((1.0 - b) / a),
                mf.min(k.powf(1.0 / a)) / n_eff,
                (b - 1.0, (b - 1.0) / a),
                ExponentScale::Power,
                b < a + 1.0,
            )
        }
        Regime::LogPowerLaw => {
            if m < 2 || k <= 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "log power law rates need M ≥ 2 and N_eff γ > 1, got M={m}, N_eff γ={k}"
                )));
            }
            (
                mf.log2().powf(1.0 - a),
                k.log2().powf(1.0 - a),
                mf.min(k / k.log2().powf(a)) / n_eff,
                (a - 1.0, a - 1.0),
                ExponentScale::Logarithmic,
                true,
            )
        }
    };
    Ok(RatePrediction {
        regime,
        variant,
        a,
        b,
        m,
        n,
        gamma0,
        sigma2,
        n_eff,
        approx_rate,
        bias_rate,
        variance_rate,
        total: sigma2 + approx_rate + bias_rate + sigma2 * variance_rate,
        exponents,
        exponent_scale,
        matching,
    })
}

/// Recommended initial stepsize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepsizeRule {
    Value { gamma: f64 },
    /// Any stepsize in `[low, high]` is rate-optimal.
    Interval { low: f64, high: f64 },
    /// `b ≥ a + 1`: bounds do not match, no recommendation.
    NonMatching,
}

impl StepsizeRule {
    /// Caps the recommendation at a validity bound such as `1/(c tr(SHS^T))`.
    pub fn clip(self, bound: f64) -> Self {
        match self {
            StepsizeRule::Value { gamma } => StepsizeRule::Value {
                gamma: gamma.min(bound),
            },
            StepsizeRule::Interval { low, high } => StepsizeRule::Interval {
                low: low.min(bound),
                high: high.min(bound),
            },
            StepsizeRule::NonMatching => StepsizeRule::NonMatching,
        }
    }
}

/// Rate-optimal initial stepsize for the last iterate.
///
/// `γ ≍ 1` whenever `b ≤ a` (including the isotropic and log power-law
/// regimes). For `a < b < a + 1`: `γ = N_eff^{a/b − 1}` when
/// `M ≥ N_eff^{1/b}`, otherwise any `γ ∈ [M^a / N_eff, 1]`.
pub fn optimal_stepsize(
    regime: Regime,
    a: f64,
    b: Option<f64>,
    m: usize,
    n: usize,
) -> Result<StepsizeRule> {
    check_a(a)?;
    let b = source_b(regime, b)?;
    if n < 2 || m == 0 {
        return Err(Error::InvalidParameter(format!(
            "need M ≥ 1 and N ≥ 2, got M={m}, N={n}"
        )));
    }
    let Some(b) = b else {
        return Ok(StepsizeRule::Value { gamma: 1.0 });
    };
    if b <= a {
        return Ok(StepsizeRule::Value { gamma: 1.0 });
    }
    if b >= a + 1.0 {
        return Ok(StepsizeRule::NonMatching);
    }
    let n_eff = effective_samples(Variant::LastIterate, n);
    let mf = m as f64;
    if mf >= n_eff.powf(1.0 / b) {
        Ok(StepsizeRule::Value {
            gamma: n_eff.powf(a / b - 1.0),
        })
    } else {
        Ok(StepsizeRule::Interval {
            low: mf.powf(a) / n_eff,
            high: 1.0,
        })
    }
}

/// Rates at the stepsize from [`optimal_stepsize`] instead of a fixed one.
///
/// Intervals are evaluated at their upper end. When the source exponent calls
/// for `γ = N_eff^{a/b − 1}`, the data exponent becomes `(b − 1)/b`.
pub fn tuned_rates(
    regime: Regime,
    variant: Variant,
    a: f64,
    b: Option<f64>,
    m: usize,
    n: usize,
    sigma2: f64,
) -> Result<(RatePrediction, StepsizeRule)> {
    let rule = optimal_stepsize(regime, a, b, m, n)?;
    let gamma = match rule {
        StepsizeRule::Value { gamma } => gamma,
        StepsizeRule::Interval { high, .. } => high,
        StepsizeRule::NonMatching => {
            return Err(Error::InvalidParameter(format!(
                "no tuned rates when b ≥ a + 1 (a={a}, b={b:?})"
            )))
        }
    };
    let mut rates = predicted_rates(regime, variant, a, b, m, n, gamma, sigma2)?;
    if let (Some(b), StepsizeRule::Value { .. }) = (b, rule) {
        if b > a {
            rates.exponents.1 = (b - 1.0) / b;
        }
    }
    Ok((rates, rule))
}

/// Compute-optimal `(M, N, γ)` under `MN ≤ C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub m: usize,
    pub n: usize,
    pub gamma: f64,
}

/// Shares `(1/(e+1), e/(e+1))` of `log C` given to model and data size.
pub fn split_exponents(exponent: f64) -> (f64, f64) {
    (1.0 / (exponent + 1.0), exponent / (exponent + 1.0))
}

fn allocate(budget: f64, exponent: f64, gamma: f64) -> Allocation {
    let (pm, pn) = split_exponents(exponent);
    let m = budget.powf(pm).round().max(1.0);
    let n = budget.powf(pn).round().min((budget / m).floor()).max(1.0);
    Allocation {
        m: m as usize,
        n: n as usize,
        gamma,
    }
}

/// `M = C^{1/(e+1)}`, `N = C^{e/(e+1)}`, `γ = 1`, rounded so that `MN ≤ C`.
///
/// `e` is `a` for the isotropic prior; log factors are dropped.
pub fn compute_optimal_allocation(budget: f64, exponent: f64) -> Result<Allocation> {
    if !(budget > 1.0) || !budget.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "compute budget must be finite and > 1, got {budget}"
        )));
    }
    check_a(exponent)?;
    Ok(allocate(budget, exponent, 1.0))
}

/// Allocation under the source condition: as isotropic with exponent `a` when
/// `b ≤ a`; for `a < b < a + 1` uses exponent `b` and `γ = C^{(a−b)/(b+1)}`.
pub fn source_allocation(budget: f64, a: f64, b: f64) -> Result<Allocation> {
    check_a(a)?;
    if !(b > 1.0) {
        return Err(Error::InvalidParameter(format!("b must be > 1, got {b}")));
    }
    if b >= a + 1.0 {
        return Err(Error::InvalidParameter(format!(
            "no matching rates for b={b} ≥ a+1={}",
            a + 1.0
        )));
    }
    if b <= a {
        return compute_optimal_allocation(budget, a);
    }
    let mut alloc = compute_optimal_allocation(budget, b)?;
    alloc.gamma = budget.powf((a - b) / (b + 1.0));
    Ok(alloc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rates(regime: Regime, variant: Variant, a: f64, b: Option<f64>) -> RatePrediction {
        predicted_rates(regime, variant, a, b, 64, 1 << 12, 0.1, 1.0).unwrap()
    }

    #[test]
    fn exponent_predictions() {
        let r = rates(Regime::PowerLaw, Variant::LastIterate, 1.5, None);
        assert!((r.exponents.0 - 0.5).abs() < 1e-15);
        assert!((r.exponents.1 - 1.0 / 3.0).abs() < 1e-15);
        let r = rates(Regime::PowerLaw, Variant::LastIterate, 2.0, None);
        assert_eq!(r.exponents, (1.0, 0.5));
        for a in [1.1, 1.5, 2.0, 3.7] {
            let r = rates(Regime::PowerLaw, Variant::Averaged, a, None);
            assert!((r.exponents.1 - (1.0 - 1.0 / a)).abs() < 1e-15);
            let r = rates(Regime::Source, Variant::LastIterate, a, Some(a + 0.5));
            assert_eq!(r.exponents.0, a + 0.5 - 1.0);
        }
    }

    #[test]
    fn source_with_b_equal_a_reduces_to_power_law() {
        let p = rates(Regime::PowerLaw, Variant::LastIterate, 2.0, None);
        let s = rates(Regime::Source, Variant::LastIterate, 2.0, Some(2.0));
        assert_eq!(p.approx_rate, s.approx_rate);
        assert_eq!(p.bias_rate, s.bias_rate);
        assert_eq!(p.variance_rate, s.variance_rate);
        assert_eq!(p.exponents, s.exponents);
    }

    #[test]
    fn averaged_rates_substitute_n_for_n_eff() {
        let (m, n, g) = (32usize, 4096usize, 0.1);
        let avg = predicted_rates(Regime::PowerLaw, Variant::Averaged, 1.5, None, m, n, g, 1.0)
            .unwrap();
        let k = n as f64 * g;
        assert_eq!(avg.n_eff, n as f64);
        assert_eq!(avg.bias_rate, k.powf((1.0 - 1.5) / 1.5));
        assert_eq!(avg.variance_rate, (m as f64).min(k.powf(1.0 / 1.5)) / n as f64);
        let last =
            predicted_rates(Regime::PowerLaw, Variant::LastIterate, 1.5, None, m, n, g, 1.0)
                .unwrap();
        assert_eq!(last.n_eff, 4096.0 / 12.0);
        assert_eq!(last.approx_rate, avg.approx_rate);
    }

    #[test]
    fn log_regime_rates() {
        let r = predicted_rates(Regime::LogPowerLaw, Variant::LastIterate, 2.0, None, 256, 1 << 16, 1.0, 1.0)
            .unwrap();
        assert_eq!(r.approx_rate, 1.0 / 8.0);
        let k = 65536.0 / 16.0;
        assert_eq!(r.bias_rate, 1.0 / 12.0);
        assert_eq!(r.variance_rate, (256f64).min(k / 144.0) / 4096.0);
        assert_eq!(r.exponent_scale, ExponentScale::Logarithmic);
        assert!(predicted_rates(Regime::LogPowerLaw, Variant::LastIterate, 2.0, None, 1, 1 << 16, 1.0, 1.0).is_err());
    }

    #[test]
    fn invalid_combinations() {
        assert!(predicted_rates(Regime::Source, Variant::LastIterate, 2.0, None, 4, 16, 0.1, 1.0).is_err());
        assert!(predicted_rates(Regime::PowerLaw, Variant::LastIterate, 2.0, Some(2.0), 4, 16, 0.1, 1.0).is_err());
        assert!(predicted_rates(Regime::PowerLaw, Variant::LastIterate, 1.0, None, 4, 16, 0.1, 1.0).is_err());
        assert!(predicted_rates(Regime::PowerLaw, Variant::LastIterate, 2.0, None, 4, 1, 0.1, 1.0).is_err());
        let r = predicted_rates(Regime::Source, Variant::LastIterate, 2.0, Some(3.5), 4, 16, 0.1, 1.0)
            .unwrap();
        assert!(!r.matching);
    }

    #[test]
    fn stepsize_rules() {
        assert_eq!(
            optimal_stepsize(Regime::PowerLaw, 2.0, None, 10, 1000).unwrap(),
            StepsizeRule::Value { gamma: 1.0 }
        );
        assert_eq!(
            optimal_stepsize(Regime::Source, 2.0, Some(1.5), 10, 1000).unwrap(),
            StepsizeRule::Value { gamma: 1.0 }
        );
        let n = 1 << 20;
        let n_eff = n as f64 / 20.0;
        match optimal_stepsize(Regime::Source, 2.0, Some(2.5), 100_000, n).unwrap() {
            StepsizeRule::Value { gamma } => {
                assert!((gamma - n_eff.powf(-0.2)).abs() < 1e-15)
            }
            other => panic!("{other:?}"),
        }
        let small_m = n_eff.powf(0.2).floor() as usize;
        match optimal_stepsize(Regime::Source, 2.0, Some(2.5), small_m, n).unwrap() {
            StepsizeRule::Interval { low, high } => {
                assert!((low - (small_m as f64).powi(2) / n_eff).abs() < 1e-15);
                assert_eq!(high, 1.0);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            optimal_stepsize(Regime::Source, 2.0, Some(3.0), 10, 1000).unwrap(),
            StepsizeRule::NonMatching
        );
        assert_eq!(
            StepsizeRule::Value { gamma: 1.0 }.clip(0.25),
            StepsizeRule::Value { gamma: 0.25 }
        );
    }

    #[test]
    fn tuned_source_rates() {
        let n = 1 << 20;
        let n_eff = n as f64 / 20.0;
        let (r, rule) = tuned_rates(Regime::Source, Variant::LastIterate, 2.0, Some(2.5), 100_000, n, 1.0).unwrap();
        let StepsizeRule::Value { gamma } = rule else { panic!("{rule:?}") };
        assert!((gamma / n_eff.powf(-0.2) - 1.0).abs() < 1e-12);
        assert!((r.exponents.1 - 0.6).abs() < 1e-15);
        assert!((r.bias_rate / n_eff.powf(-0.6) - 1.0).abs() < 1e-9);
        let (r, _) = tuned_rates(Regime::PowerLaw, Variant::LastIterate, 2.0, None, 64, n, 1.0).unwrap();
        assert_eq!(r.gamma0, 1.0);
        assert_eq!(r.exponents, (1.0, 0.5));
        assert!(tuned_rates(Regime::Source, Variant::LastIterate, 2.0, Some(3.5), 64, n, 1.0).is_err());
    }

    #[test]
    fn allocation_examples() {
        let alloc = compute_optimal_allocation(1e6, 2.0).unwrap();
        assert_eq!((alloc.m, alloc.n, alloc.gamma), (100, 10_000, 1.0));
        let alloc = compute_optimal_allocation(1e5, 1.5).unwrap();
        assert_eq!((alloc.m, alloc.n), (100, 1000));
        assert_eq!(split_exponents(1.0), (0.5, 0.5));
        assert!(compute_optimal_allocation(1e6, 1.0).is_err());
        assert!(compute_optimal_allocation(1.0, 2.0).is_err());
    }

    #[test]
    fn source_allocation_cases() {
        let hard = source_allocation(1e6, 2.0, 1.5).unwrap();
        assert_eq!(hard, compute_optimal_allocation(1e6, 2.0).unwrap());
        let easy = source_allocation(1e6, 1.5, 2.0).unwrap();
        assert_eq!((easy.m, easy.n), (100, 10_000));
        assert!((easy.gamma - 1e6f64.powf(-0.5 / 3.0)).abs() < 1e-15);
        assert!(source_allocation(1e6, 2.0, 3.0).is_err());
    }

    #[test]
    fn allocation_minimizes_the_surrogate_on_a_doubling_grid() {
        for a in [1.5, 2.0, 3.0] {
            for budget in [1e6, 1e8, 1e10, 1e12] {
                let alloc = compute_optimal_allocation(budget, a).unwrap();
                assert!((alloc.m * alloc.n) as f64 <= budget);
                let mut best = (f64::INFINITY, 0i32);
                for k in 0..60 {
                    let m = 2f64.powi(k);
                    let n = budget / m;
                    if n < 4.0 {
                        break;
                    }
                    let risk = m.powf(1.0 - a) + (n / n.log2()).powf((1.0 - a) / a);
                    if risk < best.0 {
                        best = (risk, k);
                    }
                }
                let nearest = (alloc.m as f64).log2().round() as i32;
                assert!(
                    (nearest - best.1).abs() <= 1,
                    "a={a}, C={budget}: M={} vs argmin 2^{}",
                    alloc.m,
                    best.1
                );
            }
        }
    }
}
