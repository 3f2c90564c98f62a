//! Exact population risk and the closed-form risk decomposition.
//!
//! `Risk_M(v) = σ² + Approx + ‖v − ṽ*‖²_{Λ̃}`. The SGD excess risk is compared
//! against `Bias(w*) + σ² Variance`, where the bias is the deterministic
//! contraction of `v*` and the variance is `D_eff / N_eff`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sgd::{StepsizeSchedule, Variant};
use crate::sketch::{tail_ratio, SketchedModel};

/// Default `c` in the stepsize condition `γ ≤ 1 / (c tr(SHS^T))`.
pub const DEFAULT_STEPSIZE_CONSTANT: f64 = 4.0;

fn check_len(model: &SketchedModel, v: &[f64]) -> Result<()> {
    if v.len() != model.m() {
        return Err(Error::DimensionMismatch {
            expected: model.m(),
            got: v.len(),
        });
    }
    Ok(())
}

/// `σ² + Approx + ‖v − ṽ*‖²_{Λ̃}` for `v` in the eigenbasis.
pub fn population_risk(model: &SketchedModel, v: &[f64], sigma2: f64) -> Result<f64> {
    check_len(model, v)?;
    Ok(sigma2 + model.approx_error() + crate::sgd::excess_risk(model, v))
}

/// `σ² + ‖H^{1/2}(S^T U v − w*)‖²`, the same risk evaluated in `d` dimensions.
pub fn population_risk_ambient(model: &SketchedModel, v: &[f64], sigma2: f64) -> Result<f64> {
    check_len(model, v)?;
    let sketched = DVector::from_vec(model.unrotate(v));
    let w = model.sketch().entries().tr_mul(&sketched);
    let err: f64 = w
        .iter()
        .zip(model.w_star())
        .zip(model.spectrum().eigenvalues())
        .map(|((x, ws), l)| l * (x - ws) * (x - ws))
        .sum();
    Ok(sigma2 + err)
}

/// Closed-form bias with the number of coordinates whose contraction factor
/// exceeds one in magnitude somewhere in the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasEvaluation {
    pub bias: f64,
    pub divergent_coordinates: usize,
}

/// `Σ_i λ̃_i ṽ*_i² Π_t (1 − γ_t λ̃_i)²` for the last iterate.
///
/// Products run over phases of equal stepsize in log-magnitude, so long
/// schedules do not underflow before the final exponentiation.
pub fn bias_closed_form(model: &SketchedModel, schedule: &StepsizeSchedule) -> BiasEvaluation {
    let phases = schedule.phases();
    let mut bias = 0.0;
    let mut divergent = 0;
    for (&l, &v) in model.eigenvalues().iter().zip(model.v_star_rotated()) {
        let mut log_mag = 0.0;
        let mut annihilated = false;
        let mut expands = false;
        for &(gamma, len) in &phases {
            let f = (1.0 - gamma * l).abs();
            if f == 0.0 {
                annihilated = true;
                break;
            }
            expands |= f > 1.0;
            log_mag += len as f64 * f.ln();
        }
        if expands {
            divergent += 1;
        }
        if !annihilated {
            bias += l * v * v * (2.0 * log_mag).exp();
        }
    }
    BiasEvaluation {
        bias,
        divergent_coordinates: divergent,
    }
}

/// Bias of the averaged iterate under a constant stepsize:
/// `Σ_i λ̃_i ṽ*_i² [(1 − (1 − γλ̃_i)^N) / (N γ λ̃_i)]²`, the deterministic part
/// of `(1/N) Σ_{t<N} v_t − v*`.
pub fn averaged_bias_closed_form(model: &SketchedModel, gamma0: f64, n: usize) -> BiasEvaluation {
    let nf = n as f64;
    let mut bias = 0.0;
    let mut divergent = 0;
    for (&l, &v) in model.eigenvalues().iter().zip(model.v_star_rotated()) {
        let gl = gamma0 * l;
        let factor = if gl == 0.0 {
            1.0
        } else {
            let contraction = 1.0 - gl;
            if contraction.abs() > 1.0 {
                divergent += 1;
            }
            (1.0 - contraction.powf(nf)) / (nf * gl)
        };
        bias += l * v * v * factor * factor;
    }
    BiasEvaluation {
        bias,
        divergent_coordinates: divergent,
    }
}

/// Returns `(Variance, D_eff)` with
/// `D_eff = #{λ̃_j ≥ 1/(N_eff γ)} + (N_eff γ)² Σ_{λ̃_j < 1/(N_eff γ)} λ̃_j²` and
/// `Variance = D_eff / N_eff`.
pub fn variance_closed_form(eigenvalues: &[f64], n_eff: f64, gamma0: f64) -> Result<(f64, f64)> {
    if !(n_eff > 0.0) || !(gamma0 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "variance needs N_eff > 0 and γ > 0, got N_eff={n_eff}, γ={gamma0}"
        )));
    }
    let scale = n_eff * gamma0;
    let threshold = 1.0 / scale;
    let (head, tail_sq) = eigenvalues.iter().fold((0usize, 0.0), |(h, t), &l| {
        if l >= threshold {
            (h + 1, t)
        } else {
            (h, t + l * l)
        }
    });
    let d_eff = head as f64 + scale * scale * tail_sq;
    Ok((d_eff / n_eff, d_eff))
}

/// Closed-form decomposition of one `(M, N, γ)` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub m: usize,
    pub n: usize,
    pub gamma0: f64,
    pub variant: Variant,
    /// Irreducible risk.
    pub sigma2: f64,
    pub approx_error: f64,
    pub bias_cf: f64,
    pub variance_cf: f64,
    pub d_eff: f64,
    pub n_eff: f64,
    pub empirical_excess: Option<f64>,
    /// `σ² + Approx + empirical excess`, when the latter is present.
    pub total: Option<f64>,
    /// `γ > 1 / (c tr(SHS^T))`.
    pub stepsize_warning: bool,
    pub divergent_coordinates: usize,
}

/// Assembles the closed-form report for `model` under `schedule`.
///
/// With `γ = 0` the variance term is reported as zero (no update is ever made).
pub fn decompose(
    model: &SketchedModel,
    schedule: &StepsizeSchedule,
    variant: Variant,
    sigma2: f64,
    empirical_excess: Option<f64>,
    stepsize_constant: f64,
) -> Result<RiskReport> {
    let gamma0 = schedule.gamma0();
    let n = schedule.n();
    let n_eff = schedule.n_eff();
    let bias = match variant {
        Variant::LastIterate => bias_closed_form(model, schedule),
        Variant::Averaged => averaged_bias_closed_form(model, gamma0, n),
    };
    let (variance_cf, d_eff) = if gamma0 > 0.0 {
        variance_closed_form(model.eigenvalues(), n_eff, gamma0)?
    } else {
        (0.0, 0.0)
    };
    let stepsize_warning = gamma0 > 1.0 / (stepsize_constant * model.gram_trace());
    Ok(RiskReport {
        m: model.m(),
        n,
        gamma0,
        variant,
        sigma2,
        approx_error: model.approx_error(),
        bias_cf: bias.bias,
        variance_cf,
        d_eff,
        n_eff,
        empirical_excess,
        total: empirical_excess.map(|e| sigma2 + model.approx_error() + e),
        stepsize_warning,
        divergent_coordinates: bias.divergent_coordinates,
    })
}

/// Individual terms of the general upper and lower bounds, unit constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralBounds {
    pub k1: usize,
    pub k2: usize,
    /// `‖w*_{k1:∞}‖²_{H_{k1:∞}}`
    pub approx_tail: f64,
    /// `Σ_{i>k1} λ_i / M + λ_{k1+1} + sqrt(Σ_{i>k1} λ_i² / M)`
    pub approx_head_coefficient: f64,
    /// `‖w*_{0:k1}‖²`
    pub approx_head_norm: f64,
    /// `approx_tail + approx_head_coefficient · approx_head_norm`
    pub approx_upper: f64,
    /// `μ_{M/2}(S_{k2:}H_{k2:}S_{k2:}^T) / μ_M(·)`
    pub tail_ratio: f64,
    /// `‖w*_{0:k2}‖² / (N_eff γ) · tail_ratio² + ‖w*_{k2:∞}‖²_{H_{k2:∞}}`
    pub bias_upper: f64,
    /// `Σ_{i=M}^{d} λ_i`
    pub approx_lower: f64,
    /// `Σ_{i: λ̃_i < 1/(N_eff γ)} μ_i(SH²S^T) / μ_i(SHS^T)`
    pub bias_lower: f64,
}

/// Evaluates the general upper-bound expressions at `(k1, k2)` and the
/// lower-bound sums for the model's own `w*`.
pub fn general_bound_terms(
    model: &SketchedModel,
    k1: usize,
    k2: usize,
    n_eff: f64,
    gamma0: f64,
) -> Result<GeneralBounds> {
    let m = model.m();
    let d = model.d();
    for (name, k) in [("k1", k1), ("k2", k2)] {
        if 3 * k > m {
            return Err(Error::InvalidParameter(format!(
                "{name}={k} exceeds M/3 with M={m}"
            )));
        }
    }
    if !(n_eff > 0.0) || !(gamma0 >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bounds need N_eff > 0 and γ ≥ 0, got N_eff={n_eff}, γ={gamma0}"
        )));
    }
    let lambda = model.spectrum().eigenvalues();
    let w = model.w_star();
    let mf = m as f64;

    let h_norm = |range: std::ops::Range<usize>| -> f64 {
        range.map(|i| lambda[i] * w[i] * w[i]).sum()
    };
    let norm = |range: std::ops::Range<usize>| -> f64 { range.map(|i| w[i] * w[i]).sum() };

    let approx_tail = h_norm(k1..d);
    let tail_sum: f64 = lambda[k1..].iter().sum();
    let tail_sq: f64 = lambda[k1..].iter().map(|l| l * l).sum();
    let approx_head_coefficient = tail_sum / mf + lambda[k1] + (tail_sq / mf).sqrt();
    let approx_head_norm = norm(0..k1);
    let approx_upper = approx_tail + approx_head_coefficient * approx_head_norm;

    let ratio = tail_ratio(model.sketch(), model.spectrum(), k2)?;
    let bias_upper = norm(0..k2) / (n_eff * gamma0) * ratio * ratio + h_norm(k2..d);

    let approx_lower: f64 = lambda[m - 1..].iter().sum();

    let threshold = 1.0 / (n_eff * gamma0);
    let sq = model.sq_eigenvalues()?;
    let bias_lower = model
        .eigenvalues()
        .iter()
        .zip(sq)
        .filter(|(l, _)| **l < threshold)
        .map(|(l, s)| s / l)
        .sum();

    Ok(GeneralBounds {
        k1,
        k2,
        approx_tail,
        approx_head_coefficient,
        approx_head_norm,
        approx_upper,
        tail_ratio: ratio,
        bias_upper,
        approx_lower,
        bias_lower,
    })
}
