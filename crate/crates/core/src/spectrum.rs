//! Diagonal covariance spectra and the Gaussian prior on the optimal parameter.
//!
//! The covariance is taken diagonal throughout: the Gaussian sketch is
//! rotationally invariant, so only the eigenvalues of `H` matter. Constants in
//! the decay laws are fixed to one before optional trace normalization.

use std::fmt;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumKind {
    /// `λ_i = i^{-a}`
    PowerLaw,
    /// `λ_i = i^{-1} log2(i+1)^{-a}`
    LogPowerLaw,
    /// User-supplied eigenvalues.
    Explicit,
}

impl fmt::Display for SpectrumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpectrumKind::PowerLaw => "power_law",
            SpectrumKind::LogPowerLaw => "log_power_law",
            SpectrumKind::Explicit => "explicit",
        })
    }
}

/// Eigenvalues `λ_1 ≥ λ_2 ≥ … ≥ λ_d > 0` of a diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
    kind: SpectrumKind,
    a: Option<f64>,
    normalized: bool,
    /// Factor applied to the unit-constant law (1 unless normalized).
    scale: f64,
}

/// JSON summary of a spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub kind: SpectrumKind,
    pub d: usize,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub normalized: bool,
    pub trace: f64,
}

fn check_decay(d: usize, a: f64) -> Result<()> {
    if d == 0 {
        return Err(Error::InvalidParameter("dimension d must be at least 1".into()));
    }
    if !(a > 1.0) || !a.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "decay exponent a must be finite and > 1 for a summable trace, got {a}"
        )));
    }
    Ok(())
}

impl Spectrum {
    fn from_law(
        d: usize,
        a: f64,
        normalize: bool,
        kind: SpectrumKind,
        law: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        check_decay(d, a)?;
        let mut eigenvalues: Vec<f64> = (1..=d).map(|i| law(i as f64)).collect();
        let scale = if normalize {
            let s = 1.0 / eigenvalues.iter().sum::<f64>();
            eigenvalues.iter_mut().for_each(|l| *l *= s);
            s
        } else {
            1.0
        };
        Ok(Self {
            eigenvalues,
            kind,
            a: Some(a),
            normalized: normalize,
            scale,
        })
    }

    /// Power law `λ_i = c · i^{-a}`, `c = 1` or `1 / Σ i^{-a}` when normalized.
    pub fn power_law(d: usize, a: f64, normalize: bool) -> Result<Self> {
        Self::from_law(d, a, normalize, SpectrumKind::PowerLaw, |i| i.powf(-a))
    }

    /// Logarithmic power law `λ_i = c · i^{-1} log2(i+1)^{-a}`.
    pub fn log_power_law(d: usize, a: f64, normalize: bool) -> Result<Self> {
        Self::from_law(d, a, normalize, SpectrumKind::LogPowerLaw, |i| {
            (i * (i + 1.0).log2().powf(a)).recip()
        })
    }

    /// Arbitrary positive, non-increasing eigenvalues.
    pub fn explicit(mut eigenvalues: Vec<f64>, normalize: bool) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidParameter("empty eigenvalue list".into()));
        }
        if let Some(i) = eigenvalues.iter().position(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eigenvalue {} at index {} is not a positive finite number",
                eigenvalues[i],
                i + 1
            )));
        }
        if let Some(i) = eigenvalues.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::InvalidParameter(format!(
                "eigenvalues must be non-increasing; index {} exceeds its predecessor",
                i + 2
            )));
        }
        let scale = if normalize {
            let s = 1.0 / eigenvalues.iter().sum::<f64>();
            eigenvalues.iter_mut().for_each(|l| *l *= s);
            s
        } else {
            1.0
        };
        Ok(Self {
            eigenvalues,
            kind: SpectrumKind::Explicit,
            a: None,
            normalized: normalize,
            scale,
        })
    }

    /// Reads a one-column CSV of eigenvalues (no header; blank lines and
    /// `#` comments skipped).
    pub fn from_csv(path: impl AsRef<Path>, normalize: bool) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: f64 = line.parse().map_err(|_| {
                Error::Config(format!(
                    "{}:{}: not a number: {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            values.push(v);
        }
        Self::explicit(values, normalize)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn d(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn kind(&self) -> SpectrumKind {
        self.kind
    }

    /// Decay degree; `None` for explicit spectra.
    pub fn a(&self) -> Option<f64> {
        self.a
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Multiplicative constant in front of the unit-constant law.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn summary(&self, prior: Option<&PriorSpec>) -> SpectrumSummary {
        SpectrumSummary {
            kind: self.kind,
            d: self.d(),
            a: self.a,
            b: prior.and_then(PriorSpec::b),
            normalized: self.normalized,
            trace: self.trace(),
        }
    }

    /// Short label used in error messages.
    pub fn label(&self) -> String {
        match self.a {
            Some(a) => format!("{}(a={a}, d={})", self.kind, self.d()),
            None => format!("{}(d={})", self.kind, self.d()),
        }
    }
}

/// Prior on `w*`: independent zero-mean Gaussian coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    /// `E w*_i² = 1`.
    Isotropic,
    /// `E w*_i² = i^{a-b}`, so that `λ_i E w*_i² ∝ i^{-b}`.
    Source { b: f64 },
}

impl PriorSpec {
    pub fn b(&self) -> Option<f64> {
        match self {
            PriorSpec::Isotropic => None,
            PriorSpec::Source { b } => Some(*b),
        }
    }

    /// Per-coordinate second moments of `w*` under `spectrum`.
    pub fn variances(&self, spectrum: &Spectrum) -> Result<Vec<f64>> {
        match *self {
            PriorSpec::Isotropic => Ok(vec![1.0; spectrum.d()]),
            PriorSpec::Source { b } => {
                if !(b > 1.0) || !b.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "source exponent b must be finite and > 1, got {b}"
                    )));
                }
                if spectrum.kind() != SpectrumKind::PowerLaw {
                    return Err(Error::InvalidParameter(format!(
                        "source prior requires a power_law spectrum, got {}",
                        spectrum.kind()
                    )));
                }
                let a = spectrum.a().expect("power law carries its exponent");
                Ok((1..=spectrum.d())
                    .map(|i| (i as f64).powf(a - b))
                    .collect())
            }
        }
    }
}

/// Draws `w*` from `prior`; deterministic in `seed`.
pub fn sample_prior(spectrum: &Spectrum, prior: &PriorSpec, seed: u64) -> Result<Vec<f64>> {
    let variances = prior.variances(spectrum)?;
    let mut rng = rng_from_seed(seed);
    Ok(variances
        .iter()
        .map(|v| {
            let g: f64 = StandardNormal.sample(&mut rng);
            v.sqrt() * g
        })
        .collect())
}
