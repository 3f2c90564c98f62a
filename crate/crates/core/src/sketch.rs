//! Gaussian sketches and the sketched eigensystem.
//!
//! For a sketch `S` (M×d, entries `N(0, 1/M)`) and diagonal `H`, everything the
//! SGD dynamics see is carried by `SHS^T`. Its eigen-decomposition is formed
//! from the M×M Gram matrix of `SH^{1/2}`, so the cost is `O(M²d + M³)`.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::spectrum::{Spectrum, SpectrumKind};

/// Relative threshold below which a negative eigenvalue is treated as round-off.
const CLIP_TOLERANCE: f64 = 1e-12;
/// Relative threshold below which `SHS^T` is declared singular.
const SINGULAR_TOLERANCE: f64 = 1e-14;

/// An M×d Gaussian sketch with i.i.d. `N(0, 1/M)` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchMatrix {
    entries: DMatrix<f64>,
    seed: u64,
}

impl SketchMatrix {
    /// Samples a sketch; entries are drawn column by column from `seed`.
    pub fn sample(m: usize, d: usize, seed: u64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidParameter(format!(
                "sketch dimensions must be positive, got M={m}, d={d}"
            )));
        }
        if m > d {
            return Err(Error::InvalidParameter(format!(
                "model size M={m} exceeds dimension d={d}; SHS^T would be singular"
            )));
        }
        let sd = (m as f64).sqrt().recip();
        let mut rng = rng_from_seed(seed);
        let data: Vec<f64> = (0..m * d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                sd * g
            })
            .collect();
        Ok(Self {
            entries: DMatrix::from_vec(m, d, data),
            seed,
        })
    }

    /// Wraps a given matrix (used for hand-built instances).
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.nrows() > entries.ncols() {
            return Err(Error::InvalidParameter(format!(
                "sketch must be M×d with 1 ≤ M ≤ d, got {}×{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(Self { entries, seed: 0 })
    }

    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    pub fn d(&self) -> usize {
        self.entries.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }
}

/// `Σ_{j ≥ k} w_j s_j s_j^T` over the columns `s_j` of `S` from `k` on.
pub fn weighted_gram(sketch: &SketchMatrix, weights: &[f64], k: usize) -> DMatrix<f64> {
    let s = sketch.entries();
    let cols = s.ncols() - k;
    let mut a = s.columns(k, cols).clone_owned();
    for (mut col, w) in a.column_iter_mut().zip(&weights[k..]) {
        col *= w.sqrt();
    }
    &a * a.transpose()
}

/// Eigenvalues of a PSD matrix in non-increasing order, with round-off
/// negatives clipped to zero.
pub fn psd_eigenvalues(gram: DMatrix<f64>) -> Result<Vec<f64>> {
    let mut eig = gram.symmetric_eigenvalues().as_slice().to_vec();
    eig.sort_by(|a, b| b.total_cmp(a));
    clip_round_off(&mut eig)?;
    Ok(eig)
}

fn clip_round_off(eig: &mut [f64]) -> Result<()> {
    let top = eig.first().copied().unwrap_or(0.0).max(0.0);
    for l in eig.iter_mut() {
        if *l < 0.0 {
            if *l < -CLIP_TOLERANCE * top {
                return Err(Error::NotPositiveSemidefinite(*l));
            }
            *l = 0.0;
        }
    }
    Ok(())
}

/// Eigenvalues of `S diag(weights) S^T` for arbitrary positive weights (not
/// necessarily sorted).
pub fn sketched_eigenvalues(sketch: &SketchMatrix, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != sketch.d() {
        return Err(Error::DimensionMismatch {
            expected: sketch.d(),
            got: weights.len(),
        });
    }
    psd_eigenvalues(weighted_gram(sketch, weights, 0))
}

/// The sketched regression problem conditional on `(S, w*)`.
#[derive(Debug)]
pub struct SketchedModel {
    sketch: SketchMatrix,
    spectrum: Arc<Spectrum>,
    w_star: Vec<f64>,
    /// `λ̃_1 ≥ … ≥ λ̃_M`
    eigenvalues: Vec<f64>,
    /// Columns are the eigenvectors matching `eigenvalues`.
    eigenvectors: DMatrix<f64>,
    /// `ṽ* = U^T v*`
    v_star_rot: Vec<f64>,
    v_star: Vec<f64>,
    approx_error: f64,
    gram_trace: f64,
    sq_eigenvalues: OnceLock<Vec<f64>>,
}

impl SketchedModel {
    /// Builds the eigensystem of `SHS^T`, the optimal sketched parameter
    /// `v* = (SHS^T)^{-1} SHw*` and the approximation error.
    pub fn build(sketch: SketchMatrix, spectrum: Arc<Spectrum>, w_star: Vec<f64>) -> Result<Self> {
        let (m, d) = (sketch.m(), sketch.d());
        if spectrum.d() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: spectrum.d(),
            });
        }
        if w_star.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: w_star.len(),
            });
        }
        let lambda = spectrum.eigenvalues();

        // A = S H^{1/2}; SHS^T = A A^T
        let mut a = sketch.entries().clone();
        for (mut col, l) in a.column_iter_mut().zip(lambda) {
            col *= l.sqrt();
        }
        let gram = &a * a.transpose();
        let gram_trace = a.norm_squared();

        let SymmetricEigen {
            eigenvectors,
            eigenvalues,
        } = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]));
        let mut eig: Vec<f64> = order.iter().map(|&i| eigenvalues[i]).collect();
        let u = DMatrix::from_fn(m, m, |r, c| eigenvectors[(r, order[c])]);

        let top = eig[0];
        let smallest = eig[m - 1];
        clip_round_off(&mut eig)?;
        if !(top > 0.0) || smallest < SINGULAR_TOLERANCE * top {
            return Err(Error::Singular {
                m,
                d,
                spectrum: spectrum.label(),
                smallest,
                largest: top,
            });
        }

        // H^{1/2} w*, then SHw* = A (H^{1/2} w*)
        let hw = DVector::from_iterator(d, w_star.iter().zip(lambda).map(|(w, l)| w * l.sqrt()));
        let shw = &a * &hw;
        let rot_rhs = u.tr_mul(&shw);
        let v_star_rot: Vec<f64> = rot_rhs.iter().zip(&eig).map(|(r, l)| r / l).collect();
        let v_star_vec = &u * DVector::from_column_slice(&v_star_rot);

        // ‖H^{1/2} w* − H^{1/2} S^T v*‖²
        let fitted = a.tr_mul(&v_star_vec);
        let approx_error = (&hw - fitted).norm_squared();

        Ok(Self {
            sketch,
            spectrum,
            w_star,
            eigenvalues: eig,
            eigenvectors: u,
            v_star_rot,
            v_star: v_star_vec.as_slice().to_vec(),
            approx_error,
            gram_trace,
            sq_eigenvalues: OnceLock::new(),
        })
    }

    pub fn m(&self) -> usize {
        self.sketch.m()
    }

    pub fn d(&self) -> usize {
        self.sketch.d()
    }

    pub fn sketch(&self) -> &SketchMatrix {
        &self.sketch
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn w_star(&self) -> &[f64] {
        &self.w_star
    }

    /// `λ̃_j`, non-increasing.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Optimal sketched parameter in the eigenbasis.
    pub fn v_star_rotated(&self) -> &[f64] {
        &self.v_star_rot
    }

    /// Optimal sketched parameter in the original sketched coordinates.
    pub fn v_star(&self) -> &[f64] {
        &self.v_star
    }

    /// `min Risk_M − min Risk`.
    pub fn approx_error(&self) -> f64 {
        self.approx_error
    }

    /// `tr(SHS^T)` as the squared Frobenius norm of `SH^{1/2}`.
    pub fn gram_trace(&self) -> f64 {
        self.gram_trace
    }

    /// `‖w*‖²_H`.
    pub fn w_star_h_norm2(&self) -> f64 {
        self.w_star
            .iter()
            .zip(self.spectrum.eigenvalues())
            .map(|(w, l)| l * w * w)
            .sum()
    }

    /// `‖v*‖²_{SHS^T}`.
    pub fn v_star_norm2(&self) -> f64 {
        self.v_star_rot
            .iter()
            .zip(&self.eigenvalues)
            .map(|(v, l)| l * v * v)
            .sum()
    }

    /// Eigenvalues of `SH²S^T`, computed on first use.
    pub fn sq_eigenvalues(&self) -> Result<&[f64]> {
        if let Some(v) = self.sq_eigenvalues.get() {
            return Ok(v);
        }
        let sq: Vec<f64> = self.spectrum.eigenvalues().iter().map(|l| l * l).collect();
        let eig = psd_eigenvalues(weighted_gram(&self.sketch, &sq, 0))?;
        Ok(self.sq_eigenvalues.get_or_init(|| eig))
    }

    /// Rotates a vector from sketched coordinates into the eigenbasis.
    pub fn rotate(&self, v: &[f64]) -> Vec<f64> {
        self.eigenvectors
            .tr_mul(&DVector::from_column_slice(v))
            .as_slice()
            .to_vec()
    }

    /// Maps an eigenbasis vector back to sketched coordinates.
    pub fn unrotate(&self, v: &[f64]) -> Vec<f64> {
        (&self.eigenvectors * DVector::from_column_slice(v))
            .as_slice()
            .to_vec()
    }

    pub fn summary(&self) -> ModelSummary {
        let head = self.eigenvalues.len().min(5);
        ModelSummary {
            m: self.m(),
            d: self.d(),
            seed: self.sketch.seed(),
            approx_error: self.approx_error,
            eigenvalues_head: self.eigenvalues[..head].to_vec(),
            eigenvalues_tail: self.eigenvalues[self.eigenvalues.len() - head..].to_vec(),
        }
    }
}

/// JSON summary of a built model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub m: usize,
    pub d: usize,
    pub seed: u64,
    pub approx_error: f64,
    pub eigenvalues_head: Vec<f64>,
    pub eigenvalues_tail: Vec<f64>,
}

/// One line of a concentration report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub j: usize,
    pub eigenvalue: f64,
    pub predicted: f64,
    pub ratio: f64,
}

/// Measured sketched eigenvalues against their predicted decay.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub kind: SpectrumKind,
    pub m: usize,
    /// Head/tail crossover `k_M = min{k : k log2 k ≥ M}` (log power law only).
    pub k_m: Option<usize>,
    /// `μ_j(SHS^T)` against the prediction.
    pub rows: Vec<ConcentrationRow>,
    /// `max_j r_j / min_j r_j` over `rows`.
    pub band: f64,
    /// `μ_j(SH²S^T)` against its prediction.
    pub sq_rows: Vec<ConcentrationRow>,
    pub sq_band: f64,
}

impl ConcentrationReport {
    /// Writes `rows` as CSV `(j, eigenvalue, predicted, ratio)`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W, squared: bool) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let rows = if squared { &self.sq_rows } else { &self.rows };
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `min{k ≥ 1 : k log2 k ≥ m}`.
pub fn log_crossover(m: usize) -> usize {
    let target = m as f64;
    (1..)
        .find(|&k: &usize| (k as f64) * (k as f64).log2() >= target)
        .expect("k log k is unbounded")
}

fn band_of(rows: &[ConcentrationRow]) -> f64 {
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r.ratio), hi.max(r.ratio)));
    hi / lo
}

fn rows_against(measured: &[f64], predict: impl Fn(usize) -> f64) -> Vec<ConcentrationRow> {
    measured
        .iter()
        .enumerate()
        .map(|(idx, &eigenvalue)| {
            let j = idx + 1;
            let predicted = predict(j);
            ConcentrationRow {
                j,
                eigenvalue,
                predicted,
                ratio: eigenvalue / predicted,
            }
        })
        .collect()
}

/// Compares the sketched spectra of `model` with the decay of `H`.
///
/// Predictions carry the spectrum's normalization constant `c`, so ratios are
/// `O(1)` when the concentration holds:
/// - power law: `c j^{-a}` for `SHS^T`, `c² j^{-2a}` for `SH²S^T`;
/// - log power law: `c j^{-1} log2^{-a}(j+1)` up to `k_M`, then the flat level
///   `c M^{-1} log2^{1-a} M`; `c² j^{-2} log2^{-2a}(j+1)` for `SH²S^T`.
pub fn concentration_report(model: &SketchedModel) -> Result<ConcentrationReport> {
    let spectrum = model.spectrum();
    let c = spectrum.scale();
    let m = model.m();
    let sq = model.sq_eigenvalues()?;
    let (k_m, rows, sq_rows) = match (spectrum.kind(), spectrum.a()) {
        (SpectrumKind::PowerLaw, Some(a)) => (
            None,
            rows_against(model.eigenvalues(), |j| c * (j as f64).powf(-a)),
            rows_against(sq, |j| c * c * (j as f64).powf(-2.0 * a)),
        ),
        (SpectrumKind::LogPowerLaw, Some(a)) => {
            let k_m = log_crossover(m);
            let mf = m as f64;
            let flat = c * mf.log2().powf(1.0 - a) / mf;
            let head = |j: usize| {
                let jf = j as f64;
                c / (jf * (jf + 1.0).log2().powf(a))
            };
            (
                Some(k_m),
                rows_against(model.eigenvalues(), |j| if j <= k_m { head(j) } else { flat }),
                rows_against(sq, |j| head(j).powi(2)),
            )
        }
        _ => {
            return Err(Error::InvalidParameter(
                "concentration report needs a power_law or log_power_law spectrum".into(),
            ))
        }
    };
    Ok(ConcentrationReport {
        kind: spectrum.kind(),
        m,
        k_m,
        band: band_of(&rows),
        sq_band: band_of(&sq_rows),
        rows,
        sq_rows,
    })
}

/// `μ_{⌈M/2⌉}(S_{k:} H_{k:} S_{k:}^T) / μ_M(·)`, where `S_{k:}` drops the first
/// `k` columns.
pub fn tail_ratio(sketch: &SketchMatrix, spectrum: &Spectrum, k: usize) -> Result<f64> {
    let (m, d) = (sketch.m(), sketch.d());
    if spectrum.d() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: spectrum.d(),
        });
    }
    if k > d || d - k < m {
        return Err(Error::InsufficientTailRank {
            k,
            needed: m,
            available: d.saturating_sub(k),
        });
    }
    let eig = psd_eigenvalues(weighted_gram(sketch, spectrum.eigenvalues(), k))?;
    let mid = eig[m.div_ceil(2) - 1];
    let last = eig[m - 1];
    if !(last > 0.0) {
        return Err(Error::Singular {
            m,
            d,
            spectrum: spectrum.label(),
            smallest: last,
            largest: eig[0],
        });
    }
    Ok(mid / last)
}
