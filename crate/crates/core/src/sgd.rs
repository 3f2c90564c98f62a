//! One-pass SGD on sketched covariates.
//!
//! Conditional on `S`, the pair `(Sx, y)` is exactly a well-specified Gaussian
//! regression in `M` dimensions: in the eigenbasis of `SHS^T` the covariate
//! `z` has independent `N(0, λ̃_i)` coordinates and `y = z^T ṽ* + ε` with
//! `ε ~ N(0, σ² + Approx)`. The fast path samples that law directly at `O(M)`
//! per step. The direct path draws `x ~ N(0, H)` in `d` dimensions and forms
//! `Sx` explicitly; it exists as an oracle for the fast path.
//!
//! Both paths feed the same recursion `v ← v − γ_t (z^T v − y) z`, so replaying
//! one path's innovations through the other reproduces it bit for bit.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::sketch::SketchedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    GeometricDecay,
    Constant,
}

/// Per-step stepsizes `γ_1, …, γ_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepsizeSchedule {
    gamma0: f64,
    kind: ScheduleKind,
    values: Vec<f64>,
}

fn check_gamma(gamma0: f64) -> Result<()> {
    if !(gamma0 >= 0.0) || !gamma0.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "initial stepsize must be finite and non-negative, got {gamma0}"
        )));
    }
    Ok(())
}

impl StepsizeSchedule {
    /// `γ_t = γ / 2^ℓ` with `ℓ = ⌊t / (N / log2 N)⌋`, `t = 1..N`.
    ///
    /// The phase index is evaluated as `⌊t log2(N) / N⌋`, which is exact when
    /// `N` is a power of two.
    pub fn geometric(gamma0: f64, n: usize) -> Result<Self> {
        check_gamma(gamma0)?;
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "geometric decay needs N ≥ 2 so that log2 N > 0, got N={n}"
            )));
        }
        let nf = n as f64;
        let log_n = nf.log2();
        let values = (1..=n)
            .map(|t| {
                let phase = ((t as f64) * log_n / nf).floor() as i32;
                gamma0 * 2f64.powi(-phase)
            })
            .collect();
        Ok(Self {
            gamma0,
            kind: ScheduleKind::GeometricDecay,
            values,
        })
    }

    /// `γ_t = γ` for `t = 1..N`.
    pub fn constant(gamma0: f64, n: usize) -> Result<Self> {
        check_gamma(gamma0)?;
        if n == 0 {
            return Err(Error::InvalidParameter("N must be at least 1".into()));
        }
        Ok(Self {
            gamma0,
            kind: ScheduleKind::Constant,
            values: vec![gamma0; n],
        })
    }

    pub fn gamma0(&self) -> f64 {
        self.gamma0
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `N / log2 N` for geometric decay, `N` for a constant stepsize.
    pub fn n_eff(&self) -> f64 {
        let n = self.n() as f64;
        match self.kind {
            ScheduleKind::GeometricDecay => n / n.log2(),
            ScheduleKind::Constant => n,
        }
    }

    /// Maximal runs of equal stepsizes as `(γ, length)`.
    pub fn phases(&self) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for &g in &self.values {
            match out.last_mut() {
                Some((last, len)) if *last == g => *len += 1,
                _ => out.push((g, 1)),
            }
        }
        out
    }
}

/// Which iterate SGD returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `v_N` under geometric stepsize decay.
    LastIterate,
    /// `(1/N) Σ_{t=0}^{N-1} v_t` under a constant stepsize.
    Averaged,
}

impl Variant {
    pub fn schedule(self, gamma0: f64, n: usize) -> Result<StepsizeSchedule> {
        match self {
            Variant::LastIterate => StepsizeSchedule::geometric(gamma0, n),
            Variant::Averaged => StepsizeSchedule::constant(gamma0, n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationPath {
    Fast,
    Direct,
    Replay,
}

/// Result of one SGD run, expressed in the eigenbasis of `SHS^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdOutcome {
    pub final_param: Vec<f64>,
    /// `‖final_param − ṽ*‖²_{Λ̃}`
    pub excess_risk: f64,
    pub path: SimulationPath,
    pub variant: Variant,
    pub seed: u64,
    /// Set when `γ_1 λ̃_1 ≥ 2` or the run produced a non-finite risk.
    pub diverged: bool,
}

/// A stream of sketched samples in the eigenbasis.
pub trait InnovationSource {
    /// Writes the next covariate into `z` and returns its label.
    fn next_sample(&mut self, z: &mut [f64]) -> f64;
}

/// Samples `(z, y)` from the exact conditional law of the sketched problem.
pub struct FastSource<'a> {
    sqrt_eig: Vec<f64>,
    v_star: &'a [f64],
    noise_sd: f64,
    rng: ChaCha8Rng,
}

impl<'a> FastSource<'a> {
    /// Label noise has variance `σ² + Approx`: the part of `w*` the sketch
    /// cannot represent acts as additional independent noise.
    pub fn new(model: &'a SketchedModel, sigma2: f64, seed: u64) -> Self {
        Self {
            sqrt_eig: model.eigenvalues().iter().map(|l| l.sqrt()).collect(),
            v_star: model.v_star_rotated(),
            noise_sd: (sigma2 + model.approx_error()).sqrt(),
            rng: rng_from_seed(seed),
        }
    }
}

impl InnovationSource for FastSource<'_> {
    #[inline]
    fn next_sample(&mut self, z: &mut [f64]) -> f64 {
        let mut signal = 0.0;
        for ((zi, s), v) in z.iter_mut().zip(&self.sqrt_eig).zip(self.v_star) {
            let g: f64 = self.rng.sample(StandardNormal);
            *zi = s * g;
            signal += *zi * v;
        }
        let e: f64 = self.rng.sample(StandardNormal);
        signal + self.noise_sd * e
    }
}

/// Draws `x ~ N(0, H)` and `y = x^T w* + σ ε` in the ambient dimension and
/// returns `U^T S x`.
pub struct DirectSource<'a> {
    model: &'a SketchedModel,
    sqrt_lambda: Vec<f64>,
    sigma: f64,
    rng: ChaCha8Rng,
    x: DVector<f64>,
}

impl<'a> DirectSource<'a> {
    pub fn new(model: &'a SketchedModel, sigma2: f64, seed: u64) -> Self {
        Self {
            model,
            sqrt_lambda: model.spectrum().eigenvalues().iter().map(|l| l.sqrt()).collect(),
            sigma: sigma2.sqrt(),
            rng: rng_from_seed(seed),
            x: DVector::zeros(model.d()),
        }
    }
}

impl InnovationSource for DirectSource<'_> {
    fn next_sample(&mut self, z: &mut [f64]) -> f64 {
        let mut label = 0.0;
        for ((xi, s), w) in self
            .x
            .iter_mut()
            .zip(&self.sqrt_lambda)
            .zip(self.model.w_star())
        {
            let g: f64 = self.rng.sample(StandardNormal);
            *xi = s * g;
            label += *xi * w;
        }
        let e: f64 = self.rng.sample(StandardNormal);
        label += self.sigma * e;
        let sx = self.model.sketch().entries() * &self.x;
        let rotated = self.model.eigenvectors().tr_mul(&sx);
        z.copy_from_slice(rotated.as_slice());
        label
    }
}

/// Wraps a source and keeps every sample it emits.
pub struct Recorder<S> {
    inner: S,
    pub samples: Vec<(Vec<f64>, f64)>,
}

impl<S> Recorder<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            samples: Vec::new(),
        }
    }
}

impl<S: InnovationSource> InnovationSource for Recorder<S> {
    fn next_sample(&mut self, z: &mut [f64]) -> f64 {
        let y = self.inner.next_sample(z);
        self.samples.push((z.to_vec(), y));
        y
    }
}

/// Replays a recorded innovation sequence.
pub struct Replay<'a> {
    samples: std::slice::Iter<'a, (Vec<f64>, f64)>,
}

impl<'a> Replay<'a> {
    pub fn new(samples: &'a [(Vec<f64>, f64)]) -> Self {
        Self {
            samples: samples.iter(),
        }
    }
}

impl InnovationSource for Replay<'_> {
    fn next_sample(&mut self, z: &mut [f64]) -> f64 {
        let (zs, y) = self
            .samples
            .next()
            .expect("replayed innovation sequence shorter than the schedule");
        z.copy_from_slice(zs);
        *y
    }
}

/// Runs the recursion from `v_0 = 0` on any innovation stream and returns the
/// last iterate or the average of `v_0, …, v_{N-1}`.
pub fn iterate<S: InnovationSource>(
    source: &mut S,
    m: usize,
    stepsizes: &[f64],
    variant: Variant,
) -> Vec<f64> {
    let mut v = vec![0.0; m];
    let mut z = vec![0.0; m];
    let mut sum = match variant {
        Variant::Averaged => vec![0.0; m],
        Variant::LastIterate => Vec::new(),
    };
    for &gamma in stepsizes {
        if variant == Variant::Averaged {
            sum.iter_mut().zip(&v).for_each(|(s, vi)| *s += vi);
        }
        let y = source.next_sample(&mut z);
        let pred: f64 = z.iter().zip(&v).map(|(a, b)| a * b).sum();
        let step = gamma * (pred - y);
        v.iter_mut().zip(&z).for_each(|(vi, zi)| *vi -= step * zi);
    }
    match variant {
        Variant::LastIterate => v,
        Variant::Averaged => {
            let n = stepsizes.len() as f64;
            sum.iter_mut().for_each(|s| *s /= n);
            sum
        }
    }
}

/// `‖v − ṽ*‖²_{Λ̃}` for `v` in the eigenbasis.
pub fn excess_risk(model: &SketchedModel, v: &[f64]) -> f64 {
    v.iter()
        .zip(model.v_star_rotated())
        .zip(model.eigenvalues())
        .map(|((x, s), l)| l * (x - s) * (x - s))
        .sum()
}

/// Runs SGD on an arbitrary innovation source and packages the outcome.
pub fn run_with_source<S: InnovationSource>(
    model: &SketchedModel,
    source: &mut S,
    schedule: &StepsizeSchedule,
    variant: Variant,
    path: SimulationPath,
    seed: u64,
) -> SgdOutcome {
    let final_param = iterate(source, model.m(), schedule.values(), variant);
    let excess_risk = excess_risk(model, &final_param);
    let first = schedule.values().first().copied().unwrap_or(0.0);
    let warn = first * model.eigenvalues()[0] >= 2.0;
    if warn {
        log::warn!(
            "stepsize {first} times top sketched eigenvalue {} is at least 2; SGD may diverge",
            model.eigenvalues()[0]
        );
    }
    SgdOutcome {
        final_param,
        excess_risk,
        path,
        variant,
        seed,
        diverged: warn || !excess_risk.is_finite(),
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise variance must be finite and non-negative, got {sigma2}"
        )));
    }
    Ok(())
}

/// Last iterate of SGD through the fast eigenbasis path.
pub fn run_last_iterate(
    model: &SketchedModel,
    sigma2: f64,
    schedule: &StepsizeSchedule,
    seed: u64,
) -> Result<SgdOutcome> {
    check_sigma2(sigma2)?;
    let mut source = FastSource::new(model, sigma2, seed);
    Ok(run_with_source(
        model,
        &mut source,
        schedule,
        Variant::LastIterate,
        SimulationPath::Fast,
        seed,
    ))
}

/// Average of the iterates of constant-stepsize SGD, fast path.
pub fn run_average_iterate(
    model: &SketchedModel,
    sigma2: f64,
    gamma0: f64,
    n: usize,
    seed: u64,
) -> Result<SgdOutcome> {
    check_sigma2(sigma2)?;
    let schedule = StepsizeSchedule::constant(gamma0, n)?;
    let mut source = FastSource::new(model, sigma2, seed);
    Ok(run_with_source(
        model,
        &mut source,
        &schedule,
        Variant::Averaged,
        SimulationPath::Fast,
        seed,
    ))
}

/// The fast path for either variant.
pub fn run_fast(
    model: &SketchedModel,
    sigma2: f64,
    schedule: &StepsizeSchedule,
    variant: Variant,
    seed: u64,
) -> Result<SgdOutcome> {
    match variant {
        Variant::LastIterate => run_last_iterate(model, sigma2, schedule, seed),
        Variant::Averaged => {
            run_average_iterate(model, sigma2, schedule.gamma0(), schedule.n(), seed)
        }
    }
}

/// SGD on ambient-dimension samples with explicit `Sx_t` products.
pub fn run_direct(
    model: &SketchedModel,
    sigma2: f64,
    schedule: &StepsizeSchedule,
    variant: Variant,
    seed: u64,
) -> Result<SgdOutcome> {
    check_sigma2(sigma2)?;
    let mut source = DirectSource::new(model, sigma2, seed);
    Ok(run_with_source(
        model,
        &mut source,
        schedule,
        variant,
        SimulationPath::Direct,
        seed,
    ))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::DMatrix;

    use super::*;
    use crate::sketch::SketchMatrix;
    use crate::spectrum::{sample_prior, PriorSpec, Spectrum};
    use crate::stats::{ks_two_sample, mean};

    #[test]
    fn geometric_schedule_examples() {
        let s = StepsizeSchedule::geometric(0.4, 8).unwrap();
        assert_eq!(s.values(), &[0.4, 0.4, 0.2, 0.2, 0.2, 0.1, 0.1, 0.05]);
        let s = StepsizeSchedule::geometric(0.3, 2).unwrap();
        assert_eq!(s.values(), &[0.3, 0.15]);
        let s = StepsizeSchedule::geometric(0.1, 1 << 12).unwrap();
        assert_eq!(s.values()[0], 0.1);
        assert_eq!(*s.values().last().unwrap(), 0.1 / 4096.0);
        assert!(StepsizeSchedule::geometric(0.1, 1).is_err());
        assert!(StepsizeSchedule::geometric(-0.1, 8).is_err());
    }

    #[test]
    fn schedule_phases_and_neff() {
        let s = StepsizeSchedule::geometric(0.4, 8).unwrap();
        assert_eq!(
            s.phases(),
            vec![(0.4, 2), (0.2, 3), (0.1, 2), (0.05, 1)]
        );
        assert!((s.n_eff() - 8.0 / 3.0).abs() < 1e-15);
        let c = StepsizeSchedule::constant(0.1, 10).unwrap();
        assert_eq!(c.n_eff(), 10.0);
        assert_eq!(c.phases(), vec![(0.1, 10)]);
    }

    fn scalar_model(lambda: f64, w: f64) -> SketchedModel {
        let spectrum = Arc::new(Spectrum::explicit(vec![lambda], false).unwrap());
        let sketch = SketchMatrix::from_matrix(DMatrix::from_element(1, 1, 1.0)).unwrap();
        SketchedModel::build(sketch, spectrum, vec![w]).unwrap()
    }

    #[test]
    fn single_hand_step() {
        let model = scalar_model(1.0, 0.0);
        let samples = vec![(vec![2.0], 1.0)];
        let v = iterate(&mut Replay::new(&samples), 1, &[0.1], Variant::LastIterate);
        assert!((v[0] - 0.2).abs() < 1e-15);
        let out = run_with_source(
            &model,
            &mut Replay::new(&samples),
            &StepsizeSchedule::constant(0.1, 1).unwrap(),
            Variant::LastIterate,
            SimulationPath::Replay,
            0,
        );
        assert!((out.excess_risk - 0.04).abs() < 1e-15);
    }

    #[test]
    fn two_step_scalar_oracle() {
        // v1 = v0 - γ1 (z1 v0 - y1) z1, v2 = v1 - γ2 (z2 v1 - y2) z2
        let samples = vec![(vec![1.5], 0.5), (vec![-0.5], 2.0)];
        let (g1, g2) = (0.2, 0.1);
        let v1 = 0.0 - g1 * (1.5 * 0.0 - 0.5) * 1.5;
        let v2 = v1 - g2 * (-0.5 * v1 - 2.0) * -0.5;
        let v = iterate(&mut Replay::new(&samples), 1, &[g1, g2], Variant::LastIterate);
        assert_eq!(v[0], v2);
        let avg = iterate(&mut Replay::new(&samples), 1, &[g1, g1], Variant::Averaged);
        assert_eq!(avg[0], v1 / 2.0);
    }

    #[test]
    fn zero_target_and_noise_is_a_fixed_point() {
        let spectrum = Arc::new(Spectrum::power_law(16, 2.0, true).unwrap());
        let sketch = SketchMatrix::sample(4, 16, 1).unwrap();
        let model = SketchedModel::build(sketch, spectrum, vec![0.0; 16]).unwrap();
        let schedule = StepsizeSchedule::geometric(0.1, 64).unwrap();
        let out = run_last_iterate(&model, 0.0, &schedule, 3).unwrap();
        assert!(out.final_param.iter().all(|&v| v == 0.0));
        assert_eq!(out.excess_risk, 0.0);
        let out = run_direct(&model, 0.0, &schedule, Variant::LastIterate, 3).unwrap();
        assert!(out.final_param.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn average_of_one_step_is_the_origin() {
        let model = scalar_model(0.5, 2.0);
        let out = run_average_iterate(&model, 1.0, 0.1, 1, 5).unwrap();
        assert_eq!(out.final_param, vec![0.0]);
        let vs = model.v_star_rotated()[0];
        assert!((out.excess_risk - 0.5 * vs * vs).abs() < 1e-15);
    }

    #[test]
    fn divergence_is_flagged_not_dropped() {
        let model = scalar_model(1.0, 1.0);
        let schedule = StepsizeSchedule::constant(2.5, 20).unwrap();
        let out = run_last_iterate(&model, 0.0, &schedule, 1).unwrap();
        assert!(out.diverged);
        let schedule = StepsizeSchedule::constant(0.1, 20).unwrap();
        assert!(!run_last_iterate(&model, 0.0, &schedule, 1).unwrap().diverged);
    }

    #[test]
    fn deterministic_per_seed() {
        let spectrum = Arc::new(Spectrum::power_law(32, 1.5, true).unwrap());
        let sketch = SketchMatrix::sample(8, 32, 2).unwrap();
        let w = sample_prior(&spectrum, &PriorSpec::Isotropic, 3).unwrap();
        let model = SketchedModel::build(sketch, spectrum, w).unwrap();
        let schedule = StepsizeSchedule::geometric(0.1, 200).unwrap();
        let a = run_last_iterate(&model, 1.0, &schedule, 77).unwrap();
        let b = run_last_iterate(&model, 1.0, &schedule, 77).unwrap();
        assert_eq!(a, b);
        let c = run_direct(&model, 1.0, &schedule, Variant::LastIterate, 77).unwrap();
        let d = run_direct(&model, 1.0, &schedule, Variant::LastIterate, 77).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn replayed_direct_innovations_are_bit_identical() {
        let spectrum = Arc::new(Spectrum::power_law(64, 2.0, true).unwrap());
        let sketch = SketchMatrix::sample(8, 64, 4).unwrap();
        let w = sample_prior(&spectrum, &PriorSpec::Isotropic, 5).unwrap();
        let model = SketchedModel::build(sketch, spectrum, w).unwrap();
        let schedule = StepsizeSchedule::geometric(0.1, 300).unwrap();
        for variant in [Variant::LastIterate, Variant::Averaged] {
            let direct = run_direct(&model, 1.0, &schedule, variant, 9).unwrap();
            let mut rec = Recorder::new(DirectSource::new(&model, 1.0, 9));
            let recorded =
                run_with_source(&model, &mut rec, &schedule, variant, SimulationPath::Direct, 9);
            assert_eq!(recorded, direct);
            let replay = run_with_source(
                &model,
                &mut Replay::new(&rec.samples),
                &schedule,
                variant,
                SimulationPath::Replay,
                9,
            );
            assert_eq!(replay.final_param, direct.final_param);
            assert_eq!(replay.excess_risk.to_bits(), direct.excess_risk.to_bits());
        }
    }

    #[test]
    fn fast_and_direct_agree_in_distribution_small() {
        let spectrum = Arc::new(Spectrum::power_law(32, 2.0, true).unwrap());
        let sketch = SketchMatrix::sample(4, 32, 6).unwrap();
        let w = sample_prior(&spectrum, &PriorSpec::Isotropic, 7).unwrap();
        let model = SketchedModel::build(sketch, spectrum, w).unwrap();
        let schedule = StepsizeSchedule::geometric(0.1, 200).unwrap();
        let fast: Vec<f64> = (0..600)
            .map(|s| run_last_iterate(&model, 1.0, &schedule, s).unwrap().excess_risk)
            .collect();
        let direct: Vec<f64> = (0..600)
            .map(|s| {
                run_direct(&model, 1.0, &schedule, Variant::LastIterate, 10_000 + s)
                    .unwrap()
                    .excess_risk
            })
            .collect();
        let (_, p) = ks_two_sample(&fast, &direct);
        assert!(p > 0.001, "KS p = {p}");
    }

    #[test]
    fn noiseless_risk_decreases_with_n() {
        // M = d so Approx = 0; σ² = 0; γ λ̃_1 < 1
        let spectrum = Arc::new(Spectrum::power_law(6, 2.0, true).unwrap());
        let sketch = SketchMatrix::sample(6, 6, 1).unwrap();
        let w = sample_prior(&spectrum, &PriorSpec::Isotropic, 2).unwrap();
        let model = SketchedModel::build(sketch, spectrum, w).unwrap();
        assert!(model.approx_error() < 1e-20);
        let gamma = 0.5 / model.eigenvalues()[0];
        let ns = [25usize, 50, 100, 200, 400];
        let means: Vec<f64> = ns
            .iter()
            .map(|&n| {
                let schedule = StepsizeSchedule::constant(gamma, n).unwrap();
                let risks: Vec<f64> = (0..500)
                    .map(|s| run_last_iterate(&model, 0.0, &schedule, s).unwrap().excess_risk)
                    .collect();
                mean(&risks)
            })
            .collect();
        assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
    }
}
