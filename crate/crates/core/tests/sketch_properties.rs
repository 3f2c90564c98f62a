use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use sgd_scaling::seed::rng_from_seed;
use sgd_scaling::sketch::{sketched_eigenvalues, tail_ratio, SketchMatrix};
use sgd_scaling::spectrum::Spectrum;
use sgd_scaling::stats::ks_two_sample;

const DRAWS: u64 = 200;

fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    g.qr().q()
}

fn extremes(eig: &[f64]) -> (f64, f64) {
    (eig[0], eig[eig.len() - 1])
}

fn assert_same_law(a: &[(f64, f64)], b: &[(f64, f64)], what: &str) {
    let top = ks_two_sample(&a.iter().map(|x| x.0).collect::<Vec<_>>(), &b.iter().map(|x| x.0).collect::<Vec<_>>());
    let bottom = ks_two_sample(&a.iter().map(|x| x.1).collect::<Vec<_>>(), &b.iter().map(|x| x.1).collect::<Vec<_>>());
    assert!(top.1 > 0.01, "{what}: top eigenvalue KS {top:?}");
    assert!(bottom.1 > 0.01, "{what}: bottom eigenvalue KS {bottom:?}");
}

#[test]
fn rotated_sketch_has_the_same_spectrum_law() {
    let (m, d) = (8, 64);
    let flat = vec![0.5; d];
    let q = random_orthogonal(d, 99);
    let plain: Vec<_> = (0..DRAWS)
        .map(|s| extremes(&sketched_eigenvalues(&SketchMatrix::sample(m, d, s).unwrap(), &flat).unwrap()))
        .collect();
    let rotated: Vec<_> = (0..DRAWS)
        .map(|s| {
            let sketch = SketchMatrix::sample(m, d, 10_000 + s).unwrap();
            let turned = SketchMatrix::from_matrix(sketch.entries() * &q).unwrap();
            extremes(&sketched_eigenvalues(&turned, &flat).unwrap())
        })
        .collect();
    assert_same_law(&plain, &rotated, "rotation");
}

#[test]
fn permuted_spectrum_has_the_same_sketched_law() {
    let (m, d) = (8, 64);
    let spectrum = Spectrum::power_law(d, 1.5, false).unwrap();
    let mut shuffled = spectrum.eigenvalues().to_vec();
    shuffled.shuffle(&mut rng_from_seed(5));
    let sorted: Vec<_> = (0..DRAWS)
        .map(|s| extremes(&sketched_eigenvalues(&SketchMatrix::sample(m, d, s).unwrap(), spectrum.eigenvalues()).unwrap()))
        .collect();
    let permuted: Vec<_> = (0..DRAWS)
        .map(|s| extremes(&sketched_eigenvalues(&SketchMatrix::sample(m, d, 20_000 + s).unwrap(), &shuffled).unwrap()))
        .collect();
    assert_same_law(&sorted, &permuted, "permutation");
}

#[test]
fn tail_ratio_is_uniformly_bounded() {
    let (m, d) = (128, 4096);
    let spectrum = Spectrum::power_law(d, 2.0, false).unwrap();
    let mut worst: f64 = 0.0;
    for s in 0..50 {
        let sketch = SketchMatrix::sample(m, d, 7_000 + s).unwrap();
        for k in [0, 64, 512] {
            worst = worst.max(tail_ratio(&sketch, &spectrum, k).unwrap());
        }
    }
    assert!(worst <= 20.0, "largest ratio {worst}");
    assert!(worst >= 1.0);
}
