use par_core::metrics::{frechet_distance, FeatureSet, RandomPatchFeatures};
use par_core::synth::Corpus;
use par_tensor::{Purpose, RngStream};

fn gaussian(n: usize, means: &[f64], sds: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, Purpose::Data);
    let k = means.len();
    (0..n * k).map(|i| means[i % k] + sds[i % k] * rng.normal()).collect()
}

/// Sample mean and (n−1)-normalized standard deviation of column `j`.
fn column_moments(x: &[f64], k: usize, j: usize) -> (f64, f64) {
    let col: Vec<f64> = x.iter().skip(j).step_by(k).copied().collect();
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[test]
fn identical_sets_are_at_distance_zero() {
    let a = FeatureSet::new("x", 200, 5, gaussian(200, &[0.0; 5], &[1.0; 5], 1)).unwrap();
    assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-6);
}

#[test]
fn univariate_unit_shift() {
    let n = 100_000;
    let xa = gaussian(n, &[0.0], &[1.0], 2);
    let xb = gaussian(n, &[1.0], &[1.0], 3);
    let d = frechet_distance(&FeatureSet::new("a", n, 1, xa.clone()).unwrap(), &FeatureSet::new("b", n, 1, xb.clone()).unwrap()).unwrap();
    assert!((d - 1.0).abs() <= 0.02, "{d}");
    let (ma, sa) = column_moments(&xa, 1, 0);
    let (mb, sb) = column_moments(&xb, 1, 0);
    let oracle = (ma - mb).powi(2) + (sa - sb).powi(2);
    assert!((d - oracle).abs() < 1e-9, "{d} vs {oracle}");
}

#[test]
fn diagonal_bivariate_closed_form() {
    let n = 20_000;
    let xa = gaussian(n, &[0.5, -1.0], &[1.0, 2.0], 4);
    let xb = gaussian(n, &[0.0, 1.0], &[0.5, 3.0], 5);
    let d = frechet_distance(&FeatureSet::new("a", n, 2, xa.clone()).unwrap(), &FeatureSet::new("b", n, 2, xb.clone()).unwrap()).unwrap();
    // Independent columns: the covariances are diagonal up to sampling noise,
    // so compare with a tolerance covering the off-diagonal terms.
    let oracle: f64 = (0..2)
        .map(|j| {
            let (ma, sa) = column_moments(&xa, 2, j);
            let (mb, sb) = column_moments(&xb, 2, j);
            (ma - mb).powi(2) + (sa - sb).powi(2)
        })
        .sum();
    assert!((d - oracle).abs() < 2e-3, "{d} vs {oracle}");
    let population = 0.25 + 4.0 + 0.25 + 1.0;
    // Sampling noise of the column means is about 0.025 at this n.
    assert!((d - population).abs() < 0.25, "{d}");
}

#[test]
fn symmetric_and_non_negative() {
    let a = FeatureSet::new("a", 300, 8, gaussian(300, &[0.0; 8], &[1.0; 8], 6)).unwrap();
    let mut xb = gaussian(300, &[0.2; 8], &[0.7; 8], 7);
    for i in 0..300 {
        xb[i * 8 + 1] += 0.8 * xb[i * 8];
    }
    let b = FeatureSet::new("b", 300, 8, xb).unwrap();
    let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
    assert!((ab - ba).abs() <= 1e-8, "{ab} vs {ba}");
    assert!(ab > 0.0);
}

#[test]
fn few_samples_are_regularized() {
    let a = FeatureSet::new("a", 3, 6, gaussian(3, &[0.0; 6], &[1.0; 6], 8)).unwrap();
    let b = FeatureSet::new("b", 4, 6, gaussian(4, &[0.0; 6], &[1.0; 6], 9)).unwrap();
    let d = frechet_distance(&a, &b).unwrap();
    assert!(d.is_finite() && d >= 0.0);
}

#[test]
fn rejects_non_finite_features() {
    let mut x = gaussian(4, &[0.0; 2], &[1.0; 2], 1);
    x[3] = f64::NAN;
    assert!(FeatureSet::new("a", 4, 2, x).is_err());
}

#[test]
fn patch_features_are_seeded_and_separate_corpora() {
    let f = RandomPatchFeatures::new(8, 64, 3, 11);
    let corpus = Corpus::build(12, 1, 32).unwrap().images();
    let a = f.feature_set(&corpus[..6]).unwrap();
    let a2 = RandomPatchFeatures::new(8, 64, 3, 11).feature_set(&corpus[..6]).unwrap();
    assert!(frechet_distance(&a, &a2).unwrap() <= 1e-6);
    assert_eq!(a.k(), 64);
    let b = f.feature_set(&corpus[6..]).unwrap();
    let noise: Vec<_> = (0..6u64)
        .map(|s| {
            let mut rng = RngStream::new(s, Purpose::Data);
            par_core::PanoImage::<f32>::from_fn(32, 3, |_, _, _| rng.uniform() as f32).unwrap()
        })
        .collect();
    let c = f.feature_set(&noise).unwrap();
    assert!(frechet_distance(&a, &b).unwrap() < frechet_distance(&a, &c).unwrap());
}
