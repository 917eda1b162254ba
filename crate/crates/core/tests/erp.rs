use std::f64::consts::PI;

use par_core::erp::*;
use par_tensor::{Purpose, RngStream, Tensor};
use proptest::prelude::*;

#[test]
fn round_trip_random_unit_vectors() {
    let mut rng = RngStream::new(11, Purpose::Data);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b, c) = (rng.normal(), rng.normal(), rng.normal());
        let n = (a * a + b * b + c * c).sqrt();
        let p = SpherePoint::new(a / n, b / n, c / n).unwrap();
        let q = erp_to_sphere(&sphere_to_erp(&p, 1024, 512).unwrap());
        worst = worst.max(p.angle_to(&q));
    }
    assert!(worst < 1e-9, "max angular error {worst}");
}

#[test]
fn erp_coordinates_lie_in_range() {
    let mut rng = RngStream::new(3, Purpose::Data);
    for _ in 0..500 {
        let z = rng.uniform_range(-1.0, 1.0);
        let phi = rng.uniform_range(-PI, PI);
        let s = (1.0 - z * z).sqrt();
        let c = sphere_to_erp(&SpherePoint::new(s * phi.cos(), s * phi.sin(), z).unwrap(), 64, 32).unwrap();
        assert!((0.0..64.0).contains(&c.u) && (0.0..=32.0).contains(&c.v));
    }
}

fn report(h: usize, realizations: usize, seed: u64) -> NonIidReport {
    let mut c = NonIidConfig::new(h, 1_000_000);
    c.realizations = realizations;
    c.seed = seed;
    verify_non_iid(&c).unwrap()
}

#[test]
fn variance_law_and_independence() {
    let r = report(64, 200, 1);
    assert!(r.ratio.passes(0.05), "{}", r.to_text());
    assert!(r.failing_rows().is_empty(), "{}", r.to_text());
    for c in &r.covariances {
        assert!(c.within(3.0), "{}", r.to_text());
    }
    assert_eq!(r.degenerate_rows, vec![0]);
    // Exact-area prediction is the unbiased target of the estimator.
    for row in r.rows.iter().filter(|row| row.sin_theta > 0.2) {
        assert!((row.empirical / row.predicted_exact - 1.0).abs() < 0.05);
    }
}

#[test]
fn report_is_independent_of_thread_count() {
    let mut c = NonIidConfig::new(8, 100_000);
    c.realizations = 6;
    let one = verify_non_iid(&c).unwrap();
    c.threads = 4;
    let four = verify_non_iid(&c).unwrap();
    assert_eq!(one.to_text(), four.to_text());
}

#[test]
fn equator_variance_scales_with_pixel_count() {
    // W = 2H, so doubling H quadruples WH and the equator variance.
    let a = report(8, 400, 2);
    let b = report(16, 400, 2);
    let va = a.rows[4].empirical;
    let vb = b.rows[8].empirical;
    let oracle = a.rows[4].predicted_exact.recip() / b.rows[8].predicted_exact.recip();
    assert!((oracle - 4.0).abs() < 0.03);
    assert!(((vb / va) / oracle - 1.0).abs() < 0.05, "ratio {}", vb / va);
}

#[test]
fn too_few_samples_rejected() {
    assert!(verify_non_iid(&NonIidConfig::new(64, 1000)).is_err());
}

#[test]
fn pad_crop_inverse_for_default_ratios() {
    let mut rng = RngStream::new(5, Purpose::Data);
    let x: Tensor<f32> = rng.normal_tensor(&[3, 8, 16], 1.0);
    for r in [0.125, 0.25, 0.5] {
        let p = circular_pad(&x, r).unwrap();
        assert_eq!(p.dim(2), (16.0 * (1.0 + r)) as usize);
        assert_eq!(crop_padding(&p, r).unwrap(), x);
    }
}

fn grid(w: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-10.0f64..10.0, 3 * w).prop_map(move |d| Tensor::new(&[3, w], d).unwrap())
}

proptest! {
    #[test]
    fn shift_group_law(x in grid(16), a in -40isize..40, b in -40isize..40) {
        let ab = cyclic_shift(&cyclic_shift(&x, b).unwrap(), a).unwrap();
        prop_assert_eq!(ab, cyclic_shift(&x, (a + b).rem_euclid(16)).unwrap());
        prop_assert_eq!(cyclic_shift(&cyclic_shift(&x, a).unwrap(), -a).unwrap(), x.clone());
        prop_assert_eq!(cyclic_shift(&x, 16).unwrap(), x);
    }

    #[test]
    fn pad_commutes_with_shift(x in grid(16), v in 0isize..16, k in 0usize..4) {
        let r = [0.0, 0.125, 0.25, 0.5][k];
        let pad = pad_width(r, 16).unwrap();
        // Padding a shifted image equals shifting the padded image's source
        // window, so both crop to the same shifted original.
        let a = circular_pad(&cyclic_shift(&x, v).unwrap(), r).unwrap();
        let b = circular_pad(&x, r).unwrap();
        prop_assert_eq!(crop_padding(&a, r).unwrap(), cyclic_shift(&crop_padding(&b, r).unwrap(), v).unwrap());
        // The padded columns of the shifted image are wrapped copies too.
        for row in 0..3 {
            for j in 0..pad {
                let w = 16 + 2 * pad;
                prop_assert_eq!(a.data()[row * w + j], a.data()[row * w + 16 + j]);
            }
        }
    }

    #[test]
    fn pad_crop_inverse(x in grid(16), k in 0usize..4) {
        let r = [0.0, 0.125, 0.25, 0.5][k];
        prop_assert_eq!(crop_padding(&circular_pad(&x, r).unwrap(), r).unwrap(), x);
    }
}
