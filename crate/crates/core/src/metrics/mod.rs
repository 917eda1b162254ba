//! Seam quality, Fréchet feature distance and the equivariance gap.

mod frechet;

pub use frechet::{frechet_distance, FeatureSet, RandomPatchFeatures};
pub use crate::train::equivariance_gap;

use par_tensor::Scalar;

use crate::error::{ParError, Result};
use crate::image::PanoImage;

const DS_FLOOR: f64 = 1e-6;

/// Discontinuity score: mean absolute difference across the wrap seam,
/// relative to the mean absolute difference of interior column pairs.
pub fn discontinuity_score<T: Scalar>(img: &PanoImage<T>) -> Result<f64> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if w < 4 {
        return Err(ParError::contract(format!("discontinuity score needs W >= 4, got {w}")));
    }
    let mut seam = 0.0;
    let mut interior = 0.0;
    for v in 0..h {
        for ch in 0..c {
            seam += (img.at(v, 0, ch).as_f64() - img.at(v, w - 1, ch).as_f64()).abs();
            for u in 0..w - 1 {
                interior += (img.at(v, u + 1, ch).as_f64() - img.at(v, u, ch).as_f64()).abs();
            }
        }
    }
    let seam = seam / (h * c) as f64;
    let interior = interior / (h * c * (w - 1)) as f64;
    Ok(seam / interior.max(DS_FLOOR))
}

pub fn mean_discontinuity<T: Scalar>(imgs: &[PanoImage<T>]) -> Result<f64> {
    if imgs.is_empty() {
        return Err(ParError::contract("mean discontinuity of an empty set"));
    }
    let mut s = 0.0;
    for im in imgs {
        s += discontinuity_score(im)?;
    }
    Ok(s / imgs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn constant_image_scores_zero() {
        let img = PanoImage::<f64>::from_fn(8, 3, |_, _, _| 0.4).unwrap();
        assert_eq!(discontinuity_score(&img).unwrap(), 0.0);
    }

    #[test]
    fn helical_sinusoid_is_seamless_under_any_shift() {
        let (h, w) = (64usize, 128usize);
        let img = PanoImage::<f64>::from_fn(h, 1, |v, u, _| {
            (2.0 * PI * 3.0 * u as f64 / w as f64 + 2.0 * PI * v as f64 / h as f64).sin()
        })
        .unwrap();
        for s in 0..w as isize {
            let ds = discontinuity_score(&img.shift(s).unwrap()).unwrap();
            assert!(ds <= 1.0 + 1e-3, "shift {s}: {ds}");
        }
    }

    #[test]
    fn hard_seam_step() {
        // Ramp 0 → 1 across the width: interior steps 1/(W−1), seam step 1.
        let img = PanoImage::<f64>::from_fn(8, 1, |_, u, _| u as f64 / 15.0).unwrap();
        let ds = discontinuity_score(&img).unwrap();
        assert!((ds - 15.0).abs() < 1e-12, "{ds}");
    }
}
