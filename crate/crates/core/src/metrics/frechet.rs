use nalgebra::{DMatrix, DVector, SymmetricEigen};
use par_tensor::{Purpose, RngStream, Scalar};

use crate::error::{ParError, Result};
use crate::image::PanoImage;

/// `n × k` feature matrix tagged with the extractor that produced it.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub label: String,
    data: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(label: impl Into<String>, n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if n < 2 || k == 0 || values.len() != n * k {
            return Err(ParError::contract(format!(
                "feature set needs n >= 2 rows of k >= 1 values, got n={n} k={k} len={}",
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(ParError::contract("feature set contains non-finite values"));
        }
        Ok(FeatureSet {
            label: label.into(),
            data: DMatrix::from_row_slice(n, k, &values),
        })
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn k(&self) -> usize {
        self.data.ncols()
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, k) = (self.n(), self.k());
        let mean = DVector::from_fn(k, |j, _| self.data.column(j).sum() / n as f64);
        let mut centred = self.data.clone();
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centred.transpose() * &centred / (n as f64 - 1.0);
        if n < k + 1 {
            for j in 0..k {
                cov[(j, j)] += 1e-6;
            }
        }
        (mean, cov)
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})`, with the trace of the
/// square root taken as `Tr((√Σ_A Σ_B √Σ_A)^{1/2})`, whose argument is
/// symmetric PSD.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.k() != b.k() {
        return Err(ParError::contract(format!("feature widths differ: {} vs {}", a.k(), b.k())));
    }
    let (ma, ca) = a.moments();
    let (mb, cb) = b.moments();
    let ra = psd_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Fixed random projections of image patches, rectified and average-pooled.
#[derive(Debug, Clone)]
pub struct RandomPatchFeatures {
    pub patch: usize,
    pub k: usize,
    pub seed: u64,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl RandomPatchFeatures {
    pub fn new(patch: usize, k: usize, channels: usize, seed: u64) -> Self {
        let fan_in = patch * patch * channels;
        let mut rng = RngStream::new(seed, Purpose::Init);
        let scale = (1.0 / fan_in as f64).sqrt();
        let weights = (0..k * fan_in).map(|_| rng.normal() * scale).collect();
        let bias = (0..k).map(|_| rng.normal() * 0.1).collect();
        RandomPatchFeatures {
            patch,
            k,
            seed,
            weights,
            bias,
        }
    }

    pub fn label(&self) -> String {
        format!("random-patch p={} k={} seed={}", self.patch, self.k, self.seed)
    }

    /// Features of one image; patches tile the image with stride `patch/2`.
    pub fn extract<T: Scalar>(&self, img: &PanoImage<T>) -> Result<Vec<f64>> {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let p = self.patch;
        let fan_in = p * p * c;
        if self.weights.len() != self.k * fan_in || h < p {
            return Err(ParError::contract(format!(
                "extractor built for another channel count or image too small ({h}x{w}x{c})"
            )));
        }
        let stride = (p / 2).max(1);
        let mut acc = vec![0.0; self.k];
        let mut patch = vec![0.0; fan_in];
        let mut count = 0usize;
        for v0 in (0..=h - p).step_by(stride) {
            for u0 in (0..w).step_by(stride) {
                let mut i = 0;
                for dv in 0..p {
                    for du in 0..p {
                        for ch in 0..c {
                            patch[i] = img.at(v0 + dv, (u0 + du) % w, ch).as_f64();
                            i += 1;
                        }
                    }
                }
                for (j, a) in acc.iter_mut().enumerate() {
                    let wj = &self.weights[j * fan_in..(j + 1) * fan_in];
                    let z: f64 = wj.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>() + self.bias[j];
                    *a += z.max(0.0);
                }
                count += 1;
            }
        }
        Ok(acc.into_iter().map(|a| a / count as f64).collect())
    }

    pub fn feature_set<T: Scalar>(&self, imgs: &[PanoImage<T>]) -> Result<FeatureSet> {
        let mut values = Vec::with_capacity(imgs.len() * self.k);
        for im in imgs {
            values.extend(self.extract(im)?);
        }
        FeatureSet::new(self.label(), imgs.len(), self.k, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = psd_sqrt(&m);
        assert!((&r * &r - &m).abs().max() < 1e-12);
    }

    #[test]
    fn mismatched_widths_rejected() {
        let a = FeatureSet::new("a", 2, 1, vec![0.0, 1.0]).unwrap();
        let b = FeatureSet::new("b", 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(frechet_distance(&a, &b).is_err());
        assert!(FeatureSet::new("c", 2, 1, vec![0.0, f64::NAN]).is_err());
    }
}
