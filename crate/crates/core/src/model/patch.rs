use par_tensor::{Scalar, Tensor};

use crate::error::{ParError, Result};

/// Token grid shape for a `[C, h, w]` latent and patch size `p`.
pub fn grid_dims(shape: &[usize], p: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 || p == 0 || shape[1] % p != 0 || shape[2] % p != 0 {
        return Err(ParError::contract(format!("latent {shape:?} not divisible into {p}x{p} patches")));
    }
    Ok((shape[1] / p, shape[2] / p, shape[0] * p * p))
}

/// `[C, h, w]` → `[(h/p)·(w/p), C·p·p]`, tokens in row-major grid order and
/// features ordered (channel, dy, dx).
pub fn patchify<T: Scalar>(lat: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (ht, wt, d) = grid_dims(lat.shape(), p)?;
    let (c, h, w) = (lat.dim(0), lat.dim(1), lat.dim(2));
    let src = lat.data();
    let mut out = Vec::with_capacity(lat.numel());
    for ty in 0..ht {
        for tx in 0..wt {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * h + ty * p + dy) * w + tx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Ok(Tensor::new(&[ht * wt, d], out)?)
}

pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, channels: usize, ht: usize, wt: usize, p: usize) -> Result<Tensor<T>> {
    if tokens.shape() != [ht * wt, channels * p * p] {
        return Err(ParError::contract(format!(
            "tokens {:?} do not match a {ht}x{wt} grid of {channels}x{p}x{p} patches",
            tokens.shape()
        )));
    }
    let (h, w) = (ht * p, wt * p);
    let mut out = vec![T::zero(); channels * h * w];
    let src = tokens.data();
    let mut i = 0;
    for ty in 0..ht {
        for tx in 0..wt {
            for ch in 0..channels {
                for dy in 0..p {
                    let row = (ch * h + ty * p + dy) * w + tx * p;
                    out[row..row + p].copy_from_slice(&src[i..i + p]);
                    i += p;
                }
            }
        }
    }
    Ok(Tensor::new(&[channels, h, w], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let lat = Tensor::<f32>::zeros(&[8, 8, 16]);
        assert_eq!(patchify(&lat, 1).unwrap().shape(), &[128, 8]);
        assert_eq!(patchify(&lat, 2).unwrap().shape(), &[32, 32]);
        assert!(patchify(&lat, 3).is_err());
    }

    #[test]
    fn p1_token_is_channel_vector() {
        let lat = Tensor::<f64>::from_fn(&[2, 2, 4], |i| i as f64);
        let t = patchify(&lat, 1).unwrap();
        // token (row 1, col 2) = [lat[0,1,2], lat[1,1,2]]
        assert_eq!(&t.data()[(4 + 2) * 2..(4 + 2) * 2 + 2], &[6.0, 14.0]);
    }
}
