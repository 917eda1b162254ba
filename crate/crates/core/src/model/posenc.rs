use par_tensor::{Scalar, Tensor};

use crate::error::{ParError, Result};

/// Fixed 2-D sine-cosine encoding, `[ht·wt, d]`: the first half of the
/// features encodes the row, the second half the column.
pub fn sincos_2d<T: Scalar>(ht: usize, wt: usize, d: usize) -> Result<Tensor<T>> {
    if d % 4 != 0 {
        return Err(ParError::contract(format!("positional width {d} must be divisible by 4")));
    }
    let q = d / 4;
    let freq = |i: usize| 1.0 / 10000f64.powf(i as f64 / q as f64);
    Ok(Tensor::from_fn(&[ht * wt, d], |idx| {
        let (pos, f) = (idx / d, idx % d);
        let (coord, f) = if f < d / 2 { (pos / wt, f) } else { (pos % wt, f - d / 2) };
        let a = coord as f64 * freq(f % q);
        T::lit(if f < q { a.sin() } else { a.cos() })
    }))
}
