use par_tensor::{Scalar, Tensor};

use crate::error::{ParError, Result};

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(ParError::contract(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Rotates `x` by `v` along `axis`: `out[.., u, ..] = x[.., (u − v) mod n, ..]`.
pub fn cyclic_shift_axis<T: Scalar>(x: &Tensor<T>, axis: usize, v: isize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split(x.shape(), axis)?;
    let s = v.rem_euclid(n as isize) as usize;
    if s == 0 {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        let block = &src[o * n * inner..(o + 1) * n * inner];
        out.extend_from_slice(&block[(n - s) * inner..]);
        out.extend_from_slice(&block[..(n - s) * inner]);
    }
    Ok(Tensor::new(x.shape(), out)?)
}

/// [`cyclic_shift_axis`] on the trailing (width) axis.
pub fn cyclic_shift<T: Scalar>(x: &Tensor<T>, v: isize) -> Result<Tensor<T>> {
    cyclic_shift_axis(x, x.ndim() - 1, v)
}

/// Pad width `r·W/2` in columns, validated to be a non-negative integer.
pub fn pad_width(r: f64, width: usize) -> Result<usize> {
    let p = r * width as f64 / 2.0;
    if !(r >= 0.0) || !p.is_finite() || (p - p.round()).abs() > 1e-9 {
        return Err(ParError::contract(format!(
            "padding ratio r={r} on width W={width} gives non-integer pad width {p}"
        )));
    }
    Ok(p.round() as usize)
}

/// Wraps `pad` columns from each side of `axis` onto the other side.
pub fn circular_pad_axis<T: Scalar>(x: &Tensor<T>, axis: usize, pad: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split(x.shape(), axis)?;
    if pad > n {
        return Err(ParError::contract(format!("pad {pad} exceeds axis length {n}")));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(outer * (n + 2 * pad) * inner);
    for o in 0..outer {
        let block = &src[o * n * inner..(o + 1) * n * inner];
        out.extend_from_slice(&block[(n - pad) * inner..]);
        out.extend_from_slice(block);
        out.extend_from_slice(&block[..pad * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = n + 2 * pad;
    Ok(Tensor::new(&shape, out)?)
}

/// Circular padding by ratio `r` on the trailing axis: width becomes `(1+r)·W`.
pub fn circular_pad<T: Scalar>(x: &Tensor<T>, r: f64) -> Result<Tensor<T>> {
    let axis = x.ndim() - 1;
    circular_pad_axis(x, axis, pad_width(r, x.dim(axis))?)
}

/// Drops `pad` entries from both ends of `axis`.
pub fn crop_padding_axis<T: Scalar>(x: &Tensor<T>, axis: usize, pad: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split(x.shape(), axis)?;
    if 2 * pad >= n {
        return Err(ParError::contract(format!("cannot crop {pad} from each side of length {n}")));
    }
    let keep = n - 2 * pad;
    let src = x.data();
    let mut out = Vec::with_capacity(outer * keep * inner);
    for o in 0..outer {
        let base = o * n * inner + pad * inner;
        out.extend_from_slice(&src[base..base + keep * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = keep;
    Ok(Tensor::new(&shape, out)?)
}

/// Inverse of [`circular_pad`] given the padded tensor and the original ratio.
pub fn crop_padding<T: Scalar>(x: &Tensor<T>, r: f64) -> Result<Tensor<T>> {
    let axis = x.ndim() - 1;
    let padded = x.dim(axis) as f64;
    let original = padded / (1.0 + r);
    if (original - original.round()).abs() > 1e-9 {
        return Err(ParError::contract(format!("width {padded} is not (1+{r})·W for integer W")));
    }
    crop_padding_axis(x, axis, pad_width(r, original.round() as usize)?)
}
