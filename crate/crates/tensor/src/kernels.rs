//! Slice-level forward/backward kernels used by the tape.

use crate::scalar::Scalar;

/// Boundary handling for convolutions. Height is always zero padded;
/// `CircularWidth` wraps the width axis, which is what an equirectangular
/// raster needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Zero,
    CircularWidth,
}

/// Geometry linking a "big" grid (conv input / transposed-conv output)
/// to a "small" grid (conv output / transposed-conv input).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub boundary: Boundary,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.small_h * self.small_w
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || y >= self.big_h as isize {
            return None;
        }
        let x = match self.boundary {
            Boundary::Zero => {
                if x < 0 || x >= self.big_w as isize {
                    return None;
                }
                x as usize
            }
            Boundary::CircularWidth => x.rem_euclid(self.big_w as isize) as usize,
        };
        Some((y as usize, x))
    }

    /// Unfold `big` (C×H×W) into `cols` (C·k·k × h·w).
    pub fn im2col<T: Scalar>(&self, big: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let ncol = self.col_cols();
        for c in 0..self.channels {
            let plane = &big[c * self.big_h * self.big_w..(c + 1) * self.big_h * self.big_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let out = &mut cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.small_h {
                        for ox in 0..self.small_w {
                            out[oy * self.small_w + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => plane[y * self.big_w + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add `cols` into `big`.
    pub fn col2im_add<T: Scalar>(&self, cols: &[T], big: &mut [T]) {
        let k = self.kernel;
        let ncol = self.col_cols();
        for c in 0..self.channels {
            let base = c * self.big_h * self.big_w;
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.small_h {
                        for ox in 0..self.small_w {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                big[base + y * self.big_w + x] += src[oy * self.small_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Normalizes each row of length `n` in place, returning per-row 1/σ.
pub fn layer_norm_rows<T: Scalar>(x: &mut [T], n: usize, eps: T) -> Vec<T> {
    let nf = T::lit(n as f64);
    x.chunks_mut(n)
        .map(|row| {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
            rstd
        })
        .collect()
}

pub fn layer_norm_backward<T: Scalar>(xhat: &[T], rstd: &[T], dy: &[T], dx: &mut [T], n: usize) {
    let nf = T::lit(n as f64);
    for (r, &s) in rstd.iter().enumerate() {
        let xh = &xhat[r * n..(r + 1) * n];
        let g = &dy[r * n..(r + 1) * n];
        let mean_g = g.iter().copied().sum::<T>() / nf;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / nf;
        for i in 0..n {
            dx[r * n + i] += s * (g[i] - mean_g - xh[i] * mean_gx);
        }
    }
}

pub fn softmax_rows<T: Scalar>(x: &mut [T], n: usize) {
    for row in x.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T], n: usize) {
    for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
        for i in 0..n {
            dr[i] += yr[i] * (gr[i] - dot);
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

/// Copies `src` (shape `shape`) into `dst` with axes reordered by `perm`.
pub fn permute_into<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize], dst: &mut [T]) {
    let in_strides = crate::tensor::strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for d in dst.iter_mut() {
        *d = src[offset];
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}
