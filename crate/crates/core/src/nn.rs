//! Parameterised building blocks shared by the codec and the PAR network.

use par_tensor::{Boundary, Bound, ParamId, ParamStore, RngStream, Scalar, Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Glorot-uniform weights, zero bias.
    Xavier,
    /// All zeros; used for AdaLN-Zero modulation and output projections.
    Zero,
}

fn xavier<T: Scalar>(rng: &mut RngStream, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_tensor(shape, -a, a)
}

/// `y = x W + b` on row-major `[n, in]` inputs.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut RngStream) -> Self {
        let w = match init {
            Init::Xavier => xavier(rng, &[fan_in, fan_out], fan_in, fan_out),
            Init::Zero => Tensor::zeros(&[fan_in, fan_out]),
        };
        Linear {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn apply<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.matmul(p[self.w])?.add_row(p[self.b])?)
    }
}

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            g: ps.add(format!("{name}.g"), Tensor::full(&[dim], T::one())),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[dim])),
        }
    }

    pub fn apply<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.layer_norm(LN_EPS)?.mul_row(p[self.g])?.add_row(p[self.b])?)
    }
}

/// Square-kernel convolution, optionally transposed.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub transpose: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        transpose: bool,
        rng: &mut RngStream,
    ) -> Self {
        let kk = kernel * kernel;
        let shape = if transpose {
            [c_in, c_out, kernel, kernel]
        } else {
            [c_out, c_in, kernel, kernel]
        };
        // Fan-in of a transposed conv is per output pixel, ≈ c_in·k²/stride².
        let fan_in = if transpose { c_in * kk / (stride * stride) } else { c_in * kk };
        let a = (3.0 / fan_in.max(1) as f64).sqrt();
        Conv {
            w: ps.add(format!("{name}.w"), rng.uniform_tensor(&shape, -a, a)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            pad,
            transpose,
        }
    }

    pub fn apply<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, boundary: Boundary) -> Result<Var<'t, T>> {
        let (w, b) = (p[self.w], Some(p[self.b]));
        Ok(if self.transpose {
            x.conv_transpose2d(w, b, self.stride, self.pad, boundary)?
        } else {
            x.conv2d(w, b, self.stride, self.pad, boundary)?
        })
    }
}
