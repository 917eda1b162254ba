//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only evaluates the forward function, so it stays independent
//! of every backward rule it checks.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    /// Added to the denominator of the relative error so that entries with
    /// vanishing gradients are judged on absolute error.
    pub floor: f64,
    /// Upper bound on checked entries per input (evenly strided).
    pub max_entries: usize,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            floor: 1e-6,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + floor)
}

/// Compares the tape gradient of scalar `f(inputs)` against central
/// differences for every input (subsampled by `opts.max_entries`).
pub fn check_gradients<T, F>(inputs: &[Tensor<T>], f: F, opts: FdOptions) -> Result<FdReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let analytic: Vec<Tensor<T>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&tape, &vars)?;
        let g = tape.backward(out)?;
        vars.iter().map(|&v| g.wrt(v)).collect()
    };
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        Ok(f(&tape, &vars)?.item().as_f64())
    };
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let stride = n.div_ceil(opts.max_entries.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = x.data()[j];
            work[i].data_mut()[j] = orig + T::lit(opts.step);
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - T::lit(opts.step);
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            // Recover the realized step: f32 cannot represent x ± h exactly.
            let h = (orig + T::lit(opts.step)).as_f64() - (orig - T::lit(opts.step)).as_f64();
            let numeric = (plus - minus) / h;
            let a = analytic[i].data()[j].as_f64();
            let err = rel_err(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report = FdReport {
                    max_rel_err: err.max(report.max_rel_err),
                    worst_input: i,
                    worst_entry: j,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
