//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used for the numeric side, so this is an
//! independent check on [`Tape::gradients`].

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Per-element relative error `|a - n| / max(|a|, |n|, floor)`.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_relative_error: f64,
}

/// Compares the tape gradient of scalar `f(x)` at `x0` against central
/// differences with step `h`.
pub fn check<F>(x0: &Tensor, h: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&tape, x)?;
        tape.gradients(y)?.wrt(x)
    };
    let eval = |x: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(x);
        Ok(f(&tape, v)?.item())
    };
    let mut numeric = Tensor::zeros(x0.shape());
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        numeric.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    let max_relative_error = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_relative_error,
    })
}
