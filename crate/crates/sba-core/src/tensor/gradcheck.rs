//! Central finite-difference oracle for tape gradients.
//!
//! Given a builder that turns a flat parameter vector into a scalar loss,
//! the checker computes the analytic gradient once via the tape and compares
//! it elementwise against `(f(t + h e_i) - f(t - h e_i)) / 2h`. The builder
//! receives a plain (non-trainable) tensor during the difference evaluations,
//! so nothing is recorded there and the two paths stay independent.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Relative error with absolute floor: `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of `build` at `theta` and a
/// central finite-difference estimate with the given step.
pub fn finite_difference_check<F>(build: F, theta: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if step <= 0.0 {
        return Err(Error::Domain {
            op: "finite_difference_check",
            message: format!("step must be positive, got {step}"),
        });
    }

    // Analytic gradient through the tape.
    let tape = Tape::new();
    let params = Tensor::param(vec![theta.len()], theta.to_vec())?;
    let loss = build(&tape, &params)?;
    if !loss.is_scalar() {
        return Err(Error::Contract {
            op: "finite_difference_check",
            message: format!("builder must return a scalar, got {:?}", loss.shape()),
        });
    }
    tape.backward(&loss)?;
    let analytic = params.grad().unwrap_or_else(|| vec![0.0; theta.len()]);

    // Plain evaluation, no recording.
    let eval = |point: &[f64]| -> Result<f64> {
        let t = Tape::new();
        let p = Tensor::from_vec(vec![point.len()], point.to_vec())?;
        Ok(build(&t, &p)?.value())
    };

    let mut point = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        point[i] = theta[i] + step;
        let plus = eval(&point)?;
        point[i] = theta[i] - step;
        let minus = eval(&point)?;
        point[i] = theta[i];
        let fd = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], fd));
    }
    Ok(worst)
}
