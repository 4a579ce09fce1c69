//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero pairs from
/// blowing up on rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// `(f(x + h) - f(x - h)) / 2h` where `f` evaluates the loss at an offset.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let plus = f(h)?;
    let minus = f(-h)?;
    Ok((plus - minus) / (2.0 * h))
}

#[derive(Debug, Clone, Copy)]
pub struct Report {
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Compares tape gradients of `build(inputs)` with central differences at
/// every input coordinate.
pub fn check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<Report>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]).expect("inputs require grad");
        for idx in 0..input.numel() {
            let numeric = central_difference(
                |dx| {
                    let mut shifted = inputs.to_vec();
                    shifted[which].data_mut()[idx] += dx;
                    eval(&shifted)
                },
                h,
            )?;
            worst = worst.max(relative_error(analytic.data()[idx], numeric));
            checked += 1;
        }
    }
    Ok(Report {
        max_relative_error: worst,
        checked,
    })
}
