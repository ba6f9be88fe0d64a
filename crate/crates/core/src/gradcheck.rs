//! Central finite-difference verification of tape gradients.

use crate::error::{Result, SeidError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    pub checked: usize,
    /// entries skipped because the two one-sided differences disagree
    /// (nondifferentiable points such as relu kinks / max-pool ties)
    pub skipped: usize,
}

/// Check analytic gradients of a scalar-valued function of one tensor.
///
/// Error per entry is |analytic - numeric| / max(|analytic|, |numeric|, 1):
/// relative for O(1)-or-larger gradients, absolute below that, so that
/// finite-difference rounding noise on near-zero entries (|numeric| around
/// eps_machine * |f| / step) does not drown the comparison.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(&[x.clone()], |tape, vars| f(tape, vars[0]), step, tolerance)
}

/// Multi-input variant: every input is checked entry by entry.
pub fn grad_check_multi<F>(
    inputs: &[Tensor],
    f: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(SeidError::contract("grad_check: step must be positive".to_string()));
    }
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).scalar_value()
    };

    // analytic gradients in one pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(SeidError::contract(format!(
            "grad_check: function must be scalar-valued, got shape {}",
            tape.value(out).shape
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.grad(&tape, v)).collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.data.len() {
            let orig = input.data[j];
            work[ti].data[j] = orig + step;
            let f_plus = eval(&work)?;
            work[ti].data[j] = orig - step;
            let f_minus = eval(&work)?;
            work[ti].data[j] = orig;
            let f_mid = eval(&work)?;

            // one-sided slopes; strong disagreement marks a kink
            let d_plus = (f_plus - f_mid) / step;
            let d_minus = (f_mid - f_minus) / step;
            let scale = d_plus.abs().max(d_minus.abs()).max(1.0);
            if (d_plus - d_minus).abs() > 1e-3 * scale {
                skipped += 1;
                continue;
            }

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[ti].data[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        pass: max_rel <= tolerance,
        checked,
        skipped,
    })
}
