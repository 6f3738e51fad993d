//! Central finite-difference gradient checks (double precision).

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error used by every check: `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Largest relative error between the tape gradient of `f` at `x` and a
/// central difference with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Same as [`grad_check`] over several inputs at once; the maximum is taken
/// over every coordinate of every input.
///
/// Fails with [`Error::NonSmooth`] when a probe at `±h` lands on a different
/// relu/pooling branch than the base point, where no derivative exists to
/// compare against.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], tracked: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), tracked)).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let scalar = |tape: &Tape<f64>, out: Var| -> Result<f64> {
        tape.value(out).item().ok_or_else(|| Error::InvalidShape {
            op: "grad_check",
            msg: format!("function must return a scalar, got {:?}", tape.shape(out)),
        })
    };

    let (tape, vars, out) = eval(inputs, true)?;
    scalar(&tape, out)?;
    let pattern = tape.branch_pattern();
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("tracked input has a gradient").data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe[slot].data()[i];
            probe[slot].data_mut()[i] = orig + h;
            let kink = || Error::NonSmooth { input: slot, index: i };
            let (t, _, o) = eval(&probe, false)?;
            let plus = scalar(&t, o)?;
            if t.branch_pattern() != pattern {
                return Err(kink());
            }
            probe[slot].data_mut()[i] = orig - h;
            let (t, _, o) = eval(&probe, false)?;
            let minus = scalar(&t, o)?;
            if t.branch_pattern() != pattern {
                return Err(kink());
            }
            probe[slot].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
