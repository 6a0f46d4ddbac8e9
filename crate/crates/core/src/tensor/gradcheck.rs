//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that entries whose true
/// gradient is ~0 are judged on absolute error.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares `d f / d inputs` from the tape against central differences with
/// step `h`. `f` must build a scalar on the tape from the given leaves.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().trainable())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ts.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.scalar(l))
    };

    let mut out = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for i in 0..inputs[ti].data.len() {
            let orig = work[ti].data[i];
            work[ti].data[i] = orig + h;
            let up = eval(&work)?;
            work[ti].data[i] = orig - h;
            let down = eval(&work)?;
            work[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            out.max_rel_error = out.max_rel_error.max(rel_error(analytic[i], numeric));
            out.max_abs_error = out.max_abs_error.max((analytic[i] - numeric).abs());
            out.checked += 1;
        }
    }
    Ok(out)
}
