use super::{Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `h`. Relative error per coordinate is
/// `|a - n| / max(1e-8, |a| + |n|)`.
///
/// Coordinates for which `skip(input, index)` is true are ignored, which lets
/// callers avoid evaluating a kink.
pub fn grad_check<F, S>(inputs: &[Tensor], f: F, h: f64, skip: S) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    S: Fn(usize, usize) -> bool,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?.value();
        if out.len() != 1 {
            bail!(Argument, "grad_check needs a scalar function");
        }
        Ok(out.item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut res = GradCheck {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        checked: 0,
    };
    for a in 0..inputs.len() {
        for i in 0..inputs[a].len() {
            if skip(a, i) {
                continue;
            }
            let x0 = inputs[a].data()[i];
            work[a].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[a].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[a].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic[a].data()[i];
            let err = (numeric - exact).abs();
            res.max_abs_err = res.max_abs_err.max(err);
            res.max_rel_err = res.max_rel_err.max(err / (numeric.abs() + exact.abs()).max(1e-8));
            res.checked += 1;
        }
    }
    Ok(res)
}
