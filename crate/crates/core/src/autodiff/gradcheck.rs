use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-6;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all inputs and entries.
    pub max_rel_err: f64,
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor of 1e-3 on the denominator, so that entries
/// whose true gradient is ~0 are judged by absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares the tape gradient of the scalar function `f` at `inputs` with
/// central finite differences (`h = 1e-6`).
///
/// `f` receives a fresh tape and one `requires_grad` leaf per input and
/// must return a `1 x 1` variable. Errors from `f` propagate.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| tape.grad(*v).cloned().expect("leaf gradient"))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).get(0, 0))
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[k], numeric));
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_err: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    })
}
