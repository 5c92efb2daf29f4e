//! Central finite-difference checks against tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative error between an analytic and a numeric derivative. Below
/// `floor` in magnitude the absolute difference is used instead, since
/// both are then dominated by finite-difference rounding.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < floor {
        diff / floor
    } else {
        diff / scale
    }
}

/// Compares tape gradients of `f` at `inputs` with central differences of
/// step `h`. `f` must map its input variables to a one-element output.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.scalar_value(out))
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for k in 0..inputs[which].len() {
            let orig = inputs[which].data()[k];
            probe[which].data_mut()[k] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[k] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[k];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric, 1e-6));
            report.checked += 1;
        }
    }
    Ok(report)
}
