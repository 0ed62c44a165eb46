//! Central finite-difference probes for gradient verification.

use crate::{Tape, Tensor, Var};

/// Relative error with an absolute floor, `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of a scalar function of one input tensor at element `index`.
pub fn central_difference(
    input: &Tensor<f64>,
    index: usize,
    step: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> f64 {
    let mut plus = input.clone();
    plus.data_mut()[index] += step;
    let mut minus = input.clone();
    minus.data_mut()[index] -= step;
    (f(&plus) - f(&minus)) / (2.0 * step)
}

/// Evaluates `build` on fresh tapes and compares its analytic input gradient
/// against central differences at every element. Returns the worst relative error.
pub fn max_gradient_error(
    inputs: &[Tensor<f64>],
    step: f64,
    build: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&tape, &vars);
    let grads = tape.grad_values(y, &vars);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let numeric = central_difference(input, i, step, |perturbed| {
                // Recording tape: `build` may take gradients internally.
                let t = Tape::new();
                let vs: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.leaf(if j == k { perturbed.clone() } else { x.clone() }))
                    .collect();
                build(&t, &vs).item()
            });
            worst = worst.max(rel_err(grads[k].data()[i], numeric, 1e-6));
        }
    }
    worst
}
