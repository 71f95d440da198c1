//! Central finite-difference gradient checker, used by the test suites.

use crate::tensor::{Tape, Tensor, Var};

/// Checks `d f / d input_i` for every input against central differences.
///
/// `f` builds a scalar from vars on a fresh tape; it is re-run for every
/// perturbed coordinate, so it must be deterministic.
pub fn check<G>(inputs: &[Tensor<f64>], f: G) -> f64
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    const H: f64 = 1e-6;
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = loss.backward().expect("backward");
    let eval = |inputs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        f(&tape, &vars).value().item().expect("scalar")
    };
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * H);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
