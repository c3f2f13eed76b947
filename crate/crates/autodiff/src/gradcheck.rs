//! Central finite-difference verification of recorded gradients.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Entries whose analytic and numeric magnitudes are both below this floor
/// are compared in absolute terms against it.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input, in input order.
    pub per_input: Vec<f64>,
    /// Number of scalar entries probed.
    pub probes: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().cloned().fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h` for every entry of every input.
///
/// `build` receives a fresh graph and one leaf per input and must return a
/// scalar.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], h: f64) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut probes = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut worst: f64 = 0.0;
        for idx in 0..inputs[k].len() {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let fp = eval(&work);
            work[k].data_mut()[idx] = orig - h;
            let fm = eval(&work);
            work[k].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[idx], numeric));
            probes += 1;
        }
        per_input.push(worst);
    }
    GradCheckReport { per_input, probes }
}
