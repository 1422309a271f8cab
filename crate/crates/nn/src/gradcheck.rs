//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::params::Params;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over coordinates of `|a − n| / max(1e-8, |a| + |n|)`.
    pub max_rel_error: f64,
    /// Coordinates checked.
    pub coordinates: usize,
    /// Location of the worst coordinate, e.g. `input 0 [12]` or `conv.weight [3]`.
    pub worst: Option<String>,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        self.coordinates += 1;
        if self.worst.is_none() || rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = Some(at());
        }
    }
}

/// Checks `f` against central differences with respect to every input.
///
/// `f` must build a scalar on the tape from the given input vars.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut params = Params::new();
    grad_check_with_params(|tape, _, vars| f(tape, vars), &mut params, inputs, h)
}

/// Checks `f` with respect to every input and every trainable parameter.
///
/// Parameters are perturbed in place and restored before returning.
pub fn grad_check_with_params<F>(
    f: F,
    params: &mut Params,
    inputs: &[Tensor],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Params, &[Var]) -> Result<Var>,
{
    let eval = |params: &Params, inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, params, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, params, &vars)?;
    let grads = tape.backward(out)?;
    let input_grads: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    let mut analytic = params.clone();
    analytic.zero_grads();
    grads.accumulate_into(&tape, &mut analytic)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, g) in input_grads.iter().enumerate() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(params, &work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(params, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(g.data()[j], numeric, || format!("input {i} [{j}]"));
        }
    }

    let ids: Vec<_> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for j in 0..params.value(id).len() {
            let orig = params.value(id).data()[j];
            params.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = eval(params, inputs);
            params.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = eval(params, inputs);
            params.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic.get(id).grad.data()[j];
            report.record(a, numeric, || format!("{} [{j}]", params.get(id).name));
        }
    }
    Ok(report)
}
