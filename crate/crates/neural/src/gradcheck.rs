//! Central finite-difference verification of backward passes (64-bit only).

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

/// Denominator floor so that near-zero gradients are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name or `input[i]`, with the flat element index.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn eval<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    Ok(g.scalar(loss))
}

/// Compares the analytic gradient of the scalar produced by `build` against
/// central differences, over every parameter in `store` and every element of
/// `inputs`.
pub fn grad_check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(store, inputs, build, |_, _| {})
}

/// [`grad_check`] with a hook run on the analytic graph before backward,
/// e.g. to inject a deliberate fault.
pub fn grad_check_with<F, H>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    build: F,
    hook: H,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    H: FnOnce(&mut Graph<'_, f64>, Var),
{
    let mut g = Graph::new(store);
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    hook(&mut g, loss);
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let record = |report: &mut GradCheckReport, a: f64, n: f64, what: String| {
        let e = relative_error(a, n);
        report.checked += 1;
        if report.worst.is_empty() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = what;
        }
    };

    let mut probe = store.clone();
    for (id, p) in store.iter() {
        let analytic = grads.param(id).map(|t| t.data().to_vec());
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.value_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(&probe, inputs, &build)?;
            probe.value_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(&probe, inputs, &build)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.as_ref().map_or(0.0, |d| d[i]);
            record(&mut report, a, numeric, format!("{}[{i}]", p.name));
        }
    }

    let mut probe_inputs = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(|t| t.data().to_vec());
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe_inputs[k].data_mut()[i] = orig + STEP;
            let up = eval(store, &probe_inputs, &build)?;
            probe_inputs[k].data_mut()[i] = orig - STEP;
            let down = eval(store, &probe_inputs, &build)?;
            probe_inputs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.as_ref().map_or(0.0, |d| d[i]);
            record(&mut report, a, numeric, format!("input[{k}][{i}]"));
        }
    }
    Ok(report)
}
