use super::graph::{Graph, Var};
use super::params::{ParamSet, ParamVars};
use super::NumError;

/// Gradient magnitude below which errors are measured in absolute terms.
/// Central differences of an `O(1)` loss carry roundoff near `ε/h`, so
/// smaller entries cannot be resolved at the usual step sizes.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest relative error per parameter tensor, in name order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn evaluate<F, E>(loss_fn: &F, params: &ParamSet) -> Result<(f64, Graph, ParamVars, Var), E>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var, E>,
    E: From<NumError>,
{
    let mut graph = Graph::new();
    let vars = params.bind(&mut graph);
    let root = loss_fn(&mut graph, &vars)?;
    let value = graph.value(root).item().ok_or_else(|| NumError::NonScalarRoot(graph.dims(root).to_vec()))?;
    if !value.is_finite() {
        return Err(NumError::NonFiniteLoss(value).into());
    }
    Ok((value, graph, vars, root))
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(L(p + h) − L(p − h)) / 2h` for every parameter entry.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn finite_diff_check<F, E>(loss_fn: F, params: &ParamSet, step: f64, tol: f64) -> Result<GradReport, E>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var, E>,
    E: From<NumError>,
{
    if !(step > 0.0) {
        return Err(NumError::BadShape(format!("finite-difference step must be positive, got {step}")).into());
    }
    let (_, graph, vars, root) = evaluate(&loss_fn, params)?;
    let grads = graph.backward(root)?;
    let analytic = params.collect_grads(&vars, &grads);
    drop(graph);

    let mut probe = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0f64;
    for (name, tensor) in params.iter() {
        let g = analytic.get(name).expect("gradient for every parameter");
        let mut worst = 0.0f64;
        for idx in 0..tensor.len() {
            let original = tensor.data()[idx];
            probe.get_mut(name).expect("probe param").data_mut()[idx] = original + step;
            let plus = evaluate(&loss_fn, &probe)?.0;
            probe.get_mut(name).expect("probe param").data_mut()[idx] = original - step;
            let minus = evaluate(&loss_fn, &probe)?.0;
            probe.get_mut(name).expect("probe param").data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = g.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((name.to_string(), worst));
    }
    Ok(GradReport { per_param, max_rel_error, tolerance: tol, pass: max_rel_error < tol })
}
