use super::graph::{Graph, NodeId};
use super::tensor::Params;
use super::NumericsError;

/// Compare tape gradients against central finite differences.
///
/// `build` must construct the same scalar loss for any parameter values
/// (no data-dependent randomness), otherwise the comparison is meaningless.
/// Returns the worst relative error over every parameter coordinate,
/// measured as |analytic - numeric| / max(1, |numeric|).
pub fn finite_diff_check<F>(
    params: &Params,
    eps: f64,
    mut build: F,
) -> Result<f64, NumericsError>
where
    F: FnMut(&Params, &mut Graph) -> Result<NodeId, NumericsError>,
{
    let mut g = Graph::new();
    let loss = build(params, &mut g)?;
    let grads = g.backward(loss)?;

    let eval = |p: &Params, build: &mut F| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let loss = build(p, &mut g)?;
        Ok(g.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let mut scratch = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name)?.len();
        for i in 0..n {
            let orig = params.get(name)?.data()[i];
            scratch.get_mut(name)?.data_mut()[i] = orig + eps;
            let up = eval(&scratch, &mut build)?;
            scratch.get_mut(name)?.data_mut()[i] = orig - eps;
            let down = eval(&scratch, &mut build)?;
            scratch.get_mut(name)?.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.param(name)?.data()[i];
            let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
