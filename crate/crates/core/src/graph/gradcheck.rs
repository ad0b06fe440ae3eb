use serde::Serialize;

use super::{Bindings, Graph, Mode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coordinates with gradients below this magnitude are compared on an
/// absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub node: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares the reverse-mode gradient of the graph's loss with respect to a
/// tap or parameter against central differences, coordinate by coordinate.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn gradcheck(
    graph: &Graph<f64>,
    bindings: &Bindings<'_, f64>,
    mode: Mode,
    node: &str,
    step: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    gradcheck_with(graph, bindings, mode, node, step, tolerance, |g, t, n| {
        g.backward(t, None, &[n]).and_then(|mut b| b.take(n))
    })
}

/// Same as [`gradcheck`], but with the analytic gradient supplied by
/// `analytic` (used to exercise the checker against broken rules).
pub fn gradcheck_with<F>(
    graph: &Graph<f64>,
    bindings: &Bindings<'_, f64>,
    mode: Mode,
    node: &str,
    step: f64,
    tolerance: f64,
    analytic: F,
) -> Result<GradcheckReport>
where
    F: Fn(&Graph<f64>, &super::Trace<f64>, &str) -> Result<Tensor<f64>>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gradcheck step must be > 0, got {step}"
        )));
    }
    let trace = graph.forward(bindings, mode)?;
    let grad = analytic(graph, &trace, node)?;

    let is_tap = graph.tap_node(node).is_ok();
    let mut numeric = Tensor::<f64>::zeros(grad.shape());
    if is_tap {
        let mut probe = Tensor::<f64>::zeros(grad.shape());
        for i in 0..probe.len() {
            probe.data_mut()[i] = step;
            let plus = {
                let b = bindings.clone_with_offset(node, &probe);
                graph.forward(&b, mode)?.loss(graph)?
            };
            probe.data_mut()[i] = -step;
            let minus = {
                let b = bindings.clone_with_offset(node, &probe);
                graph.forward(&b, mode)?.loss(graph)?
            };
            probe.data_mut()[i] = 0.0;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
    } else {
        let mut g = graph.clone();
        graph.param_value(node)?;
        for i in 0..numeric.len() {
            let orig = g.param_value(node)?.data()[i];
            g.param_value_mut(node)?.data_mut()[i] = orig + step;
            let plus = g.forward(bindings, mode)?.loss(&g)?;
            g.param_value_mut(node)?.data_mut()[i] = orig - step;
            let minus = g.forward(bindings, mode)?.loss(&g)?;
            g.param_value_mut(node)?.data_mut()[i] = orig;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
    }

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for (&a, &n) in grad.data().iter().zip(numeric.data()) {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(RELATIVE_FLOOR);
        max_rel = max_rel.max(rel);
        max_abs = max_abs.max(abs);
    }
    Ok(GradcheckReport {
        node: node.to_string(),
        coordinates: grad.len(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        tolerance,
        pass: max_rel <= tolerance,
    })
}
