//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `loss_fn`'s backward pass against central differences.
///
/// `loss_fn` receives a fresh graph and one leaf per parameter and must
/// return a scalar. Kernel bandwidths picked during the analytic pass are
/// replayed in every probe. `max_per_param` limits how many coordinates of
/// each parameter are probed (evenly strided); `None` probes all of them.
pub fn gradcheck<F>(
    loss_fn: F,
    params: &[(String, Tensor)],
    eps: f64,
    tol: f64,
    max_per_param: Option<usize>,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Shape("gradcheck loss must be scalar".into()));
    }
    let grads = g.backward(loss);
    let bandwidths = g.recorded_bandwidths().to_vec();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut probe = Graph::with_bandwidth_replay(bandwidths.clone());
        let vars: Vec<Var> = values.iter().map(|t| probe.param(t.clone())).collect();
        let l = loss_fn(&mut probe, &vars)?;
        Ok(probe.value(l).item())
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradcheckReport {
        eps,
        tolerance: tol,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        let n = tensor.len();
        let stride = match max_per_param {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_abs_error: 0.0,
            max_rel_error: 0.0,
        };
        for i in (0..n).step_by(stride) {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + eps;
            let plus = eval(&values)?;
            values[pi].data_mut()[i] = orig - eps;
            let minus = eval(&values)?;
            values[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            check.checked += 1;
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
        }
        report.params.push(check);
    }
    Ok(report)
}
