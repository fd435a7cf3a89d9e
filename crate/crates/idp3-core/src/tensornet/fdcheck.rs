//! Central-difference verification of recorded gradients.
//!
//! `finite_diff_check` rebuilds the model closure O(2 * numel) times, so it
//! is meant for small test models, not for production-sized networks.

use super::graph::{Graph, NodeId};
use super::optim::ParamSet;
use super::TensornetError;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Number of scalar entries compared.
    pub checked: usize,
    pub tolerance: f64,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares recorded gradients of every trainable parameter against central
/// differences of the loss built by `build`. The relative error of entry i is
/// `|a - n| / max(1, |a|, |n|)`, which behaves like absolute error near zero
/// and relative error for large gradients.
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    build: F,
    tolerance: f64,
) -> Result<FiniteDiffReport, TensornetError>
where
    F: Fn(&mut Graph, &ParamSet) -> NodeId,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params);
    let base = g.scalar_value(loss)?;
    assert!(base.is_finite(), "loss must be finite at the checked point");
    g.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.gradient.data().to_vec()).collect();

    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        tolerance,
    };
    let ids: Vec<_> = params.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        if !params.get(*id).trainable {
            continue;
        }
        let numel = params.get(*id).value.numel();
        for i in 0..numel {
            let original = params.get(*id).value.data()[i];
            params.get_mut(*id).value.data_mut()[i] = original + FD_STEP;
            let plus = eval_loss(&build, params)?;
            params.get_mut(*id).value.data_mut()[i] = original - FD_STEP;
            let minus = eval_loss(&build, params)?;
            params.get_mut(*id).value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.get(*id).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn eval_loss<F>(build: &F, params: &ParamSet) -> Result<f64, TensornetError>
where
    F: Fn(&mut Graph, &ParamSet) -> NodeId,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params);
    g.scalar_value(loss)
}
