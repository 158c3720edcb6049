//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients with finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input index, flat entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Floor under the relative-error denominator, so entries whose true
/// gradient is zero are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences with step `h`, for every entry of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("leaf gradient").to_vec())
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Finite-difference check over parameters held in a [`ParamStore`].
///
/// `f` must rebuild the whole forward pass from `store` on the graph it is
/// given. Every entry of every non-frozen parameter is checked; `stride`
/// > 1 checks every `stride`-th entry instead.
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    h: f64,
    stride: usize,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    store.zero_grad();
    store.accumulate_grads(&g);

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    for id in ids {
        let analytic = store.grad(id).to_vec();
        for j in (0..analytic.len()).step_by(stride.max(1)) {
            let x0 = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = x0 + h;
            let up = eval_scalar(store, &f)?;
            store.value_mut(id).data_mut()[j] = x0 - h;
            let down = eval_scalar(store, &f)?;
            store.value_mut(id).data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((id.0, j, a, numeric));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}

fn eval_scalar<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    Ok(g.value(out).item())
}
