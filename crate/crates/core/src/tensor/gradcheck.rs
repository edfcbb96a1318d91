//! Central finite-difference checks of reverse-mode gradients in f64.

use super::{Graph, ParamId, ParamStore, TensorError, Var};

/// `|a - n| / max(|a|, |n|)` over whole vectors; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Number of tensor entries perturbed.
    pub checked: usize,
    pub analytic_norm: f64,
    pub rel_error: f64,
}

/// Compares the backward pass of `loss` against central differences with
/// step `h` for each parameter in `ids`. At most `max_entries` evenly
/// spaced entries of each tensor are perturbed.
pub fn check_parameters<E, F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    max_entries: usize,
    h: f64,
    loss: F,
) -> Result<Vec<GradCheck>, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let grads = g.backward(l, store)?;
    let eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new();
        let l = loss(&mut g, s)?;
        Ok(g.value(l).item())
    };
    let mut work = store.clone();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.tensor(id).len();
        let step = n.div_ceil(max_entries.max(1)).max(1);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in (0..n).step_by(step) {
            let orig = store.tensor(id).data()[i];
            work.tensor_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.tensor_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.tensor_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
            analytic.push(grads.param(id).data()[i]);
        }
        out.push(GradCheck {
            name: store.get(id).name.clone(),
            checked: analytic.len(),
            analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    Ok(out)
}
