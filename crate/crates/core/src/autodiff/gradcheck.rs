use std::fmt;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst relative error for one tensor.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub tol: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tol)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let verdict = if e.max_rel_err < self.tol {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{:<48} {:>6} entries  rel_err {:.3e}  {verdict}",
                e.name, e.checked, e.max_rel_err
            )?;
        }
        write!(f, "worst {:.3e} (tol {:.1e})", self.worst(), self.tol)
    }
}

/// Relative discrepancy between analytic and numeric gradients of one tensor:
/// `max|a - n| / max(max|a|, max|n|)`, with a tiny floor for all-zero gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|x| x.abs())
        .fold(1e-10, f64::max);
    diff / scale
}

/// Up to `limit` evenly strided indices into `0..n`.
fn sample_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let (r, c) = g.shape(v);
    if (r, c) != (1, 1) {
        return Err(Error::shape(
            "grad_check",
            format!("loss must be 1x1, got {r}x{c}"),
        ));
    }
    Ok(g.value(v).item())
}

/// Central-difference check of every parameter in `store` against reverse mode.
pub fn check_params(
    store: &mut ParamStore,
    h: f64,
    tol: f64,
    max_entries: Option<usize>,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    scalar_of(&g, loss)?;
    let grads = g.backward(loss)?;
    let mut analytic_all = std::collections::HashMap::new();
    for (path, var) in g.bound_params() {
        if let Some(gr) = grads.get(*var) {
            analytic_all.insert(path.clone(), gr.to_vec());
        }
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let l = f(&mut g, s)?;
        scalar_of(&g, l)
    };
    let paths: Vec<String> = store.paths().map(String::from).collect();
    let mut entries = Vec::new();
    for path in paths {
        let n = store.get(&path).unwrap().len();
        let idx = sample_indices(n, max_entries);
        let full = analytic_all.remove(&path).unwrap_or_else(|| vec![0.0; n]);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &k in &idx {
            let orig = store.get(&path).unwrap().value[k];
            store.get_mut(&path).unwrap().value[k] = orig + h;
            let up = eval(store)?;
            store.get_mut(&path).unwrap().value[k] = orig - h;
            let down = eval(store)?;
            store.get_mut(&path).unwrap().value[k] = orig;
            analytic.push(full[k]);
            numeric.push((up - down) / (2.0 * h));
        }
        entries.push(GradEntry {
            name: path,
            max_rel_err: relative_error(&analytic, &numeric),
            checked: idx.len(),
        });
    }
    Ok(GradReport { entries, tol })
}

/// Central-difference check with respect to free input tensors.
pub fn check_inputs(
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    scalar_of(&g, loss)?;
    let grads = g.backward(loss)?;
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        scalar_of(&g, l)
    };
    let mut work = inputs.to_vec();
    let mut entries = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].data().len();
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = Vec::with_capacity(n);
        for k in 0..n {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        entries.push(GradEntry {
            name: format!("input{i}"),
            max_rel_err: relative_error(&analytic, &numeric),
            checked: n,
        });
    }
    Ok(GradReport { entries, tol })
}
