use rayon::prelude::*;
use serde::Serialize;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms; central differences cannot resolve them any better.
const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.max_rel_err)
    }
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients against central finite differences.
///
/// `f` builds a scalar loss from the registered parameter handles, in the
/// order given by `params`. It must be deterministic: the base loss is
/// evaluated twice and any difference is reported as a contract error.
pub fn grad_check<T, F>(
    f: F,
    params: &[(String, Tensor<T>)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var> + Sync,
{
    let tensors: Vec<Tensor<T>> = params.iter().map(|(_, t)| t.clone()).collect();

    let mut graph = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    let base = graph.value(loss).item();
    graph.backward(loss)?;

    let again = evaluate(&f, &tensors)?;
    if again.to_f64_lossy().to_bits() != base.to_f64_lossy().to_bits() {
        return Err(Error::Contract(format!(
            "loss builder is not deterministic ({base} then {again})"
        )));
    }

    let mut checks = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = graph
            .grad(vars[pi])
            .unwrap_or_else(|| Tensor::zeros_like(tensor));
        let numeric: Vec<f64> = (0..tensor.numel())
            .into_par_iter()
            .map(|e| -> Result<f64> {
                let mut shifted = tensors.clone();
                let x0 = tensor.data()[e];
                shifted[pi].data_mut()[e] = x0 + T::of(h);
                let plus = evaluate(&f, &shifted)?.to_f64_lossy();
                shifted[pi].data_mut()[e] = x0 - T::of(h);
                let minus = evaluate(&f, &shifted)?.to_f64_lossy();
                Ok((plus - minus) / (2.0 * h))
            })
            .collect::<Result<_>>()?;

        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for (e, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
            let a = a.to_f64_lossy();
            let err = relative_error(a, n);
            if err > check.max_rel_err || (e == 0 && check.max_rel_err == 0.0) {
                check.max_rel_err = err;
                check.worst_index = e;
                check.analytic = a;
                check.numeric = n;
            }
        }
        check.passed = check.max_rel_err < tol && check.max_rel_err.is_finite();
        checks.push(check);
    }
    Ok(GradCheckReport {
        h,
        tol,
        params: checks,
    })
}

fn evaluate<T, F>(f: &F, tensors: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| graph.constant(t.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    let v = graph.value(loss);
    if !v.is_scalar() {
        return Err(Error::Contract("grad_check loss must be scalar".into()));
    }
    Ok(v.item())
}
