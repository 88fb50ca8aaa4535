//! Central finite-difference gradient checking in `f64`.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between the autodiff gradient of the scalar map `f`
/// at `point` and its central-difference estimate with the given `step`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let errs = grad_check_inputs(|g, vars| f(g, vars[0]), std::slice::from_ref(point), step)?;
    Ok(errs[0])
}

/// Like [`grad_check`] for a map of several tensors; returns one maximum
/// relative error per input.
pub fn grad_check_inputs<F>(f: F, points: &[Tensor<f64>], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.input(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::shape(format!(
                "gradient check needs a scalar map, got {:?}",
                v.shape()
            )));
        }
        let s = v.data()[0];
        if !s.is_finite() {
            return Err(Error::NonFinite("gradient check objective".into()));
        }
        Ok(s)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();

    let mut errors = Vec::with_capacity(points.len());
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..points[k].numel() {
            let orig = points[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(a.data()[i], numeric));
        }
        errors.push(worst);
    }
    Ok(errors)
}
