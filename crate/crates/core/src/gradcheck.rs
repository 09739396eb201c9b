//! Central finite-difference check of analytic gradients on the `f64` path.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Rng};

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates dropped because the perturbation crossed a kink.
    pub skipped: usize,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Picks `n` coordinates among trainable parameters: one per tensor in
/// round-robin order, each at a uniformly random flat index.
pub fn sample_coords(params: &ParamStore<f64>, n: usize, rng: &mut Rng) -> Vec<(ParamId, usize)> {
    let ids = params.trainable_ids();
    if ids.is_empty() {
        return Vec::new();
    }
    let mut order = ids.clone();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // Fisher-Yates so the tensor visiting order is itself random
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for &id in &order {
            if out.len() == n {
                break;
            }
            let len = params.value(id).numel();
            out.push((id, rng.random_range(0..len)));
        }
    }
    out
}

fn evaluate<F>(params: &ParamStore<f64>, build: &F) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = build(&mut g)?;
    let v = g.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {v}")));
    }
    Ok((v, g.kink_signature().to_vec()))
}

/// Compares the backward pass of the scalar built by `build` with central
/// differences of step `fd_step` at each coordinate. A coordinate is skipped
/// when the two perturbed evaluations take different branches at some
/// non-differentiable point.
pub fn gradcheck<F>(
    params: &mut ParamStore<f64>,
    build: F,
    coords: &[(ParamId, usize)],
    fd_step: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {v}")));
        }
        g.backward(loss).into_param_grads()
    };
    let mut report = GradcheckReport { max_rel_error: 0.0, checked: 0, skipped: 0, worst: None };
    for &(id, idx) in coords {
        let x0 = params.value(id).data()[idx];
        params.get_mut(id).value.data_mut()[idx] = x0 + fd_step;
        let plus = evaluate(params, &build);
        params.get_mut(id).value.data_mut()[idx] = x0 - fd_step;
        let minus = evaluate(params, &build);
        params.get_mut(id).value.data_mut()[idx] = x0;
        let ((lp, kp), (lm, km)) = (plus?, minus?);
        if kp != km {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * fd_step);
        let a = analytic.get(id.index()).and_then(|g| g.as_ref()).map_or(0.0, |g| g.data()[idx]);
        let e = rel_error(a, numeric);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some((params.get(id).name.clone(), idx));
        }
    }
    Ok(report)
}
