//! Central finite-difference checks of tape gradients (64-bit).
//!
//! The finite-difference side only ever runs forward evaluations, so it is
//! independent of the backward rules it validates.

use std::collections::BTreeMap;

use crate::params::ParamSet;
use crate::tape::{Bound, Tape, Var};
use crate::tensor::{Result, Tensor};

/// Components whose exact and estimated derivatives are both below this
/// magnitude are compared absolutely instead of relatively.
pub const ABS_FLOOR: f64 = 1e-7;

/// Estimates already this close are not refined.
const REFINE_BELOW: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Largest relative error over components above [`ABS_FLOOR`].
    pub max_rel_err: f64,
    /// Largest absolute error over components below [`ABS_FLOOR`].
    pub max_small_abs_err: f64,
    /// `name[index]` of the component with the largest relative error.
    pub worst: String,
    pub checked: usize,
    /// Squared norm of every parameter's analytic gradient.
    pub grad_norms: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol && self.max_small_abs_err <= ABS_FLOOR
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if scale < ABS_FLOOR {
            self.max_small_abs_err = self.max_small_abs_err.max(diff);
        } else if diff / scale > self.max_rel_err {
            self.max_rel_err = diff / scale;
            self.worst = format!("{name}[{index}] analytic {analytic:e} numeric {numeric:e}");
        }
    }
}

fn evaluate<F>(params: &ParamSet<f64>, f: &F) -> Result<f64>
where
    F: for<'t, 'p> Fn(&'t Tape<f64>, &Bound<'t, 'p, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let bound = tape.bind(params);
    Ok(f(&tape, &bound)?.value().item())
}

/// Compares reverse-mode parameter gradients of the scalar `f` against
/// central differences with step `h`. At most `per_tensor` evenly spaced
/// entries of each parameter are perturbed (`None` checks every entry).
pub fn check_params<F>(params: &ParamSet<f64>, f: F, h: f64, per_tensor: Option<usize>) -> Result<GradCheckReport>
where
    F: for<'t, 'p> Fn(&'t Tape<f64>, &Bound<'t, 'p, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let bound = tape.bind(params);
    let loss = f(&tape, &bound)?;
    let grads = tape.backward(loss, &bound)?;
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for (name, g) in &grads {
        report.grad_norms.insert(name.clone(), g.dot(g));
        for idx in sample_indices(g.len(), per_tensor) {
            let orig = work.get(name).unwrap().data()[idx];
            let numeric = refined(g.data()[idx], h, |step| {
                work.get_mut(name).unwrap().data_mut()[idx] = orig + step;
                let up = evaluate(&work, &f)?;
                work.get_mut(name).unwrap().data_mut()[idx] = orig - step;
                let down = evaluate(&work, &f)?;
                work.get_mut(name).unwrap().data_mut()[idx] = orig;
                Ok((up - down) / (2.0 * step))
            })?;
            report.record(name, idx, g.data()[idx], numeric);
        }
    }
    Ok(report)
}

/// Same as [`check_params`] but differentiates with respect to plain input
/// tensors recorded as tape leaves.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let run = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.grad_of(loss, &vars)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        let name = format!("input{i}");
        report.grad_norms.insert(name.clone(), g.dot(g));
        for idx in 0..g.len() {
            let orig = work[i].data()[idx];
            let numeric = refined(g.data()[idx], h, |step| {
                work[i].data_mut()[idx] = orig + step;
                let up = run(&work)?;
                work[i].data_mut()[idx] = orig - step;
                let down = run(&work)?;
                work[i].data_mut()[idx] = orig;
                Ok((up - down) / (2.0 * step))
            })?;
            report.record(&name, idx, g.data()[idx], numeric);
        }
    }
    Ok(report)
}

fn mismatch(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FLOOR {
        diff / ABS_FLOOR
    } else {
        diff / scale
    }
}

/// Central difference at `h`, retried at `h/10`, `h/100` and `10h` when it
/// disagrees with `analytic`; the closest estimate wins. Kink crossings and
/// truncation error shrink with a smaller step, rounding error with a larger
/// one, while a wrong backward rule fails at every step.
fn refined(analytic: f64, h: f64, mut central: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut best = central(h)?;
    for step in [h / 10.0, h / 100.0, h * 10.0] {
        if mismatch(analytic, best) <= REFINE_BELOW {
            break;
        }
        let est = central(step)?;
        if mismatch(analytic, est) < mismatch(analytic, best) {
            best = est;
        }
    }
    Ok(best)
}

fn sample_indices(len: usize, per_tensor: Option<usize>) -> Vec<usize> {
    match per_tensor {
        Some(k) if k < len => {
            let mut v: Vec<usize> = (0..k).map(|i| i * len / k).collect();
            v.dedup();
            v
        }
        _ => (0..len).collect(),
    }
}
