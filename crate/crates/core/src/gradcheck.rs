//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Gradients, Var};
use crate::params::ParamStore;

/// Largest parameter count accepted; every scalar costs two forward passes.
pub const MAX_CHECKED_SCALARS: usize = 10_000;

/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding do not blow the ratio up.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            let mark = if p.max_rel_err < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<28} n={:<6} max_rel_err={:.3e} max_abs_err={:.3e} {}",
                p.name, p.scalars, p.max_rel_err, p.max_abs_err, mark
            )?;
        }
        write!(
            f,
            "gradcheck {} (max rel err {:.3e}, tolerance {:.1e})",
            if self.passed { "PASSED" } else { "FAILED" },
            self.max_rel_err(),
            self.tolerance
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub fn fd_step(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

/// Compares `backward` against central differences with step
/// `1e-5 * max(1, |theta|)` for every scalar of every parameter.
///
/// `loss_fn` must be deterministic. `corrupt`, when set, is added to every
/// analytic gradient entry before comparison; it exists to prove the check
/// can fail.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    loss_fn: F,
    tolerance: f64,
    corrupt: Option<f64>,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(ComputeGraph, Var)>,
{
    let total = params.scalar_count();
    if total > MAX_CHECKED_SCALARS {
        return Err(Error::Usage(format!(
            "finite-difference check limited to {MAX_CHECKED_SCALARS} scalars, got {total}"
        )));
    }

    let (graph, out) = loss_fn(params)?;
    let base = graph.value(out).item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss is {base} at the unperturbed point")));
    }
    let analytic: Gradients = graph.backward(out)?;

    let eval = |p: &ParamStore| -> Result<f64> {
        let (g, o) = loss_fn(p)?;
        g.value(o).item()
    };

    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let grad = analytic.get(name).ok_or_else(|| {
            Error::Usage(format!("loss_fn did not register parameter `{name}` in its graph"))
        })?;
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..tensor.len() {
            let theta = tensor.values()[j];
            let h = fd_step(theta);
            work.get_mut(name).expect("cloned store").values_mut()[j] = theta + h;
            let plus = eval(&work)?;
            work.get_mut(name).expect("cloned store").values_mut()[j] = theta - h;
            let minus = eval(&work)?;
            work.get_mut(name).expect("cloned store").values_mut()[j] = theta;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became {plus}/{minus} when perturbing {name}[{j}] = {theta} by ±{h}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.values()[j] + corrupt.unwrap_or(0.0);
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        report.push(ParamCheck {
            name: name.to_string(),
            scalars: tensor.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let passed = report.iter().all(|p| p.max_rel_err < tolerance);
    Ok(GradCheckReport {
        tolerance,
        params: report,
        passed,
    })
}
