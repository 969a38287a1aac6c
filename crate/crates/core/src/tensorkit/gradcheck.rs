//! Central finite-difference validation of tape gradients. The finite
//! differences are computed by re-running the forward closure, so the
//! check stays independent of the backward implementation it audits.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensorkit::adam::ParameterSet;
use crate::tensorkit::tape::{Tape, ValueId};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl FiniteDiffReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Builds the scalar under test on a fresh tape. The map provides the
/// tape id of every registered parameter.
pub type BuildFn<'a> = dyn Fn(&mut Tape, &BTreeMap<String, ValueId>) -> Result<ValueId> + 'a;

fn eval_scalar(params: &ParameterSet, build: &BuildFn) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params.iter() {
        ids.insert(name.clone(), tape.leaf(t));
    }
    let root = build(&mut tape, &ids)?;
    let v = tape.value(root).data()[0];
    if !v.is_finite() {
        return Err(Error::Numerical(format!("objective is not finite: {v}")));
    }
    Ok(v)
}

/// Compares backward gradients of `build`'s scalar output against
/// central finite differences over every trainable element.
pub fn finite_diff_check(
    params: &ParameterSet,
    build: &BuildFn,
    step: f64,
) -> Result<FiniteDiffReport> {
    // Analytic pass.
    let mut tape = Tape::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params.iter() {
        ids.insert(name.clone(), tape.leaf(t));
    }
    let root = build(&mut tape, &ids)?;
    tape.backward(root)?;
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, t) in params.iter() {
        if t.requires_grad {
            let g = tape
                .grad(ids[name])
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            analytic.insert(name.clone(), g);
        }
    }

    // Components far below the dominant gradient magnitude sit at the
    // central-difference cancellation noise floor; measure those
    // against the problem scale instead of their own magnitude.
    let g_max = analytic
        .values()
        .flat_map(|g| g.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    let floor = (1e-3 * g_max).max(1e-6);

    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let names: Vec<String> = params
        .iter()
        .filter(|(_, t)| t.requires_grad)
        .map(|(n, _)| n.clone())
        .collect();
    let mut work = params.clone();
    for name in &names {
        let n = work.get(name).numel();
        for i in 0..n {
            let orig = work.get(name).data()[i];
            work.get_mut(name).data_mut()[i] = orig + step;
            let f_plus = eval_scalar(&work, build)?;
            work.get_mut(name).data_mut()[i] = orig - step;
            let f_minus = eval_scalar(&work, build)?;
            work.get_mut(name).data_mut()[i] = orig;
            let fd = (f_plus - f_minus) / (2.0 * step);
            let an = analytic[name][i];
            if !fd.is_finite() || !an.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for {name}[{i}]: analytic {an}, numeric {fd}"
                )));
            }
            let scale = an.abs().max(fd.abs()).max(floor);
            let err = (an - fd).abs() / scale;
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = an;
                report.numeric = fd;
            }
        }
    }
    Ok(report)
}
