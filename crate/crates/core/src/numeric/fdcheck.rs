//! Finite-difference gradient validation.
//!
//! Rebuilds the computation from scratch for every probe, so it is meant for
//! small problems (a handful of points, narrow layers). Central differences
//! with h = 1e-5 on f64 give ~1e-10 truncation error, far below the 1e-4
//! acceptance tolerance used throughout the test suite.

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

const DEFAULT_STEP: f64 = 1e-5;
/// Relative error with an absolute floor: |a - n| / max(|a|, |n|, 1e-2).
const REL_FLOOR: f64 = 1e-2;

/// Worst-case relative disagreement between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct FdCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the tape's gradients against central finite differences for a
/// scalar-valued function of the named parameters.
///
/// `f` receives a fresh graph plus leaves bound in the order of `params`
/// and must return the scalar loss var. Every parameter entry is probed.
pub fn check_gradients(
    params: &[(&str, Tensor)],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<FdCheckReport> {
    let run = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
        let loss = f(&mut g, &vars)?;
        if g.value(loss).len() != 1 {
            return Err(Error::Contract(
                "fd check requires a scalar-valued function".into(),
            ));
        }
        Ok(g.value(loss).values()[0])
    };

    // Analytic pass.
    let mut tensors: Vec<Tensor> = params
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.requires_grad = true;
            t
        })
        .collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v)).collect::<Result<_>>()?;

    let mut report = FdCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (pi, (name, _)) in params.iter().enumerate() {
        for j in 0..tensors[pi].len() {
            let orig = tensors[pi].values()[j];
            tensors[pi].values_mut()[j] = orig + DEFAULT_STEP;
            let up = run(&tensors)?;
            tensors[pi].values_mut()[j] = orig - DEFAULT_STEP;
            let down = run(&tensors)?;
            tensors[pi].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.to_string();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        // loss = sum((x*x) * 3)
        let x = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let report = check_gradients(&[("x", x)], |g, vars| {
            let sq = g.mul(vars[0], vars[0])?;
            let sc = g.scale(sq, 3.0)?;
            g.sum_all(sc)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // abs has kinked gradient at 0; probing right at the kink must trip.
        let x = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let report = check_gradients(&[("x", x)], |g, vars| {
            let a = g.abs(vars[0])?;
            g.sum_all(a)
        })
        .unwrap();
        // analytic signum(0)=0 but FD sees slope 1: mismatch must be visible
        assert!(report.max_rel_err > 0.5, "{report:?}");
    }
}
