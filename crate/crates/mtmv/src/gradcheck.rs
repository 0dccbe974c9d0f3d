//! Central finite-difference verification of reverse-mode gradients.
//!
//! The check rebuilds the graph from scratch for every probe, so the function
//! under test must be deterministic; two evaluations at the unperturbed point
//! are compared bit for bit to catch hidden randomness.

use crate::graph::{Graph, NodeId};
use crate::tensor::{Param, Tensor};
use thiserror::Error;

/// Relative error floor: coordinates whose analytic and numeric gradients are
/// both below this magnitude are compared absolutely, which keeps
/// finite-difference roundoff noise on near-zero gradients from dominating.
pub const REL_FLOOR: f64 = 1e-3;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 3e-5;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function under check is not deterministic: two evaluations differ ({0} vs {1})")]
    NonDeterministic(f64, f64),
    #[error("function under check produced a non-finite value: {0}")]
    NonFinite(String),
}

/// Max relative error between reverse-mode and central finite-difference
/// gradients of a scalar-valued function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Graph, NodeId) -> NodeId,
{
    let p = Param::new("fd_probe", x.clone());
    let probe = p.clone();
    check_params(&[p], move |g| {
        let xid = g.leaf(&probe);
        f(g, xid)
    }, step)
    .map(|r| r.max_rel_err)
}

/// Result of a multi-parameter gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coordinates: usize,
}

/// Checks every coordinate of every parameter against central differences.
/// `build` must insert leaves for the given parameters (in any order) and
/// return a scalar output node.
pub fn check_params<F>(params: &[Param], build: F, step: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph) -> NodeId,
{
    assert!(step > 0.0, "finite-difference step must be positive");

    let eval = |()| -> Result<f64, GradCheckError> {
        let mut g = Graph::new();
        let out = build(&mut g);
        g.healthy().map_err(GradCheckError::NonFinite)?;
        Ok(g.scalar(out))
    };

    let y0 = eval(())?;
    let y1 = eval(())?;
    if y0.to_bits() != y1.to_bits() {
        return Err(GradCheckError::NonDeterministic(y0, y1));
    }

    // Analytic pass.
    for p in params {
        p.zero_grad();
    }
    let mut g = Graph::new();
    let out = build(&mut g);
    g.healthy().map_err(GradCheckError::NonFinite)?;
    g.backward(out);
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad_snapshot()).collect();

    let mut max_rel = 0.0_f64;
    let mut coords = 0;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            p.nudge(j, step);
            let plus = eval(())?;
            p.nudge(j, -2.0 * step);
            let minus = eval(())?;
            p.nudge(j, step);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / REL_FLOOR.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
            coords += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, coordinates: coords })
}
