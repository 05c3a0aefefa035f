//! Finite-difference validation of tape gradients.

use ndarray::Array2;

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Worst observed deviation between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, row, col)` of the worst element.
    pub worst: (usize, usize, usize),
}

/// Compares reverse-mode gradients against central differences
/// `(f(x+ε) − f(x−ε)) / 2ε` for every element of every input.
///
/// `f` must rebuild the same computation from the given leaves each call and
/// return a scalar (1×1) loss node. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-4)`, so tiny gradients are compared
/// absolutely at 1e-4 scale.
///
/// Callers are responsible for probing at inputs away from kinks (ReLU
/// boundaries, clamp thresholds, tie-breaking decisions); a kink within `ε`
/// of the probe invalidates the numeric estimate, not the analytic one.
pub fn grad_check<F>(inputs: &[Array2<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    assert!(eps > 0.0);
    let eval = |probe: &[Array2<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = probe.iter().map(|x| tape.input(x.clone())).collect();
        let loss = f(&mut tape, &ids);
        let v = tape.value(loss);
        if v.dim() != (1, 1) {
            return Err(Error::Autodiff(format!(
                "grad_check function returned {:?}, expected scalar",
                v.dim()
            )));
        }
        Ok(v[[0, 0]])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let loss = f(&mut tape, &ids);
    let grads = tape.backward(loss)?;
    let analytic: Vec<Array2<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, x)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(x.dim()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0),
    };
    let mut probe: Vec<Array2<f64>> = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let orig = x[[i, j]];
                probe[k][[i, j]] = orig + eps;
                let fp = eval(&probe)?;
                probe[k][[i, j]] = orig - eps;
                let fm = eval(&probe)?;
                probe[k][[i, j]] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic[k][[i, j]];
                if !numeric.is_finite() || !a.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "grad_check: input {} element ({},{}) analytic={} numeric={}",
                        k, i, j, a, numeric
                    )));
                }
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                let rel = (a - numeric).abs() / denom;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = (k, i, j);
                }
            }
        }
    }
    Ok(report)
}
