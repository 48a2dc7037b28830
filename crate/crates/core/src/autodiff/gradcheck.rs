use serde::Serialize;

use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (near) zero are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<(f64, Tape, NodeId, NodeId)>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f(x) = {value}")));
    }
    Ok((value, tape, leaf, out))
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + h e_j) - f(x - h e_j)) / 2h`, coordinate by coordinate.
///
/// The relative error of coordinate `j` is `|a_j - n_j| / max(|a_j|, |n_j|, 1e-3)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::contract(format!(
            "grad_check: step {h} outside [1e-6, 1e-3]"
        )));
    }
    let (_, tape, leaf, out) = eval(&f, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let orig = probe.values()[j];
        probe.values_mut()[j] = orig + h;
        let (plus, ..) = eval(&f, &probe)?;
        probe.values_mut()[j] = orig - h;
        let (minus, ..) = eval(&f, &probe)?;
        probe.values_mut()[j] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        passed: max_rel_error <= tol,
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
