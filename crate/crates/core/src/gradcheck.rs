//! Central finite-difference gradient checks against the tape.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Worst disagreement found by a check.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Report {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel: f64,
    pub max_abs: f64,
    pub coords: usize,
}

impl Report {
    fn add(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
        self.coords += 1;
    }

    pub fn merge(&mut self, other: Report) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs = self.max_abs.max(other.max_abs);
        self.coords += other.coords;
    }
}

fn scalar(tape: &Tape<'_, f64>, root: Var) -> Result<f64> {
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::InvalidShape(alloc::format!("gradient check root has shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Checks every coordinate of every input of `f`, a scalar function built
/// from free leaves.
pub fn check_leaves<F>(inputs: &[Tensor<f64>], eps: f64, floor: f64, f: F) -> Result<Report>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        scalar(&tape, root)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let mut report = Report::default();
    let mut values = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, v);
        for j in 0..values[i].len() {
            let x = values[i].data()[j];
            values[i].data_mut()[j] = x + eps;
            let up = eval(&values)?;
            values[i].data_mut()[j] = x - eps;
            let down = eval(&values)?;
            values[i].data_mut()[j] = x;
            report.add(analytic.data()[j], (up - down) / (2.0 * eps), floor);
        }
    }
    Ok(report)
}

/// Checks the listed `(parameter, flat index)` coordinates of a scalar
/// function of `owner`, whose parameters `store_of` exposes (a bare store
/// or a whole model).
pub fn check_params<T, F>(
    owner: &mut T,
    store_of: fn(&mut T) -> &mut ParamStore<f64>,
    coords: &[(ParamId, usize)],
    eps: f64,
    floor: f64,
    f: F,
) -> Result<Report>
where
    F: for<'p> Fn(&mut Tape<'p, f64>, &'p T) -> Result<Var>,
{
    let analytic: Vec<f64> = {
        let mut tape = Tape::new();
        let root = f(&mut tape, owner)?;
        let grads = tape.backward(root)?;
        coords.iter().map(|&(id, j)| grads.param(id).map_or(0.0, |g| g.data()[j])).collect()
    };
    let eval = |owner: &T| -> Result<f64> {
        let mut tape = Tape::new();
        let root = f(&mut tape, owner)?;
        scalar(&tape, root)
    };
    let mut report = Report::default();
    for (&(id, j), &a) in coords.iter().zip(&analytic) {
        let x = store_of(owner).get(id).data()[j];
        store_of(owner).get_mut(id).data_mut()[j] = x + eps;
        let up = eval(owner)?;
        store_of(owner).get_mut(id).data_mut()[j] = x - eps;
        let down = eval(owner)?;
        store_of(owner).get_mut(id).data_mut()[j] = x;
        report.add(a, (up - down) / (2.0 * eps), floor);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let ok = check_leaves(&[x.clone()], 1e-5, 1e-3, |t, v| {
            let sq = t.mul(v[0], v[0]);
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(ok.max_rel < 1e-8);
        // A value copied off the tape is a constant to backward but still
        // moves under perturbation, so the numeric gradient doubles.
        let bad = check_leaves(&[x], 1e-5, 1e-3, |t, v| {
            let s = t.sum(v[0]);
            let val = t.value(s).item();
            let c = t.constant(Tensor::scalar(val));
            Ok(t.add(s, c))
        })
        .unwrap();
        assert!(bad.max_rel > 0.4);
    }
}
