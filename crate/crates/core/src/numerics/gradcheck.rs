//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over all coordinates of `|a - n| / (|a| + |n| + 1e-12)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of `f` against central differences with step
/// `h` for every element of every parameter.
///
/// `f` receives a fresh tape and one `Var` per parameter and returns the
/// scalar loss. It is evaluated twice at the base point; differing results
/// are reported as [`Error::NonDeterministic`].
pub fn finite_diff_check<F>(params: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let first = tape.value(loss).item()?;
    tape.backward(loss)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| alloc::vec![0.0; params[pi].len()]);
        for (ei, &a) in analytic.iter().enumerate() {
            let base = params[pi].data()[ei];
            probe[pi].data_mut()[ei] = base + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[ei] = base - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[ei] = base;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if rel > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: rel,
                    worst: (pi, ei),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
