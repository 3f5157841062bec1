//! Central finite-difference checks of the analytic gradients.
//!
//! [`check`] compares the tape's gradients against `(f(x+ε) − f(x−ε)) / 2ε`
//! evaluated in f64. The suites in [`suites`] build the fixed small instances
//! used by `mgproto gradcheck` and the acceptance tests.

pub mod suites;

use crate::error::Result;
use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

/// Step for central differences.
pub const EPS: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor so that two near-zero gradients compare absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Input index and flat coordinate of the worst entry.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < MAX_REL_ERR
    }
}

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many evenly spaced coordinates per input.
    Strided(usize),
}

impl Coverage {
    fn coords(self, len: usize) -> Vec<usize> {
        match self {
            Coverage::All => (0..len).collect(),
            Coverage::Strided(max) if len <= max => (0..len).collect(),
            Coverage::Strided(max) => {
                // odd stride offsets avoid probing only channel-aligned entries
                (0..max).map(|i| (i * len + len / (2 * max)) / max).collect()
            }
        }
    }
}

/// Checks `∂f/∂inputs` where `f` builds a scalar on a fresh tape from leaf
/// variables holding `inputs`.
pub fn check<F>(name: &str, inputs: &[Tensor], coverage: Coverage, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out);

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
    };
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[i]);
        for j in coverage.coords(inputs[i].numel()) {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + EPS;
            let plus = eval(&xs)?;
            xs[i].data_mut()[j] = orig - EPS;
            let minus = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let a = analytic.data()[j];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
