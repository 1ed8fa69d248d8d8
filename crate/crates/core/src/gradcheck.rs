//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

/// Which coordinates of each input to perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinates {
    All,
    /// Up to this many distinct coordinates per input, drawn with the seed.
    Sample { per_input: usize, seed: u64 },
}

/// Outcome for one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Check the gradient of a scalar function of several tensors.
///
/// `f` rebuilds the graph on a fresh tape from the bound inputs. It must be
/// deterministic; two unperturbed evaluations that disagree bit-for-bit are
/// reported as [`Error::NonDeterministic`].
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64, coords: Coordinates) -> Result<Vec<InputReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("eps must be positive, got {eps}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::NotScalar(tape.shape(out).to_vec()));
        }
        Ok(tape.item(out))
    };

    let base = eval(inputs)?;
    if eval(inputs)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic { coordinate: 0 });
    }

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.item(out).to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic { coordinate: 0 });
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("inputs require grad").data().to_vec();
        let n = analytic.len();
        let picked: Vec<usize> = match coords {
            Coordinates::All => (0..n).collect(),
            Coordinates::Sample { per_input, seed } => {
                let mut idx: Vec<usize> = (0..n).collect();
                SplitMix64::stream(seed, k as u64).shuffle(&mut idx);
                idx.truncate(per_input.min(n));
                idx.sort_unstable();
                idx
            }
        };
        let mut report = InputReport {
            checked: picked.len(),
            max_relative_error: 0.0,
            worst_coordinate: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &picked {
            let orig = work[k].data()[c];
            work[k].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[c], numeric);
            if err >= report.max_relative_error {
                report.max_relative_error = err;
                report.worst_coordinate = c;
                report.analytic = analytic[c];
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Maximum relative error over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let reports = grad_check_many(|t, vs| f(t, vs[0]), core::slice::from_ref(x), eps, Coordinates::All)?;
    Ok(reports[0].max_relative_error)
}
