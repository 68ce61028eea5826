//! Central finite-difference gradient checking in `f64`.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `||analytic - numeric|| / max(||analytic||, ||numeric||, floor)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of `f` with central differences at step `h`.
///
/// `f` records a scalar loss from the given leaves. Every input is perturbed
/// element by element, so keep the shapes small.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        relative_errors.push(diff / na.max(nn).max(1e-12));
    }
    Ok(GradCheckReport { relative_errors })
}
