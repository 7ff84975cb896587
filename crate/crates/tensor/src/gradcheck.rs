//! Central-difference verification of tape gradients.

use crate::error::{arg_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which coordinates of each input get a finite-difference probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordSample {
    All,
    /// Up to this many evenly spaced coordinates per input tensor.
    AtMost(usize),
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for a
/// scalar-valued `f` at `x`.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    gradient_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, CoordSample::All)
}

/// [`gradient_check`] over several inputs at once.
pub fn gradient_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64, sample: CoordSample) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return arg_err("finite-difference step must be positive");
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    for (which, x) in xs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[which]);
        for coord in coords(x.len(), sample) {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[coord] += eps;
            minus[coord] -= eps;
            let mut probe = xs.to_vec();
            probe[which] = Tensor::new(x.shape().to_vec(), plus)?;
            let fp = eval(&probe)?;
            probe[which] = Tensor::new(x.shape().to_vec(), minus)?;
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[coord];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return arg_err(format!("gradient check needs a scalar function, got shape {:?}", t.shape()));
    }
    Ok(t.item())
}

fn coords(n: usize, sample: CoordSample) -> Vec<usize> {
    match sample {
        CoordSample::AtMost(k) if k < n => {
            if k == 0 {
                return Vec::new();
            }
            (0..k).map(|i| i * n / k + (n / k) / 2).collect()
        }
        _ => (0..n).collect(),
    }
}
