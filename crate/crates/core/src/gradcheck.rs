//! Central finite-difference gradients, used as an independent oracle for
//! the tape's analytic gradients.

use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(contract(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + offset;
            let v = f(&probe)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite function value while differencing element {i}")));
            }
            Ok(v)
        };
        let (up, down) = (at(h)?, at(-h)?);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Largest elementwise relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Denominator floor used by [`check_gradients`]; below it errors are absolute.
pub const REL_FLOOR: f64 = 1e-4;

/// Outcome of comparing tape gradients with finite differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Max relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub checked_elements: usize,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Builds a scalar function on a fresh graph for every evaluation and compares
/// the tape gradient of each input against central differences.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut g2 = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g2.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                let l = build(&mut g2, &vs)?;
                Ok(g2.value(l).data()[0])
            },
            &inputs[k],
            h,
        )?;
        checked += numeric.numel();
        per_input.push(max_relative_error(&analytic, &numeric, REL_FLOOR));
    }
    Ok(GradReport {
        per_input,
        checked_elements: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_f64([2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, 1.5]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let x = Tensor::from_f64([1], &[3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let x = Tensor::from_f64([1], &[1.0]).unwrap();
        assert!(matches!(finite_diff_grad(|_| Ok(0.0), &x, 0.0), Err(Error::Contract(_))));
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-3),
            Err(Error::Numeric(_))
        ));
    }
}
