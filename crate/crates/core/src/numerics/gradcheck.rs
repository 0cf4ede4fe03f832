//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all entries.
    pub max_rel_err: f64,
    /// (parameter index, element index) where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` builds a scalar on the tape from leaves holding `params` (in order).
/// Every element of every parameter is perturbed by `±eps`.
pub fn finite_diff_check<T, F>(params: &[Tensor<T>], eps: T, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::Config(format!("finite-difference eps must be > 0, got {eps}")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let analytic = tape.backward(out)?.ordered(&vars)?;

    let eval = |values: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let two = T::c(2.0);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (two * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite { op: "finite_diff_check" });
            }
            let a = grad.data()[ei];
            let rel = ((a - numeric).abs() / numeric.abs().max(T::one()))
                .to_f64()
                .unwrap_or(f64::INFINITY);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        let params = vec![Tensor::vector(vec![0.3f64, -1.2])];
        let report = finite_diff_check(&params, 1e-5, |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            let s = tape.mul_const(sq, 3.0)?;
            tape.sum(s)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let params = vec![Tensor::vector(vec![1.0f64, 2.0])];
        let report = finite_diff_check(&params, 1e-5, |tape, _| {
            Ok(tape.constant(Tensor::scalar(7.0)))
        })
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let params = vec![Tensor::vector(vec![1.0f64])];
        assert!(finite_diff_check(&params, 0.0, |tape, v| tape.sum(v[0])).is_err());
    }
}
