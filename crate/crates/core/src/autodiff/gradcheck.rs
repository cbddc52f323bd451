use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A scalar-valued function expressible at any engine precision.
///
/// Implementors build their graph on the supplied tape from the input `x`.
pub trait TapeFn {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval_f64<F: TapeFn>(f: &F, x: Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f.eval(&mut tape, v)?;
    let val = tape.value(out);
    if !val.is_scalar() {
        return Err(Error::contract(
            "grad_check",
            format!("function must be scalar-valued, got shape {:?}", val.shape()),
        ));
    }
    Ok(val.item())
}

/// Compares the autodiff gradient of `f` at `x` (computed in precision `T`)
/// against central finite differences evaluated in `f64`, Richardson
/// extrapolated from steps `eps` and `eps / 2` (error `O(eps^4)`).
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<T: Scalar, F: TapeFn>(
    f: &F,
    x: &Tensor<T>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::contract("grad_check", "eps must be positive"));
    }
    let mut tape = Tape::<T>::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f.eval(&mut tape, xv)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::contract(
            "grad_check",
            format!(
                "function must be scalar-valued, got shape {:?}",
                tape.value(out).shape()
            ),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.len()],
    };

    let base: Tensor<f64> = x.cast();
    let mut numeric = Vec::with_capacity(x.len());
    let central = |i: usize, h: f64| -> Result<f64> {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        Ok((eval_f64(f, plus)? - eval_f64(f, minus)?) / (2.0 * h))
    };
    for i in 0..x.len() {
        let coarse = central(i, eps)?;
        let fine = central(i, eps / 2.0)?;
        numeric.push((4.0 * fine - coarse) / 3.0);
    }

    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err < tol,
        analytic,
        numeric,
    })
}
