use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter is touched, so a rejected step leaves params and state intact.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    names: &[String],
    state: &mut AdamState<T>,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("parameter {i}: shape {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::Diverged {
                step: state.t as usize,
                detail: format!("non-finite gradient for {name}"),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(hyper.beta1), T::from_f64(hyper.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::from_f64(1.0 - hyper.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - hyper.beta2.powi(t));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(hyper.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = b1 * m[j] + c1 * g;
            v[j] = b2 * v[j] + c2 * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = t(&[1.0, -2.0]);
        let g = t(&[0.0, 0.0]);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&g], &[], &mut st, 0.003, &AdamHyper::default()).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = t(&[0.0, 0.0, 0.0]);
        let g = t(&[0.5, -3.0, 1e-3]);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&g], &[], &mut st, 0.01, &AdamHyper::default()).unwrap();
        for (w, gi) in p.data().iter().zip(g.data()) {
            assert!((w + 0.01 * gi.signum()).abs() < 1e-6, "{w}");
            assert!(w.abs() <= 0.01 * (1.0 + 1e-6));
        }
    }

    #[test]
    fn two_steps_match_hand_rolled() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.003f64);
        let g = [0.3f64, -1.2];
        let mut w = [0.5f64, 0.25];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for step in 1..=2 {
            for j in 0..2 {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / (1.0 - b1.powi(step));
                let vh = v[j] / (1.0 - b2.powi(step));
                w[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        let mut p = t(&[0.5, 0.25]);
        let gt = t(&g);
        let mut st = AdamState::new([&p]);
        for _ in 0..2 {
            adam_step(&mut [&mut p], &[&gt], &[], &mut st, lr, &AdamHyper::default()).unwrap();
        }
        for j in 0..2 {
            assert!((p.data()[j] - w[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = t(&[1.0]);
        let g = Tensor::<f64>::from_f64(&[1], &[0.0])
            .unwrap()
            .map(|_| f64::NAN);
        let mut st = AdamState::new([&p]);
        let err = adam_step(
            &mut [&mut p],
            &[&g],
            &["layer0.weight".to_string()],
            &mut st,
            0.1,
            &AdamHyper::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer0.weight"));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(st.t, 0);
    }
}
