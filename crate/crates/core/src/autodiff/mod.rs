//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, TapeFn};
pub use tape::{BatchMoments, BinaryKind, Tape, UnaryKind, Var};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        t(shape, &d)
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_annihilates_value_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.5, -2.0, 7.0]), true);
        let z = tape.constant(Tensor::zeros(&[3]));
        let y = tape.mul(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = tape.leaky_relu(x, 0.1);
        assert!((tape.value(y).item() + 0.1).abs() < 1e-7);
    }

    #[test]
    fn broadcast_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn broadcast_row_vector_gradient_reduces() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let b = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]), true);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        assert_eq!(tape.value(b).data(), &[10.0, 20.0, 30.0]);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[3.0, -1.0, 0.5, 9.0]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));
    }

    #[test]
    fn ones_transpose_times_ones() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(&[2, 2]));
        let at = tape.transpose(a).unwrap();
        let p = tape.matmul(at, a).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0; 4]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn grad_of_sum_of_product_is_row_sums_of_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = random(&[3, 4], &mut rng);
        let b0 = random(&[4, 5], &mut rng);
        let mut tape = Tape::new();
        let a = tape.leaf(a0, true);
        let b = tape.constant(b0.clone());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        let g = tape.grad(a).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let row_sum: f64 = b0.data()[k * 5..(k + 1) * 5].iter().sum();
                assert!((g.data()[i * 4 + k] - row_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identity_associativity_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = random(&[3, 3], &mut rng);
        let b0 = random(&[3, 3], &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(a0);
        let b = tape.constant(b0);
        let i = tape.constant(Tensor::eye(3));
        let ai = tape.matmul(a, i).unwrap();
        let left = tape.matmul(ai, b).unwrap();
        let ib = tape.matmul(i, b).unwrap();
        let right = tape.matmul(a, ib).unwrap();
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(left), tape.value(ab));
        assert_eq!(tape.value(right), tape.value(ab));
    }

    #[test]
    fn frobenius_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 3]));
        let e = tape.constant(Tensor::eye(3));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 2.0, 1.0]));
        let fz = tape.frobenius_sq(z);
        let fe = tape.frobenius_sq(e);
        let fm = tape.frobenius_sq(m);
        assert_eq!(tape.value(fz).item(), 0.0);
        assert_eq!(tape.value(fe).item(), 3.0);
        assert_eq!(tape.value(fm).item(), 10.0);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.0, 5.0, 6.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_frobenius_gives_two_x() {
        let mut tape = Tape::new();
        let x0 = t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]);
        let x = tape.leaf(x0.clone(), true);
        let f = tape.frobenius_sq(x);
        tape.backward(f).unwrap();
        let expect: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn backward_on_constant_populates_nothing() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::<f64>::scalar(4.0));
        let y = tape.scale(c, 2.0);
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn double_backward_is_an_error_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[2]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract { .. })));
        tape.reset_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    /// Five-node graph with shared subexpressions:
    /// u = x*y, v = u + x, w = u*v, out = w + v.
    #[test]
    fn saturated_log_softmax_keeps_f32_precision() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 2], &[10.0, 0.0]).unwrap(), true);
        let ls = tape.log_softmax(x).unwrap();
        let picked = tape.gather_rows(ls, &[0]).unwrap();
        let loss = tape.sum(picked);
        tape.backward(loss).unwrap();
        let exact = -(-10.0f64).exp().ln_1p();
        let got = tape.value(ls).data()[0] as f64;
        assert!((got - exact).abs() <= 1e-6 * exact.abs(), "{got} vs {exact}");
        // d/dx0 log p0 = 1 - p0 = p1
        let p1 = 1.0 / (1.0 + 10.0f64.exp());
        let g = tape.grad(x).unwrap().data()[0] as f64;
        assert!((g - p1).abs() <= 1e-6 * p1, "{g} vs {p1}");
    }

    /// Brute-force oracle: enumerate every path from out to x and y and sum
    /// the products of local partials along each path.
    #[test]
    fn shared_subexpressions_accumulate() {
        let (xv, yv) = (1.7f64, -0.6f64);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(xv), true);
        let y = tape.leaf(Tensor::scalar(yv), true);
        let u = tape.mul(x, y).unwrap();
        let v = tape.add(u, x).unwrap();
        let w = tape.mul(u, v).unwrap();
        let out = tape.add(w, v).unwrap();
        tape.backward(out).unwrap();

        let (u0, v0) = (xv * yv, xv * yv + xv);
        // local partials
        let d_out_w = 1.0;
        let d_out_v = 1.0;
        let d_w_u = v0;
        let d_w_v = u0;
        let d_v_u = 1.0;
        let d_v_x = 1.0;
        let d_u_x = yv;
        let d_u_y = xv;
        let paths_x = [
            d_out_w * d_w_u * d_u_x,
            d_out_w * d_w_v * d_v_u * d_u_x,
            d_out_w * d_w_v * d_v_x,
            d_out_v * d_v_u * d_u_x,
            d_out_v * d_v_x,
        ];
        let paths_y = [
            d_out_w * d_w_u * d_u_y,
            d_out_w * d_w_v * d_v_u * d_u_y,
            d_out_v * d_v_u * d_u_y,
        ];
        let gx: f64 = paths_x.iter().sum();
        let gy: f64 = paths_y.iter().sum();
        assert!((tape.grad(x).unwrap().item() - gx).abs() < 1e-12);
        assert!((tape.grad(y).unwrap().item() - gy).abs() < 1e-12);
    }

    struct Square;
    impl TapeFn for Square {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> crate::Result<Var> {
            let s = tape.square(x);
            Ok(tape.sum(s))
        }
    }

    struct Frob;
    impl TapeFn for Frob {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> crate::Result<Var> {
            Ok(tape.frobenius_sq(x))
        }
    }

    struct Identity;
    impl TapeFn for Identity {
        fn eval<T: Scalar>(&self, _tape: &mut Tape<T>, x: Var) -> crate::Result<Var> {
            Ok(x)
        }
    }

    #[test]
    fn grad_check_polynomial() {
        let r = grad_check(&Square, &Tensor::<f64>::scalar(3.0), 1e-5, 1e-6).unwrap();
        assert!((r.numeric[0] - 6.0).abs() < 1e-6);
        assert_eq!(r.analytic[0], 6.0);
        assert!(r.pass);
    }

    #[test]
    fn grad_check_frobenius_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 4], &mut rng);
        let r = grad_check(&Frob, &x, 1e-5, 1e-6).unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn grad_check_rejects_vector_output() {
        let x = Tensor::<f64>::ones(&[3]);
        assert!(matches!(
            grad_check(&Identity, &x, 1e-5, 1e-6),
            Err(Error::Contract { .. })
        ));
    }
}
