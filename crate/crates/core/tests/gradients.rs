//! Finite-difference checks of every tape primitive, 100 seeds each, in f64.

use oscxr::autodiff::{grad_check, Scalar, Tape, TapeFn, Tensor, Var};
use oscxr::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
enum Case {
    AddBroadcast,
    SubColumn,
    Mul,
    DivBroadcast,
    Exp,
    Ln,
    Square,
    Relu,
    Leaky,
    Scale,
    MatmulLeft,
    MatmulRight,
    Transpose,
    LogSoftmax,
    Gather,
    Frobenius,
    Mean,
    ConvInput,
    ConvStrided,
    ConvWeight,
    ConvBias,
    MaxPool,
    BnTrainInput,
    BnTrainGamma,
    BnEval,
}

const CASES: [Case; 25] = [
    Case::AddBroadcast,
    Case::SubColumn,
    Case::Mul,
    Case::DivBroadcast,
    Case::Exp,
    Case::Ln,
    Case::Square,
    Case::Relu,
    Case::Leaky,
    Case::Scale,
    Case::MatmulLeft,
    Case::MatmulRight,
    Case::Transpose,
    Case::LogSoftmax,
    Case::Gather,
    Case::Frobenius,
    Case::Mean,
    Case::ConvInput,
    Case::ConvStrided,
    Case::ConvWeight,
    Case::ConvBias,
    Case::MaxPool,
    Case::BnTrainInput,
    Case::BnTrainGamma,
    Case::BnEval,
];

struct Prim {
    case: Case,
    seed: u64,
}

/// Deterministic constant of the given shape, drawn from `[lo, hi)`.
fn fixed<T: Scalar>(seed: u64, stream: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

impl Prim {
    fn input_shape(&self) -> Vec<usize> {
        match self.case {
            Case::MatmulLeft | Case::Transpose | Case::LogSoftmax | Case::Gather => vec![3, 4],
            Case::MatmulRight => vec![4, 2],
            Case::ConvInput | Case::ConvStrided => vec![2, 2, 5, 5],
            Case::ConvWeight => vec![3, 2, 3, 3],
            Case::ConvBias => vec![3],
            Case::MaxPool => vec![1, 2, 4, 4],
            Case::BnTrainInput | Case::BnEval => vec![3, 2, 2, 2],
            Case::BnTrainGamma => vec![2],
            _ => vec![3, 4],
        }
    }

    /// Input point, kept away from kinks and ties.
    fn point(&self) -> Tensor<f64> {
        let shape = self.input_shape();
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let v: Vec<f64> = match self.case {
            Case::Relu | Case::Leaky => (0..n)
                .map(|_| rng.gen_range(0.05..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect(),
            Case::MaxPool => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                order.iter().map(|&i| i as f64 * 0.1 + rng.gen_range(0.0..0.01)).collect()
            }
            _ => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        Tensor::from_f64(&shape, &v).unwrap()
    }
}

impl TapeFn for Prim {
    fn eval<T: Scalar>(&self, t: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = self.seed;
        let mut c = |shape: &[usize], lo: f64, hi: f64, stream: u64| t.constant(fixed(s, stream, shape, lo, hi));
        let (a, b) = (c(&[4], -1.0, 1.0, 1), c(&[3, 1], 0.5, 1.5, 2));
        let (full, mat) = (c(&[3, 4], -1.0, 1.0, 3), c(&[4, 2], -1.0, 1.0, 4));
        let left = c(&[2, 4], -1.0, 1.0, 5);
        let (img, ker) = (c(&[2, 2, 5, 5], -1.0, 1.0, 6), c(&[3, 2, 3, 3], -1.0, 1.0, 7));
        let bias = c(&[3], -1.0, 1.0, 8);
        let (bx, gamma, beta) = (c(&[3, 2, 2, 2], -1.0, 1.0, 9), c(&[2], 0.5, 1.5, 10), c(&[2], -0.5, 0.5, 11));
        let y = match self.case {
            Case::AddBroadcast => t.add(x, a)?,
            Case::SubColumn => t.sub(b, x)?,
            Case::Mul => t.mul(x, full)?,
            Case::DivBroadcast => {
                let den = t.add_scalar(b, 0.0);
                let num = t.mul(x, full)?;
                let q = t.div(num, den)?;
                let sq = t.square(x);
                let pos = t.add_scalar(sq, 0.5);
                let r = t.div(full, pos)?;
                t.add(q, r)?
            }
            Case::Exp => t.exp(x),
            Case::Ln => {
                let sq = t.square(x);
                let pos = t.add_scalar(sq, 0.5);
                t.ln(pos)
            }
            Case::Square => t.square(x),
            Case::Relu => t.relu(x),
            Case::Leaky => t.leaky_relu(x, 0.1),
            Case::Scale => {
                let n = t.neg(x);
                t.scale(n, 2.5)
            }
            Case::MatmulLeft => t.matmul(x, mat)?,
            Case::MatmulRight => t.matmul(left, x)?,
            Case::Transpose => {
                let xt = t.transpose(x)?;
                t.matmul(xt, full)?
            }
            Case::LogSoftmax => t.log_softmax(x)?,
            Case::Gather => {
                let ls = t.log_softmax(x)?;
                t.gather_rows(ls, &[2, 0, 3])?
            }
            Case::Frobenius => t.frobenius_sq(x),
            Case::Mean => {
                let e = t.exp(x);
                t.mean(e)
            }
            Case::ConvInput => t.conv2d(x, ker, Some(bias), 1, 1)?,
            Case::ConvStrided => t.conv2d(x, ker, None, 2, 0)?,
            Case::ConvWeight => t.conv2d(img, x, None, 1, 1)?,
            Case::ConvBias => t.conv2d(img, ker, Some(x), 2, 1)?,
            Case::MaxPool => t.maxpool2d(x, 2, 2)?,
            Case::BnTrainInput => t.batch_norm_train(x, gamma, beta, 1e-5)?.0,
            Case::BnTrainGamma => t.batch_norm_train(bx, x, beta, 1e-5)?.0,
            Case::BnEval => {
                let mean: Vec<T> = [0.1, -0.2].iter().map(|&v| T::from_f64(v)).collect();
                let var: Vec<T> = [0.5, 1.5].iter().map(|&v| T::from_f64(v)).collect();
                t.batch_norm_eval(x, gamma, beta, &mean, &var, 1e-5)?
            }
        };
        // contract with fixed weights so every output coordinate matters
        let shape = t.shape(y).to_vec();
        let w = t.constant(fixed(s, 99, &shape, -1.0, 1.0));
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in CASES {
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let f = Prim { case, seed };
            let r = grad_check(&f, &f.point(), 1e-3, 1e-6).unwrap();
            worst = worst.max(r.max_rel_err);
        }
        if worst >= 1e-6 {
            failures.push(format!("{case:?}: {worst:.2e}"));
        }
    }
    assert!(failures.is_empty(), "primitives over tolerance: {failures:?}");
}

#[test]
fn f32_gradients_agree_with_f64_differences() {
    for case in CASES {
        let f = Prim { case, seed: 3 };
        let x: Tensor<f32> = f.point().cast();
        let r = grad_check(&f, &x, 1e-3, 1e-3).unwrap();
        assert!(r.pass, "{case:?}: {:.2e}", r.max_rel_err);
    }
}
