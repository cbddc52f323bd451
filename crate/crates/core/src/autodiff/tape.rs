use super::kernels::{self, ConvGeom};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Square,
    Relu,
    LeakyRelu(f64),
    Scale(f64),
    AddScalar(f64),
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    FrobeniusSq(Var),
    LogSoftmax(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Batch statistics produced by a training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Append-only record of primitive operations. Every node's inputs precede it,
/// so the reverse sweep is a single backwards pass over the node list.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(
                    op,
                    format!("shapes {a:?} and {b:?} are not broadcastable"),
                ))
            }
        };
    }
    Ok(out)
}

/// For each flat index of `out`, the flat index into a tensor of shape `inp`
/// broadcast against it. `None` when no broadcasting is involved.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let rank = out.len();
    let offset = rank - inp.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..inp.len()).rev() {
        in_strides[i + offset] = if inp[i] == 1 { 0 } else { stride };
        stride *= inp[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(map)
}

fn reduce_to<T: Scalar>(g: &[T], map: &Option<Vec<usize>>, shape: &[usize]) -> Tensor<T> {
    match map {
        None => Tensor::raw(shape.to_vec(), g.to_vec()),
        Some(map) => {
            let mut out = vec![T::zero(); shape.iter().product()];
            for (o, &i) in map.iter().enumerate() {
                out[i] = out[i] + g[o];
            }
            Tensor::raw(shape.to_vec(), out)
        }
    }
}

#[inline]
fn at(map: &Option<Vec<usize>>, o: usize) -> usize {
    match map {
        None => o,
        Some(m) => m[o],
    }
}

fn transpose_last2<T: Scalar>(shape: &[usize], data: &[T]) -> (Vec<usize>, Vec<T>) {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = data.len() / (m * n);
    let mut out = vec![T::zero(); data.len()];
    for b in 0..batch {
        let src = &data[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut s = shape.to_vec();
    s.swap(r - 2, r - 1);
    (s, out)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v`
    /// participates in gradient tracking.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Clears gradients so `backward` may be called again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let op_name = format!("{kind:?}").to_lowercase();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&op_name, &sa, &sb)?;
        let ma = broadcast_map(&out_shape, &sa);
        let mb = broadcast_map(&out_shape, &sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let total: usize = out_shape.iter().product();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<T> = (0..total).map(|o| f(da[at(&ma, o)], db[at(&mb, o)])).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::raw(out_shape, data), rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f: Box<dyn Fn(T) -> T> = match kind {
            UnaryKind::Neg => Box::new(|v: T| -v),
            UnaryKind::Exp => Box::new(|v: T| v.exp()),
            UnaryKind::Ln => Box::new(|v: T| v.ln()),
            UnaryKind::Square => Box::new(|v: T| v * v),
            UnaryKind::Relu => Box::new(|v: T| if v > T::zero() { v } else { T::zero() }),
            UnaryKind::LeakyRelu(alpha) => {
                let a = T::from_f64(alpha);
                Box::new(move |v: T| if v > T::zero() { v } else { a * v })
            }
            UnaryKind::Scale(c) => {
                let c = T::from_f64(c);
                Box::new(move |v: T| c * v)
            }
            UnaryKind::AddScalar(c) => {
                let c = T::from_f64(c);
                Box::new(move |v: T| v + c)
            }
        };
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Unary { kind, x })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(alpha), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    // ---- reductions and reshaping -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() < 2 {
            return Err(Error::dim(
                "transpose",
                format!("need rank >= 2, got {:?}", t.shape()),
            ));
        }
        let (s, d) = transpose_last2(t.shape(), t.data());
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::raw(s, d), rg, Op::Transpose(x)))
    }

    /// `[m×k]·[k×n]`, or batched `[B×m×k]·[B×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 => (*b1, *m, *k, *k2, *n),
            _ => {
                return Err(Error::dim(
                    "matmul",
                    format!("unsupported operand shapes {sa:?} and {sb:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner extents differ: {sa:?} vs {sb:?}"),
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            kernels::mm_nn(
                m,
                k,
                n,
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor::raw(shape, out),
            rg,
            Op::MatMul { a, b, batch, m, k, n },
        ))
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().map(|&v| v * v).sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::FrobeniusSq(x))
    }

    /// Log-softmax over the last axis, max-shifted for stability.
    ///
    /// The max term contributes exactly 1 to the shifted sum, so
    /// `log p = (v − mx) − ln_1p(rest)`. Shifting before subtracting keeps
    /// `log p` accurate near 0 when one class dominates.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().ok_or_else(|| Error::dim("log_softmax", "empty shape"))?;
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(cols) {
            let (arg, mx) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, v)| if v > best.1 { (i, v) } else { best });
            let rest: T = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, &v)| (v - mx).exp())
                .sum();
            let l = rest.ln_1p();
            out.extend(row.iter().map(|&v| (v - mx) - l));
        }
        let shape = t.shape().to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::raw(shape, out), rg, Op::LogSoftmax(x)))
    }

    /// Picks `x[i, idx[i]]` from a `[N×K]` tensor, giving `[N]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let &[n, k] = t.shape() else {
            return Err(Error::dim("gather_rows", format!("expected [N,K], got {:?}", t.shape())));
        };
        if idx.len() != n {
            return Err(Error::dim(
                "gather_rows",
                format!("{} indices for {n} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::contract("gather_rows", format!("index {bad} out of range 0..{k}")));
        }
        let data: Vec<T> = idx.iter().enumerate().map(|(r, &c)| t.data()[r * k + c]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::raw(vec![n], data),
            rg,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    // ---- convolutional building blocks --------------------------------------

    /// 2-D convolution over `[N,Cin,H,W]` with weights `[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, cin, h, wd], &[cout, wcin, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::dim(
                "conv2d",
                format!("expected 4-D input and weight, got {xs:?} and {ws:?}"),
            ));
        };
        if cin != wcin {
            return Err(Error::dim(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        if hp < kh || wp < kw || (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "non-integral output size for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
                ),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias shape {:?}, expected [{cout}]", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.requires_grad(x)
            || self.requires_grad(w)
            || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            Tensor::raw(vec![n, cout, geom.ho, geom.wo], out),
            rg,
            Op::Conv2d { x, w, bias, geom },
        ))
    }

    /// Max pooling over the last two axes of `[N,C,H,W]`.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[n, c, h, w] = s.as_slice() else {
            return Err(Error::dim("maxpool2d", format!("expected 4-D input, got {s:?}")));
        };
        if h < window || w < window || window == 0 || stride == 0 {
            return Err(Error::dim(
                "maxpool2d",
                format!("window {window} does not fit {h}x{w}"),
            ));
        }
        let (vals, argmax) =
            kernels::maxpool_forward(n * c, h, w, window, stride, self.value(x).data());
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::raw(vec![n, c, ho, wo], vals),
            rg,
            Op::MaxPool { x, argmax },
        ))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::dim("batch_norm", format!("expected [N,C,..], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let spatial = s[2..].iter().product::<usize>();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "batch_norm",
                format!(
                    "input has {c} channels, scale/shift shaped {:?}/{:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((n, c, spatial))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, spatial) = self.bn_check(x, gamma, beta)?;
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            Tensor::raw(shape, out),
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Normalizes with the batch's own per-channel statistics and returns them
    /// for the caller's running-average update.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchMoments<T>)> {
        let (n, c, spatial) = self.bn_check(x, gamma, beta)?;
        let (mean, var) = kernels::channel_moments(n, c, spatial, self.value(x).data());
        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchMoments { mean, var }))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm", "running statistics length mismatch"));
        }
        self.bn_apply(x, gamma, beta, running_mean, running_var, eps, false)
    }

    // ---- reverse sweep ------------------------------------------------------

    /// Populates gradients of `loss` with respect to every tracked ancestor.
    ///
    /// Calling this twice without [`reset_grads`](Self::reset_grads) is an
    /// error. A loss that does not depend on any tracked value is a no-op.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward",
                "gradients already populated; call reset_grads first",
            ));
        }
        let root = self.node(loss);
        if !root.value.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                for (v, contrib) in self.local_grads(i, &g) {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let out_shape = node.value.shape();
                let ma = broadcast_map(out_shape, va.shape());
                let mb = broadcast_map(out_shape, vb.shape());
                let (da, db) = (va.data(), vb.data());
                let n = gd.len();
                let mut res = vec![];
                if self.wants(*a) {
                    let ga: Vec<T> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                        BinaryKind::Mul => (0..n).map(|o| gd[o] * db[at(&mb, o)]).collect(),
                        BinaryKind::Div => (0..n).map(|o| gd[o] / db[at(&mb, o)]).collect(),
                    };
                    res.push((*a, reduce_to(&ga, &ma, va.shape())));
                }
                if self.wants(*b) {
                    let gb: Vec<T> = match kind {
                        BinaryKind::Add => gd.to_vec(),
                        BinaryKind::Sub => gd.iter().map(|&v| -v).collect(),
                        BinaryKind::Mul => (0..n).map(|o| gd[o] * da[at(&ma, o)]).collect(),
                        BinaryKind::Div => (0..n)
                            .map(|o| {
                                let bv = db[at(&mb, o)];
                                -gd[o] * da[at(&ma, o)] / (bv * bv)
                            })
                            .collect(),
                    };
                    res.push((*b, reduce_to(&gb, &mb, vb.shape())));
                }
                res
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x);
                let xd = xv.data();
                let yd = node.value.data();
                let two = T::from_f64(2.0);
                let data: Vec<T> = match *kind {
                    UnaryKind::Neg => gd.iter().map(|&v| -v).collect(),
                    UnaryKind::Exp => gd.iter().zip(yd).map(|(&g, &y)| g * y).collect(),
                    UnaryKind::Ln => gd.iter().zip(xd).map(|(&g, &x)| g / x).collect(),
                    UnaryKind::Square => gd.iter().zip(xd).map(|(&g, &x)| two * x * g).collect(),
                    UnaryKind::Relu => gd
                        .iter()
                        .zip(xd)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                    UnaryKind::LeakyRelu(alpha) => {
                        let a = T::from_f64(alpha);
                        gd.iter()
                            .zip(xd)
                            .map(|(&g, &x)| if x > T::zero() { g } else { a * g })
                            .collect()
                    }
                    UnaryKind::Scale(c) => {
                        let c = T::from_f64(c);
                        gd.iter().map(|&g| c * g).collect()
                    }
                    UnaryKind::AddScalar(_) => gd.to_vec(),
                };
                vec![(*x, Tensor::raw(xv.shape().to_vec(), data))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), g.item()))],
            Op::Reshape(x) => vec![(*x, Tensor::raw(self.shape(*x).to_vec(), gd.to_vec()))],
            Op::Transpose(x) => {
                let (s, d) = transpose_last2(g.shape(), gd);
                vec![(*x, Tensor::raw(s, d))]
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut res = vec![];
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for bi in 0..*batch {
                        kernels::mm_nt(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &db[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    res.push((*a, Tensor::raw(self.shape(*a).to_vec(), ga)));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for bi in 0..*batch {
                        kernels::mm_tn(
                            k,
                            m,
                            n,
                            &da[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    res.push((*b, Tensor::raw(self.shape(*b).to_vec(), gb)));
                }
                res
            }
            Op::FrobeniusSq(x) => {
                let c = T::from_f64(2.0) * g.item();
                vec![(*x, self.value(*x).map(|v| c * v))]
            }
            Op::LogSoftmax(x) => {
                let cols = *node.value.shape().last().unwrap();
                let yd = node.value.data();
                let mut out = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(cols).zip(yd.chunks(cols)) {
                    // g_i·(1 − p_i) − p_i·Σ_{j≠i} g_j, with 1 − p_i = −expm1(log p_i)
                    let gs: T = grow.iter().copied().sum();
                    out.extend(grow.iter().zip(yrow).map(|(&gv, &y)| -gv * y.exp_m1() - y.exp() * (gs - gv)));
                }
                vec![(*x, Tensor::raw(node.value.shape().to_vec(), out))]
            }
            Op::Gather { x, idx } => {
                let s = self.shape(*x).to_vec();
                let k = s[1];
                let mut out = vec![T::zero(); s[0] * k];
                for (r, &c) in idx.iter().enumerate() {
                    out[r * k + c] = gd[r];
                }
                vec![(*x, Tensor::raw(s, out))]
            }
            Op::Conv2d { x, w, bias, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    self.wants(*x),
                    self.wants(*w),
                );
                let mut res = vec![];
                if let Some(dx) = dx {
                    res.push((*x, Tensor::raw(self.shape(*x).to_vec(), dx)));
                }
                if let Some(dw) = dw {
                    res.push((*w, Tensor::raw(self.shape(*w).to_vec(), dw)));
                }
                if let Some(b) = bias {
                    res.push((*b, Tensor::raw(vec![geom.cout], db)));
                }
                res
            }
            Op::MaxPool { x, argmax } => {
                let s = self.shape(*x).to_vec();
                let mut out = vec![T::zero(); s.iter().product()];
                for (o, &src) in argmax.iter().enumerate() {
                    out[src] = out[src] + gd[o];
                }
                vec![(*x, Tensor::raw(s, out))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x).to_vec();
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * spatial;
                        for i in off..off + spatial {
                            dgamma[ch] = dgamma[ch] + gd[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + gd[i];
                        }
                    }
                }
                let mut res = vec![];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let count = T::from_f64((n * spatial) as f64);
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        // dbeta/dgamma are the channel sums of dy and dy*xhat
                        let (mean_dy, mean_dy_xhat) = if *batch_stats {
                            (dbeta[ch] / count, dgamma[ch] / count)
                        } else {
                            (T::zero(), T::zero())
                        };
                        for bi in 0..n {
                            let off = (bi * c + ch) * spatial;
                            for i in off..off + spatial {
                                dx[i] = scale * (gd[i] - mean_dy - xhat[i] * mean_dy_xhat);
                            }
                        }
                    }
                    res.push((*x, Tensor::raw(s.clone(), dx)));
                }
                res.push((*gamma, Tensor::raw(vec![c], dgamma)));
                res.push((*beta, Tensor::raw(vec![c], dbeta)));
                res
            }
        }
    }
}
