//! Raw slice kernels shared by the forward and backward rules of the tape.
//!
//! All reductions run in a fixed order. Per-sample convolution work is spread
//! over rayon, but partial weight gradients are summed sequentially in sample
//! order so results are bitwise reproducible regardless of thread count.

use rayon::prelude::*;

use super::tensor::Scalar;

/// `c[m×n] (+)= a[m×k] · b[k×n]`
pub(crate) fn mm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// `c[m×n] (+)= a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let spatial = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.wo + oj] = if ii >= 0
                            && (ii as usize) < g.h
                            && jj >= 0
                            && (jj as usize) < g.w
                        {
                            x[(c * g.h + ii as usize) * g.w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let spatial = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.w {
                            continue;
                        }
                        let idx = (c * g.h + ii as usize) * g.w + jj as usize;
                        dx[idx] = dx[idx] + src[oi * g.wo + oj];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(o, xs)| {
            let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
            im2col(g, xs, &mut cols);
            mm_nn(g.cout, g.col_rows(), g.col_cols(), w, &cols, o);
            if let Some(b) = bias {
                let spatial = g.col_cols();
                for (c, &bv) in b.iter().enumerate() {
                    for v in &mut o[c * spatial..(c + 1) * spatial] {
                        *v = *v + bv;
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw, dbias)`; `dx` is only computed when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.ho * g.wo;
    let rows = g.col_rows();
    let spatial = g.col_cols();

    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = x
        .par_chunks(in_len)
        .zip(dout.par_chunks(out_len))
        .map(|(xs, ds)| {
            let dw = want_dw.then(|| {
                let mut cols = vec![T::zero(); rows * spatial];
                im2col(g, xs, &mut cols);
                let mut dw = vec![T::zero(); g.cout * rows];
                mm_nt(g.cout, spatial, rows, ds, &cols, &mut dw);
                dw
            });
            let dx = want_dx.then(|| {
                let mut dcols = vec![T::zero(); rows * spatial];
                mm_tn(rows, g.cout, spatial, w, ds, &mut dcols);
                let mut dx = vec![T::zero(); in_len];
                col2im(g, &dcols, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();

    let mut dbias = vec![T::zero(); g.cout];
    for ds in dout.chunks(out_len) {
        for (c, b) in dbias.iter_mut().enumerate() {
            *b = *b + ds[c * spatial..(c + 1) * spatial].iter().copied().sum::<T>();
        }
    }

    let mut dx_all = want_dx.then(|| Vec::with_capacity(g.n * in_len));
    let mut dw_all = want_dw.then(|| vec![T::zero(); g.cout * rows]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            for (a, b) in all.iter_mut().zip(dw) {
                *a = *a + b;
            }
        }
    }
    (dx_all, dw_all, dbias)
}

/// Max pooling over `[planes, h, w]`. Ties resolve to the first element in
/// row-major window order. Returns `(values, flat argmax indices)`.
pub(crate) fn maxpool_forward<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    x: &[T],
) -> (Vec<T>, Vec<usize>) {
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best_idx = base + (oi * stride) * w + oj * stride;
                let mut best = x[best_idx];
                for di in 0..window {
                    for dj in 0..window {
                        let idx = base + (oi * stride + di) * w + oj * stride + dj;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Per-channel batch statistics over `[n, c, spatial]`: biased mean and variance.
pub(crate) fn channel_moments<T: Scalar>(
    n: usize,
    c: usize,
    spatial: usize,
    x: &[T],
) -> (Vec<T>, Vec<T>) {
    let count = T::from_f64((n * spatial) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            s = s + x[off..off + spatial].iter().copied().sum::<T>();
        }
        let mu = s / count;
        let mut ss = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            for &v in &x[off..off + spatial] {
                let d = v - mu;
                ss = ss + d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = ss / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        mm_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0f64; 4];
        mm_nt(2, 3, 2, &a, &bt, &mut c2);
        assert_eq!(c2, c);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0f64; 4];
        mm_tn(2, 3, 2, &at, &b, &mut c3);
        assert_eq!(c3, c);
    }

    #[test]
    fn maxpool_first_index_tie_break() {
        let x = [5.0f32; 16];
        let (v, arg) = maxpool_forward(1, 4, 4, 2, 2, &x);
        assert_eq!(v, vec![5.0; 4]);
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }
}
