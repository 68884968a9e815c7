//! Forward and backward kernels. Activations are `[N, ...]` row-major;
//! statistics and reductions accumulate in `f64`.

use crate::tensor::{matmul, Mat, Real, Tensor};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------- dense

/// `y = x W^T + b` with `W: [out, in]`.
pub(crate) fn dense_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = x.batch();
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![T::ZERO; n * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(b.data());
    }
    matmul(
        Mat::new(x.data(), n, inp),
        Mat::new(w.data(), out, inp).t(),
        &mut y,
        true,
    );
    Tensor::new(vec![n, out], y).expect("dense output shape")
}

/// Returns `(dx, dW, db)`.
pub(crate) fn dense_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = x.batch();
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let mut dx = vec![T::ZERO; n * inp];
    matmul(Mat::new(dy.data(), n, out), Mat::new(w.data(), out, inp), &mut dx, false);
    let mut dw = vec![T::ZERO; out * inp];
    matmul(Mat::new(dy.data(), n, out).t(), Mat::new(x.data(), n, inp), &mut dw, false);
    let mut db = vec![0.0f64; out];
    for row in dy.data().chunks(out) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v.to_f64();
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![out], db.into_iter().map(T::from_f64).collect()).expect("db shape"),
    )
}

// ---------------------------------------------------------------- conv

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for column-matrix entry, `None` inside the padding.
    #[inline]
    fn source(&self, ch: usize, ki: usize, kj: usize, oi: usize, oj: usize) -> Option<usize> {
        let i = (oi * self.stride + ki) as isize - self.pad as isize;
        let j = (oj * self.stride + kj) as isize - self.pad as isize;
        if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
            None
        } else {
            Some((ch * self.h + i as usize) * self.w + j as usize)
        }
    }
}

fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.oh {
                    for oj in 0..g.ow {
                        dst[oi * g.ow + oj] = match g.source(ch, ki, kj, oi, oj) {
                            Some(s) => img[s],
                            None => T::ZERO,
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ncols = g.col_cols();
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.oh {
                    for oj in 0..g.ow {
                        if let Some(s) = g.source(ch, ki, kj, oi, oj) {
                            img[s] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the per-sample column matrices for backward.
pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> (Tensor<T>, Vec<T>) {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let per_in = c * h * wd;
    let per_out = o * ncols;
    let mut y = vec![T::ZERO; n * per_out];
    let mut all_cols = if keep_cols { vec![T::ZERO; n * rows * ncols] } else { Vec::new() };
    let mut scratch = vec![T::ZERO; rows * ncols];
    for s in 0..n {
        let cols: &mut [T] = if keep_cols {
            &mut all_cols[s * rows * ncols..(s + 1) * rows * ncols]
        } else {
            &mut scratch
        };
        im2col(&x.data()[s * per_in..(s + 1) * per_in], &g, cols);
        let out = &mut y[s * per_out..(s + 1) * per_out];
        for (oc, row) in out.chunks_mut(ncols).enumerate() {
            row.fill(b.data()[oc]);
        }
        matmul(Mat::new(w.data(), o, rows), Mat::new(cols, rows, ncols), out, true);
    }
    (
        Tensor::new(vec![n, o, g.oh, g.ow], y).expect("conv output shape"),
        all_cols,
    )
}

pub(crate) fn conv_backward<T: Real>(
    dy: &Tensor<T>,
    cols: &[T],
    x_shape: &[usize],
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, wd] = [x_shape[0], x_shape[1], x_shape[2], x_shape[3]];
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let per_in = c * h * wd;
    let per_out = o * ncols;
    let mut dx = vec![T::ZERO; n * per_in];
    let mut dw = vec![T::ZERO; o * rows];
    let mut db = vec![0.0f64; o];
    let mut dcols = vec![T::ZERO; rows * ncols];
    for s in 0..n {
        let dys = &dy.data()[s * per_out..(s + 1) * per_out];
        let cs = &cols[s * rows * ncols..(s + 1) * rows * ncols];
        matmul(Mat::new(dys, o, ncols), Mat::new(cs, rows, ncols).t(), &mut dw, true);
        matmul(Mat::new(w.data(), o, rows).t(), Mat::new(dys, o, ncols), &mut dcols, false);
        col2im(&dcols, &g, &mut dx[s * per_in..(s + 1) * per_in]);
        for (oc, row) in dys.chunks(ncols).enumerate() {
            db[oc] += row.iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    (
        Tensor::new(x_shape.to_vec(), dx).expect("dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![o], db.into_iter().map(T::from_f64).collect()).expect("db shape"),
    )
}

// ---------------------------------------------------------------- relu

pub(crate) fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Backward through ReLU given its forward output.
pub(crate) fn relu_backward<T: Real>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(&d, &v)| if v > T::ZERO { d } else { T::ZERO })
        .collect();
    Tensor::new(dy.shape().to_vec(), data).expect("relu grad shape")
}

// ---------------------------------------------------------------- max pool

pub(crate) fn maxpool_forward<T: Real>(x: &Tensor<T>, k: usize, stride: usize) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * stride * w + oj * stride;
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = base + (oi * stride + ki) * w + oj * stride + kj;
                        // NaN never wins, so a NaN window keeps its first element
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                y.push(xd[best]);
                arg.push(best as u32);
            }
        }
    }
    (Tensor::new(vec![n, c, oh, ow], y).expect("pool shape"), arg)
}

pub(crate) fn maxpool_backward<T: Real>(dy: &Tensor<T>, arg: &[u32], x_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    for (&g, &i) in dy.data().iter().zip(arg) {
        d[i as usize] += g;
    }
    dx
}

// ---------------------------------------------------------------- batch norm

/// `(outer, channels, inner)` for `[N, C]` or `[N, C, H, W]`.
fn bn_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let inner = shape[2..].iter().product();
    (n, c, inner)
}

pub(crate) struct BnCache<T: Real> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

pub(crate) struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    pub var_unbiased: Vec<f64>,
}

pub(crate) fn bn_forward_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, BnCache<T>, BnBatchStats) {
    let (n, c, inner) = bn_layout(x.shape());
    let m = (n * inner) as f64;
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            mean[ch] += xd[off..off + inner].iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0f64; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            var[ch] += xd[off..off + inner]
                .iter()
                .map(|v| (v.to_f64() - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    let var_unbiased = var
        .iter()
        .map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 })
        .collect();
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut xhat = vec![T::ZERO; xd.len()];
    let mut y = vec![T::ZERO; xd.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            let (g, b) = (gamma.data()[ch].to_f64(), beta.data()[ch].to_f64());
            for i in off..off + inner {
                let h = (xd[i].to_f64() - mean[ch]) * inv_std[ch];
                xhat[i] = T::from_f64(h);
                y[i] = T::from_f64(g * h + b);
            }
        }
    }
    let shape = x.shape().to_vec();
    (
        Tensor::new(shape.clone(), y).expect("bn shape"),
        BnCache {
            xhat: Tensor::new(shape, xhat).expect("bn shape"),
            inv_std,
        },
        BnBatchStats { mean, var_unbiased },
    )
}

pub(crate) fn bn_forward_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, inner) = bn_layout(x.shape());
    let mut y = x.clone();
    let yd = y.data_mut();
    for ch in 0..c {
        let inv = 1.0 / (running_var.data()[ch].to_f64() + BN_EPS).sqrt();
        let scale = gamma.data()[ch].to_f64() * inv;
        let shift = beta.data()[ch].to_f64() - running_mean.data()[ch].to_f64() * scale;
        for s in 0..n {
            let off = (s * c + ch) * inner;
            for v in &mut yd[off..off + inner] {
                *v = T::from_f64(v.to_f64() * scale + shift);
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, inner) = bn_layout(dy.shape());
    let m = (n * inner) as f64;
    let dyd = dy.data();
    let xh = cache.xhat.data();
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            for i in off..off + inner {
                let d = dyd[i].to_f64();
                sum_dy[ch] += d;
                sum_dy_xhat[ch] += d * xh[i].to_f64();
            }
        }
    }
    let mut dx = vec![T::ZERO; dyd.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            let k = gamma.data()[ch].to_f64() * cache.inv_std[ch] / m;
            for i in off..off + inner {
                let v = m * dyd[i].to_f64() - sum_dy[ch] - xh[i].to_f64() * sum_dy_xhat[ch];
                dx[i] = T::from_f64(k * v);
            }
        }
    }
    (
        Tensor::new(dy.shape().to_vec(), dx).expect("bn dx shape"),
        Tensor::new(vec![c], sum_dy_xhat.into_iter().map(T::from_f64).collect()).expect("dgamma"),
        Tensor::new(vec![c], sum_dy.into_iter().map(T::from_f64).collect()).expect("dbeta"),
    )
}

// ---------------------------------------------------------------- loss

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let n = logits.batch();
    let k = logits.item_len();
    let mut grad = vec![T::ZERO; n * k];
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f64; k];
    for (s, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, v) in probs.iter_mut().zip(row) {
            *p = (v.to_f64() - max).exp();
            z += *p;
        }
        loss += z.ln() + max - row[labels[s]].to_f64();
        for (j, p) in probs.iter().enumerate() {
            let target = if j == labels[s] { 1.0 } else { 0.0 };
            grad[s * k + j] = T::from_f64((p / z - target) / n as f64);
        }
    }
    (
        loss / n as f64,
        Tensor::new(logits.shape().to_vec(), grad).expect("grad shape"),
    )
}

/// Index of the largest logit, ignoring NaN (all-NaN rows predict 0).
pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.iter().enumerate() {
        let v = v.to_f64();
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
