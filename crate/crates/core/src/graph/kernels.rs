// Forward and backward kernels for the graph primitives. Shapes are checked
// at graph construction; these functions assume consistent operands.

use super::{Mode, RunningStats, BN_EPS};
use crate::tensor::{log_sum_exp, softmax_row, Element, Tensor};

pub(super) fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    let n = b.len();
    for chunk in out.data_mut().chunks_mut(n) {
        for (o, &v) in chunk.iter_mut().zip(b.data()) {
            *o = *o + v;
        }
    }
    out
}

/// Sums `g` over leading dims so that it matches `shape` (inverse of the
/// broadcast in [`add`]).
pub(super) fn reduce_to<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let n = out.len();
    for chunk in g.data().chunks(n) {
        for (o, &v) in out.data_mut().iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

pub(super) fn matmul<T: Element>(a: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = w.shape()[1];
    let mut out = Tensor::zeros(&[n, m]);
    T::gemm(
        n,
        k,
        m,
        T::one(),
        a.data(),
        k as isize,
        1,
        w.data(),
        m as isize,
        1,
        T::zero(),
        out.data_mut(),
        m as isize,
        1,
    );
    out
}

pub(super) fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = w.shape()[1];
    let ga = need_a.then(|| {
        // g [n,m] x w^T [m,k]
        let mut ga = Tensor::zeros(&[n, k]);
        T::gemm(
            n,
            m,
            k,
            T::one(),
            g.data(),
            m as isize,
            1,
            w.data(),
            1,
            m as isize,
            T::zero(),
            ga.data_mut(),
            k as isize,
            1,
        );
        ga
    });
    let gw = need_w.then(|| {
        // a^T [k,n] x g [n,m]
        let mut gw = Tensor::zeros(&[k, m]);
        T::gemm(
            k,
            n,
            m,
            T::one(),
            a.data(),
            1,
            k as isize,
            g.data(),
            m as isize,
            1,
            T::zero(),
            gw.data_mut(),
            m as isize,
            1,
        );
        gw
    });
    (ga, gw)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let (c, h, wd) = (x[1], x[2], x[3]);
        let (kh, kw) = (w[2], w[3]);
        Self {
            c,
            h,
            w: wd,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one sample into `col[rows, cols]`.
    fn im2col<T: Element>(&self, x: &[T], col: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if y < 0 || y >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            *v = if xx < 0 || xx >= self.w as isize {
                                T::zero()
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates `col` into `dx`.
    fn col2im<T: Element>(&self, col: &[T], dx: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.w as isize {
                                dst[xx as usize] = dst[xx as usize] + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let geo = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let n = x.shape()[0];
    let o = w.shape()[0];
    let (rows, cols) = (geo.rows(), geo.cols());
    let mut out = Tensor::zeros(&[n, o, geo.oh, geo.ow]);
    let mut col = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for s in 0..n {
        let xs = x.sample(s);
        let b: &[T] = if geo.is_pointwise() {
            xs
        } else {
            geo.im2col(xs, &mut col);
            &col
        };
        T::gemm(
            o,
            rows,
            cols,
            T::one(),
            w.data(),
            rows as isize,
            1,
            b,
            cols as isize,
            1,
            T::zero(),
            out.sample_mut(s),
            cols as isize,
            1,
        );
    }
    out
}

pub(super) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let geo = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let n = x.shape()[0];
    let o = w.shape()[0];
    let (rows, cols) = (geo.rows(), geo.cols());
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![T::zero(); rows * cols];
    for s in 0..n {
        let gs = g.sample(s);
        if let Some(gw) = gw.as_mut() {
            let b: &[T] = if geo.is_pointwise() {
                x.sample(s)
            } else {
                geo.im2col(x.sample(s), &mut col);
                &col
            };
            // gw[o, rows] += g[o, cols] x col^T[cols, rows]
            T::gemm(
                o,
                cols,
                rows,
                T::one(),
                gs,
                cols as isize,
                1,
                b,
                1,
                cols as isize,
                T::one(),
                gw.data_mut(),
                rows as isize,
                1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            // dcol[rows, cols] = w^T[rows, o] x g[o, cols]
            if geo.is_pointwise() {
                T::gemm(
                    rows,
                    o,
                    cols,
                    T::one(),
                    w.data(),
                    1,
                    rows as isize,
                    gs,
                    cols as isize,
                    1,
                    T::zero(),
                    gx.sample_mut(s),
                    cols as isize,
                    1,
                );
            } else {
                T::gemm(
                    rows,
                    o,
                    cols,
                    T::one(),
                    w.data(),
                    1,
                    rows as isize,
                    gs,
                    cols as isize,
                    1,
                    T::zero(),
                    &mut col,
                    cols as isize,
                    1,
                );
                geo.col2im(&col, gx.sample_mut(s));
            }
        }
    }
    (gx, gw)
}

#[derive(Clone, Debug)]
pub(super) struct BnCache<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub unbiased_var: Vec<T>,
    pub train: bool,
}

fn bn_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    (n, c, inner)
}

pub(super) fn batchnorm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    mode: Mode,
) -> (Tensor<T>, BnCache<T>) {
    let (n, c, inner) = bn_layout(x.shape());
    let eps = T::from_f64_lossy(BN_EPS);
    let count = n * inner;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut unbiased_var = vec![T::zero(); c];
    let train = mode == Mode::Train;
    if train {
        let cnt = T::from_usize(count).unwrap();
        for s in 0..n {
            let xs = x.sample(s);
            for ch in 0..c {
                let sum = xs[ch * inner..(ch + 1) * inner].iter().fold(T::zero(), |a, &v| a + v);
                mean[ch] = mean[ch] + sum;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / cnt);
        for s in 0..n {
            let xs = x.sample(s);
            for ch in 0..c {
                let m = mean[ch];
                let sq = xs[ch * inner..(ch + 1) * inner]
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - m) * (v - m));
                var[ch] = var[ch] + sq;
            }
        }
        for ch in 0..c {
            let ss = var[ch];
            var[ch] = ss / cnt;
            unbiased_var[ch] = if count > 1 {
                ss / T::from_usize(count - 1).unwrap()
            } else {
                var[ch]
            };
        }
    } else {
        mean.copy_from_slice(&running.mean);
        var.copy_from_slice(&running.var);
        unbiased_var.copy_from_slice(&running.var);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let xs = x.sample(s);
        let os = out.sample_mut(s);
        for ch in 0..c {
            let (m, is, gm, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            let scale = gm * is;
            for k in ch * inner..(ch + 1) * inner {
                os[k] = (xs[k] - m) * scale + bt;
            }
        }
    }
    (
        out,
        BnCache {
            mean,
            inv_std,
            unbiased_var,
            train,
        },
    )
}

pub(super) fn batchnorm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    cache: &BnCache<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, inner) = bn_layout(x.shape());
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for s in 0..n {
        let xs = x.sample(s);
        let gs = g.sample(s);
        for ch in 0..c {
            let (m, is) = (cache.mean[ch], cache.inv_std[ch]);
            for k in ch * inner..(ch + 1) * inner {
                sum_g[ch] = sum_g[ch] + gs[k];
                sum_gx[ch] = sum_gx[ch] + gs[k] * (xs[k] - m) * is;
            }
        }
    }
    let ggamma = Tensor::new(vec![c], sum_gx.clone()).unwrap();
    let gbeta = Tensor::new(vec![c], sum_g.clone()).unwrap();
    let mut gx = Tensor::zeros(x.shape());
    let cnt = T::from_usize(n * inner).unwrap();
    for s in 0..n {
        let xs = x.sample(s);
        let gs = g.sample(s);
        let gxs = gx.sample_mut(s);
        for ch in 0..c {
            let (m, is, gm) = (cache.mean[ch], cache.inv_std[ch], gamma.data()[ch]);
            if cache.train {
                let mg = sum_g[ch] / cnt;
                let mgx = sum_gx[ch] / cnt;
                for k in ch * inner..(ch + 1) * inner {
                    let xhat = (xs[k] - m) * is;
                    gxs[k] = gm * is * (gs[k] - mg - xhat * mgx);
                }
            } else {
                for k in ch * inner..(ch + 1) * inner {
                    gxs[k] = gm * is * gs[k];
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

pub(super) fn avg_pool<T: Element>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / k, w / k);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    for s in 0..n {
        let xs = x.sample(s);
        let os = out.sample_mut(s);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for i in 0..k {
                        let row = ch * h * w + (oy * k + i) * w + ox * k;
                        for j in 0..k {
                            acc = acc + xs[row + j];
                        }
                    }
                    os[(ch * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
    }
    out
}

pub(super) fn avg_pool_backward<T: Element>(shape: &[usize], g: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let mut gx = Tensor::zeros(shape);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    for s in 0..n {
        let gs = g.sample(s);
        let gxs = gx.sample_mut(s);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = gs[(ch * oh + oy) * ow + ox] * inv;
                    for i in 0..k {
                        let row = ch * h * w + (oy * k + i) * w + ox * k;
                        for j in 0..k {
                            gxs[row + j] = v;
                        }
                    }
                }
            }
        }
    }
    gx
}

fn label_index<T: Element>(v: T, classes: usize) -> Result<usize, String> {
    let f = v.as_f64();
    if f < 0.0 || f.fract() != 0.0 || f as usize >= classes {
        return Err(format!("label {f} outside [0, {classes})"));
    }
    Ok(f as usize)
}

pub(super) fn softmax_ce<T: Element>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<Tensor<T>, String> {
    let n = logits.batch();
    let k = logits.sample_len();
    if labels.len() != n {
        return Err(format!("{} labels for batch of {}", labels.len(), n));
    }
    let mut total = T::zero();
    for s in 0..n {
        let row = logits.sample(s);
        let y = label_index(labels.data()[s], k)?;
        total = total + log_sum_exp(row) - row[y];
    }
    Ok(Tensor::scalar(total / T::from_usize(n).unwrap()))
}

pub(super) fn softmax_ce_backward<T: Element>(logits: &Tensor<T>, labels: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let n = logits.batch();
    let k = logits.sample_len();
    let scale = g.data()[0] / T::from_usize(n).unwrap();
    let mut out = Tensor::zeros(logits.shape());
    for s in 0..n {
        let p = softmax_row(logits.sample(s));
        let y = labels.data()[s].as_f64() as usize;
        let os = out.sample_mut(s);
        for j in 0..k {
            let t = if j == y { T::one() } else { T::zero() };
            os[j] = (p[j] - t) * scale;
        }
    }
    out
}
