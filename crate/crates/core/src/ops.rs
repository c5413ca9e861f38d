//! Forward and backward kernels for every differentiable operation.
//!
//! Functions here are pure: they take tensors and return tensors (plus
//! whatever the backward pass needs). [`crate::tape::Tape`] strings them
//! together and [`crate::capsule`] composes them into the network.
//!
//! Spatial ops accept either a single item `[C, H, W]` (`[C, L]` for 1D) or a
//! batch `[B, C, H, W]` (`[B, C, L]`).

use crate::error::{Error, Result};
use crate::par;
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
    /// Input carried a leading batch axis.
    pub batched: bool,
    /// 1D convolution (`h == kh == 1`, no height axis in shapes).
    pub one_d: bool,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn output_shape(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(4);
        if self.batched {
            s.push(self.batch);
        }
        s.push(self.c_out);
        if !self.one_d {
            s.push(self.ho);
        }
        s.push(self.wo);
        s
    }
}

fn out_extent(op: &'static str, axis: &str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim(op, "stride must be at least 1"));
    }
    let padded = len + 2 * pad;
    if k > padded {
        return Err(Error::dim(
            op,
            format!("kernel extent {k} exceeds padded input extent {padded} on axis {axis}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) fn conv2d_geom<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    const OP: &str = "conv2d";
    let (batch, c_in, h, w, batched) = match *input.shape() {
        [c, h, w] => (1, c, h, w, false),
        [b, c, h, w] => (b, c, h, w, true),
        _ => {
            return Err(Error::dim(
                OP,
                format!("input must be [C,H,W] or [B,C,H,W], got {:?}", input.shape()),
            ))
        }
    };
    let &[c_out, kc, kh, kw] = kernel.shape() else {
        return Err(Error::dim(
            OP,
            format!("kernel must be [C_out,C_in,kH,kW], got {:?}", kernel.shape()),
        ));
    };
    if kc != c_in {
        return Err(Error::dim(
            OP,
            format!("axis C_in: kernel expects {kc} input channels, input has {c_in}"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::dim(
            OP,
            format!("axis C_out: bias shape {:?}, expected [{c_out}]", bias.shape()),
        ));
    }
    let ho = out_extent(OP, "H", h, kh, stride, pad)?;
    let wo = out_extent(OP, "W", w, kw, stride, pad)?;
    Ok(ConvGeom {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
        batched,
        one_d: false,
    })
}

pub(crate) fn conv1d_geom<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<ConvGeom> {
    const OP: &str = "conv1d";
    let (batch, c_in, l, batched) = match *input.shape() {
        [c, l] => (1, c, l, false),
        [b, c, l] => (b, c, l, true),
        _ => {
            return Err(Error::dim(
                OP,
                format!("input must be [C,L] or [B,C,L], got {:?}", input.shape()),
            ))
        }
    };
    let &[c_out, kc, k] = kernel.shape() else {
        return Err(Error::dim(
            OP,
            format!("kernel must be [C_out,C_in,k], got {:?}", kernel.shape()),
        ));
    };
    if kc != c_in {
        return Err(Error::dim(
            OP,
            format!("axis C_in: kernel expects {kc} input channels, input has {c_in}"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::dim(
            OP,
            format!("axis C_out: bias shape {:?}, expected [{c_out}]", bias.shape()),
        ));
    }
    let lo = out_extent(OP, "L", l, k, stride, 0)?;
    Ok(ConvGeom {
        batch,
        c_in,
        h: 1,
        w: l,
        c_out,
        kh: 1,
        kw: k,
        stride,
        pad: 0,
        ho: 1,
        wo: lo,
        batched,
        one_d: true,
    })
}

/// Unfold one input item into a `[C_in·kH·kW, H'·W']` column matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.out_len();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an input item.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.out_len();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dx[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Element>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let rows = g.cols_rows();
    let n = g.out_len();
    let per_out = g.c_out * n;
    let mut out = vec![T::zero(); g.batch * per_out];
    par::for_each_chunk_mut(&mut out, per_out, |b, ob| {
        let x = &input[b * g.in_len()..(b + 1) * g.in_len()];
        let mut cols = vec![T::zero(); rows * n];
        im2col(x, g, &mut cols);
        T::gemm(g.c_out, rows, n, kernel, (rows, 1), &cols, (n, 1), ob, n, false);
        for (c, &bv) in bias.iter().enumerate() {
            ob[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += bv);
        }
    });
    out
}

/// Gradients of a convolution.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

fn conv_backward<T: Element>(
    g: &ConvGeom,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias_shape: &[usize],
    dout: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let rows = g.cols_rows();
    let n = g.out_len();
    let per_out = g.c_out * n;
    let in_len = g.in_len();
    let x = input.data();
    let k = kernel.data();
    let parts = par::map_indexed(g.batch, |b| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let db_out = &dout[b * per_out..(b + 1) * per_out];
        let mut cols = vec![T::zero(); rows * n];
        im2col(xb, g, &mut cols);
        let mut dk = vec![T::zero(); g.c_out * rows];
        // dK = dY · colsᵀ
        T::gemm(g.c_out, n, rows, db_out, (n, 1), &cols, (1, n), &mut dk, rows, false);
        let db: Vec<T> = (0..g.c_out)
            .map(|c| {
                let s: f64 = db_out[c * n..(c + 1) * n].iter().map(|v| v.as_f64()).sum();
                T::from_f64_lossy(s)
            })
            .collect();
        let dx = need_input.then(|| {
            // dcols = Kᵀ · dY
            T::gemm(rows, g.c_out, n, k, (1, rows), db_out, (n, 1), &mut cols, n, false);
            let mut dx = vec![T::zero(); in_len];
            col2im(&cols, g, &mut dx);
            dx
        });
        (dk, db, dx)
    });
    let mut dk = vec![T::zero(); g.c_out * rows];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = need_input.then(|| Vec::with_capacity(g.batch * in_len));
    for (pk, pb, px) in parts {
        dk.iter_mut().zip(&pk).for_each(|(a, b)| *a += *b);
        db.iter_mut().zip(&pb).for_each(|(a, b)| *a += *b);
        if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
            dx.extend_from_slice(&px);
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::from_parts_unchecked(input.shape().to_vec(), d)),
        kernel: Tensor::from_parts_unchecked(kernel.shape().to_vec(), dk),
        bias: Tensor::from_parts_unchecked(bias_shape.to_vec(), db),
    }
}

/// 2D cross-correlation (no kernel flip) with symmetric zero padding.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geom(input, kernel, bias, stride, padding)?;
    let out = conv_forward(&g, input.data(), kernel.data(), bias.data());
    Ok(Tensor::from_parts_unchecked(g.output_shape(), out))
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    dout: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv2d_geom(input, kernel, bias, stride, padding)?;
    check_grad_shape("conv2d", &g.output_shape(), dout)?;
    Ok(conv_backward(&g, input, kernel, bias.shape(), dout.data(), need_input))
}

/// 1D cross-correlation without padding.
pub fn conv1d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = conv1d_geom(input, kernel, bias, stride)?;
    let out = conv_forward(&g, input.data(), kernel.data(), bias.data());
    Ok(Tensor::from_parts_unchecked(g.output_shape(), out))
}

pub fn conv1d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    dout: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv1d_geom(input, kernel, bias, stride)?;
    check_grad_shape("conv1d", &g.output_shape(), dout)?;
    Ok(conv_backward(&g, input, kernel, bias.shape(), dout.data(), need_input))
}

fn check_grad_shape<T: Element>(op: &'static str, expected: &[usize], grad: &Tensor<T>) -> Result<()> {
    if grad.shape() != expected {
        return Err(Error::dim(
            op,
            format!("upstream gradient {:?}, expected {expected:?}", grad.shape()),
        ));
    }
    Ok(())
}

/// Max pooling result; `argmax` holds the flat input index chosen per output.
pub struct MaxPool<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn maxpool2d<T: Element>(input: &Tensor<T>, k: usize, stride: usize) -> Result<MaxPool<T>> {
    const OP: &str = "maxpool2d";
    let (planes, h, w, lead): (usize, usize, usize, &[usize]) = match input.shape() {
        [c, h, w] => (*c, *h, *w, &input.shape()[..1]),
        [b, c, h, w] => (b * c, *h, *w, &input.shape()[..2]),
        s => {
            return Err(Error::dim(
                OP,
                format!("input must be [C,H,W] or [B,C,H,W], got {s:?}"),
            ))
        }
    };
    if k == 0 || stride == 0 {
        return Err(Error::dim(OP, "window and stride must be at least 1"));
    }
    if k > h.min(w) {
        return Err(Error::dim(
            OP,
            format!("window {k} exceeds spatial extent {h}x{w}"),
        ));
    }
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = base + oi * stride * w + oj * stride;
                for di in 0..k {
                    for dj in 0..k {
                        let idx = base + (oi * stride + di) * w + oj * stride + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = lead.to_vec();
    shape.extend([ho, wo]);
    Ok(MaxPool {
        output: Tensor::from_parts_unchecked(shape, out),
        argmax,
    })
}

pub fn maxpool2d_backward<T: Element>(input_shape: &[usize], argmax: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(dout.data()) {
        dx[i] += g;
    }
    Tensor::from_parts_unchecked(input_shape.to_vec(), dx)
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Relu backward. With `guided`, negative upstream gradients are also
/// zeroed (guided back-propagation).
pub fn relu_backward<T: Element>(x: &Tensor<T>, dout: &Tensor<T>, guided: bool) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&xv, &g)| {
            if xv > T::zero() && (!guided || g > T::zero()) {
                g
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_parts_unchecked(x.shape().to_vec(), data)
}

/// Batch-norm mode. `Infer` carries the running statistics to normalize with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Infer { mean: &'a [T], var: &'a [T] },
}

/// Output of [`batch_norm`] plus what backward needs.
pub struct BatchNorm<T> {
    pub output: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and biased variance (train mode only).
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(
            "batch_norm",
            format!("input must be [B,C,...], got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Batch normalization over every axis except the channel axis (axis 1).
pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BnMode<'_, T>,
    eps: f64,
) -> Result<BatchNorm<T>> {
    let (b, c, inner) = bn_layout(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "batch_norm",
            format!(
                "gamma {:?} / beta {:?} must be [{c}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let n = b * inner;
    if n == 0 {
        return Err(Error::Parameter("batch_norm on an empty batch".into()));
    }
    let data = x.data();
    let at = |bi: usize, ci: usize| (bi * c + ci) * inner;
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            let mut mean = vec![0f64; c];
            let mut var = vec![0f64; c];
            for ci in 0..c {
                let mut s = 0f64;
                for bi in 0..b {
                    s += data[at(bi, ci)..at(bi, ci) + inner]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                let m = s / n as f64;
                let mut ss = 0f64;
                for bi in 0..b {
                    ss += data[at(bi, ci)..at(bi, ci) + inner]
                        .iter()
                        .map(|v| (v.as_f64() - m).powi(2))
                        .sum::<f64>();
                }
                mean[ci] = m;
                var[ci] = ss / n as f64;
            }
            let stats = (
                mean.iter().map(|&v| T::from_f64_lossy(v)).collect(),
                var.iter().map(|&v| T::from_f64_lossy(v)).collect(),
            );
            (mean, var, Some(stats))
        }
        BnMode::Infer { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::dim(
                    "batch_norm",
                    format!("running stats must have {c} channels"),
                ));
            }
            (
                mean.iter().map(|v| v.as_f64()).collect(),
                var.iter().map(|v| v.as_f64()).collect(),
                None,
            )
        }
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for bi in 0..b {
        for ci in 0..c {
            let (g, be, m, is) = (gamma.data()[ci], beta.data()[ci], mean_t[ci], inv_std[ci]);
            let r = at(bi, ci)..at(bi, ci) + inner;
            for idx in r {
                let xh = (data[idx] - m) * is;
                xhat[idx] = xh;
                out[idx] = g * xh + be;
            }
        }
    }
    Ok(BatchNorm {
        output: Tensor::from_parts_unchecked(x.shape().to_vec(), out),
        xhat,
        inv_std,
        batch_stats: stats,
    })
}

/// Gradients of batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Element>(
    shape: &[usize],
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, inner) = bn_layout(shape)?;
    let n = (b * inner) as f64;
    let dy = dout.data();
    let at = |bi: usize, ci: usize| (bi * c + ci) * inner;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        for bi in 0..b {
            for idx in at(bi, ci)..at(bi, ci) + inner {
                sum_dy += dy[idx].as_f64();
                sum_dy_xhat += (dy[idx] * xhat[idx]).as_f64();
            }
        }
        dgamma[ci] = T::from_f64_lossy(sum_dy_xhat);
        dbeta[ci] = T::from_f64_lossy(sum_dy);
        let g = gamma.data()[ci];
        let is = inv_std[ci];
        if train {
            // dx = γ·inv_std/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
            let k = T::from_f64_lossy(g.as_f64() * is.as_f64() / n);
            let nn = T::from_f64_lossy(n);
            let sdy = T::from_f64_lossy(sum_dy);
            let sdyx = T::from_f64_lossy(sum_dy_xhat);
            for bi in 0..b {
                for idx in at(bi, ci)..at(bi, ci) + inner {
                    dx[idx] = k * (nn * dy[idx] - sdy - xhat[idx] * sdyx);
                }
            }
        } else {
            let k = g * is;
            for bi in 0..b {
                for idx in at(bi, ci)..at(bi, ci) + inner {
                    dx[idx] = k * dy[idx];
                }
            }
        }
    }
    Ok((
        Tensor::from_parts_unchecked(shape.to_vec(), dx),
        Tensor::from_parts_unchecked(vec![c], dgamma),
        Tensor::from_parts_unchecked(vec![c], dbeta),
    ))
}

/// `(outer, len, inner)` strides for iterating along `axis`.
pub(crate) fn axis_layout(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout("softmax", x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mx = (0..len).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut total = 0f64;
            for k in 0..len {
                let e = (d[idx(k)] - mx).exp();
                out[idx(k)] = e;
                total += e.as_f64();
            }
            let inv = T::from_f64_lossy(1.0 / total);
            for k in 0..len {
                out[idx(k)] *= inv;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), out))
}

/// Softmax backward given its output `y`.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, dout: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout("softmax", y.shape(), axis)?;
    let (yd, g) = (y.data(), dout.data());
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| (yd[idx(k)] * g[idx(k)]).as_f64()).sum();
            let dot = T::from_f64_lossy(dot);
            for k in 0..len {
                dx[idx(k)] = yd[idx(k)] * (g[idx(k)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(y.shape().to_vec(), dx))
}

/// Inverted dropout. Returns the output and the applied per-element scale
/// (0 or `1/(1-p)`). Draws one uniform per element from `rng`.
pub fn dropout<T: Element>(x: &Tensor<T>, p: f64, rng: &mut RngStream) -> Result<(Tensor<T>, Vec<T>)> {
    validate_dropout(p)?;
    if p == 0.0 {
        return Ok((x.clone(), vec![T::one(); x.len()]));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.uniform() < p { T::zero() } else { keep })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
    Ok((Tensor::from_parts_unchecked(x.shape().to_vec(), out), mask))
}

pub(crate) fn validate_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Per-channel mean and Bessel-corrected variance over the spatial axes.
///
/// `[K,H,W] → [2,K]`, `[B,K,H,W] → [B,2,K]`. Row 0 holds means, row 1
/// variances.
pub fn statistical_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, k, hw, batched) = stat_layout(x.shape())?;
    let d = x.data();
    let mut out = vec![T::zero(); b * 2 * k];
    for bi in 0..b {
        for ki in 0..k {
            let s = &d[(bi * k + ki) * hw..(bi * k + ki + 1) * hw];
            let mean = s.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
            let var = s.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / (hw - 1) as f64;
            out[bi * 2 * k + ki] = T::from_f64_lossy(mean);
            out[bi * 2 * k + k + ki] = T::from_f64_lossy(var);
        }
    }
    let shape = if batched { vec![b, 2, k] } else { vec![2, k] };
    Ok(Tensor::from_parts_unchecked(shape, out))
}

fn stat_layout(shape: &[usize]) -> Result<(usize, usize, usize, bool)> {
    let (b, k, h, w, batched) = match *shape {
        [k, h, w] => (1, k, h, w, false),
        [b, k, h, w] => (b, k, h, w, true),
        _ => {
            return Err(Error::dim(
                "statistical_pool",
                format!("input must be [K,H,W] or [B,K,H,W], got {shape:?}"),
            ))
        }
    };
    if h * w < 2 {
        return Err(Error::dim(
            "statistical_pool",
            format!("degenerate input: H·W = {} < 2, variance undefined", h * w),
        ));
    }
    Ok((b, k, h * w, batched))
}

pub fn statistical_pool_backward<T: Element>(x: &Tensor<T>, dout: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, k, hw, _) = stat_layout(x.shape())?;
    let d = x.data();
    let g = dout.data();
    let mut dx = vec![T::zero(); d.len()];
    for bi in 0..b {
        for ki in 0..k {
            let r = (bi * k + ki) * hw..(bi * k + ki + 1) * hw;
            let mean = d[r.clone()].iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
            let gm = g[bi * 2 * k + ki].as_f64() / hw as f64;
            let gv = g[bi * 2 * k + k + ki].as_f64() * 2.0 / (hw - 1) as f64;
            for idx in r {
                dx[idx] = T::from_f64_lossy(gm + gv * (d[idx].as_f64() - mean));
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), dx))
}

/// `‖u‖²/(1+‖u‖²) · u/‖u‖`, with `squash(0) = 0`.
pub fn squash_vec<T: Element>(u: &[T]) -> Vec<T> {
    let s: f64 = u.iter().map(|v| v.as_f64().powi(2)).sum();
    if s == 0.0 {
        return vec![T::zero(); u.len()];
    }
    let scale = T::from_f64_lossy(s.sqrt() / (1.0 + s));
    u.iter().map(|&v| v * scale).collect()
}

/// Squash every vector along the last axis.
pub fn squash<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("squash", "scalar input"))?;
    let out: Vec<T> = x.data().chunks(d).flat_map(squash_vec).collect();
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), out))
}

pub fn squash_backward<T: Element>(x: &Tensor<T>, dout: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("squash", "scalar input"))?;
    let mut dx = Vec::with_capacity(x.len());
    for (u, g) in x.data().chunks(d).zip(dout.data().chunks(d)) {
        let s: f64 = u.iter().map(|v| v.as_f64().powi(2)).sum();
        if s == 0.0 {
            dx.extend(std::iter::repeat_n(T::zero(), d));
            continue;
        }
        let r = s.sqrt();
        let scale = r / (1.0 + s);
        let coef = (1.0 - s) / (r * (1.0 + s).powi(2));
        let dot: f64 = u.iter().zip(g).map(|(a, b)| (*a * *b).as_f64()).sum();
        for (&ui, &gi) in u.iter().zip(g) {
            dx.push(T::from_f64_lossy(
                scale * gi.as_f64() + coef * dot * ui.as_f64(),
            ));
        }
    }
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), dx))
}

/// Routing-prediction layout: `W [N,J,D,E]`, `u [B,N,E]` → `û [B,N,J,D]`.
pub(crate) fn route_dims<T: Element>(w: &Tensor<T>, u: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let &[n, j, d, e] = w.shape() else {
        return Err(Error::dim(
            "route_predict",
            format!("routing weights must be [N,J,D,E], got {:?}", w.shape()),
        ));
    };
    let &[b, un, ue] = u.shape() else {
        return Err(Error::dim(
            "route_predict",
            format!("capsule inputs must be [B,N,E], got {:?}", u.shape()),
        ));
    };
    if un != n || ue != e {
        return Err(Error::dim(
            "route_predict",
            format!("inputs {:?} do not match weights {:?}", u.shape(), w.shape()),
        ));
    }
    Ok((b, n, j, d, e))
}

/// `û[b,i,j,:] = W[i,j] · u[b,i,:]`.
pub fn route_predict<T: Element>(w: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, j, d, e) = route_dims(w, u)?;
    let (wd, ud) = (w.data(), u.data());
    let mut out = vec![T::zero(); b * n * j * d];
    for bi in 0..b {
        for i in 0..n {
            let uv = &ud[(bi * n + i) * e..(bi * n + i + 1) * e];
            for jj in 0..j {
                for dd in 0..d {
                    let wr = &wd[((i * j + jj) * d + dd) * e..][..e];
                    let mut acc = T::zero();
                    for (a, c) in wr.iter().zip(uv) {
                        acc += *a * *c;
                    }
                    out[((bi * n + i) * j + jj) * d + dd] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![b, n, j, d], out))
}

/// Gradients of [`route_predict`]: `(dW, du)`.
pub fn route_predict_backward<T: Element>(
    w: &Tensor<T>,
    u: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, n, j, d, e) = route_dims(w, u)?;
    let (wd, ud, g) = (w.data(), u.data(), dout.data());
    let mut dw = vec![T::zero(); wd.len()];
    let mut du = vec![T::zero(); ud.len()];
    for bi in 0..b {
        for i in 0..n {
            let ub = (bi * n + i) * e;
            for jj in 0..j {
                for dd in 0..d {
                    let gv = g[((bi * n + i) * j + jj) * d + dd];
                    let wb = ((i * j + jj) * d + dd) * e;
                    for ee in 0..e {
                        dw[wb + ee] += gv * ud[ub + ee];
                        du[ub + ee] += gv * wd[wb + ee];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts_unchecked(w.shape().to_vec(), dw),
        Tensor::from_parts_unchecked(u.shape().to_vec(), du),
    ))
}

fn routing_dims<T: Element>(op: &'static str, c_or_a: &[usize], uhat: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let &[b, n, j, d] = uhat.shape() else {
        return Err(Error::dim(
            op,
            format!("predictions must be [B,N,J,D], got {:?}", uhat.shape()),
        ));
    };
    if c_or_a != [b, n, j] {
        return Err(Error::dim(
            op,
            format!("coefficients {c_or_a:?} do not match predictions {:?}", uhat.shape()),
        ));
    }
    Ok((b, n, j, d))
}

/// `s[b,j,:] = Σ_i c[b,i,j] · û[b,i,j,:]`.
pub fn weighted_sum<T: Element>(c: &Tensor<T>, uhat: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, j, d) = routing_dims("weighted_sum", c.shape(), uhat)?;
    let (cd, ud) = (c.data(), uhat.data());
    let mut out = vec![T::zero(); b * j * d];
    for bi in 0..b {
        for i in 0..n {
            for jj in 0..j {
                let cv = cd[(bi * n + i) * j + jj];
                let src = &ud[((bi * n + i) * j + jj) * d..][..d];
                let dst = &mut out[(bi * j + jj) * d..][..d];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += cv * x;
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![b, j, d], out))
}

/// Gradients of [`weighted_sum`]: `(dc, dû)`.
pub fn weighted_sum_backward<T: Element>(
    c: &Tensor<T>,
    uhat: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, n, j, d) = routing_dims("weighted_sum", c.shape(), uhat)?;
    let (cd, ud, g) = (c.data(), uhat.data(), dout.data());
    let mut dc = vec![T::zero(); cd.len()];
    let mut du = vec![T::zero(); ud.len()];
    for bi in 0..b {
        for i in 0..n {
            for jj in 0..j {
                let ci = (bi * n + i) * j + jj;
                let gs = &g[(bi * j + jj) * d..][..d];
                let us = &ud[ci * d..][..d];
                let mut acc = T::zero();
                for dd in 0..d {
                    acc += gs[dd] * us[dd];
                    du[ci * d + dd] = cd[ci] * gs[dd];
                }
                dc[ci] = acc;
            }
        }
    }
    Ok((
        Tensor::from_parts_unchecked(c.shape().to_vec(), dc),
        Tensor::from_parts_unchecked(uhat.shape().to_vec(), du),
    ))
}

/// `a[b,i,j] = û[b,i,j,:] · v[b,j,:]`.
pub fn agreement<T: Element>(uhat: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, n, j, d] = uhat.shape() else {
        return Err(Error::dim("agreement", "predictions must be [B,N,J,D]"));
    };
    if v.shape() != [b, j, d] {
        return Err(Error::dim(
            "agreement",
            format!("outputs {:?} do not match predictions {:?}", v.shape(), uhat.shape()),
        ));
    }
    let (ud, vd) = (uhat.data(), v.data());
    let mut out = vec![T::zero(); b * n * j];
    for bi in 0..b {
        for i in 0..n {
            for jj in 0..j {
                let us = &ud[((bi * n + i) * j + jj) * d..][..d];
                let vs = &vd[(bi * j + jj) * d..][..d];
                let mut acc = T::zero();
                for (x, y) in us.iter().zip(vs) {
                    acc += *x * *y;
                }
                out[(bi * n + i) * j + jj] = acc;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![b, n, j], out))
}

/// Gradients of [`agreement`]: `(dû, dv)`.
pub fn agreement_backward<T: Element>(
    uhat: &Tensor<T>,
    v: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let &[b, n, j, d] = uhat.shape() else {
        return Err(Error::dim("agreement", "predictions must be [B,N,J,D]"));
    };
    let (ud, vd, g) = (uhat.data(), v.data(), dout.data());
    let mut du = vec![T::zero(); ud.len()];
    let mut dv = vec![T::zero(); vd.len()];
    for bi in 0..b {
        for i in 0..n {
            for jj in 0..j {
                let gv = g[(bi * n + i) * j + jj];
                let ub = ((bi * n + i) * j + jj) * d;
                let vb = (bi * j + jj) * d;
                for dd in 0..d {
                    du[ub + dd] = gv * vd[vb + dd];
                    dv[vb + dd] += gv * ud[ub + dd];
                }
            }
        }
    }
    Ok((
        Tensor::from_parts_unchecked(uhat.shape().to_vec(), du),
        Tensor::from_parts_unchecked(v.shape().to_vec(), dv),
    ))
}

/// Mean over `axis`, removing it.
pub fn mean_axis<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout("mean_axis", x.shape(), axis)?;
    let d = x.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let s: f64 = (0..len).map(|k| d[(o * len + k) * inner + i].as_f64()).sum();
            out.push(T::from_f64_lossy(s / len as f64));
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts_unchecked(shape, out))
}

pub fn mean_axis_backward<T: Element>(input_shape: &[usize], axis: usize, dout: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout("mean_axis", input_shape, axis)?;
    let g = dout.data();
    let scale = T::from_f64_lossy(1.0 / len as f64);
    let mut dx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                dx[(o * len + k) * inner + i] = g[o * inner + i] * scale;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(input_shape.to_vec(), dx))
}

/// Probability clamp used by the loss.
pub const PROB_CLAMP: f64 = 1e-7;

fn check_labels(probs_shape: &[usize], labels: &[usize]) -> Result<(usize, usize)> {
    let &[b, j] = probs_shape else {
        return Err(Error::dim(
            "cross_entropy",
            format!("probabilities must be [B,J], got {probs_shape:?}"),
        ));
    };
    if labels.len() != b {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels for a batch of {b}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= j) {
        return Err(Error::Parameter(format!(
            "label {bad} out of range for {j} classes"
        )));
    }
    Ok((b, j))
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

/// Batch-mean of `−ln ŷ[y]`, with ŷ clamped to `[1e-7, 1 − 1e-7]`.
///
/// For two classes this equals `−(y ln ŷ + (1−y) ln(1−ŷ))` on the fake-class
/// probability because the two probabilities sum to one.
pub fn cross_entropy<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (b, j) = check_labels(probs.shape(), labels)?;
    let p = probs.data();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(bi, &y)| -clamp_prob(p[bi * j + y].as_f64()).0.ln())
        .sum();
    Ok(T::from_f64_lossy(total / b as f64))
}

pub fn cross_entropy_backward<T: Element>(probs: &Tensor<T>, labels: &[usize], dout: T) -> Result<Tensor<T>> {
    let (b, j) = check_labels(probs.shape(), labels)?;
    let p = probs.data();
    let mut dp = vec![T::zero(); p.len()];
    for (bi, &y) in labels.iter().enumerate() {
        let (pc, clamped) = clamp_prob(p[bi * j + y].as_f64());
        if !clamped {
            dp[bi * j + y] = T::from_f64_lossy(-dout.as_f64() / (pc * b as f64));
        }
    }
    Ok(Tensor::from_parts_unchecked(probs.shape().to_vec(), dp))
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat", "nothing to concatenate"))?;
    let rank = first.ndim();
    if axis >= rank {
        return Err(Error::dim("concat", format!("axis {axis} out of range")));
    }
    let mut total = 0;
    for (i, p) in parts.iter().enumerate() {
        let ok = p.ndim() == rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(a, (x, y))| a == axis || x == y);
        if !ok {
            return Err(Error::dim(
                "concat",
                format!("part {i} has shape {:?}, incompatible with {:?}", p.shape(), first.shape()),
            ));
        }
        total += p.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts_unchecked(shape, data))
}

/// Split an upstream gradient back into the concatenated parts' shapes.
pub fn concat_backward<T: Element>(shapes: &[Vec<usize>], axis: usize, dout: &Tensor<T>) -> Vec<Tensor<T>> {
    let outer: usize = dout.shape()[..axis].iter().product();
    let inner: usize = dout.shape()[axis + 1..].iter().product();
    let mut parts: Vec<Vec<T>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let g = dout.data();
    let mut off = 0;
    for _ in 0..outer {
        for (p, s) in parts.iter_mut().zip(shapes) {
            let chunk = s[axis] * inner;
            p.extend_from_slice(&g[off..off + chunk]);
            off += chunk;
        }
    }
    parts
        .into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::from_parts_unchecked(s.clone(), d))
        .collect()
}
