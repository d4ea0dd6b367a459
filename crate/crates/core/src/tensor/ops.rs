//! Forward and backward math for every primitive the network uses.
//!
//! These are pure functions on tensors; the tape in [`super::tape`] wraps
//! them to record the computation. Convolutions lower to im2col plus a GEMM,
//! except depthwise convolutions which use direct loops. All reductions run
//! in a fixed sequential order so results are bit-reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Tensor};
use crate::error::{ensure_contract, Result};

/// Output extent of a convolution along one axis, `None` when the kernel
/// does not fit into the padded input.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Unfolds one `C x H x W` sample into a `(C*kh*kw) x (oh*ow)` matrix.
fn im2col<T: Element>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    col.fill(T::ZERO);
    let pad = padding as isize;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            col[base + oy * ow + ox] = input[in_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one input sample.
fn col2im_add<T: Element>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    out: &mut [T],
) {
    let pad = padding as isize;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let out_row = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            out[out_row + ix as usize] += col[base + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Standard cross-correlation over `N x Cin x H x W`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let (n, cin, h, w) = input.dims4(OP)?;
    let (cout, wcin, kh, kw) = weight.dims4(OP)?;
    ensure_contract!(stride >= 1, OP, "stride must be >= 1, got {stride}");
    ensure_contract!(
        wcin == cin,
        OP,
        "weight shape {:?} expects {wcin} input channels, input shape {:?} has {cin}",
        weight.shape(),
        input.shape()
    );
    let (oh, ow) = match (
        conv_output_dim(h, kh, stride, padding),
        conv_output_dim(w, kw, stride, padding),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(crate::error::Error::contract(
                OP,
                format!(
                    "kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding} (zero-size output)"
                ),
            ))
        }
    };
    if let Some(b) = bias {
        ensure_contract!(
            b.shape() == [cout],
            OP,
            "bias shape {:?} does not match {cout} output channels",
            b.shape()
        );
    }

    let k = cin * kh * kw;
    let spatial = oh * ow;
    let mut out = vec![T::ZERO; n * cout * spatial];
    let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
    let mut col = if pointwise { Vec::new() } else { vec![T::ZERO; k * spatial] };
    for i in 0..n {
        let x = &input.data()[i * cin * h * w..(i + 1) * cin * h * w];
        let y = &mut out[i * cout * spatial..(i + 1) * cout * spatial];
        if pointwise {
            T::gemm(false, false, cout, k, spatial, T::ONE, weight.data(), x, T::ZERO, y);
        } else {
            im2col(x, (cin, h, w), (kh, kw), stride, padding, (oh, ow), &mut col);
            T::gemm(false, false, cout, k, spatial, T::ONE, weight.data(), &col, T::ZERO, y);
        }
        if let Some(b) = bias {
            for c in 0..cout {
                let bv = b.data()[c];
                for v in &mut y[c * spatial..(c + 1) * spatial] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and (optionally)
/// bias. The unfolded input is recomputed rather than saved.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, cin, h, w) = input.dims4("conv2d_backward")?;
    let (cout, _, kh, kw) = weight.dims4("conv2d_backward")?;
    let (_, _, oh, ow) = grad_out.dims4("conv2d_backward")?;
    let k = cin * kh * kw;
    let spatial = oh * ow;

    let mut dinput = vec![T::ZERO; input.numel()];
    let mut dweight = vec![T::ZERO; weight.numel()];
    let mut dbias = if has_bias { Some(vec![T::ZERO; cout]) } else { None };

    let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
    let mut col = if pointwise { Vec::new() } else { vec![T::ZERO; k * spatial] };
    let mut dcol = vec![T::ZERO; k * spatial];
    for i in 0..n {
        let x = &input.data()[i * cin * h * w..(i + 1) * cin * h * w];
        let dy = &grad_out.data()[i * cout * spatial..(i + 1) * cout * spatial];

        // d(col) = W^T . dy, then fold back onto the input.
        if pointwise {
            let dx = &mut dinput[i * cin * h * w..(i + 1) * cin * h * w];
            T::gemm(true, false, k, cout, spatial, T::ONE, weight.data(), dy, T::ZERO, dx);
            T::gemm(false, true, cout, spatial, k, T::ONE, dy, x, T::ONE, &mut dweight);
        } else {
            T::gemm(true, false, k, cout, spatial, T::ONE, weight.data(), dy, T::ZERO, &mut dcol);
            col2im_add(
                &dcol,
                (cin, h, w),
                (kh, kw),
                stride,
                padding,
                (oh, ow),
                &mut dinput[i * cin * h * w..(i + 1) * cin * h * w],
            );
            im2col(x, (cin, h, w), (kh, kw), stride, padding, (oh, ow), &mut col);
            T::gemm(false, true, cout, spatial, k, T::ONE, dy, &col, T::ONE, &mut dweight);
        }
        if let Some(db) = dbias.as_mut() {
            for c in 0..cout {
                let mut acc = T::ZERO;
                for &v in &dy[c * spatial..(c + 1) * spatial] {
                    acc += v;
                }
                db[c] += acc;
            }
        }
    }

    Ok((
        Tensor::new(input.shape().to_vec(), dinput)?,
        Tensor::new(weight.shape().to_vec(), dweight)?,
        match dbias {
            Some(db) => Some(Tensor::new(vec![cout], db)?),
            None => None,
        },
    ))
}

/// Per-channel convolution: output channel `c` depends only on input
/// channel `c`. Weight layout is `C x 1 x kh x kw`.
pub fn depthwise_conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "depthwise_conv2d";
    let (n, c, h, w) = input.dims4(OP)?;
    let (wc, one, kh, kw) = weight.dims4(OP)?;
    ensure_contract!(
        wc == c && one == 1,
        OP,
        "weight shape {:?} does not match input shape {:?} (want {c}x1xkh xkw)",
        weight.shape(),
        input.shape()
    );
    ensure_contract!(stride >= 1, OP, "stride must be >= 1, got {stride}");
    let (oh, ow) = match (
        conv_output_dim(h, kh, stride, padding),
        conv_output_dim(w, kw, stride, padding),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(crate::error::Error::contract(
                OP,
                format!(
                    "kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding} (zero-size output)"
                ),
            ))
        }
    };

    let pad = padding as isize;
    let mut out = vec![T::ZERO; n * c * oh * ow];
    for i in 0..n {
        for ch in 0..c {
            let x = &input.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let ker = &weight.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let y = &mut out[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::ZERO;
                    for ki in 0..kh {
                        let iy = (oy * stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * w;
                        for kj in 0..kw {
                            let ix = (ox * stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                acc += x[row + ix as usize] * ker[ki * kw + kj];
                            }
                        }
                    }
                    y[oy * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn depthwise_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = input.dims4("depthwise_conv2d_backward")?;
    let (_, _, kh, kw) = weight.dims4("depthwise_conv2d_backward")?;
    let (_, _, oh, ow) = grad_out.dims4("depthwise_conv2d_backward")?;
    let pad = padding as isize;

    let mut dinput = vec![T::ZERO; input.numel()];
    let mut dweight = vec![T::ZERO; weight.numel()];
    for i in 0..n {
        for ch in 0..c {
            let x = &input.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let ker = &weight.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let dy = &grad_out.data()[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
            let dx = &mut dinput[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dk = &mut dweight[ch * kh * kw..(ch + 1) * kh * kw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[oy * ow + ox];
                    for ki in 0..kh {
                        let iy = (oy * stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * w;
                        for kj in 0..kw {
                            let ix = (ox * stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                let xi = x[row + ix as usize];
                                dx[row + ix as usize] += g * ker[ki * kw + kj];
                                dk[ki * kw + kj] += g * xi;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dinput)?,
        Tensor::new(weight.shape().to_vec(), dweight)?,
    ))
}

/// Values saved by train-mode batch norm for its backward pass.
#[derive(Clone)]
pub struct BnSaved<T: Element> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub m: usize,
}

/// Per-channel batch statistics, reported so the caller can fold them into
/// the running estimates.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T: Element> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub struct BnTrainOut<T: Element> {
    pub output: Tensor<T>,
    pub saved: BnSaved<T>,
    pub stats: BnBatchStats<T>,
}

/// Train-mode batch normalization over `N x C x H x W`, normalizing each
/// channel by its (biased) batch statistics.
pub fn batch_norm_train<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: f64,
) -> Result<BnTrainOut<T>> {
    const OP: &str = "batch_norm";
    let (n, c, h, w) = input.dims4(OP)?;
    ensure_contract!(
        gamma.shape() == [c] && beta.shape() == [c],
        OP,
        "gamma/beta shapes {:?}/{:?} do not match {c} channels",
        gamma.shape(),
        beta.shape()
    );
    let m = n * h * w;
    ensure_contract!(
        m >= 2,
        OP,
        "train mode needs at least 2 elements per channel, got N*H*W = {m}"
    );

    let spatial = h * w;
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    let mut inv_std = vec![T::ZERO; c];
    let mut x_hat = vec![T::ZERO; input.numel()];
    let mut out = vec![T::ZERO; input.numel()];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for i in 0..n {
            let x = &input.data()[(i * c + ch) * spatial..(i * c + ch + 1) * spatial];
            for &v in x {
                sum += v.to_f64();
            }
        }
        let mu = sum / m as f64;
        let mut sq = 0.0f64;
        for i in 0..n {
            let x = &input.data()[(i * c + ch) * spatial..(i * c + ch + 1) * spatial];
            for &v in x {
                let d = v.to_f64() - mu;
                sq += d * d;
            }
        }
        let v = sq / m as f64;
        let istd = 1.0 / (v + epsilon).sqrt();
        mean[ch] = T::from_f64(mu);
        var[ch] = T::from_f64(v);
        inv_std[ch] = T::from_f64(istd);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let (mu_t, istd_t) = (T::from_f64(mu), T::from_f64(istd));
        for i in 0..n {
            let base = (i * c + ch) * spatial;
            for j in 0..spatial {
                let xh = (input.data()[base + j] - mu_t) * istd_t;
                x_hat[base + j] = xh;
                out[base + j] = g * xh + b;
            }
        }
    }

    Ok(BnTrainOut {
        output: Tensor::new(input.shape().to_vec(), out)?,
        saved: BnSaved {
            x_hat: Tensor::new(input.shape().to_vec(), x_hat)?,
            inv_std,
            m,
        },
        stats: BnBatchStats {
            mean: Tensor::new(vec![c], mean)?,
            var: Tensor::new(vec![c], var)?,
        },
    })
}

pub fn batch_norm_train_backward<T: Element>(
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.dims4("batch_norm_backward")?;
    let spatial = h * w;
    let m = saved.m;

    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    let mut dinput = vec![T::ZERO; grad_out.numel()];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * spatial;
            for j in 0..spatial {
                let dy = grad_out.data()[base + j].to_f64();
                sum_dy += dy;
                sum_dy_xhat += dy * saved.x_hat.data()[base + j].to_f64();
            }
        }
        dbeta[ch] = T::from_f64(sum_dy);
        dgamma[ch] = T::from_f64(sum_dy_xhat);
        let g_istd = gamma.data()[ch] * saved.inv_std[ch];
        let mean_dy = T::from_f64(sum_dy / m as f64);
        let mean_dy_xhat = T::from_f64(sum_dy_xhat / m as f64);
        for i in 0..n {
            let base = (i * c + ch) * spatial;
            for j in 0..spatial {
                let dy = grad_out.data()[base + j];
                let xh = saved.x_hat.data()[base + j];
                dinput[base + j] = g_istd * (dy - mean_dy - xh * mean_dy_xhat);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dinput)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Eval-mode batch normalization using running statistics: a fixed affine
/// map per channel.
pub fn batch_norm_eval<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    const OP: &str = "batch_norm";
    let (n, c, h, w) = input.dims4(OP)?;
    ensure_contract!(
        gamma.shape() == [c]
            && beta.shape() == [c]
            && running_mean.shape() == [c]
            && running_var.shape() == [c],
        OP,
        "parameter shapes do not match {c} channels"
    );
    let spatial = h * w;
    let mut out = vec![T::ZERO; input.numel()];
    for ch in 0..c {
        let istd = T::from_f64(1.0 / (running_var.data()[ch].to_f64() + epsilon).sqrt());
        let scale = gamma.data()[ch] * istd;
        let shift = beta.data()[ch] - running_mean.data()[ch] * scale;
        for i in 0..n {
            let base = (i * c + ch) * spatial;
            for j in 0..spatial {
                out[base + j] = input.data()[base + j] * scale + shift;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Gradients through eval-mode batch norm (a per-channel affine map).
pub fn batch_norm_eval_backward<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    epsilon: f64,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.dims4("batch_norm_backward")?;
    let spatial = h * w;
    let mut dinput = vec![T::ZERO; grad_out.numel()];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for ch in 0..c {
        let istd = T::from_f64(1.0 / (running_var.data()[ch].to_f64() + epsilon).sqrt());
        let scale = gamma.data()[ch] * istd;
        let mu = running_mean.data()[ch];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * spatial;
            for j in 0..spatial {
                let dy = grad_out.data()[base + j];
                dinput[base + j] = dy * scale;
                sum_dy += dy.to_f64();
                sum_dy_xhat += dy.to_f64() * ((input.data()[base + j] - mu) * istd).to_f64();
            }
        }
        dbeta[ch] = T::from_f64(sum_dy);
        dgamma[ch] = T::from_f64(sum_dy_xhat);
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dinput)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Elementwise `x * sigmoid(x)`.
pub fn swish<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x * sigmoid(x))
}

pub fn swish_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    debug_assert_eq!(input.shape(), grad_out.shape());
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * (s * (T::ONE + x * (T::ONE - s)))
        })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Mean over the spatial dimensions: `N x C x H x W -> N x C`.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let spatial = h * w;
    let mut out = vec![T::ZERO; n * c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * spatial;
            let mut sum = 0.0f64;
            for j in 0..spatial {
                sum += input.data()[base + j].to_f64();
            }
            out[i * c + ch] = T::from_f64(sum / spatial as f64);
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Element>(
    h: usize,
    w: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c) = grad_out.dims2("global_avg_pool_backward")?;
    let spatial = h * w;
    let inv = T::from_f64(1.0 / spatial as f64);
    let mut dinput = vec![T::ZERO; n * c * spatial];
    for i in 0..n {
        for ch in 0..c {
            let g = grad_out.data()[i * c + ch] * inv;
            let base = (i * c + ch) * spatial;
            for j in 0..spatial {
                dinput[base + j] = g;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dinput)
}

/// Affine map `y = x W^T + b` with `x: N x Din`, `W: Dout x Din`.
pub fn linear<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    const OP: &str = "linear";
    let (n, din) = input.dims2(OP)?;
    let (dout, wdin) = weight.dims2(OP)?;
    ensure_contract!(
        wdin == din,
        OP,
        "weight shape {:?} does not match input shape {:?}",
        weight.shape(),
        input.shape()
    );
    if let Some(b) = bias {
        ensure_contract!(
            b.shape() == [dout],
            OP,
            "bias shape {:?} does not match {dout} outputs",
            b.shape()
        );
    }
    let mut out = vec![T::ZERO; n * dout];
    T::gemm(false, true, n, din, dout, T::ONE, input.data(), weight.data(), T::ZERO, &mut out);
    if let Some(b) = bias {
        for i in 0..n {
            for j in 0..dout {
                out[i * dout + j] += b.data()[j];
            }
        }
    }
    Tensor::new(vec![n, dout], out)
}

pub fn linear_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, din) = input.dims2("linear_backward")?;
    let (dout, _) = weight.dims2("linear_backward")?;
    let mut dinput = vec![T::ZERO; n * din];
    T::gemm(false, false, n, dout, din, T::ONE, grad_out.data(), weight.data(), T::ZERO, &mut dinput);
    let mut dweight = vec![T::ZERO; dout * din];
    T::gemm(true, false, dout, n, din, T::ONE, grad_out.data(), input.data(), T::ZERO, &mut dweight);
    let dbias = if has_bias {
        let mut db = vec![T::ZERO; dout];
        for i in 0..n {
            for j in 0..dout {
                db[j] += grad_out.data()[i * dout + j];
            }
        }
        Some(Tensor::new(vec![dout], db)?)
    } else {
        None
    };
    Ok((
        Tensor::new(vec![n, din], dinput)?,
        Tensor::new(vec![dout, din], dweight)?,
        dbias,
    ))
}

/// Inverted-dropout mask: each element is `0` with probability `p` and
/// `1/(1-p)` otherwise.
pub fn dropout_mask<T: Element>(numel: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    (0..numel)
        .map(|_| {
            if rng.random::<f64>() < p {
                T::ZERO
            } else {
                keep_scale
            }
        })
        .collect()
}

pub fn mul_elementwise<T: Element>(a: &Tensor<T>, b: &[T]) -> Result<Tensor<T>> {
    ensure_contract!(
        a.numel() == b.len(),
        "mul_elementwise",
        "length mismatch {} vs {}",
        a.numel(),
        b.len()
    );
    let data = a.data().iter().zip(b).map(|(&x, &m)| x * m).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Numerically stable row softmax for `N x K` logits.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = logits.dims2("softmax")?;
    let mut out = vec![T::ZERO; n * k];
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut denom = T::ZERO;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[i * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            out[i * k + j] /= denom;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Fused stable softmax + cross-entropy over two-column logits, averaged
/// over rows. Returns the scalar loss and the row probabilities.
pub fn softmax_xent<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    const OP: &str = "softmax_cross_entropy";
    let (n, k) = logits.dims2(OP)?;
    ensure_contract!(k == 2, OP, "expected exactly 2 logit columns, got {k}");
    ensure_contract!(
        targets.len() == n,
        OP,
        "{} targets for {n} rows",
        targets.len()
    );
    ensure_contract!(
        targets.iter().all(|&t| t < 2),
        OP,
        "target class out of range"
    );
    let probs = softmax_rows(logits)?;
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = &logits.data()[i * 2..(i + 1) * 2];
        let max = if row[0] >= row[1] { row[0] } else { row[1] };
        // log q_t = (l_t - max) - ln(sum exp(l - max))
        let z = ((row[0] - max).exp() + (row[1] - max).exp()).ln();
        let log_q = (row[targets[i]] - max - z).to_f64();
        loss -= log_q;
    }
    Ok((T::from_f64(loss / n as f64), probs))
}

/// `d loss / d logits = (q_hat - q) / N`, scaled by the incoming gradient.
pub fn softmax_xent_backward<T: Element>(
    probs: &Tensor<T>,
    targets: &[usize],
    grad: T,
) -> Result<Tensor<T>> {
    let (n, k) = probs.dims2("softmax_cross_entropy_backward")?;
    let scale = grad / T::from_f64(n as f64);
    let mut d = probs.data().to_vec();
    for i in 0..n {
        d[i * k + targets[i]] -= T::ONE;
    }
    for v in &mut d {
        *v *= scale;
    }
    Tensor::new(vec![n, k], d)
}

/// Elementwise `(a - b)^2`; the comparison layer between twin descriptors.
pub fn squared_diff<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_contract!(
        a.shape() == b.shape(),
        "square_layer",
        "dimension mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn squared_diff_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let two = T::from_f64(2.0);
    let da: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .zip(grad_out.data())
        .map(|((&x, &y), &g)| two * (x - y) * g)
        .collect();
    let db: Vec<T> = da.iter().map(|&v| -v).collect();
    Ok((
        Tensor::new(a.shape().to_vec(), da)?,
        Tensor::new(b.shape().to_vec(), db)?,
    ))
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_contract!(
        a.shape() == b.shape(),
        "add",
        "shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let mut acc = 0.0f64;
    for &v in input.data() {
        acc += v.to_f64();
    }
    Tensor::scalar(T::from_f64(acc))
}

/// Dot product with a fixed coefficient tensor, as a scalar.
pub fn weighted_sum<T: Element>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_contract!(
        input.numel() == weights.numel(),
        "weighted_sum",
        "length mismatch {} vs {}",
        input.numel(),
        weights.numel()
    );
    let mut acc = 0.0f64;
    for (&x, &w) in input.data().iter().zip(weights.data()) {
        acc += (x * w).to_f64();
    }
    Ok(Tensor::scalar(T::from_f64(acc)))
}
