//! Batched NHWC kernels with their backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::NnError;

pub const KERNEL: usize = 3;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Linear => T::one(),
        }
    }
}

/// Reads `[N,H,W,C]`, or `[H,W,C]` as a batch of one.
pub fn batch_dims(shape: &[usize]) -> Result<[usize; 4], NnError> {
    match *shape {
        [n, h, w, c] => Ok([n, h, w, c]),
        [h, w, c] => Ok([1, h, w, c]),
        _ => Err(NnError::Shape(format!(
            "expected an HxWxC or NxHxWxC tensor, got {shape:?}"
        ))),
    }
}

fn shaped_like<T: Real>(input: &Tensor<T>, n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if input.shape().len() == 3 {
        vec![h, w, c]
    } else {
        vec![n, h, w, c]
    }
}

pub fn activate<T: Real>(x: &mut Tensor<T>, act: Activation) {
    if act != Activation::Linear {
        x.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
    }
}

/// Multiplies `grad` in place by the activation derivative at `output`.
pub fn activation_backward<T: Real>(grad: &mut Tensor<T>, output: &Tensor<T>, act: Activation) {
    if act != Activation::Linear {
        for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
            *g *= act.derivative_from_output(y);
        }
    }
}

/// Same-padded 3x3 cross-correlation plus bias, then `act`.
///
/// `kernels` is `[3,3,C,F]`, `bias` is `[F]`.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    act: Activation,
) -> Result<Tensor<T>, NnError> {
    let mut out = conv2d_linear(input, kernels, bias)?;
    activate(&mut out, act);
    Ok(out)
}

pub fn conv2d_linear<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let [n, h, w, c] = batch_dims(input.shape())?;
    let f = check_kernels(kernels, bias, c)?;
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![T::zero(); n * h * w * f];
    for b in 0..n {
        for y in 0..h {
            for xo in 0..w {
                let o = ((b * h + y) * w + xo) * f;
                let orow = &mut out[o..o + f];
                orow.copy_from_slice(bias.data());
                for ky in 0..KERNEL {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = xo as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = ((b * h + iy as usize) * w + ix as usize) * c;
                        for ci in 0..c {
                            let v = x[i + ci];
                            let kr = ((ky * KERNEL + kx) * c + ci) * f;
                            for (o, &kv) in orow.iter_mut().zip(&k[kr..kr + f]) {
                                *o += v * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&shaped_like(input, n, h, w, f), out)
}

fn check_kernels<T: Real>(
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    c: usize,
) -> Result<usize, NnError> {
    match *kernels.shape() {
        [KERNEL, KERNEL, kc, f] if kc == c && bias.shape() == [f] => Ok(f),
        _ => Err(NnError::Shape(format!(
            "kernels {:?} / bias {:?} do not fit {c} input channels",
            kernels.shape(),
            bias.shape()
        ))),
    }
}

/// Three gradients: the layer input's and its two parameter tensors'.
pub type Grads3<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

/// Gradients of the linear part of a convolution given `grad_out` w.r.t. its
/// pre-activation output. Returns `(grad_input, grad_kernels, grad_bias)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Grads3<T>, NnError> {
    let [n, h, w, c] = batch_dims(input.shape())?;
    let f = kernels.shape()[3];
    let x = input.data();
    let k = kernels.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); f];
    for b in 0..n {
        for y in 0..h {
            for xo in 0..w {
                let o = ((b * h + y) * w + xo) * f;
                let grow = &g[o..o + f];
                for (acc, &gv) in gb.iter_mut().zip(grow) {
                    *acc += gv;
                }
                for ky in 0..KERNEL {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = xo as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = ((b * h + iy as usize) * w + ix as usize) * c;
                        for ci in 0..c {
                            let v = x[i + ci];
                            let kr = ((ky * KERNEL + kx) * c + ci) * f;
                            let mut acc = T::zero();
                            for ((gkv, &kv), &gv) in
                                gk[kr..kr + f].iter_mut().zip(&k[kr..kr + f]).zip(grow)
                            {
                                *gkv += v * gv;
                                acc += kv * gv;
                            }
                            gx[i + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), gx)?,
        Tensor::from_vec(kernels.shape(), gk)?,
        Tensor::from_vec(&[f], gb)?,
    ))
}

/// 2x2 max pooling with floor semantics. Returns the output and, for each
/// output element, the flat input index of its maximum.
pub fn maxpool_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), NnError> {
    let [n, h, w, c] = batch_dims(input.shape())?;
    if h < 2 || w < 2 {
        return Err(NnError::Shape(format!(
            "max pooling needs H, W >= 2, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                for ci in 0..c {
                    let mut best = ((b * h + 2 * y) * w + 2 * xo) * c + ci;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * y + dy) * w + 2 * xo + dx) * c + ci;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&shaped_like(input, n, oh, ow, c), out)?,
        arg,
    ))
}

pub fn maxpool_backward<T: Real>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>, NnError> {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(gx)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let [n, h, w, c] = batch_dims(input.shape())?;
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                let o = ((b * oh + y) * ow + xo) * c;
                let i = ((b * h + y / 2) * w + xo / 2) * c;
                out[o..o + c].copy_from_slice(&x[i..i + c]);
            }
        }
    }
    Tensor::from_vec(&shaped_like(input, n, oh, ow, c), out)
}

/// Sums each 2x2 block of `grad_out`.
pub fn upsample_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let [n, oh, ow, c] = batch_dims(grad_out.shape())?;
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                let o = ((b * oh + y) * ow + xo) * c;
                let i = ((b * h + y / 2) * w + xo / 2) * c;
                for ci in 0..c {
                    gx[i + ci] += g[o + ci];
                }
            }
        }
    }
    Tensor::from_vec(&shaped_like(grad_out, n, h, w, c), gx)
}

/// Center-crops or zero-pads the spatial dims to `(th, tw)`. When the
/// difference is odd the extra row/column goes to the bottom/right.
pub fn resize_forward<T: Real>(
    input: &Tensor<T>,
    th: usize,
    tw: usize,
) -> Result<Tensor<T>, NnError> {
    let [n, h, w, c] = batch_dims(input.shape())?;
    if (h, w) == (th, tw) {
        return Ok(input.clone());
    }
    let x = input.data();
    let mut out = vec![T::zero(); n * th * tw * c];
    let oy = h as isize - th as isize;
    let ox = w as isize - tw as isize;
    // source = target + offset; negative when padding, truncated toward zero
    let (sy, sx) = (oy / 2, ox / 2);
    for b in 0..n {
        for y in 0..th {
            let iy = y as isize + sy;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for xo in 0..tw {
                let ix = xo as isize + sx;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let o = ((b * th + y) * tw + xo) * c;
                let i = ((b * h + iy as usize) * w + ix as usize) * c;
                out[o..o + c].copy_from_slice(&x[i..i + c]);
            }
        }
    }
    Tensor::from_vec(&shaped_like(input, n, th, tw, c), out)
}

pub fn resize_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>, NnError> {
    let [_, h, w, _] = batch_dims(input_shape)?;
    let back = resize_forward(grad_out, h, w)?;
    back.reshape(input_shape)
}

/// Fully connected layer over flattened samples: `input` is `[N, D]` (any
/// trailing shape is flattened), `weights` `[D, U]`, `bias` `[U]`.
pub fn dense_linear<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let n = input.shape()[0];
    let d = input.len() / n.max(1);
    let (wd, u) = match *weights.shape() {
        [wd, u] => (wd, u),
        _ => return Err(NnError::Shape("dense weights must be rank 2".into())),
    };
    if wd != d || bias.shape() != [u] {
        return Err(NnError::Shape(format!(
            "dense weights {:?} do not fit input width {d}",
            weights.shape()
        )));
    }
    let x = input.data();
    let wt = weights.data();
    let mut out = Vec::with_capacity(n * u);
    for b in 0..n {
        let mut row = bias.data().to_vec();
        for (j, &v) in x[b * d..(b + 1) * d].iter().enumerate() {
            for (o, &wv) in row.iter_mut().zip(&wt[j * u..(j + 1) * u]) {
                *o += v * wv;
            }
        }
        out.extend(row);
    }
    Tensor::from_vec(&[n, u], out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`; `grad_input` has the
/// shape of `input`.
pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Grads3<T>, NnError> {
    let n = input.shape()[0];
    let d = input.len() / n.max(1);
    let u = weights.shape()[1];
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); u];
    for b in 0..n {
        let grow = &g[b * u..(b + 1) * u];
        for (acc, &gv) in gb.iter_mut().zip(grow) {
            *acc += gv;
        }
        for j in 0..d {
            let v = x[b * d + j];
            let mut acc = T::zero();
            for ((gwv, &wv), &gv) in gw[j * u..(j + 1) * u]
                .iter_mut()
                .zip(&wt[j * u..(j + 1) * u])
                .zip(grow)
            {
                *gwv += v * gv;
                acc += wv * gv;
            }
            gx[b * d + j] = acc;
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), gx)?,
        Tensor::from_vec(weights.shape(), gw)?,
        Tensor::from_vec(&[u], gb)?,
    ))
}

/// Values kept from a training-mode batch normalisation for its backward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Per-channel batch normalisation over every axis but the last.
pub fn batchnorm_train<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>), NnError> {
    let c = *input.shape().last().unwrap_or(&0);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(NnError::Shape(format!(
            "batchnorm parameters {:?} do not fit {c} channels",
            gamma.shape()
        )));
    }
    let x = input.data();
    let m = T::of((x.len() / c.max(1)) as f64);
    let mut mean = vec![T::zero(); c];
    for (i, &v) in x.iter().enumerate() {
        mean[i % c] += v;
    }
    mean.iter_mut().for_each(|v| *v = *v / m);
    let mut var = vec![T::zero(); c];
    for (i, &v) in x.iter().enumerate() {
        let d = v - mean[i % c];
        var[i % c] += d * d;
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    let eps = T::of(BN_EPSILON);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let (gm, bt) = (gamma.data(), beta.data());
    for (i, &v) in x.iter().enumerate() {
        let ch = i % c;
        let xh = (v - mean[ch]) * inv_std[ch];
        normalized[i] = xh;
        out[i] = gm[ch] * xh + bt[ch];
    }
    Ok((
        Tensor::from_vec(input.shape(), out)?,
        BatchNormCache {
            normalized: Tensor::from_vec(input.shape(), normalized)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

pub fn batchnorm_infer<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Tensor<T> {
    let c = gamma.len();
    let eps = T::of(BN_EPSILON);
    let scale: Vec<T> = (0..c)
        .map(|ch| gamma.data()[ch] / (running_var.data()[ch] + eps).sqrt())
        .collect();
    let mut out = input.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *v = (*v - running_mean.data()[ch]) * scale[ch] + beta.data()[ch];
    }
    out
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Grads3<T>, NnError> {
    let c = gamma.len();
    let g = grad_out.data();
    let xh = cache.normalized.data();
    let m = T::of((g.len() / c.max(1)) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (&gv, &xv)) in g.iter().zip(xh).enumerate() {
        dgamma[i % c] += gv * xv;
        dbeta[i % c] += gv;
    }
    let mut gx = vec![T::zero(); g.len()];
    for (i, out) in gx.iter_mut().enumerate() {
        let ch = i % c;
        *out =
            gamma.data()[ch] * cache.inv_std[ch] / m * (m * g[i] - dbeta[ch] - xh[i] * dgamma[ch]);
    }
    Ok((
        Tensor::from_vec(grad_out.shape(), gx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

/// Inverted dropout mask: each element is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub fn apply_mask<T: Real>(x: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    out
}
