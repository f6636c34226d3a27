//! Layer kinds with shape inference, forward evaluation and backward passes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv_output_dim, conv_transpose_backward,
    conv_transpose_forward, shape_err, transposed_output_dim, ConvGeom, Tensor,
};

/// One layer of a sequential network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Kernels are stored `[in_channels, out_channels, k, k]`.
    TransposedConv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d { kernel: usize, stride: usize },
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    /// Inference-mode batch normalization over the leading (channel) axis.
    #[serde(rename = "batchnorm_inference")]
    BatchNorm {
        name: String,
        channels: usize,
        epsilon: f32,
    },
    Relu,
    LeakyRelu { slope: f32 },
    Tanh,
    Sigmoid,
    Softmax,
    Flatten,
    Reshape { shape: Vec<usize> },
}

/// Role of a named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Fan-in used by the uniform initializer.
    pub fan_in: usize,
}

pub type ParamMap = BTreeMap<String, Tensor>;

fn pname(layer: &str, suffix: &str) -> String {
    format!("{layer}.{suffix}")
}

fn get<'a>(params: &'a ParamMap, layer: &str, suffix: &str) -> Result<&'a Tensor> {
    let n = pname(layer, suffix);
    params.get(&n).ok_or(Error::MissingParameter(n))
}

fn grad_slot<'a>(grads: &'a mut ParamMap, layer: &str, suffix: &str, shape: &[usize]) -> &'a mut Tensor {
    grads
        .entry(pname(layer, suffix))
        .or_insert_with(|| Tensor::zeros(shape))
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::TransposedConv2d { .. } => "transposed_conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BatchNorm { .. } => "batchnorm_inference",
            LayerSpec::Relu => "relu",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            LayerSpec::Conv2d { name, .. }
            | LayerSpec::TransposedConv2d { name, .. }
            | LayerSpec::Dense { name, .. }
            | LayerSpec::BatchNorm { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn has_params(&self) -> bool {
        self.name().is_some()
    }

    /// Output shape for a given input shape, or a shape error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: Vec<usize>| shape_err(self.kind_name(), input, &expected);
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(bad(vec![*in_channels, *kernel, *kernel]));
                }
                let h = conv_output_dim(input[1], *kernel, *stride, *padding);
                let w = conv_output_dim(input[2], *kernel, *stride, *padding);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![*out_channels, h, w]),
                    _ => Err(bad(vec![*in_channels, *kernel, *kernel])),
                }
            }
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(bad(vec![*in_channels]));
                }
                let h = transposed_output_dim(input[1], *kernel, *stride, *padding);
                let w = transposed_output_dim(input[2], *kernel, *stride, *padding);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![*out_channels, h, w]),
                    _ => Err(bad(vec![*in_channels, *kernel, *kernel])),
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                if input.len() != 3 {
                    return Err(bad(vec![*kernel, *kernel]));
                }
                let h = conv_output_dim(input[1], *kernel, *stride, 0);
                let w = conv_output_dim(input[2], *kernel, *stride, 0);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![input[0], h, w]),
                    _ => Err(bad(vec![input[0], *kernel, *kernel])),
                }
            }
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                if input != [*inputs] {
                    return Err(bad(vec![*inputs]));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if input.is_empty() || input[0] != *channels {
                    return Err(bad(vec![*channels]));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(bad(vec![input.iter().product()]));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh | LayerSpec::Sigmoid => {
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>()
                    || shape.iter().any(|&d| d == 0)
                {
                    return Err(bad(shape.clone()));
                }
                Ok(shape.clone())
            }
        }
    }

    /// Named parameters this layer owns, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let spec = |name: &str, suffix: &str, shape: Vec<usize>, kind, fan_in| ParamSpec {
            name: pname(name, suffix),
            shape,
            kind,
            fan_in,
        };
        match self {
            LayerSpec::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                vec![
                    spec(name, "weight", vec![*out_channels, *in_channels, *kernel, *kernel], ParamKind::Weight, fan_in),
                    spec(name, "bias", vec![*out_channels], ParamKind::Bias, fan_in),
                ]
            }
            LayerSpec::TransposedConv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = out_channels * kernel * kernel;
                vec![
                    spec(name, "weight", vec![*in_channels, *out_channels, *kernel, *kernel], ParamKind::Weight, fan_in),
                    spec(name, "bias", vec![*out_channels], ParamKind::Bias, fan_in),
                ]
            }
            LayerSpec::Dense {
                name,
                inputs,
                outputs,
            } => vec![
                spec(name, "weight", vec![*outputs, *inputs], ParamKind::Weight, *inputs),
                spec(name, "bias", vec![*outputs], ParamKind::Bias, *inputs),
            ],
            LayerSpec::BatchNorm { name, channels, .. } => vec![
                spec(name, "gamma", vec![*channels], ParamKind::Gamma, *channels),
                spec(name, "beta", vec![*channels], ParamKind::Beta, *channels),
                spec(name, "running_mean", vec![*channels], ParamKind::RunningMean, *channels),
                spec(name, "running_var", vec![*channels], ParamKind::RunningVar, *channels),
            ],
            _ => Vec::new(),
        }
    }

    /// Evaluate the layer. `out_shape` must come from [`Self::output_shape`].
    pub fn forward(&self, params: &ParamMap, x: &Tensor, out_shape: &[usize]) -> Result<Tensor> {
        let xs = x.shape();
        match self {
            LayerSpec::Conv2d {
                name,
                stride,
                padding,
                ..
            } => {
                let w = get(params, name, "weight")?;
                let b = get(params, name, "bias")?;
                let g = conv_geom(xs, w.shape(), *stride, *padding)?;
                let plane = g.oh * g.ow;
                let mut out = vec![0.0; g.out_len()];
                for (co, chunk) in out.chunks_mut(plane).enumerate() {
                    chunk.fill(b.data()[co]);
                }
                conv2d_forward(&g, x.data(), w.data(), &mut out);
                Tensor::new(out_shape.to_vec(), out)
            }
            LayerSpec::TransposedConv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let w = get(params, name, "weight")?;
                let b = get(params, name, "bias")?;
                let plane = out_shape[1] * out_shape[2];
                let mut out = vec![0.0; out_channels * plane];
                conv_transpose_forward(
                    *in_channels,
                    xs[1],
                    xs[2],
                    *out_channels,
                    *kernel,
                    *kernel,
                    *stride,
                    *padding,
                    x.data(),
                    w.data(),
                    &mut out,
                );
                for (co, chunk) in out.chunks_mut(plane).enumerate() {
                    let bv = b.data()[co];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
                Tensor::new(out_shape.to_vec(), out)
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let idx = pool_argmax(x.data(), ch, h, w, oy, ox, *kernel, *stride);
                            out[(ch * oh + oy) * ow + ox] = x.data()[idx];
                        }
                    }
                }
                Tensor::new(out_shape.to_vec(), out)
            }
            LayerSpec::Dense {
                name,
                inputs,
                outputs,
            } => {
                let w = get(params, name, "weight")?;
                let b = get(params, name, "bias")?;
                let mut out = b.data().to_vec();
                let xd = x.data();
                for (o, row) in out.iter_mut().zip(w.data().chunks(*inputs)) {
                    *o += dot(row, xd);
                }
                debug_assert_eq!(out.len(), *outputs);
                Tensor::new(out_shape.to_vec(), out)
            }
            LayerSpec::BatchNorm { name, epsilon, .. } => {
                let (scale, shift) = bn_affine(params, name, *epsilon)?;
                let plane = x.len() / xs[0];
                let mut out = x.data().to_vec();
                for (c, chunk) in out.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v * scale[c] + shift[c]);
                }
                Tensor::new(out_shape.to_vec(), out)
            }
            LayerSpec::Relu => Ok(map(x, |v| if v > 0.0 { v } else { 0.0 })),
            LayerSpec::LeakyRelu { slope } => Ok(map(x, |v| if v > 0.0 { v } else { v * slope })),
            LayerSpec::Tanh => Ok(map(x, libm::tanhf)),
            LayerSpec::Sigmoid => Ok(map(x, sigmoid)),
            LayerSpec::Softmax => Ok(Tensor::new(out_shape.to_vec(), softmax(x.data()))?),
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => x.clone().reshape(out_shape),
        }
    }

    /// Backward pass. `x` is the layer input, `y` its output and `gy` the
    /// gradient of the loss w.r.t. `y`. Parameter gradients accumulate into
    /// `grads`; the input gradient is returned when `want_input_grad`.
    pub fn backward(
        &self,
        params: &ParamMap,
        x: &Tensor,
        y: &Tensor,
        gy: &Tensor,
        grads: &mut ParamMap,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let xs = x.shape();
        let gx = match self {
            LayerSpec::Conv2d {
                name,
                stride,
                padding,
                ..
            } => {
                let w = get(params, name, "weight")?;
                let g = conv_geom(xs, w.shape(), *stride, *padding)?;
                let plane = g.oh * g.ow;
                let gb = grad_slot(grads, name, "bias", &[g.c_out]);
                for (co, chunk) in gy.data().chunks(plane).enumerate() {
                    gb.data_mut()[co] += chunk.iter().sum::<f32>();
                }
                let mut gx = want_input_grad.then(|| vec![0.0; x.len()]);
                let gw = grad_slot(grads, name, "weight", w.shape());
                conv2d_backward(&g, x.data(), w.data(), gy.data(), Some(gw.data_mut()), gx.as_deref_mut());
                gx
            }
            LayerSpec::TransposedConv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let w = get(params, name, "weight")?;
                let plane = y.shape()[1] * y.shape()[2];
                let gb = grad_slot(grads, name, "bias", &[*out_channels]);
                for (co, chunk) in gy.data().chunks(plane).enumerate() {
                    gb.data_mut()[co] += chunk.iter().sum::<f32>();
                }
                let mut gx = want_input_grad.then(|| vec![0.0; x.len()]);
                let gw = grad_slot(grads, name, "weight", w.shape());
                conv_transpose_backward(
                    *in_channels,
                    xs[1],
                    xs[2],
                    *out_channels,
                    *kernel,
                    *kernel,
                    *stride,
                    *padding,
                    x.data(),
                    w.data(),
                    gy.data(),
                    gw.data_mut(),
                    gx.as_deref_mut(),
                );
                gx
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                if !want_input_grad {
                    return Ok(None);
                }
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (y.shape()[1], y.shape()[2]);
                let mut gx = vec![0.0; x.len()];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let idx = pool_argmax(x.data(), ch, h, w, oy, ox, *kernel, *stride);
                            gx[idx] += gy.data()[(ch * oh + oy) * ow + ox];
                        }
                    }
                }
                Some(gx)
            }
            LayerSpec::Dense {
                name,
                inputs,
                outputs,
            } => {
                let w = get(params, name, "weight")?;
                {
                    let gb = grad_slot(grads, name, "bias", &[*outputs]);
                    for (b, g) in gb.data_mut().iter_mut().zip(gy.data()) {
                        *b += g;
                    }
                }
                let gw = grad_slot(grads, name, "weight", w.shape());
                for (row, &g) in gw.data_mut().chunks_mut(*inputs).zip(gy.data()) {
                    if g != 0.0 {
                        for (r, xv) in row.iter_mut().zip(x.data()) {
                            *r += g * xv;
                        }
                    }
                }
                want_input_grad.then(|| {
                    let mut gx = vec![0.0; *inputs];
                    for (row, &g) in w.data().chunks(*inputs).zip(gy.data()) {
                        if g != 0.0 {
                            for (o, wv) in gx.iter_mut().zip(row) {
                                *o += g * wv;
                            }
                        }
                    }
                    gx
                })
            }
            LayerSpec::BatchNorm {
                name,
                channels,
                epsilon,
            } => {
                let gamma = get(params, name, "gamma")?;
                let mean = get(params, name, "running_mean")?;
                let var = get(params, name, "running_var")?;
                let plane = x.len() / xs[0];
                let inv_std: Vec<f32> = var
                    .data()
                    .iter()
                    .map(|v| 1.0 / libm::sqrtf(v + epsilon))
                    .collect();
                let mut g_gamma = vec![0.0; *channels];
                let mut g_beta = vec![0.0; *channels];
                for c in 0..*channels {
                    for i in 0..plane {
                        let k = c * plane + i;
                        let xhat = (x.data()[k] - mean.data()[c]) * inv_std[c];
                        g_gamma[c] += gy.data()[k] * xhat;
                        g_beta[c] += gy.data()[k];
                    }
                }
                accumulate(grad_slot(grads, name, "gamma", &[*channels]), &g_gamma);
                accumulate(grad_slot(grads, name, "beta", &[*channels]), &g_beta);
                grad_slot(grads, name, "running_mean", &[*channels]);
                grad_slot(grads, name, "running_var", &[*channels]);
                want_input_grad.then(|| {
                    let mut gx = gy.data().to_vec();
                    for (c, chunk) in gx.chunks_mut(plane).enumerate() {
                        let s = gamma.data()[c] * inv_std[c];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    gx
                })
            }
            LayerSpec::Relu => want_input_grad.then(|| zip_map(x, gy, |xv, g| if xv > 0.0 { g } else { 0.0 })),
            LayerSpec::LeakyRelu { slope } => {
                want_input_grad.then(|| zip_map(x, gy, |xv, g| if xv > 0.0 { g } else { g * slope }))
            }
            LayerSpec::Tanh => want_input_grad.then(|| zip_map(y, gy, |yv, g| g * (1.0 - yv * yv))),
            LayerSpec::Sigmoid => want_input_grad.then(|| zip_map(y, gy, |yv, g| g * yv * (1.0 - yv))),
            LayerSpec::Softmax => want_input_grad.then(|| {
                let s: f32 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
                zip_map(y, gy, |yv, g| yv * (g - s))
            }),
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                want_input_grad.then(|| gy.data().to_vec())
            }
        };
        gx.map(|d| Tensor::new(xs.to_vec(), d)).transpose()
    }
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[2], ws[3], stride, padding)
        .ok_or_else(|| shape_err("conv2d", xs, ws))
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn pool_argmax(x: &[f32], ch: usize, h: usize, w: usize, oy: usize, ox: usize, k: usize, s: usize) -> usize {
    let base = ch * h * w;
    let mut best = base + (oy * s) * w + ox * s;
    for ky in 0..k {
        let row = base + (oy * s + ky) * w;
        for kx in 0..k {
            let idx = row + ox * s + kx;
            if x[idx] > x[best] {
                best = idx;
            }
        }
    }
    best
}

fn bn_affine(params: &ParamMap, name: &str, eps: f32) -> Result<(Vec<f32>, Vec<f32>)> {
    let gamma = get(params, name, "gamma")?;
    let beta = get(params, name, "beta")?;
    let mean = get(params, name, "running_mean")?;
    let var = get(params, name, "running_var")?;
    let scale: Vec<f32> = gamma
        .data()
        .iter()
        .zip(var.data())
        .map(|(g, v)| g / libm::sqrtf(v + eps))
        .collect();
    let shift = beta
        .data()
        .iter()
        .zip(mean.data())
        .zip(&scale)
        .map(|((b, m), s)| b - m * s)
        .collect();
    Ok((scale, shift))
}

fn accumulate(t: &mut Tensor, vals: &[f32]) {
    for (a, b) in t.data_mut().iter_mut().zip(vals) {
        *a += b;
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Four lanes keep the reduction order fixed while letting the compiler vectorize.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[i * 4 + l] * b[i * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::expf(-v))
    } else {
        let e = libm::expf(v);
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = logits.iter().map(|v| libm::expf(v - max)).collect();
    let sum: f32 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -50.0]);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn sigmoid_is_bounded() {
        for v in [-1000.0f32, -3.0, 0.0, 3.0, 1000.0] {
            let s = sigmoid(v);
            assert!((0.0..=1.0).contains(&s));
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn maxpool_shape() {
        let l = LayerSpec::MaxPool2d { kernel: 3, stride: 2 };
        assert_eq!(l.output_shape(&[64, 32, 32]).unwrap(), vec![64, 15, 15]);
        assert!(l.output_shape(&[64, 2, 2]).is_err());
    }
}
