//! Independent double-precision forward pass and central-difference gradient check.

use combinet_core::layer::{LayerSpec, ParamKind, ParamMap};
use combinet_core::model::{Architecture, ArchitectureId, Model};
use combinet_core::rng::rng;
use combinet_core::trainer::{gradients, init_parameters};
use combinet_core::Tensor;
use rand::Rng;

pub const H: f64 = 1e-3;
pub const REL: f64 = 1e-3;
pub const ABS: f64 = 1e-5;

/// Forward output plus the discrete branch taken at every kink, so entries
/// whose perturbation crosses a kink can be told apart.
pub struct Eval {
    pub out: Vec<f64>,
    pub pattern: Vec<u32>,
}

pub fn p64(params: &ParamMap, name: &str, suffix: &str) -> Vec<f64> {
    params[&format!("{name}.{suffix}")]
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect()
}

pub fn oracle_forward(arch: &Architecture, params: &ParamMap, input: &Tensor) -> Eval {
    let mut shape = input.shape().to_vec();
    let mut x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let mut pattern = Vec::new();
    for layer in &arch.layers {
        match layer {
            LayerSpec::Conv2d {
                name,
                in_channels: ci,
                out_channels: co,
                kernel: k,
                stride: s,
                padding: p,
            } => {
                let (h, w) = (shape[1] as i64, shape[2] as i64);
                let (k, s, p) = (*k as i64, *s as i64, *p as i64);
                let oh = (h + 2 * p - k) / s + 1;
                let ow = (w + 2 * p - k) / s + 1;
                let wt = p64(params, name, "weight");
                let b = p64(params, name, "bias");
                let mut y = vec![0.0; co * (oh * ow) as usize];
                for o in 0..*co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[o];
                            for c in 0..*ci {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = oy * s - p + ky;
                                        let ix = ox * s - p + kx;
                                        if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                            continue;
                                        }
                                        let wi = ((o * ci + c) as i64 * k + ky) * k + kx;
                                        let xi = (c as i64 * h + iy) * w + ix;
                                        acc += wt[wi as usize] * x[xi as usize];
                                    }
                                }
                            }
                            y[((o as i64 * oh + oy) * ow + ox) as usize] = acc;
                        }
                    }
                }
                x = y;
                shape = vec![*co, oh as usize, ow as usize];
            }
            LayerSpec::TransposedConv2d {
                name,
                in_channels: ci,
                out_channels: co,
                kernel: k,
                stride: s,
                padding: p,
            } => {
                let (h, w) = (shape[1] as i64, shape[2] as i64);
                let (k, s, p) = (*k as i64, *s as i64, *p as i64);
                let oh = (h - 1) * s - 2 * p + k;
                let ow = (w - 1) * s - 2 * p + k;
                let wt = p64(params, name, "weight");
                let b = p64(params, name, "bias");
                let mut y = vec![0.0; co * (oh * ow) as usize];
                for o in 0..*co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            y[((o as i64 * oh + oy) * ow + ox) as usize] = b[o];
                        }
                    }
                }
                for c in 0..*ci {
                    for iy in 0..h {
                        for ix in 0..w {
                            let xv = x[((c as i64 * h + iy) * w + ix) as usize];
                            for o in 0..*co {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let oy = iy * s - p + ky;
                                        let ox = ix * s - p + kx;
                                        if oy < 0 || ox < 0 || oy >= oh || ox >= ow {
                                            continue;
                                        }
                                        let wi = ((c * co + o) as i64 * k + ky) * k + kx;
                                        y[((o as i64 * oh + oy) * ow + ox) as usize] +=
                                            xv * wt[wi as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                x = y;
                shape = vec![*co, oh as usize, ow as usize];
            }
            LayerSpec::MaxPool2d {
                kernel: k,
                stride: s,
            } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let oh = (h - k) / s + 1;
                let ow = (w - k) / s + 1;
                let mut y = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut arg = 0;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    let v = x[(ch * h + oy * s + ky) * w + ox * s + kx];
                                    if v > best {
                                        best = v;
                                        arg = ky * k + kx;
                                    }
                                }
                            }
                            pattern.push(arg as u32);
                            y[(ch * oh + oy) * ow + ox] = best;
                        }
                    }
                }
                x = y;
                shape = vec![c, oh, ow];
            }
            LayerSpec::Dense {
                name,
                inputs,
                outputs,
            } => {
                let wt = p64(params, name, "weight");
                let b = p64(params, name, "bias");
                x = (0..*outputs)
                    .map(|o| b[o] + (0..*inputs).map(|i| wt[o * inputs + i] * x[i]).sum::<f64>())
                    .collect();
                shape = vec![*outputs];
            }
            LayerSpec::BatchNorm { name, epsilon, .. } => {
                let g = p64(params, name, "gamma");
                let b = p64(params, name, "beta");
                let m = p64(params, name, "running_mean");
                let v = p64(params, name, "running_var");
                let plane = x.len() / shape[0];
                for (i, val) in x.iter_mut().enumerate() {
                    let c = i / plane;
                    *val = g[c] * (*val - m[c]) / (v[c] + *epsilon as f64).sqrt() + b[c];
                }
            }
            LayerSpec::Relu => {
                pattern.extend(x.iter().map(|&v| (v > 0.0) as u32));
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            LayerSpec::LeakyRelu { slope } => {
                pattern.extend(x.iter().map(|&v| (v > 0.0) as u32));
                x.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v *= *slope as f64
                    }
                });
            }
            LayerSpec::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
            LayerSpec::Sigmoid => x.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
            LayerSpec::Softmax => {
                let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                x = e.into_iter().map(|v| v / z).collect();
            }
            LayerSpec::Flatten => shape = vec![x.len()],
            LayerSpec::Reshape { shape: s } => shape = s.clone(),
        }
    }
    Eval { out: x, pattern }
}

pub fn oracle_loss(
    arch: &Architecture,
    params: &ParamMap,
    images: &[Tensor],
    labels: &[usize],
) -> (f64, Vec<u32>) {
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for (x, &y) in images.iter().zip(labels) {
        let e = oracle_forward(arch, params, x);
        total += if e.out.len() == 1 {
            let p = e.out[0];
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        } else {
            -e.out[y].ln()
        };
        pattern.extend(e.pattern);
    }
    (total / images.len() as f64, pattern)
}

pub struct Report {
    pub checked: usize,
    pub skipped: usize,
}

pub fn check(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<Report, String> {
    let (_, grads) = gradients(model, images, labels).unwrap();
    let arch = model.architecture();
    let mut params = model.params().clone();
    let mut report = Report {
        checked: 0,
        skipped: 0,
    };
    for spec in arch.param_specs() {
        if !matches!(
            spec.kind,
            ParamKind::Weight | ParamKind::Bias | ParamKind::Gamma | ParamKind::Beta
        ) {
            continue;
        }
        let n = params[&spec.name].len();
        for i in 0..n {
            let orig = params[&spec.name].data()[i];
            params.get_mut(&spec.name).unwrap().data_mut()[i] = (orig as f64 + H) as f32;
            let (lp, pp) = oracle_loss(arch, &params, images, labels);
            params.get_mut(&spec.name).unwrap().data_mut()[i] = (orig as f64 - H) as f32;
            let (lm, pm) = oracle_loss(arch, &params, images, labels);
            params.get_mut(&spec.name).unwrap().data_mut()[i] = orig;
            // The perturbation is applied in f32; use the realized step.
            let step = ((orig as f64 + H) as f32 as f64) - ((orig as f64 - H) as f32 as f64);
            if pp != pm {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / step;
            let analytic = grads[&spec.name].data()[i] as f64;
            let tol = (REL * numeric.abs().max(analytic.abs())).max(ABS);
            if (numeric - analytic).abs() > tol {
                return Err(format!(
                    "{}[{i}]: analytic {analytic} vs numeric {numeric}",
                    spec.name
                ));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

pub fn arch(input: Vec<usize>, layers: Vec<LayerSpec>) -> Model {
    Model::zeros(Architecture::new(ArchitectureId::new("gradcheck"), input, layers).unwrap())
}

pub fn dense(name: &str, inputs: usize, outputs: usize) -> LayerSpec {
    LayerSpec::Dense {
        name: name.into(),
        inputs,
        outputs,
    }
}

pub fn random_inputs(shape: &[usize], n: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let len = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..len).map(|_| r.random_range(-1.0f32..1.0)).collect(),
            )
            .unwrap()
        })
        .collect()
}

/// Widen the default init so activations are not all tiny.
pub fn init(model: &mut Model, seed: u64) {
    init_parameters(model, Default::default(), seed);
    let mut r = rng(seed ^ 0xabc);
    for (name, t) in model.params_mut() {
        if name.ends_with("running_mean") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = r.random_range(-0.2..0.2));
        } else if name.ends_with("running_var") || name.ends_with("gamma") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = r.random_range(0.5..1.5));
        } else if name.ends_with("beta") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = r.random_range(-0.3..0.3));
        } else {
            t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
    }
}

pub fn run(mut model: Model, labels: &[usize], seed: u64) -> Result<Report, String> {
    init(&mut model, seed);
    let xs = random_inputs(model.input_shape(), labels.len(), seed + 1);
    let rep = check(&model, &xs, labels)?;
    if rep.checked == 0 {
        return Err("no entries checked".into());
    }
    if rep.skipped * 10 > rep.checked {
        return Err(format!(
            "too many kink crossings: {} skipped of {}",
            rep.skipped,
            rep.checked + rep.skipped
        ));
    }
    Ok(rep)
}

/// Small networks that together cover every layer kind, with labels for their batch.
pub fn cases() -> Vec<(&'static str, Model, Vec<usize>)> {
    vec![
        (
            "conv_leaky_pool_dense_softmax",
            arch(
                vec![2, 6, 6],
                vec![
                    LayerSpec::Conv2d {
                        name: "c1".into(),
                        in_channels: 2,
                        out_channels: 3,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                    LayerSpec::LeakyRelu { slope: 0.2 },
                    LayerSpec::MaxPool2d {
                        kernel: 3,
                        stride: 2,
                    },
                    LayerSpec::Flatten,
                    dense("d1", 12, 3),
                    LayerSpec::Softmax,
                ],
            ),
            [0, 2].to_vec(),
        ),
        (
            "strided_conv_relu_dense_relu_dense_softmax",
            arch(
                vec![1, 7, 7],
                vec![
                    LayerSpec::Conv2d {
                        name: "c1".into(),
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                        stride: 2,
                        padding: 0,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    dense("d1", 18, 5),
                    LayerSpec::Relu,
                    dense("d2", 5, 4),
                    LayerSpec::Softmax,
                ],
            ),
            [3, 1, 0].to_vec(),
        ),
        (
            "dense_tanh_dense_sigmoid_binary",
            arch(
                vec![5],
                vec![
                    dense("d1", 5, 4),
                    LayerSpec::Tanh,
                    dense("d2", 4, 1),
                    LayerSpec::Sigmoid,
                ],
            ),
            [1, 0, 1].to_vec(),
        ),
        (
            "reshape_transposed_conv_batchnorm_relu_dense_softmax",
            arch(
                vec![6],
                vec![
                    dense("proj", 6, 8),
                    LayerSpec::Reshape {
                        shape: vec![2, 2, 2],
                    },
                    LayerSpec::TransposedConv2d {
                        name: "t1".into(),
                        in_channels: 2,
                        out_channels: 2,
                        kernel: 4,
                        stride: 2,
                        padding: 1,
                    },
                    LayerSpec::BatchNorm {
                        name: "bn".into(),
                        channels: 2,
                        epsilon: 1e-5,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    dense("d1", 32, 3),
                    LayerSpec::Softmax,
                ],
            ),
            [2, 0].to_vec(),
        ),
        (
            "conv_sigmoid_reshape_dense_softmax",
            arch(
                vec![3, 4, 4],
                vec![
                    LayerSpec::Conv2d {
                        name: "c1".into(),
                        in_channels: 3,
                        out_channels: 2,
                        kernel: 2,
                        stride: 1,
                        padding: 1,
                    },
                    LayerSpec::Sigmoid,
                    LayerSpec::Reshape { shape: vec![50] },
                    dense("d1", 50, 2),
                    LayerSpec::Softmax,
                ],
            ),
            [1, 0].to_vec(),
        ),
    ]
}
