//! Sequential layer graphs with named parameters.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{LayerSpec, ParamKind, ParamMap, ParamSpec};
use crate::tensor::Tensor;

/// Name of a layer template (`cifarnet`, `mlp`, `toy-gan-generator`, ... or `custom`).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArchitectureId(pub String);

impl ArchitectureId {
    pub fn new(name: &str) -> Self {
        Self(name.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// A validated layer chain over a fixed input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub id: ArchitectureId,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(id: ArchitectureId, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Self {
            id,
            input_shape,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Precondition("architecture has no layers".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "input shape {:?}",
                self.input_shape
            )));
        }
        self.shapes()?;
        let mut seen = BTreeMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(n) = l.name() {
                if seen.insert(n.to_string(), i).is_some() {
                    return Err(Error::Precondition(format!("duplicate layer name `{n}`")));
                }
            }
        }
        Ok(())
    }

    /// Activation shapes at every layer boundary; element 0 is the input.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input_shape.clone());
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers.iter().flat_map(|l| l.param_specs()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_specs().into_iter().map(|p| p.name).collect()
    }

    pub fn param_kind(&self, name: &str) -> Option<ParamKind> {
        self.param_specs()
            .into_iter()
            .find(|p| p.name == name)
            .map(|p| p.kind)
    }

    /// Index of the last dense layer, the classification head.
    pub fn final_dense_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
    }

    pub fn final_dense_name(&self) -> Option<&str> {
        self.final_dense_index().and_then(|i| self.layers[i].name())
    }

    /// Same architecture with the classification head widened or narrowed to `outputs`.
    pub fn with_head_outputs(&self, outputs: usize) -> Result<Architecture> {
        let idx = self
            .final_dense_index()
            .ok_or_else(|| Error::Precondition("architecture has no dense head".into()))?;
        let mut arch = self.clone();
        if let LayerSpec::Dense { outputs: o, .. } = &mut arch.layers[idx] {
            *o = outputs;
        }
        arch.validate()?;
        Ok(arch)
    }

    /// First layer at which `self` and `other` differ, with a description.
    pub fn first_difference(&self, other: &Architecture) -> Option<(usize, String)> {
        if self.input_shape != other.input_shape {
            return Some((
                0,
                format!(
                    "input shapes {:?} vs {:?}",
                    self.input_shape, other.input_shape
                ),
            ));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a != b {
                return Some((i, format!("{a:?} vs {b:?}")));
            }
        }
        if self.layers.len() != other.layers.len() {
            let i = self.layers.len().min(other.layers.len());
            return Some((
                i,
                format!("{} vs {} layers", self.layers.len(), other.layers.len()),
            ));
        }
        None
    }
}

/// Descriptive information carried alongside parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Identifier of this model within a knowledge base.
    pub id: String,
    #[serde(default)]
    pub class_labels: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset_id: Option<String>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

/// A network: architecture, one tensor per named parameter, and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: ParamMap,
    pub metadata: Metadata,
}

impl Model {
    /// All-zero parameters except batchnorm variances, which start at one.
    pub fn zeros(arch: Architecture) -> Self {
        let params = arch
            .param_specs()
            .into_iter()
            .map(|p| {
                let fill = if p.kind == ParamKind::RunningVar || p.kind == ParamKind::Gamma {
                    1.0
                } else {
                    0.0
                };
                (p.name, Tensor::full(&p.shape, fill))
            })
            .collect();
        Self {
            arch,
            params,
            metadata: Metadata::default(),
        }
    }

    /// Build from explicit parameters; names and shapes must match the architecture exactly.
    pub fn from_parts(arch: Architecture, params: ParamMap, metadata: Metadata) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if specs.len() != params.len() {
            let extra = params
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned();
            if let Some(name) = extra {
                return Err(Error::Unknown {
                    kind: "parameter",
                    name,
                });
            }
        }
        for s in &specs {
            let t = params
                .get(&s.name)
                .ok_or_else(|| Error::MissingParameter(s.name.clone()))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Shape {
                    op: "parameter",
                    lhs: t.shape().to_vec(),
                    rhs: s.shape.clone(),
                });
            }
        }
        Ok(Self {
            arch,
            params,
            metadata,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.arch.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.arch.output_shape().expect("validated at construction")
    }

    pub fn num_outputs(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Replace one parameter; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: value.shape().to_vec(),
                rhs: slot.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.arch.input_shape.as_slice() {
            return Err(Error::Shape {
                op: "forward",
                lhs: input.shape().to_vec(),
                rhs: self.arch.input_shape.clone(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        self.forward_from(0, input.clone())
    }

    /// Run layers `start..` on an activation that is the input to layer `start`.
    pub fn forward_from(&self, start: usize, mut act: Tensor) -> Result<Tensor> {
        let shapes = self.arch.shapes()?;
        if act.shape() != shapes[start].as_slice() {
            return Err(Error::Shape {
                op: "forward",
                lhs: act.shape().to_vec(),
                rhs: shapes[start].clone(),
            });
        }
        for (i, layer) in self.arch.layers.iter().enumerate().skip(start) {
            act = layer.forward(&self.params, &act, &shapes[i + 1])?;
        }
        Ok(act)
    }

    /// Run layers `start..end`.
    pub fn forward_range(&self, start: usize, end: usize, mut act: Tensor) -> Result<Tensor> {
        let shapes = self.arch.shapes()?;
        for i in start..end {
            act = self.arch.layers[i].forward(&self.params, &act, &shapes[i + 1])?;
        }
        Ok(act)
    }

    /// Input plus every layer output, in order.
    pub fn forward_trace(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(input)?;
        let shapes = self.arch.shapes()?;
        let mut acts = Vec::with_capacity(self.arch.layers.len() + 1);
        acts.push(input.clone());
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let next = layer.forward(&self.params, acts.last().unwrap(), &shapes[i + 1])?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// The activation vector entering the final dense layer.
    pub fn penultimate_activation(&self, input: &Tensor) -> Result<Tensor> {
        let idx = self.penultimate_index()?;
        self.check_input(input)?;
        self.forward_range(0, idx, input.clone())
    }

    fn penultimate_index(&self) -> Result<usize> {
        if self.arch.layers.len() < 2 {
            return Err(Error::Precondition("model needs at least two layers".into()));
        }
        self.arch
            .final_dense_index()
            .ok_or_else(|| Error::Precondition("model has no dense head".into()))
    }

    /// The first `n` layers as a standalone model.
    pub fn truncated(&self, n: usize) -> Result<Model> {
        if n == 0 || n > self.arch.layers.len() {
            return Err(Error::Precondition(format!(
                "cannot truncate to {n} of {} layers",
                self.arch.layers.len()
            )));
        }
        let arch = Architecture::new(
            self.arch.id.clone(),
            self.arch.input_shape.clone(),
            self.arch.layers[..n].to_vec(),
        )?;
        let names = arch.param_names();
        let params = self
            .params
            .iter()
            .filter(|(k, _)| names.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Model::from_parts(arch, params, self.metadata.clone())
    }

    /// The prefix of layers feeding the classification head.
    pub fn feature_extractor(&self) -> Result<Model> {
        self.truncated(self.penultimate_index()?)
    }

    /// Bitwise parameter and architecture equality.
    pub fn bits_eq(&self, other: &Model) -> bool {
        self.arch == other.arch
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.bits_eq(b))
    }
}

/// Layer widths for the CIFAR-style classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CifarNetWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub fc1: usize,
    pub fc2: usize,
}

impl Default for CifarNetWidths {
    fn default() -> Self {
        Self {
            conv1: 64,
            conv2: 64,
            fc1: 384,
            fc2: 192,
        }
    }
}

/// Two conv blocks (5x5, same padding, relu, 3x3/2 max-pool) and three dense layers.
pub fn build_cifarnet(num_classes: usize, input_shape: [usize; 3]) -> Result<Model> {
    build_cifarnet_with(num_classes, input_shape, CifarNetWidths::default())
}

pub fn build_cifarnet_with(
    num_classes: usize,
    input_shape: [usize; 3],
    widths: CifarNetWidths,
) -> Result<Model> {
    if num_classes < 2 {
        return Err(Error::Precondition("a classifier needs at least two classes".into()));
    }
    let [c, h, w] = input_shape;
    let conv = |name: &str, cin, cout| LayerSpec::Conv2d {
        name: name.to_string(),
        in_channels: cin,
        out_channels: cout,
        kernel: 5,
        stride: 1,
        padding: 2,
    };
    let pool = || LayerSpec::MaxPool2d { kernel: 3, stride: 2 };
    let mut layers = vec![
        conv("conv1", c, widths.conv1),
        LayerSpec::Relu,
        pool(),
        conv("conv2", widths.conv1, widths.conv2),
        LayerSpec::Relu,
        pool(),
        LayerSpec::Flatten,
    ];
    // Flattened width depends on the spatial arithmetic; infer it.
    let probe = Architecture {
        id: ArchitectureId::new("cifarnet"),
        input_shape: vec![c, h, w],
        layers: layers.clone(),
    };
    let flat = probe.output_shape()?[0];
    layers.extend([
        dense("fc1", flat, widths.fc1),
        LayerSpec::Relu,
        dense("fc2", widths.fc1, widths.fc2),
        LayerSpec::Relu,
        dense("fc3", widths.fc2, num_classes),
        LayerSpec::Softmax,
    ]);
    let arch = Architecture::new(ArchitectureId::new("cifarnet"), vec![c, h, w], layers)?;
    let mut model = Model::zeros(arch);
    model.metadata.class_labels = (0..num_classes).map(|i| format!("class{i}")).collect();
    model.metadata.notes.insert(
        "widths".into(),
        format!(
            "conv {}/{}, dense {}/{}",
            widths.conv1, widths.conv2, widths.fc1, widths.fc2
        ),
    );
    model
        .metadata
        .notes
        .insert("preprocessing".into(), "pixels scaled by 1/255, no normalization".into());
    Ok(model)
}

pub(crate) fn dense(name: &str, inputs: usize, outputs: usize) -> LayerSpec {
    LayerSpec::Dense {
        name: name.to_string(),
        inputs,
        outputs,
    }
}

/// Dense classifier over flattened input: `flatten → (dense → relu)* → dense → softmax`.
pub fn build_mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize) -> Result<Model> {
    if num_classes < 2 {
        return Err(Error::Precondition("a classifier needs at least two classes".into()));
    }
    let mut layers = vec![LayerSpec::Flatten];
    let mut width: usize = input_shape.iter().product();
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(dense(&format!("fc{}", i + 1), width, h));
        layers.push(LayerSpec::Relu);
        width = h;
    }
    layers.push(dense(&format!("fc{}", hidden.len() + 1), width, num_classes));
    layers.push(LayerSpec::Softmax);
    let arch = Architecture::new(ArchitectureId::new("mlp"), input_shape.to_vec(), layers)?;
    let mut model = Model::zeros(arch);
    model.metadata.class_labels = (0..num_classes).map(|i| format!("class{i}")).collect();
    Ok(model)
}

/// Dense generator: latent → hidden (leaky relu) → image, tanh output.
pub fn build_dense_generator(latent_dim: usize, hidden: usize, image_shape: &[usize]) -> Result<Model> {
    let pixels = image_shape.iter().product();
    let layers = vec![
        dense("g_fc1", latent_dim, hidden),
        LayerSpec::LeakyRelu { slope: 0.2 },
        dense("g_fc2", hidden, pixels),
        LayerSpec::Tanh,
        LayerSpec::Reshape {
            shape: image_shape.to_vec(),
        },
    ];
    let arch = Architecture::new(ArchitectureId::new("toy-gan-generator"), vec![latent_dim], layers)?;
    Ok(Model::zeros(arch))
}

/// Dense discriminator: image → hidden (leaky relu) → sigmoid real-probability.
pub fn build_dense_discriminator(image_shape: &[usize], hidden: usize) -> Result<Model> {
    let pixels = image_shape.iter().product();
    let layers = vec![
        LayerSpec::Flatten,
        dense("d_fc1", pixels, hidden),
        LayerSpec::LeakyRelu { slope: 0.2 },
        dense("d_fc2", hidden, 1),
        LayerSpec::Sigmoid,
    ];
    let arch = Architecture::new(
        ArchitectureId::new("toy-gan-discriminator"),
        image_shape.to_vec(),
        layers,
    )?;
    Ok(Model::zeros(arch))
}

/// Small DCGAN generator: latent → 4x4 map → two stride-2 transposed convs → `[channels,16,16]`.
pub fn build_dcgan_generator(latent_dim: usize, channels: usize, width: usize) -> Result<Model> {
    let layers = vec![
        dense("g_proj", latent_dim, 2 * width * 16),
        LayerSpec::Reshape {
            shape: vec![2 * width, 4, 4],
        },
        LayerSpec::BatchNorm {
            name: "g_bn0".into(),
            channels: 2 * width,
            epsilon: 1e-5,
        },
        LayerSpec::Relu,
        LayerSpec::TransposedConv2d {
            name: "g_deconv1".into(),
            in_channels: 2 * width,
            out_channels: width,
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::TransposedConv2d {
            name: "g_deconv2".into(),
            in_channels: width,
            out_channels: channels,
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        LayerSpec::Tanh,
    ];
    let arch = Architecture::new(ArchitectureId::new("dcgan-generator"), vec![latent_dim], layers)?;
    Ok(Model::zeros(arch))
}

/// Small DCGAN discriminator over `[channels,16,16]` images.
pub fn build_dcgan_discriminator(channels: usize, width: usize) -> Result<Model> {
    let layers = vec![
        LayerSpec::Conv2d {
            name: "d_conv1".into(),
            in_channels: channels,
            out_channels: width,
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        LayerSpec::LeakyRelu { slope: 0.2 },
        LayerSpec::Conv2d {
            name: "d_conv2".into(),
            in_channels: width,
            out_channels: 2 * width,
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        LayerSpec::LeakyRelu { slope: 0.2 },
        LayerSpec::Flatten,
        dense("d_fc", 2 * width * 16, 1),
        LayerSpec::Sigmoid,
    ];
    let arch = Architecture::new(
        ArchitectureId::new("dcgan-discriminator"),
        vec![channels, 16, 16],
        layers,
    )?;
    Ok(Model::zeros(arch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifarnet_head_shapes() {
        let m10 = build_cifarnet(10, [3, 32, 32]).unwrap();
        assert_eq!(m10.param("fc3.weight").unwrap().shape(), &[10, 192]);
        let m11 = build_cifarnet(11, [3, 32, 32]).unwrap();
        assert_eq!(m11.param("fc3.weight").unwrap().shape(), &[11, 192]);
        for (name, t) in m10.params() {
            if !name.starts_with("fc3") {
                assert_eq!(t.shape(), m11.param(name).unwrap().shape(), "{name}");
            }
        }
        assert_eq!(m10.param("fc1.weight").unwrap().shape(), &[384, 64 * 7 * 7]);
    }

    #[test]
    fn cifarnet_small_input_sums_to_one() {
        let m = build_cifarnet(2, [1, 16, 16]).unwrap();
        let y = m.forward(&Tensor::zeros(&[1, 16, 16])).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert!((y.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cifarnet_rejects_tiny_input() {
        assert!(matches!(
            build_cifarnet(10, [3, 4, 4]),
            Err(Error::Shape { .. })
        ));
        assert!(build_cifarnet(1, [3, 32, 32]).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = build_mlp(&[4], &[8, 6], 5).unwrap();
        let y = m.forward(&Tensor::from_slice(&[1.0, -2.0, 3.0, 0.5])).unwrap();
        for v in y.data() {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn penultimate_matches_truncated_forward() {
        let m = build_cifarnet(3, [1, 16, 16]).unwrap();
        assert_eq!(m.architecture().final_dense_index(), Some(11));
        let x = Tensor::full(&[1, 16, 16], 0.3);
        let p = m.penultimate_activation(&x).unwrap();
        assert_eq!(p.shape(), &[192]);
        assert!(p.data().iter().all(|&v| v == 0.0));
        let t = m.truncated(11).unwrap();
        assert!(t.forward(&x).unwrap().bits_eq(&p));
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let m = build_mlp(&[4], &[3], 2).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[5])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn from_parts_validates() {
        let m = build_mlp(&[4], &[3], 2).unwrap();
        let mut params = m.params().clone();
        params.insert("fc1.weight".into(), Tensor::zeros(&[2, 2]));
        assert!(Model::from_parts(m.architecture().clone(), params, Metadata::default()).is_err());
        let mut params = m.params().clone();
        params.remove("fc2.bias");
        assert!(matches!(
            Model::from_parts(m.architecture().clone(), params, Metadata::default()),
            Err(Error::MissingParameter(_))
        ));
    }

    #[test]
    fn gan_builders_are_compatible() {
        let g = build_dcgan_generator(16, 1, 8).unwrap();
        let d = build_dcgan_discriminator(1, 8).unwrap();
        assert_eq!(g.output_shape(), d.input_shape());
        assert_eq!(d.output_shape(), vec![1]);
        let g = build_dense_generator(8, 32, &[1, 4, 4]).unwrap();
        let d = build_dense_discriminator(&[1, 4, 4], 16).unwrap();
        assert_eq!(g.output_shape(), d.input_shape());
    }

    #[test]
    fn head_resize_changes_only_head() {
        let m = build_mlp(&[4], &[3], 2).unwrap();
        let a = m.architecture().with_head_outputs(5).unwrap();
        assert_eq!(a.output_shape().unwrap(), vec![5]);
        assert_eq!(
            m.architecture().first_difference(&a).map(|d| d.0),
            Some(3)
        );
    }
}
