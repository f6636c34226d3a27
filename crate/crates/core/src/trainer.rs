//! Backpropagation, SGD with momentum, and the transfer / zero-shot baselines.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{shuffle, LabeledDataset};
use crate::error::{Error, Result};
use crate::layer::{LayerSpec, ParamKind, ParamMap};
use crate::metrics::argmax;
use crate::model::Model;
use crate::rng::{named_seed, rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightInit {
    /// Weights and biases uniform in `±sqrt(1 / fan_in)`.
    #[default]
    UniformFanIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_init: WeightInit,
    #[serde(default)]
    pub stratified_batches: bool,
    /// Stop once train accuracy has not improved by `1e-4` for this many epochs.
    #[serde(default = "default_patience")]
    pub early_stop_patience: Option<usize>,
    /// Hard cap on optimizer steps; `Some(0)` leaves parameters untouched.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_patience() -> Option<usize> {
    Some(5)
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            weight_init: WeightInit::UniformFanIn,
            stratified_batches: false,
            early_stop_patience: default_patience(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size >= 1
            && self.epochs >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_accuracy: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
}

/// Fill every parameter from the init scheme. Batchnorm statistics reset to identity.
pub fn init_parameters(model: &mut Model, scheme: WeightInit, seed: u64) {
    let WeightInit::UniformFanIn = scheme;
    let specs = model.architecture().param_specs();
    let mut r = rng(seed);
    for spec in specs {
        let t = match spec.kind {
            ParamKind::Weight | ParamKind::Bias => {
                let bound = libm::sqrtf(1.0 / spec.fan_in.max(1) as f32);
                let n = spec.shape.iter().product();
                let data = (0..n).map(|_| r.random_range(-bound..bound)).collect();
                Tensor::new(spec.shape.clone(), data).expect("spec shape")
            }
            ParamKind::Gamma | ParamKind::RunningVar => Tensor::ones(&spec.shape),
            ParamKind::Beta | ParamKind::RunningMean => Tensor::zeros(&spec.shape),
        };
        model.set_param(&spec.name, t).expect("spec shape");
    }
}

/// Training objective implied by the final layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Softmax head, categorical cross-entropy on an integer label.
    CrossEntropy,
    /// Single sigmoid unit, binary cross-entropy on a 0/1 label.
    BinaryCrossEntropy,
}

pub fn objective_for(model: &Model) -> Result<Objective> {
    match model.layers().last() {
        Some(LayerSpec::Softmax) => Ok(Objective::CrossEntropy),
        Some(LayerSpec::Sigmoid) if model.num_outputs() == 1 => Ok(Objective::BinaryCrossEntropy),
        _ => Err(Error::Precondition(
            "training needs a softmax or single-sigmoid head".into(),
        )),
    }
}

/// Backpropagate `grad_out` (gradient w.r.t. the output of layer `end - 1`)
/// through layers `0..end`. `acts` is a full [`Model::forward_trace`].
pub fn backward_through(
    model: &Model,
    acts: &[Tensor],
    end: usize,
    grad_out: Tensor,
    grads: &mut ParamMap,
    want_input_grad: bool,
) -> Result<Option<Tensor>> {
    let mut g = grad_out;
    let layers = model.layers();
    // Stop early once nothing below needs a gradient.
    let first_param = layers.iter().position(|l| l.has_params()).unwrap_or(end);
    let stop = if want_input_grad { 0 } else { first_param };
    for i in (stop..end).rev() {
        let need = want_input_grad || i > first_param;
        match layers[i].backward(model.params(), &acts[i], &acts[i + 1], &g, grads, need)? {
            Some(next) => g = next,
            None => return Ok(None),
        }
    }
    Ok(want_input_grad.then_some(g))
}

/// Backpropagate an output gradient through the whole model.
pub fn backward(
    model: &Model,
    acts: &[Tensor],
    grad_output: Tensor,
    grads: &mut ParamMap,
    want_input_grad: bool,
) -> Result<Option<Tensor>> {
    backward_through(model, acts, model.layers().len(), grad_output, grads, want_input_grad)
}

/// Loss of one sample and its gradient accumulated into `grads`.
/// Returns `(loss, predicted class)`.
fn sample_grad(model: &Model, obj: Objective, x: &Tensor, label: usize, grads: &mut ParamMap) -> Result<(f32, usize)> {
    let acts = model.forward_trace(x)?;
    let out = acts.last().unwrap();
    let n = model.layers().len();
    match obj {
        Objective::CrossEntropy => {
            let p = out.data();
            if label >= p.len() {
                return Err(Error::Precondition(format!(
                    "label {label} out of range for {} outputs",
                    p.len()
                )));
            }
            let loss = -libm::logf(p[label].max(f32::MIN_POSITIVE));
            // Softmax and cross-entropy combine to p - onehot at the logits.
            let mut g = p.to_vec();
            g[label] -= 1.0;
            let g = Tensor::new(acts[n - 1].shape().to_vec(), g)?;
            backward_through(model, &acts, n - 1, g, grads, false)?;
            Ok((loss, argmax(p)))
        }
        Objective::BinaryCrossEntropy => {
            let p = out.data()[0];
            let y = if label > 0 { 1.0 } else { 0.0 };
            let loss = bce(p, y);
            let g = Tensor::new(acts[n - 1].shape().to_vec(), vec![p - y])?;
            backward_through(model, &acts, n - 1, g, grads, false)?;
            Ok((loss, usize::from(p > 0.5)))
        }
    }
}

pub(crate) fn bce(p: f32, y: f32) -> f32 {
    let eps = 1e-7;
    let p = p.clamp(eps, 1.0 - eps);
    -(y * libm::logf(p) + (1.0 - y) * libm::logf(1.0 - p))
}

/// Zero gradients for every parameter of `model`.
pub fn zero_grads(model: &Model) -> ParamMap {
    model
        .params()
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect()
}

/// Analytic gradient of the mean loss over a batch. Returns `(mean loss, grads)`.
pub fn gradients(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<(f32, ParamMap)> {
    let (loss, _, grads) = batch_gradients(model, images, labels)?;
    Ok((loss, grads))
}

fn batch_gradients(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<(f32, usize, ParamMap)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Precondition("batch must be nonempty with one label per image".into()));
    }
    let obj = objective_for(model)?;
    let mut grads = zero_grads(model);
    let mut loss = 0.0f32;
    let mut correct = 0;
    for (x, &y) in images.iter().zip(labels) {
        let (l, pred) = sample_grad(model, obj, x, y, &mut grads)?;
        loss += l;
        correct += usize::from(pred == y);
    }
    let inv = 1.0 / images.len() as f32;
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, correct, grads))
}

/// SGD with classical momentum: `v = mu v + g; p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: ParamMap,
}

impl Sgd {
    pub fn new(learning_rate: f32, momentum: f32) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Update every trainable parameter for which `update` returns true.
    pub fn step(&mut self, model: &mut Model, grads: &ParamMap, update: &dyn Fn(&str) -> bool) {
        let kinds: BTreeMap<String, ParamKind> = model
            .architecture()
            .param_specs()
            .into_iter()
            .map(|s| (s.name, s.kind))
            .collect();
        for (name, p) in model.params_mut() {
            if !kinds[name].trainable() || !update(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
    }
}

/// Sample order for one epoch. Stratified orders spread every class evenly:
/// item `i` of a class with `n` members sits at position `(i + 0.5) / n`.
pub fn epoch_order(labels: &[usize], stratified: bool, r: &mut crate::rng::Rng) -> Vec<usize> {
    if !stratified {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        shuffle(&mut idx, r);
        return idx;
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(labels.len());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        shuffle(&mut members, r);
        let n = members.len() as f64;
        for (i, idx) in members.into_iter().enumerate() {
            keyed.push(((i as f64 + 0.5) / n, c, idx));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|k| k.2).collect()
}

/// Train a copy of `model`; the input is never mutated.
pub fn train(model: &Model, data: &LabeledDataset, cfg: &TrainConfig) -> Result<(Model, TrainingCurve)> {
    train_filtered(model, data, cfg, &|_| true)
}

/// Train only the parameters accepted by `trainable`.
pub fn train_filtered(
    model: &Model,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(Model, TrainingCurve)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let classes = model.num_outputs().max(2);
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Precondition(format!(
            "label {bad} out of range for a {classes}-output model"
        )));
    }
    let mut model = model.clone();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut r = rng(named_seed(cfg.seed, "order"));
    let mut curve = TrainingCurve::default();
    let mut best_acc = f32::NEG_INFINITY;
    let mut stale = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let order = epoch_order(&data.labels, cfg.stratified_batches, &mut r);
        let mut loss_sum = 0.0f32;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| curve.steps >= m) {
                break 'epochs;
            }
            let images: Vec<Tensor> = chunk.iter().map(|&i| data.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, right, grads) = batch_gradients(&model, &images, &labels)?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            opt.step(&mut model, &grads, trainable);
            curve.steps += 1;
            loss_sum += loss * chunk.len() as f32;
            correct += right;
            seen += chunk.len();
        }
        let acc = correct as f32 / seen.max(1) as f32;
        curve.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / seen.max(1) as f32,
            train_accuracy: acc,
        });
        if let Some(patience) = cfg.early_stop_patience {
            if acc > best_acc + 1e-4 {
                best_acc = acc;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    model.metadata.seed = Some(cfg.seed);
    model.metadata.dataset_id = Some(data.provenance.clone());
    model.metadata.epochs = Some(curve.epochs.len());
    Ok((model, curve))
}

/// Fresh model of `model`'s architecture initialized from `cfg`, then trained.
pub fn train_from_scratch(model: &Model, data: &LabeledDataset, cfg: &TrainConfig) -> Result<(Model, TrainingCurve)> {
    let mut fresh = model.clone();
    init_parameters(&mut fresh, cfg.weight_init, named_seed(cfg.seed, "init"));
    train(&fresh, data, cfg)
}

/// Names of dense-layer parameters (the classification layers).
pub fn dense_param_names(model: &Model) -> Vec<String> {
    model
        .layers()
        .iter()
        .filter(|l| matches!(l, LayerSpec::Dense { .. }))
        .flat_map(|l| l.param_specs())
        .map(|s| s.name)
        .collect()
}

/// Freeze everything but the dense layers, re-initialize those with a head of
/// `new_num_classes`, and train them on `data`.
pub fn transfer_retrain(
    source: &Model,
    data: &LabeledDataset,
    new_num_classes: usize,
    cfg: &TrainConfig,
) -> Result<(Model, TrainingCurve)> {
    objective_for(source)?;
    if new_num_classes < source.num_outputs() {
        return Err(Error::Precondition(format!(
            "cannot shrink {} classes to {new_num_classes}",
            source.num_outputs()
        )));
    }
    let arch = source.architecture().with_head_outputs(new_num_classes)?;
    let mut fresh = Model::zeros(arch);
    init_parameters(&mut fresh, cfg.weight_init, named_seed(cfg.seed, "init"));
    let dense = dense_param_names(&fresh);
    for (name, t) in source.params() {
        if !dense.contains(name) {
            fresh.set_param(name, t.clone())?;
        }
    }
    fresh.metadata = source.metadata.clone();
    let mut labels = source.metadata.class_labels.clone();
    for i in labels.len()..new_num_classes {
        labels.push(data.class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}")));
    }
    fresh.metadata.class_labels = labels;
    train_filtered(&fresh, data, cfg, &|n| dense.iter().any(|d| d == n))
}

/// Nearest-centroid classifier over penultimate activations, by cosine similarity.
#[derive(Clone, Debug)]
pub struct CentroidClassifier {
    features: Model,
    /// `(class id, mean activation)`, ascending class id.
    centroids: Vec<(usize, Tensor)>,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    dot / (libm::sqrt(na) * libm::sqrt(nb))
}

impl CentroidClassifier {
    pub fn from_centroids(features: Model, centroids: Vec<(usize, Tensor)>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::Precondition("no classes".into()));
        }
        let mut centroids = centroids;
        centroids.sort_by_key(|c| c.0);
        Ok(Self {
            features,
            centroids,
        })
    }

    pub fn centroids(&self) -> &[(usize, Tensor)] {
        &self.centroids
    }

    pub fn classify(&self, x: &Tensor) -> Result<usize> {
        let act = self.features.forward(x)?;
        Ok(self.classify_activation(&act))
    }

    pub fn classify_activation(&self, act: &Tensor) -> usize {
        let mut best = (f64::NEG_INFINITY, self.centroids[0].0);
        for (class, c) in &self.centroids {
            let s = cosine(act.data(), c.data());
            if s > best.0 {
                best = (s, *class);
            }
        }
        best.1
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Precondition("empty evaluation set".into()));
        }
        let mut correct = 0;
        for (x, &y) in data.images.iter().zip(&data.labels) {
            correct += usize::from(self.classify(x)? == y);
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Class centroids of the source's penultimate activations.
pub fn zero_shot_classifier(source: &Model, per_class: &BTreeMap<usize, Vec<Tensor>>) -> Result<CentroidClassifier> {
    let features = source.feature_extractor()?;
    let mut centroids = Vec::with_capacity(per_class.len());
    for (&class, samples) in per_class {
        if samples.is_empty() {
            return Err(Error::Precondition(format!("class {class} has no samples")));
        }
        let mut sum: Option<Tensor> = None;
        for x in samples {
            let a = features.forward(x)?;
            match &mut sum {
                Some(s) => s.add_scaled(&a, 1.0)?,
                None => sum = Some(a),
            }
        }
        let mean = sum.unwrap().scale(1.0 / samples.len() as f32);
        centroids.push((class, mean));
    }
    CentroidClassifier::from_centroids(features, centroids)
}
