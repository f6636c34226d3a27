//! Accuracy, class-distribution divergence and the inception-style score,
//! plus the accuracy heuristics that drive expansion search.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::expansion::ConceptualExpansion;
use crate::model::Model;
use crate::tensor::Tensor;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &Model, x: &Tensor) -> Result<usize> {
    Ok(argmax(model.forward(x)?.data()))
}

fn fraction_correct(outputs: &[Tensor], labels: &[usize]) -> f64 {
    let correct = outputs
        .iter()
        .zip(labels)
        .filter(|(o, &y)| argmax(o.data()) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Precondition("empty evaluation set".into()));
    }
    let outputs = data
        .images
        .iter()
        .map(|x| model.forward(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(fraction_correct(&outputs, &data.labels))
}

/// Accuracy per class id in `0..num_classes`; `None` for classes without samples.
pub fn per_class_accuracy(model: &Model, data: &LabeledDataset, num_classes: usize) -> Result<Vec<Option<f64>>> {
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (x, &y) in data.images.iter().zip(&data.labels) {
        if y >= num_classes {
            continue;
        }
        totals[y] += 1;
        hits[y] += usize::from(predict(model, x)? == y);
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect())
}

/// `lambda * novel + (1 - lambda) * original`.
pub fn blend_scores(lambda: f64, novel: f64, original: f64) -> f64 {
    lambda * novel + (1.0 - lambda) * original
}

/// Weighted accuracy on the novel class and an original-class subsample.
pub fn combined_heuristic(
    ce: &ConceptualExpansion,
    novel: &LabeledDataset,
    original: &LabeledDataset,
    lambda: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Precondition(format!("lambda {lambda} outside [0,1]")));
    }
    let m = ce.materialize()?;
    Ok(blend_scores(lambda, accuracy(&m, novel)?, accuracy(&m, original)?))
}

/// Probabilities over `K` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("not a distribution: {probs:?}")));
        }
        Ok(Self(probs))
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Precondition("empty histogram".into()));
        }
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Add `eps` to every bin and renormalize.
    pub fn smoothed(&self, eps: f64) -> ClassDistribution {
        let total = 1.0 + eps * self.0.len() as f64;
        ClassDistribution(self.0.iter().map(|p| (p + eps) / total).collect())
    }
}

/// Bin mass added to `q` when it does not cover the support of `p`.
pub const KL_SMOOTHING: f64 = 1e-6;

/// `sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0`. When `q` has an empty bin
/// where `p` has mass, `q` is smoothed by [`KL_SMOOTHING`] first.
pub fn kl_divergence(p: &ClassDistribution, q: &ClassDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    let uncovered = p.0.iter().zip(&q.0).any(|(&a, &b)| a > 0.0 && b == 0.0);
    let q = if uncovered { q.smoothed(KL_SMOOTHING) } else { q.clone() };
    Ok(kl_raw(&p.0, &q.0))
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * libm::log(a / b))
        .sum::<f64>()
        .max(0.0)
}

/// `exp(mean_x KL(p(y|x) || p(y)))` from per-sample conditionals.
pub fn inception_from_conditionals(conditionals: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = conditionals.first() else {
        return Err(Error::Precondition("no images".into()));
    };
    let k = first.len();
    let mut marginal = vec![0.0f64; k];
    for c in conditionals {
        if c.len() != k {
            return Err(Error::Shape {
                op: "inception_style_score",
                lhs: vec![k],
                rhs: vec![c.len()],
            });
        }
        for (m, v) in marginal.iter_mut().zip(c) {
            *m += v;
        }
    }
    let n = conditionals.len() as f64;
    marginal.iter_mut().for_each(|m| *m /= n);
    let mean_kl = conditionals.iter().map(|c| kl_raw(c, &marginal)).sum::<f64>() / n;
    Ok(libm::exp(mean_kl))
}

/// Inception-style objectness score of `images` under a softmax `reference`.
pub fn inception_style_score(reference: &Model, images: &[Tensor]) -> Result<f64> {
    let conditionals = images
        .iter()
        .map(|x| {
            let y = reference.forward(x)?;
            let s: f64 = y.data().iter().map(|&v| v as f64).sum();
            Ok(y.data().iter().map(|&v| v as f64 / s).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    inception_from_conditionals(&conditionals)
}

/// Normalized histogram of argmax classifications.
pub fn class_distribution(reference: &Model, images: &[Tensor]) -> Result<ClassDistribution> {
    if images.is_empty() {
        return Err(Error::Precondition("no images".into()));
    }
    let mut counts = vec![0usize; reference.num_outputs()];
    for x in images {
        counts[predict(reference, x)?] += 1;
    }
    ClassDistribution::from_counts(&counts)
}

/// Scores a candidate expansion; higher is better.
pub trait Heuristic {
    fn score(&self, ce: &ConceptualExpansion) -> Result<f64>;
}

impl<F> Heuristic for F
where
    F: Fn(&ConceptualExpansion) -> Result<f64>,
{
    fn score(&self, ce: &ConceptualExpansion) -> Result<f64> {
        self(ce)
    }
}

/// Forward passes that resume from cached activations of a reference model.
///
/// Candidates produced by expansion search usually differ from the initial
/// expansion in a few late layers only; the cache stores every sample's
/// input to each parameterized layer of the reference and restarts the
/// forward pass at the first parameterized layer whose tensors changed.
#[derive(Clone, Debug)]
pub struct PrefixCache {
    reference: Model,
    /// Layer indices with parameters, ascending.
    boundaries: Vec<usize>,
    /// `acts[b][s]`: input to layer `boundaries[b]` for sample `s`.
    acts: Vec<Vec<Tensor>>,
    outputs: Vec<Tensor>,
}

impl PrefixCache {
    pub fn new(reference: Model, inputs: &[Tensor]) -> Result<Self> {
        let boundaries: Vec<usize> = reference
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| i)
            .collect();
        let mut acts = vec![Vec::with_capacity(inputs.len()); boundaries.len()];
        let mut outputs = Vec::with_capacity(inputs.len());
        for x in inputs {
            let trace = reference.forward_trace(x)?;
            for (b, &layer) in boundaries.iter().enumerate() {
                acts[b].push(trace[layer].clone());
            }
            outputs.push(trace.last().unwrap().clone());
        }
        Ok(Self {
            reference,
            boundaries,
            acts,
            outputs,
        })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    fn first_changed(&self, candidate: &Model) -> Option<usize> {
        for (b, &layer) in self.boundaries.iter().enumerate() {
            for spec in self.reference.layers()[layer].param_specs() {
                let same = match (candidate.params().get(&spec.name), self.reference.params().get(&spec.name)) {
                    (Some(a), Some(r)) => a.bits_eq(r),
                    _ => false,
                };
                if !same {
                    return Some(b);
                }
            }
        }
        None
    }

    /// Model outputs for every cached sample, bit-identical to `candidate.forward`.
    pub fn outputs(&self, candidate: &Model) -> Result<Vec<Tensor>> {
        if candidate.architecture() != self.reference.architecture() {
            return Err(Error::ArchitectureMismatch {
                layer: 0,
                detail: "candidate differs from cached reference architecture".into(),
            });
        }
        match self.first_changed(candidate) {
            None => Ok(self.outputs.clone()),
            Some(b) => {
                let layer = self.boundaries[b];
                self.acts[b]
                    .iter()
                    .map(|a| candidate.forward_from(layer, a.clone()))
                    .collect()
            }
        }
    }

    pub fn accuracy(&self, candidate: &Model, labels: &[usize]) -> Result<f64> {
        Ok(fraction_correct(&self.outputs(candidate)?, labels))
    }
}

/// Novel-class accuracy of the materialized candidate.
#[derive(Clone, Debug)]
pub struct NewClassAccuracy {
    cache: PrefixCache,
    labels: Vec<usize>,
}

impl NewClassAccuracy {
    /// `novel` labels must already be in the expanded label space.
    pub fn new(initial: &ConceptualExpansion, novel: &LabeledDataset) -> Result<Self> {
        if novel.is_empty() {
            return Err(Error::Precondition("no novel samples".into()));
        }
        Ok(Self {
            cache: PrefixCache::new(initial.materialize()?, &novel.images)?,
            labels: novel.labels.clone(),
        })
    }
}

impl Heuristic for NewClassAccuracy {
    fn score(&self, ce: &ConceptualExpansion) -> Result<f64> {
        self.cache.accuracy(&ce.materialize()?, &self.labels)
    }
}

/// `lambda * novel accuracy + (1 - lambda) * original-subsample accuracy`.
#[derive(Clone, Debug)]
pub struct CombinedAccuracy {
    novel: PrefixCache,
    novel_labels: Vec<usize>,
    original: PrefixCache,
    original_labels: Vec<usize>,
    pub lambda: f64,
}

/// Default weight on novel-class accuracy.
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Default size of the original-class subsample scored during search.
pub const DEFAULT_ORIGINAL_SUBSAMPLE: usize = 1000;

impl CombinedAccuracy {
    pub fn new(
        initial: &ConceptualExpansion,
        novel: &LabeledDataset,
        original: &LabeledDataset,
        lambda: f64,
    ) -> Result<Self> {
        if novel.is_empty() || original.is_empty() {
            return Err(Error::Precondition("heuristic datasets must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Precondition(format!("lambda {lambda} outside [0,1]")));
        }
        let reference = initial.materialize()?;
        Ok(Self {
            novel: PrefixCache::new(reference.clone(), &novel.images)?,
            novel_labels: novel.labels.clone(),
            original: PrefixCache::new(reference, &original.images)?,
            original_labels: original.labels.clone(),
            lambda,
        })
    }

    /// `(novel accuracy, original accuracy)` of a materialized model.
    pub fn components(&self, model: &Model) -> Result<(f64, f64)> {
        Ok((
            self.novel.accuracy(model, &self.novel_labels)?,
            self.original.accuracy(model, &self.original_labels)?,
        ))
    }
}

impl Heuristic for CombinedAccuracy {
    fn score(&self, ce: &ConceptualExpansion) -> Result<f64> {
        let (n, o) = self.components(&ce.materialize()?)?;
        Ok(blend_scores(self.lambda, n, o))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> ClassDistribution {
        ClassDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn kl_examples() {
        let p = dist(&[0.5, 0.5]);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        let q = dist(&[0.25, 0.75]);
        // 0.5 ln 2 + 0.5 ln(2/3)
        let oracle = 0.5 * core::f64::consts::LN_2 + 0.5 * libm::log(2.0 / 3.0);
        let v = kl_divergence(&p, &q).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.1438).abs() < 1e-4);
        assert!(kl_divergence(&p, &dist(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn kl_smooths_uncovered_bins() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[1.0, 0.0]);
        let v = kl_divergence(&p, &q).unwrap();
        assert!(v.is_finite() && v > 5.0);
        // Zero-mass bins of p against matching q need no smoothing.
        let r = dist(&[1.0, 0.0]);
        assert_eq!(kl_divergence(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = dist(&[0.9, 0.1]);
        let q = dist(&[0.5, 0.5]);
        assert!((kl_divergence(&p, &q).unwrap() - kl_divergence(&q, &p).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn inception_identities() {
        let same = vec![vec![0.2, 0.3, 0.5]; 7];
        assert!((inception_from_conditionals(&same).unwrap() - 1.0).abs() < 1e-12);
        let k = 6;
        let onehot: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        assert!((inception_from_conditionals(&onehot).unwrap() - k as f64).abs() < 1e-9);
        assert!(inception_from_conditionals(&[]).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ClassDistribution::new(vec![-0.1, 1.1]).is_err());
        let d = ClassDistribution::from_counts(&[0, 0, 3, 0]).unwrap();
        assert_eq!(d.probs(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn blend_scores_examples() {
        assert!((blend_scores(0.5, 0.8, 0.6) - 0.7).abs() < 1e-12);
        assert_eq!(blend_scores(1.0, 0.8, 0.6), 0.8);
        assert_eq!(blend_scores(0.0, 0.8, 0.6), 0.6);
    }
}
