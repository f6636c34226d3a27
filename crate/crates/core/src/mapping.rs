//! Initial combination structure built from how existing models respond to
//! samples of a novel concept.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{
    Alpha, AlphaKind, ConceptualExpansion, ExpandedVariable, FeatureOrigin, ParamExpansion, Term,
};
use crate::metrics::predict;
use crate::model::Model;
use crate::tensor::Tensor;

/// One mapped source: a class of a classifier or a source model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub source: usize,
    pub ratio: f64,
    /// Samples attributed to this source.
    pub count: usize,
}

/// Sources with ratios in `(0, 1]` summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mapping {
    entries: Vec<MappingEntry>,
}

impl Mapping {
    pub fn new(entries: Vec<MappingEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidMapping("mapping has no entries".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if !(e.ratio > 0.0 && e.ratio <= 1.0) {
                return Err(Error::InvalidMapping(format!(
                    "ratio {} of source {} outside (0, 1]",
                    e.ratio, e.source
                )));
            }
            if entries[..i].iter().any(|o| o.source == e.source) {
                return Err(Error::InvalidMapping(format!("duplicate source {}", e.source)));
            }
        }
        let sum: f64 = entries.iter().map(|e| e.ratio).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMapping(format!("ratios sum to {sum}")));
        }
        Ok(Self { entries })
    }

    /// Ratios proportional to `counts`; zero-count sources are dropped.
    pub fn from_counts(counts: &[(usize, usize)]) -> Result<Self> {
        let total: usize = counts.iter().map(|c| c.1).sum();
        if total == 0 {
            return Err(Error::InvalidMapping("all counts are zero".into()));
        }
        let mut entries: Vec<MappingEntry> = counts
            .iter()
            .filter(|c| c.1 > 0)
            .map(|&(source, count)| MappingEntry {
                source,
                ratio: count as f64 / total as f64,
                count,
            })
            .collect();
        entries.sort_by_key(|e| e.source);
        Self::new(entries)
    }

    /// Mapping from raw non-negative weights, normalized to sum one.
    pub fn from_weights(weights: &[(usize, f64, usize)]) -> Result<Self> {
        let total: f64 = weights.iter().map(|w| w.1).sum();
        if !(total > 0.0) || weights.iter().any(|w| !(w.1 >= 0.0) || !w.1.is_finite()) {
            return Err(Error::InvalidMapping(format!("weights {weights:?} cannot be normalized")));
        }
        let entries = weights
            .iter()
            .filter(|w| w.1 > 0.0)
            .map(|&(source, w, count)| MappingEntry {
                source,
                ratio: w / total,
                count,
            })
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[MappingEntry] {
        &self.entries
    }

    pub fn ratio(&self, source: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.source == source).map(|e| e.ratio)
    }

    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.source)
    }
}

/// Classify each novel sample with `model` and map to the classes it lands in.
pub fn build_classifier_mapping(model: &Model, novel: &[Tensor]) -> Result<Mapping> {
    if novel.is_empty() {
        return Err(Error::Precondition("no novel samples to map".into()));
    }
    let mut counts = alloc::vec![0usize; model.num_outputs()];
    for x in novel {
        counts[predict(model, x)?] += 1;
    }
    let counts: Vec<(usize, usize)> = counts.into_iter().enumerate().collect();
    Mapping::from_counts(&counts)
}

fn source_id(model: &Model, index: usize) -> String {
    if model.metadata.id.is_empty() {
        format!("source{index}")
    } else {
        model.metadata.id.clone()
    }
}

/// Expansion over `base` with one new head row for the novel class.
pub fn apply_mapping_new_class(base: &Model, m: &Mapping, label: &str) -> Result<ConceptualExpansion> {
    apply_mapping_new_classes(base, &[(m.clone(), label.to_string())])
}

/// Expansion over `base` with one new head row per `(mapping, label)`.
///
/// Every old row keeps its exact values; each new row is the ratio-weighted
/// combination of the mapped classes' rows, biases included.
pub fn apply_mapping_new_classes(base: &Model, new: &[(Mapping, String)]) -> Result<ConceptualExpansion> {
    if new.is_empty() {
        return Err(Error::Precondition("no new classes to add".into()));
    }
    let arch = base.architecture();
    let head = arch
        .final_dense_name()
        .ok_or_else(|| Error::Precondition("base model has no dense head".into()))?
        .to_string();
    let n = base.num_outputs();
    for (m, label) in new {
        if let Some(bad) = m.sources().find(|&s| s >= n) {
            return Err(Error::InvalidMapping(format!(
                "mapping for {label:?} references class {bad} of a {n}-class model"
            )));
        }
    }
    let new_arch = arch.with_head_outputs(n + new.len())?;
    let id = source_id(base, 0);
    let weight_name = format!("{head}.weight");
    let bias_name = format!("{head}.bias");
    let weight = base.param(&weight_name)?;
    let bias = base.param(&bias_name)?;
    let weight_rows = (0..n)
        .map(|r| weight.row(r).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    let bias_rows = (0..n)
        .map(|r| bias.row(r).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;

    let base_ce = ConceptualExpansion::default_expansion(base);
    let mut variables: BTreeMap<String, ParamExpansion> = base_ce.params().clone();

    for (name, rows, kind) in [
        (&weight_name, &weight_rows, AlphaKind::Tensor),
        (&bias_name, &bias_rows, AlphaKind::Scalar),
    ] {
        let mut vars: Vec<ExpandedVariable> = rows
            .iter()
            .enumerate()
            .map(|(r, f)| ExpandedVariable::single(f.clone(), FeatureOrigin::new(&id, name, Some(r)), kind))
            .collect();
        for (m, _) in new {
            let terms = m
                .entries()
                .iter()
                .map(|e| {
                    let f = rows[e.source].clone();
                    Term {
                        alpha: Alpha::filled(kind, f.shape(), e.ratio as f32),
                        feature: f,
                        origin: FeatureOrigin::new(&id, name, Some(e.source)),
                    }
                })
                .collect();
            vars.push(ExpandedVariable::new(kind, terms)?);
        }
        variables.insert(name.clone(), ParamExpansion::Rows(vars));
    }

    let mut meta = base.metadata.clone();
    let mut labels = meta.class_labels.clone();
    labels.resize_with(n, || String::new());
    for (i, l) in labels.iter_mut().enumerate() {
        if l.is_empty() {
            *l = format!("class{i}");
        }
    }
    labels.extend(new.iter().map(|(_, l)| l.clone()));
    meta.class_labels = labels;
    let target = new
        .iter()
        .map(|(_, l)| l.as_str())
        .collect::<Vec<_>>()
        .join("+");
    ConceptualExpansion::new(new_arch, meta, variables, target)
}

/// Expansion in which every parameter combines all mapped source models'
/// corresponding tensors. Sources are indices into `models`.
pub fn apply_mapping_full(models: &[Model], m: &Mapping, target: &str) -> Result<ConceptualExpansion> {
    let first = models
        .first()
        .ok_or_else(|| Error::Precondition("no source models".into()))?;
    for other in &models[1..] {
        if let Some((layer, detail)) = first.architecture().first_difference(other.architecture()) {
            return Err(Error::ArchitectureMismatch { layer, detail });
        }
    }
    if let Some(bad) = m.sources().find(|&s| s >= models.len()) {
        return Err(Error::InvalidMapping(format!(
            "mapping references source {bad} of {}",
            models.len()
        )));
    }
    let arch = first.architecture().clone();
    let mut variables = BTreeMap::new();
    for spec in arch.param_specs() {
        let kind = AlphaKind::for_param(spec.kind);
        let terms = m
            .entries()
            .iter()
            .map(|e| {
                let src = &models[e.source];
                let f = Arc::new(src.param(&spec.name)?.clone());
                Ok(Term {
                    alpha: Alpha::filled(kind, f.shape(), e.ratio as f32),
                    feature: f,
                    origin: FeatureOrigin::new(&source_id(src, e.source), &spec.name, None),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        variables.insert(spec.name, ParamExpansion::Whole(ExpandedVariable::new(kind, terms)?));
    }
    let mut meta = first.metadata.clone();
    meta.id = format!("combi-{target}");
    ConceptualExpansion::new(arch, meta, variables, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_mlp;
    use crate::trainer::init_parameters;

    fn mlp(seed: u64) -> Model {
        let mut m = build_mlp(&[4], &[6], 3).unwrap();
        init_parameters(&mut m, Default::default(), seed);
        m.metadata.id = format!("m{seed}");
        m
    }

    #[test]
    fn counts_to_ratios() {
        let m = Mapping::from_counts(&[(7, 2), (2, 2), (0, 0)]).unwrap();
        assert_eq!(m.entries().len(), 2);
        assert_eq!(m.ratio(7), Some(0.5));
        assert_eq!(m.ratio(2), Some(0.5));
        assert_eq!(m.ratio(0), None);

        let m = Mapping::from_counts(&[(0, 5), (1, 3), (2, 2)]).unwrap();
        assert_eq!(
            m.entries().iter().map(|e| e.ratio).collect::<Vec<_>>(),
            [0.5, 0.3, 0.2]
        );
    }

    #[test]
    fn invalid_mappings() {
        assert!(Mapping::new(Vec::new()).is_err());
        let e = |source, ratio| MappingEntry { source, ratio, count: 1 };
        assert!(Mapping::new(alloc::vec![e(0, 0.5), e(0, 0.5)]).is_err());
        assert!(Mapping::new(alloc::vec![e(0, 0.5), e(1, 0.4)]).is_err());
        assert!(Mapping::new(alloc::vec![e(0, 0.0), e(1, 1.0)]).is_err());
    }

    #[test]
    fn empty_samples_rejected() {
        assert!(matches!(
            build_classifier_mapping(&mlp(1), &[]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn new_class_mapping_out_of_range() {
        let m = Mapping::from_counts(&[(3, 1)]).unwrap();
        assert!(matches!(
            apply_mapping_new_class(&mlp(1), &m, "x"),
            Err(Error::InvalidMapping(_))
        ));
    }

    #[test]
    fn new_row_is_ratio_blend() {
        let base = mlp(3);
        let m = Mapping::from_counts(&[(0, 1), (2, 1)]).unwrap();
        let ce = apply_mapping_new_class(&base, &m, "novel").unwrap();
        let model = ce.materialize().unwrap();
        assert_eq!(model.num_outputs(), 4);
        let w_old = base.param("fc2.weight").unwrap();
        let w_new = model.param("fc2.weight").unwrap();
        for r in 0..3 {
            assert_eq!(w_new.row(r).unwrap().data(), w_old.row(r).unwrap().data());
        }
        for (i, v) in w_new.row(3).unwrap().data().iter().enumerate() {
            let expect = 0.5 * w_old.row(0).unwrap().data()[i] + 0.5 * w_old.row(2).unwrap().data()[i];
            assert!((v - expect).abs() < 1e-6);
        }
        let b = model.param("fc2.bias").unwrap().data();
        let bo = base.param("fc2.bias").unwrap().data();
        assert!((b[3] - 0.5 * (bo[0] + bo[2])).abs() < 1e-6);
        assert_eq!(model.metadata.class_labels[3], "novel");
    }

    #[test]
    fn full_mapping_rejects_mismatch() {
        let a = mlp(1);
        let b = build_mlp(&[4], &[5], 3).unwrap();
        let m = Mapping::from_counts(&[(0, 1), (1, 1)]).unwrap();
        match apply_mapping_full(&[a, b], &m, "x") {
            Err(Error::ArchitectureMismatch { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn full_mapping_excludes_unmapped_sources() {
        let models = [mlp(1), mlp(2)];
        let m = Mapping::from_counts(&[(0, 4), (1, 0)]).unwrap();
        let ce = apply_mapping_full(&models, &m, "x").unwrap();
        for pe in ce.params().values() {
            let ParamExpansion::Whole(v) = pe else { panic!() };
            assert_eq!(v.len(), 1);
            assert_eq!(v.origins().next().unwrap().model, "m1");
        }
        assert!(ce.materialize().unwrap().params() == models[0].params());
    }
}
