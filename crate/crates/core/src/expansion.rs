//! Conceptual expansions: every parameter written as `sum_i a_i * f_i`.
//!
//! Each parameter of the target architecture is an [`ExpandedVariable`] (or,
//! for classification heads, one variable per output row). A variable holds
//! source feature tensors `f_i`, one alpha `a_i` per feature, and where each
//! feature came from. Bias variables carry scalar alphas; everything else
//! carries alphas of the feature's full shape, combined elementwise.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{ParamKind, ParamMap};
use crate::model::{Architecture, Metadata, Model};
use crate::rng::{mix64, Rng};
use crate::tensor::Tensor;

/// Where a feature tensor was taken from.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureOrigin {
    /// Knowledge-base model id.
    pub model: String,
    pub param: String,
    /// Leading-axis row of the source parameter, for class rows.
    #[serde(default)]
    pub row: Option<usize>,
}

impl FeatureOrigin {
    pub fn new(model: &str, param: &str, row: Option<usize>) -> Self {
        Self {
            model: model.to_string(),
            param: param.to_string(),
            row,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaKind {
    Scalar,
    Tensor,
}

impl AlphaKind {
    pub fn for_param(kind: ParamKind) -> Self {
        match kind {
            ParamKind::Bias => AlphaKind::Scalar,
            _ => AlphaKind::Tensor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Alpha {
    Scalar(f32),
    Tensor(Arc<Tensor>),
}

impl Alpha {
    pub fn kind(&self) -> AlphaKind {
        match self {
            Alpha::Scalar(_) => AlphaKind::Scalar,
            Alpha::Tensor(_) => AlphaKind::Tensor,
        }
    }

    /// Constant alpha of the given kind and feature shape.
    pub fn filled(kind: AlphaKind, shape: &[usize], value: f32) -> Alpha {
        match kind {
            AlphaKind::Scalar => Alpha::Scalar(value),
            AlphaKind::Tensor => Alpha::Tensor(Arc::new(Tensor::full(shape, value))),
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            Alpha::Scalar(v) => core::slice::from_ref(v),
            Alpha::Tensor(t) => t.data(),
        }
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.values().is_empty()
    }

    /// Mutable entries; tensor alphas are copied first if shared.
    pub fn values_mut(&mut self) -> &mut [f32] {
        match self {
            Alpha::Scalar(v) => core::slice::from_mut(v),
            Alpha::Tensor(t) => Arc::make_mut(t).data_mut(),
        }
    }

    pub fn as_tensor(&self) -> Tensor {
        match self {
            Alpha::Scalar(v) => Tensor::scalar(*v),
            Alpha::Tensor(t) => (**t).clone(),
        }
    }
}

/// One `a_i * f_i` term.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub feature: Arc<Tensor>,
    pub alpha: Alpha,
    pub origin: FeatureOrigin,
}

/// A parameter (or parameter row) as a weighted combination of features.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedVariable {
    kind: AlphaKind,
    shape: Vec<usize>,
    terms: Vec<Term>,
}

impl ExpandedVariable {
    pub fn new(kind: AlphaKind, terms: Vec<Term>) -> Result<Self> {
        let Some(first) = terms.first() else {
            return Err(Error::Precondition("expanded variable needs at least one feature".into()));
        };
        let shape = first.feature.shape().to_vec();
        let var = Self {
            kind,
            shape,
            terms: Vec::with_capacity(terms.len()),
        };
        terms.into_iter().try_fold(var, |mut v, t| {
            v.push(t)?;
            Ok(v)
        })
    }

    /// The identity expansion of one tensor: alpha 1.0.
    pub fn single(feature: Arc<Tensor>, origin: FeatureOrigin, kind: AlphaKind) -> Self {
        let alpha = Alpha::filled(kind, feature.shape(), 1.0);
        Self {
            kind,
            shape: feature.shape().to_vec(),
            terms: vec![Term {
                feature,
                alpha,
                origin,
            }],
        }
    }

    fn check_term(&self, t: &Term) -> Result<()> {
        if t.feature.shape() != self.shape.as_slice() {
            return Err(Error::Shape {
                op: "expanded variable feature",
                lhs: t.feature.shape().to_vec(),
                rhs: self.shape.clone(),
            });
        }
        match (&t.alpha, self.kind) {
            (Alpha::Scalar(v), AlphaKind::Scalar) if v.is_finite() => Ok(()),
            (Alpha::Tensor(a), AlphaKind::Tensor) if a.shape() == self.shape.as_slice() && a.is_finite() => Ok(()),
            (a, _) => Err(Error::Precondition(format!(
                "alpha of kind {:?} (len {}) invalid for a {:?} variable of shape {:?}",
                a.kind(),
                a.len(),
                self.kind,
                self.shape
            ))),
        }
    }

    pub fn push(&mut self, term: Term) -> Result<()> {
        self.check_term(&term)?;
        self.terms.push(term);
        Ok(())
    }

    /// Replace term `i`, re-validating it.
    pub fn replace(&mut self, i: usize, term: Term) -> Result<()> {
        self.check_term(&term)?;
        self.terms[i] = term;
        Ok(())
    }

    pub fn kind(&self) -> AlphaKind {
        self.kind
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn features(&self) -> impl Iterator<Item = &Tensor> {
        self.terms.iter().map(|t| &*t.feature)
    }

    pub fn alphas(&self) -> impl Iterator<Item = &Alpha> {
        self.terms.iter().map(|t| &t.alpha)
    }

    pub fn origins(&self) -> impl Iterator<Item = &FeatureOrigin> {
        self.terms.iter().map(|t| &t.origin)
    }

    /// Mutable alpha entries of term `i`. Callers keep them finite.
    pub fn alpha_values_mut(&mut self, i: usize) -> &mut [f32] {
        self.terms[i].alpha.values_mut()
    }

    /// `sum_i a_i (.) f_i`.
    pub fn value(&self) -> Tensor {
        let mut out = vec![0.0f32; self.shape.iter().product()];
        for t in &self.terms {
            let f = t.feature.data();
            match &t.alpha {
                Alpha::Scalar(a) => {
                    for (o, x) in out.iter_mut().zip(f) {
                        *o += a * x;
                    }
                }
                Alpha::Tensor(a) => {
                    for ((o, x), w) in out.iter_mut().zip(f).zip(a.data()) {
                        *o += w * x;
                    }
                }
            }
        }
        Tensor::new(self.shape.clone(), out).expect("validated shape")
    }
}

/// How one named parameter is expanded.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamExpansion {
    Whole(ExpandedVariable),
    /// One variable per leading-axis row, e.g. one per class of a dense head.
    Rows(Vec<ExpandedVariable>),
}

/// Address of a single expanded variable.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VarKey {
    pub param: String,
    pub row: Option<usize>,
}

/// Closed interval alphas are sampled from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRange {
    pub lo: f32,
    pub hi: f32,
}

impl Default for AlphaRange {
    fn default() -> Self {
        Self { lo: -1.0, hi: 1.0 }
    }
}

impl AlphaRange {
    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Precondition(format!("alpha range [{lo}, {hi}] is empty")));
        }
        Ok(Self { lo, hi })
    }

    pub fn sample(&self, r: &mut Rng) -> f32 {
        r.random_range(self.lo..=self.hi)
    }

    pub fn contains(&self, v: f32) -> bool {
        (self.lo..=self.hi).contains(&v)
    }
}

/// A full model written as expanded variables over a target architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptualExpansion {
    arch: Architecture,
    metadata: Metadata,
    variables: BTreeMap<String, ParamExpansion>,
    target_concept: String,
}

impl ConceptualExpansion {
    pub fn new(
        arch: Architecture,
        metadata: Metadata,
        variables: BTreeMap<String, ParamExpansion>,
        target_concept: impl Into<String>,
    ) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        for name in variables.keys() {
            if !specs.iter().any(|s| &s.name == name) {
                return Err(Error::Unknown {
                    kind: "parameter",
                    name: name.clone(),
                });
            }
        }
        for spec in &specs {
            let pe = variables
                .get(&spec.name)
                .ok_or_else(|| Error::MissingParameter(spec.name.clone()))?;
            check_param_expansion(pe, &spec.shape, AlphaKind::for_param(spec.kind))?;
        }
        Ok(Self {
            arch,
            metadata,
            variables,
            target_concept: target_concept.into(),
        })
    }

    /// Every parameter becomes a one-feature variable with alpha 1.0.
    pub fn default_expansion(model: &Model) -> Self {
        let id = model.metadata.id.as_str();
        let variables = model
            .architecture()
            .param_specs()
            .into_iter()
            .map(|spec| {
                let t = Arc::new(model.params()[&spec.name].clone());
                let origin = FeatureOrigin::new(id, &spec.name, None);
                let var = ExpandedVariable::single(t, origin, AlphaKind::for_param(spec.kind));
                (spec.name, ParamExpansion::Whole(var))
            })
            .collect();
        Self {
            arch: model.architecture().clone(),
            metadata: model.metadata.clone(),
            variables,
            target_concept: String::new(),
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut Metadata {
        &mut self.metadata
    }

    pub fn target_concept(&self) -> &str {
        &self.target_concept
    }

    pub fn set_target_concept(&mut self, target: impl Into<String>) {
        self.target_concept = target.into();
    }

    pub fn params(&self) -> &BTreeMap<String, ParamExpansion> {
        &self.variables
    }

    /// Every variable address, in parameter-name then row order.
    pub fn keys(&self) -> Vec<VarKey> {
        let mut keys = Vec::new();
        for (name, pe) in &self.variables {
            match pe {
                ParamExpansion::Whole(_) => keys.push(VarKey {
                    param: name.clone(),
                    row: None,
                }),
                ParamExpansion::Rows(rows) => keys.extend((0..rows.len()).map(|r| VarKey {
                    param: name.clone(),
                    row: Some(r),
                })),
            }
        }
        keys
    }

    pub fn num_variables(&self) -> usize {
        self.variables
            .values()
            .map(|pe| match pe {
                ParamExpansion::Whole(_) => 1,
                ParamExpansion::Rows(r) => r.len(),
            })
            .sum()
    }

    pub fn variable(&self, key: &VarKey) -> Option<&ExpandedVariable> {
        match (self.variables.get(&key.param)?, key.row) {
            (ParamExpansion::Whole(v), None) => Some(v),
            (ParamExpansion::Rows(rows), Some(r)) => rows.get(r),
            _ => None,
        }
    }

    pub fn variable_mut(&mut self, key: &VarKey) -> Option<&mut ExpandedVariable> {
        match (self.variables.get_mut(&key.param)?, key.row) {
            (ParamExpansion::Whole(v), None) => Some(v),
            (ParamExpansion::Rows(rows), Some(r)) => rows.get_mut(r),
            _ => None,
        }
    }

    /// Concrete parameter value for one parameter name.
    pub fn param_value(&self, name: &str) -> Result<Tensor> {
        let spec = self
            .arch
            .param_specs()
            .into_iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        match &self.variables[name] {
            ParamExpansion::Whole(v) => Ok(v.value()),
            ParamExpansion::Rows(rows) => {
                let values: Vec<Tensor> = rows.iter().map(|v| v.value()).collect();
                Tensor::stack_rows(&values, &spec.shape)
            }
        }
    }

    /// Realize the expansion as a runnable model.
    pub fn materialize(&self) -> Result<Model> {
        let params: ParamMap = self
            .variables
            .keys()
            .map(|name| Ok((name.clone(), self.param_value(name)?)))
            .collect::<Result<_>>()?;
        let mut meta = self.metadata.clone();
        if !self.target_concept.is_empty() {
            meta.notes
                .insert("target_concept".into(), self.target_concept.clone());
        }
        Model::from_parts(self.arch.clone(), params, meta)
    }

    /// Deterministic 64-bit hash over feature origins and alpha bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for (name, pe) in &self.variables {
            h.bytes(name.as_bytes());
            match pe {
                ParamExpansion::Whole(v) => {
                    h.word(u64::MAX);
                    hash_var(&mut h, v);
                }
                ParamExpansion::Rows(rows) => {
                    h.word(rows.len() as u64);
                    for v in rows {
                        hash_var(&mut h, v);
                    }
                }
            }
        }
        h.finish()
    }
}

fn check_param_expansion(pe: &ParamExpansion, shape: &[usize], kind: AlphaKind) -> Result<()> {
    let check = |v: &ExpandedVariable, expected: &[usize]| {
        if v.shape() != expected {
            return Err(Error::Shape {
                op: "expanded variable",
                lhs: v.shape().to_vec(),
                rhs: expected.to_vec(),
            });
        }
        if v.kind() != kind {
            return Err(Error::Precondition(format!(
                "variable alpha kind {:?} but parameter needs {kind:?}",
                v.kind()
            )));
        }
        Ok(())
    };
    match pe {
        ParamExpansion::Whole(v) => check(v, shape),
        ParamExpansion::Rows(rows) => {
            if rows.len() != shape[0] {
                return Err(Error::Shape {
                    op: "row expansion",
                    lhs: vec![rows.len()],
                    rhs: shape.to_vec(),
                });
            }
            let row_shape = if shape.len() == 1 { vec![1] } else { shape[1..].to_vec() };
            rows.iter().try_for_each(|v| check(v, &row_shape))
        }
    }
}

fn hash_var(h: &mut Fnv64, v: &ExpandedVariable) {
    h.word(v.terms.len() as u64);
    for t in &v.terms {
        h.bytes(t.origin.model.as_bytes());
        h.bytes(t.origin.param.as_bytes());
        h.word(t.origin.row.map_or(u64::MAX, |r| r as u64));
        h.word(match t.alpha {
            Alpha::Scalar(_) => 1,
            Alpha::Tensor(_) => 2,
        });
        for v in t.alpha.values() {
            h.word32(v.to_bits());
        }
    }
}

/// FNV-1a over 32-bit words with a splitmix finalizer.
struct Fnv64(u64);

impl Fnv64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    #[inline]
    fn word32(&mut self, w: u32) {
        self.0 = (self.0 ^ w as u64).wrapping_mul(Self::PRIME);
    }

    fn word(&mut self, w: u64) {
        self.word32(w as u32);
        self.word32((w >> 32) as u32);
    }

    fn bytes(&mut self, b: &[u8]) {
        self.word(b.len() as u64);
        for &x in b {
            self.word32(x as u32);
        }
    }

    fn finish(&self) -> u64 {
        mix64(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin(i: usize) -> FeatureOrigin {
        FeatureOrigin::new("m", "p", Some(i))
    }

    fn term(f: &[f32], a: Alpha, i: usize) -> Term {
        Term {
            feature: Arc::new(Tensor::from_slice(f)),
            alpha: a,
            origin: origin(i),
        }
    }

    #[test]
    fn value_examples() {
        let v = ExpandedVariable::single(Arc::new(Tensor::from_slice(&[1.5, -2.0])), origin(0), AlphaKind::Tensor);
        assert_eq!(v.value().data(), &[1.5, -2.0]);

        let half = || Alpha::Tensor(Arc::new(Tensor::full(&[2], 0.5)));
        let v = ExpandedVariable::new(
            AlphaKind::Tensor,
            vec![term(&[1.0, 2.0], half(), 0), term(&[3.0, 4.0], half(), 1)],
        )
        .unwrap();
        assert_eq!(v.value().data(), &[2.0, 3.0]);

        let mask = |a: f32, b: f32| Alpha::Tensor(Arc::new(Tensor::from_slice(&[a, b])));
        let v = ExpandedVariable::new(
            AlphaKind::Tensor,
            vec![term(&[1.0, 2.0], mask(1.0, 0.0), 0), term(&[10.0, 20.0], mask(0.0, 1.0), 1)],
        )
        .unwrap();
        assert_eq!(v.value().data(), &[1.0, 20.0]);
    }

    #[test]
    fn variable_rejects_bad_terms() {
        assert!(ExpandedVariable::new(AlphaKind::Scalar, vec![]).is_err());
        let bad_alpha = term(&[1.0, 2.0], Alpha::Tensor(Arc::new(Tensor::zeros(&[3]))), 0);
        assert!(ExpandedVariable::new(AlphaKind::Tensor, vec![bad_alpha]).is_err());
        let wrong_kind = term(&[1.0, 2.0], Alpha::Scalar(1.0), 0);
        assert!(ExpandedVariable::new(AlphaKind::Tensor, vec![wrong_kind]).is_err());
        let nan = term(&[1.0], Alpha::Scalar(f32::NAN), 0);
        assert!(ExpandedVariable::new(AlphaKind::Scalar, vec![nan]).is_err());
        let mismatched = vec![term(&[1.0], Alpha::Scalar(1.0), 0), term(&[1.0, 2.0], Alpha::Scalar(1.0), 1)];
        assert!(ExpandedVariable::new(AlphaKind::Scalar, mismatched).is_err());
    }

    #[test]
    fn alpha_range_validation() {
        assert!(AlphaRange::new(1.0, -1.0).is_err());
        assert!(AlphaRange::new(0.0, 0.0).is_err());
        let r = AlphaRange::default();
        assert!(r.contains(-1.0) && r.contains(1.0) && !r.contains(1.01));
    }

    #[test]
    fn shared_alpha_is_copied_on_write() {
        let mut v = ExpandedVariable::single(Arc::new(Tensor::from_slice(&[1.0, 2.0])), origin(0), AlphaKind::Tensor);
        let snapshot = v.clone();
        v.alpha_values_mut(0)[1] = 0.25;
        assert_eq!(snapshot.value().data(), &[1.0, 2.0]);
        assert_eq!(v.value().data(), &[1.0, 0.5]);
    }
}
