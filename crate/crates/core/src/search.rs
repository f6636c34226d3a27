//! Greedy stochastic search over conceptual expansions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{Alpha, AlphaRange, ConceptualExpansion, FeatureOrigin, Term, VarKey};
use crate::metrics::Heuristic;
use crate::model::Model;
use crate::rng::{rng, sub_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Consecutive non-improving neighbors before a run stops.
    pub patience: usize,
    pub restarts: usize,
    pub seed: u64,
    pub alpha_range: AlphaRange,
    /// Weights of alter-one, replace-alpha, swap-feature, add-feature.
    pub mutation_probabilities: [f64; 4],
    /// Hard cap on neighbors scored per run.
    pub max_neighbors: Option<usize>,
    /// Redraws of an already visited candidate before accepting a revisit.
    pub max_redraws: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            patience: 10,
            restarts: 10,
            seed: 0,
            alpha_range: AlphaRange::default(),
            mutation_probabilities: [0.25; 4],
            max_neighbors: None,
            max_redraws: 16,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.mutation_probabilities.iter().sum();
        if self.patience == 0 || self.restarts == 0 {
            return Err(Error::Precondition("patience and restarts must be at least 1".into()));
        }
        if self.mutation_probabilities.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "mutation probabilities {:?} must be non-negative and sum to 1",
                self.mutation_probabilities
            )));
        }
        AlphaRange::new(self.alpha_range.lo, self.alpha_range.hi)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    /// Resample one alpha entry.
    AlterAlpha,
    /// Resample every entry of one alpha.
    ReplaceAlpha,
    /// Swap one feature for an alternative from the pool.
    SwapFeature,
    /// Append a pool feature with a fresh random alpha.
    AddFeature,
}

impl MutationKind {
    pub const ALL: [MutationKind; 4] = [
        MutationKind::AlterAlpha,
        MutationKind::ReplaceAlpha,
        MutationKind::SwapFeature,
        MutationKind::AddFeature,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MutationKind::AlterAlpha => "alter_alpha",
            MutationKind::ReplaceAlpha => "replace_alpha",
            MutationKind::SwapFeature => "swap_feature",
            MutationKind::AddFeature => "add_feature",
        }
    }

    fn needs_pool(self) -> bool {
        matches!(self, MutationKind::SwapFeature | MutationKind::AddFeature)
    }
}

#[derive(Clone, Debug)]
pub struct PoolEntry {
    pub feature: Arc<Tensor>,
    pub origin: FeatureOrigin,
}

/// Alternative features, grouped by the parameter name they can stand in for.
#[derive(Clone, Debug, Default)]
pub struct FeaturePool {
    by_param: BTreeMap<String, Vec<PoolEntry>>,
}

impl FeaturePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: &str, feature: Arc<Tensor>, origin: FeatureOrigin) {
        let list = self.by_param.entry(param.into()).or_default();
        if !list.iter().any(|e| e.origin == origin) {
            list.push(PoolEntry { feature, origin });
        }
    }

    /// Every parameter of every model, plus the individual class rows of
    /// each model's classification head.
    pub fn from_models<'a>(models: impl IntoIterator<Item = &'a Model>) -> Result<Self> {
        let mut pool = Self::new();
        for (k, m) in models.into_iter().enumerate() {
            pool.add_model(m, k, true)?;
        }
        Ok(pool)
    }

    /// Every parameter of every model as a whole tensor, no head rows.
    pub fn from_models_whole<'a>(models: impl IntoIterator<Item = &'a Model>) -> Result<Self> {
        let mut pool = Self::new();
        for (k, m) in models.into_iter().enumerate() {
            pool.add_model(m, k, false)?;
        }
        Ok(pool)
    }

    /// Add `m`'s parameters; `index` names it when its id is empty.
    pub fn add_model(&mut self, m: &Model, index: usize, head_rows: bool) -> Result<()> {
        let id = if m.metadata.id.is_empty() {
            format!("source{index}")
        } else {
            m.metadata.id.clone()
        };
        let head = head_rows
            .then(|| m.architecture().final_dense_name().map(String::from))
            .flatten();
        for (name, t) in m.params() {
            self.insert(name, Arc::new(t.clone()), FeatureOrigin::new(&id, name, None));
            let is_head = head
                .as_deref()
                .is_some_and(|h| name == &format!("{h}.weight") || name == &format!("{h}.bias"));
            if is_head {
                for r in 0..t.shape()[0] {
                    self.insert(name, Arc::new(t.row(r)?), FeatureOrigin::new(&id, name, Some(r)));
                }
            }
        }
        Ok(())
    }

    /// Head rows only, for pools restricted to class rows.
    pub fn from_head_rows(m: &Model) -> Result<Self> {
        let mut pool = Self::new();
        let id = m.metadata.id.clone();
        let head = m
            .architecture()
            .final_dense_name()
            .ok_or_else(|| Error::Precondition("model has no dense head".into()))?;
        for suffix in ["weight", "bias"] {
            let name = format!("{head}.{suffix}");
            let t = m.param(&name)?;
            for r in 0..t.shape()[0] {
                pool.insert(&name, Arc::new(t.row(r)?), FeatureOrigin::new(&id, &name, Some(r)));
            }
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.by_param.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries usable in variable `key` of `ce`: same parameter, same shape,
    /// not already one of its features.
    pub fn candidates<'a>(&'a self, ce: &ConceptualExpansion, key: &VarKey) -> Vec<&'a PoolEntry> {
        let Some(var) = ce.variable(key) else {
            return Vec::new();
        };
        let Some(list) = self.by_param.get(&key.param) else {
            return Vec::new();
        };
        list.iter()
            .filter(|e| e.feature.shape() == var.shape() && !var.origins().any(|o| *o == e.origin))
            .collect()
    }
}

/// A candidate produced by [`get_neighbor`].
#[derive(Clone, Debug)]
pub struct Neighbor {
    pub expansion: ConceptualExpansion,
    pub mutation: MutationKind,
    pub key: VarKey,
    pub fingerprint: u64,
    /// All redraws landed on visited candidates.
    pub revisit: bool,
}

fn draw_kind(weights: &[f64; 4], allowed: &[bool; 4], r: &mut Rng) -> Result<MutationKind> {
    let total: f64 = (0..4).filter(|&i| allowed[i]).map(|i| weights[i]).sum();
    if !(total > 0.0) {
        return Err(Error::Precondition(
            "no mutation type with positive probability is applicable".into(),
        ));
    }
    let mut u = r.random::<f64>() * total;
    let mut last = None;
    for i in 0..4 {
        if !allowed[i] || weights[i] <= 0.0 {
            continue;
        }
        last = Some(i);
        if u < weights[i] {
            return Ok(MutationKind::ALL[i]);
        }
        u -= weights[i];
    }
    Ok(MutationKind::ALL[last.expect("positive total")])
}

fn mutate(
    current: &ConceptualExpansion,
    keys: &[VarKey],
    pool_keys: &[VarKey],
    pool: &FeaturePool,
    cfg: &SearchConfig,
    r: &mut Rng,
) -> Result<(ConceptualExpansion, MutationKind, VarKey)> {
    let allowed = [true, true, !pool_keys.is_empty(), !pool_keys.is_empty()];
    let kind = draw_kind(&cfg.mutation_probabilities, &allowed, r)?;
    let targets = if kind.needs_pool() { pool_keys } else { keys };
    let key = targets[r.random_range(0..targets.len())].clone();
    let mut next = current.clone();
    let var = next.variable_mut(&key).expect("key from expansion");
    let range = cfg.alpha_range;
    match kind {
        MutationKind::AlterAlpha => {
            let t = r.random_range(0..var.len());
            let values = var.alpha_values_mut(t);
            let i = r.random_range(0..values.len());
            values[i] = range.sample(r);
        }
        MutationKind::ReplaceAlpha => {
            let t = r.random_range(0..var.len());
            for v in var.alpha_values_mut(t) {
                *v = range.sample(r);
            }
        }
        MutationKind::SwapFeature | MutationKind::AddFeature => {
            let cands = pool.candidates(current, &key);
            let pick = cands[r.random_range(0..cands.len())];
            if kind == MutationKind::SwapFeature {
                let t = r.random_range(0..var.len());
                let alpha = var.terms()[t].alpha.clone();
                var.replace(
                    t,
                    Term {
                        feature: pick.feature.clone(),
                        alpha,
                        origin: pick.origin.clone(),
                    },
                )?;
            } else {
                let mut alpha = Alpha::filled(var.kind(), var.shape(), 0.0);
                for v in alpha.values_mut() {
                    *v = range.sample(r);
                }
                var.push(Term {
                    feature: pick.feature.clone(),
                    alpha,
                    origin: pick.origin.clone(),
                })?;
            }
        }
    }
    Ok((next, kind, key))
}

fn pool_keys(ce: &ConceptualExpansion, keys: &[VarKey], pool: &FeaturePool) -> Vec<VarKey> {
    keys.iter()
        .filter(|k| !pool.candidates(ce, k).is_empty())
        .cloned()
        .collect()
}

/// One mutation of `current`, redrawn while it lands in `visited`.
pub fn get_neighbor(
    current: &ConceptualExpansion,
    visited: &BTreeSet<u64>,
    pool: &FeaturePool,
    cfg: &SearchConfig,
    r: &mut Rng,
) -> Result<Neighbor> {
    let keys = current.keys();
    let pk = pool_keys(current, &keys, pool);
    neighbor_with_keys(current, &keys, &pk, visited, pool, cfg, r)
}

fn neighbor_with_keys(
    current: &ConceptualExpansion,
    keys: &[VarKey],
    pool_keys: &[VarKey],
    visited: &BTreeSet<u64>,
    pool: &FeaturePool,
    cfg: &SearchConfig,
    r: &mut Rng,
) -> Result<Neighbor> {
    let mut attempt = 0;
    loop {
        let (expansion, mutation, key) = mutate(current, keys, pool_keys, pool, cfg, r)?;
        let fingerprint = expansion.fingerprint();
        let seen = visited.contains(&fingerprint);
        if !seen || attempt >= cfg.max_redraws {
            return Ok(Neighbor {
                expansion,
                mutation,
                key,
                fingerprint,
                revisit: seen,
            });
        }
        attempt += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub mutation: MutationKind,
    pub candidate_score: f64,
    pub best_score: f64,
    pub revisit: bool,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: ConceptualExpansion,
    pub best_score: f64,
    pub initial_score: f64,
    pub trace: Vec<TraceRow>,
    /// Distinct fingerprints seen, the initial expansion included.
    pub visited: usize,
    pub seed: u64,
    /// Best score of each restart, in run order.
    pub run_scores: Vec<f64>,
    pub best_run: usize,
}

impl SearchResult {
    pub fn evaluations(&self) -> usize {
        self.trace.len()
    }
}

fn finite(score: f64, step: usize, fingerprint: u64) -> Result<f64> {
    if score.is_finite() {
        Ok(score)
    } else {
        Err(Error::NonFiniteScore {
            step,
            fingerprint,
            score,
        })
    }
}

/// Hill-climb from `initial` (already combined with its mapping).
///
/// Each step scores one neighbor of the best expansion so far; only a
/// strictly higher score replaces it. The run ends after `cfg.patience`
/// consecutive non-improving neighbors or `cfg.max_neighbors` in total.
pub fn conceptual_expansion_search<H: Heuristic + ?Sized>(
    initial: ConceptualExpansion,
    pool: &FeaturePool,
    heuristic: &H,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<SearchResult> {
    cfg.validate()?;
    let mut r = rng(seed);
    let keys = initial.keys();
    let mut pk = pool_keys(&initial, &keys, pool);
    let mut visited = BTreeSet::new();
    let fp = initial.fingerprint();
    visited.insert(fp);
    let initial_score = finite(heuristic.score(&initial)?, 0, fp)?;
    let mut best = initial;
    let mut best_score = initial_score;
    let mut improving = 0;
    let mut trace = Vec::new();
    while improving < cfg.patience && cfg.max_neighbors.is_none_or(|m| trace.len() < m) {
        let step = trace.len() + 1;
        let n = neighbor_with_keys(&best, &keys, &pk, &visited, pool, cfg, &mut r)?;
        visited.insert(n.fingerprint);
        let score = finite(heuristic.score(&n.expansion)?, step, n.fingerprint)?;
        if score > best_score {
            best_score = score;
            best = n.expansion;
            improving = 0;
            if n.mutation.needs_pool() {
                pk = pool_keys(&best, &keys, pool);
            }
        } else {
            improving += 1;
        }
        trace.push(TraceRow {
            step,
            mutation: n.mutation,
            candidate_score: score,
            best_score,
            revisit: n.revisit,
        });
    }
    Ok(SearchResult {
        best,
        best_score,
        initial_score,
        trace,
        visited: visited.len(),
        seed,
        run_scores: alloc::vec![best_score],
        best_run: 0,
    })
}

/// Seed of restart `run`.
pub fn restart_seed(seed: u64, run: usize) -> u64 {
    sub_seed(seed, run as u64)
}

/// Pick the run with the highest best score; ties go to the lowest index.
pub fn select_best(runs: Vec<SearchResult>) -> Result<SearchResult> {
    let scores: Vec<f64> = runs.iter().map(|r| r.best_score).collect();
    let mut best_run = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best_run] {
            best_run = i;
        }
    }
    let mut chosen = runs
        .into_iter()
        .nth(best_run)
        .ok_or_else(|| Error::Precondition("no search runs".into()))?;
    chosen.run_scores = scores;
    chosen.best_run = best_run;
    Ok(chosen)
}

/// `cfg.restarts` independent searches from `initial`, best one returned.
pub fn run_restarts<H: Heuristic + ?Sized>(
    initial: &ConceptualExpansion,
    pool: &FeaturePool,
    heuristic: &H,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    let runs = (0..cfg.restarts)
        .map(|i| conceptual_expansion_search(initial.clone(), pool, heuristic, cfg, restart_seed(cfg.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    select_best(runs)
}
