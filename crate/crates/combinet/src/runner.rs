//! Experiment execution. Every run directory holds `config.json`, `models/`,
//! `expansions/`, `traces/`, `samples/`, `report.json` and `report.md`.
//!
//! Component seeds are derived from the master seed by name (`named_seed`);
//! seeds written inside nested train/search configs are replaced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use combinet_core::data::{make_slice, slice_grid, LabeledDataset, Slice};
use combinet_core::gan::{
    combigan, driver_name, from_tanh_range, generate, to_tanh_range, train_gan_from_scratch, GanPair,
};
use combinet_core::mapping::{apply_mapping_new_class, apply_mapping_new_classes, build_classifier_mapping};
use combinet_core::metrics::{
    accuracy, class_distribution, inception_style_score, kl_divergence, per_class_accuracy, CombinedAccuracy, Heuristic,
    NewClassAccuracy,
};
use combinet_core::rng::{named_seed, sub_seed};
use combinet_core::search::{conceptual_expansion_search, restart_seed, select_best, FeaturePool, SearchConfig, SearchResult};
use combinet_core::trainer::{
    dense_param_names, train_from_scratch, transfer_retrain, zero_shot_classifier, TrainConfig,
};
use combinet_core::{ConceptualExpansion, Model, Tensor};
use rayon::prelude::*;

use crate::artifacts::{load_model, save_expansion, save_model};
use crate::cnta::{write_archive, Entry, EntryData};
use crate::config::{
    BaselineConfig, BaselineMethod, CombiganRunConfig, EvaluateConfig, ExpandClassConfig, ExpandMultiConfig,
    Experiment, ExperimentConfig, GanTrainConfig, HeuristicChoice, SliceGrid, TrainBaseConfig,
};
use crate::error::{io_err, Error, Result};
use crate::export::{
    top_k_by_confidence, write_contact_sheet, write_curve_csv, write_gan_curve_csv, write_json, write_trace_csv,
    SearchSummary,
};
use crate::report::{RunRecord, RunReport, INCEPTION, KL, NOVEL_ACCURACY, ORIGINAL_ACCURACY};

pub const SUBDIRS: [&str; 4] = ["models", "expansions", "traces", "samples"];

/// The run directory being written.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in SUBDIRS {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn model(&self, m: &Model, name: &str, out: &mut BTreeMap<String, String>, key: &str) -> Result<()> {
        let rel = format!("models/{name}.json");
        save_model(m, &self.path(&rel))?;
        out.insert(key.into(), rel.clone());
        out.insert(format!("{key}_archive"), format!("models/{name}.cnta"));
        Ok(())
    }

    fn expansion(&self, ce: &ConceptualExpansion, name: &str, out: &mut BTreeMap<String, String>, key: &str) -> Result<()> {
        let rel = format!("expansions/{name}.json");
        save_expansion(ce, &self.path(&rel))?;
        out.insert(key.into(), rel);
        out.insert(format!("{key}_archive"), format!("expansions/{name}.cnta"));
        Ok(())
    }

    fn search_traces(&self, runs: &[SearchResult], name: &str, out: &mut BTreeMap<String, String>) -> Result<()> {
        for (i, r) in runs.iter().enumerate() {
            let rel = format!("traces/{name}-r{i}.csv");
            write_trace_csv(&self.path(&rel), &r.trace)?;
            out.insert(format!("trace_r{i}"), rel);
        }
        Ok(())
    }

    fn summary(&self, res: &SearchResult, restarts: usize, wall: f64, name: &str, out: &mut BTreeMap<String, String>) -> Result<()> {
        let rel = format!("traces/{name}.summary.json");
        write_json(&self.path(&rel), &SearchSummary::new(res, restarts, wall))?;
        out.insert("search_summary".into(), rel);
        Ok(())
    }
}

/// Run `cfg` into `out`, writing the config snapshot and both reports.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    cfg.check_inputs()?;
    let dir = RunDir::create(out)?;
    write_json(&dir.path("config.json"), cfg)?;
    let start = Instant::now();
    let work = || execute(&cfg.experiment, cfg.seed, &dir);
    let runs = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let report = RunReport::new(
        cfg.experiment.verb(),
        cfg.seed,
        serde_json::to_value(cfg)?,
        runs,
        start.elapsed().as_secs_f64(),
    );
    write_report(&report, out)?;
    Ok(report)
}

pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    let md = dir.join("report.md");
    std::fs::write(&md, report.to_markdown()).map_err(io_err(&md))
}

fn execute(e: &Experiment, seed: u64, dir: &RunDir) -> Result<Vec<RunRecord>> {
    match e {
        Experiment::TrainBase(c) => run_train_base(c, seed, dir),
        Experiment::ExpandClass(c) => run_expand_class(c, seed, dir),
        Experiment::ExpandMulti(c) => run_expand_multi(c, seed, dir),
        Experiment::Baseline(c) => run_baseline(c, seed, dir),
        Experiment::GanTrain(c) => run_gan_train(c, seed, dir),
        Experiment::Combigan(c) => run_combigan(c, seed, dir),
        Experiment::Evaluate(c) => run_evaluate(c, seed, dir),
    }
}

fn train_cfg(c: &TrainConfig, seed: u64, label: &str) -> TrainConfig {
    TrainConfig {
        seed: named_seed(seed, label),
        ..c.clone()
    }
}

fn class_labels(m: &Model) -> Vec<String> {
    let mut labels = m.metadata.class_labels.clone();
    for i in labels.len()..m.num_outputs() {
        labels.push(format!("class{i}"));
    }
    labels.truncate(m.num_outputs());
    labels
}

/// Relabel `data` into `names` by class name, keeping images whose class is listed.
fn under_names(data: &LabeledDataset, names: &[String]) -> Result<LabeledDataset> {
    let mut labels = Vec::with_capacity(data.len());
    for &l in &data.labels {
        let name = &data.class_names[l];
        let i = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("class {name:?} is not known to the model")))?;
        labels.push(i);
    }
    Ok(LabeledDataset::new(data.images.clone(), labels, names.to_vec(), data.provenance.clone())?)
}

/// Original-class data in the base model's label space; positional when names differ.
fn original_space(data: &LabeledDataset, names: &[String]) -> Result<LabeledDataset> {
    match under_names(data, names) {
        Ok(d) => Ok(d),
        Err(_) if data.num_classes() <= names.len() => Ok(LabeledDataset::new(
            data.images.clone(),
            data.labels.clone(),
            names.to_vec(),
            data.provenance.clone(),
        )?),
        Err(e) => Err(e),
    }
}

fn run_train_base(c: &TrainBaseConfig, seed: u64, dir: &RunDir) -> Result<Vec<RunRecord>> {
    let t = Instant::now();
    let train = c.train.load(seed, "train")?;
    let first = train.images.first().ok_or_else(|| Error::Config("empty training set".into()))?;
    let arch = c.model.build(first.shape(), train.num_classes())?;
    let cfg = train_cfg(&c.training, seed, "train");
    let (mut model, curve) = train_from_scratch(&arch, &train, &cfg)?;
    model.metadata.id = c.id.clone();
    model.metadata.class_labels = train.class_names.clone();
    model.metadata.seed = Some(cfg.seed);
    model.metadata.dataset_id = Some(train.provenance.clone());
    model.metadata.epochs = Some(curve.epochs.len());
    let mut artifacts = BTreeMap::new();
    dir.model(&model, &c.id, &mut artifacts, "model")?;
    let rel = format!("traces/{}-curve.csv", c.id);
    write_curve_csv(&dir.path(&rel), &curve)?;
    artifacts.insert("curve".into(), rel);
    let mut metrics = BTreeMap::from([("train_accuracy".to_string(), accuracy(&model, &train)?)]);
    if let Some(test) = &c.test {
        let test = original_space(&test.load(seed, "test")?, &train.class_names)?;
        metrics.insert("test_accuracy".into(), accuracy(&model, &test)?);
    }
    Ok(vec![RunRecord {
        id: c.id.clone(),
        method: "train".into(),
        cell: "all".into(),
        metrics,
        artifacts,
        wall_seconds: t.elapsed().as_secs_f64(),
        ..Default::default()
    }])
}

/// Restart every search independently so each run's trace can be kept.
fn search_restarts<H: Heuristic + ?Sized>(
    initial: &ConceptualExpansion,
    pool: &FeaturePool,
    h: &H,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<(SearchResult, Vec<SearchResult>)> {
    cfg.validate()?;
    let runs = (0..cfg.restarts)
        .map(|i| conceptual_expansion_search(initial.clone(), pool, h, cfg, restart_seed(seed, i)))
        .collect::<combinet_core::Result<Vec<_>>>()?;
    let best = select_best(runs.clone())?;
    Ok((best, runs))
}

/// One unit of a slice grid: the novel samples and where they came from.
struct Task {
    id: String,
    cell: String,
    slice: Option<Slice>,
    novel: LabeledDataset,
}

fn tasks(novel: &LabeledDataset, class: usize, grid: Option<&SliceGrid>, seed: u64, prefix: &str) -> Result<Vec<Task>> {
    match grid {
        None => Ok(vec![Task {
            id: format!("{prefix}-all"),
            cell: novel.len().to_string(),
            slice: None,
            novel: novel.clone(),
        }]),
        Some(g) => slice_grid(class, &g.sizes, g.count, named_seed(seed, "slices"))
            .into_iter()
            .map(|spec| {
                let s = make_slice(novel, spec)?;
                Ok(Task {
                    id: format!("{prefix}-n{}-s{}", spec.size, spec.index),
                    cell: spec.size.to_string(),
                    novel: novel.subset(&s.indices),
                    slice: Some(s),
                })
            })
            .collect(),
    }
}

struct ExpansionInputs {
    base: Model,
    names: Vec<String>,
    novel_train: LabeledDataset,
    novel_class: usize,
    novel_test: LabeledDataset,
    original_train: LabeledDataset,
    original_test: LabeledDataset,
}

fn expansion_inputs(
    base: Model,
    novel_train: &crate::config::NovelData,
    novel_test: &crate::config::NovelData,
    original_train: &crate::config::DatasetRef,
    original_test: &crate::config::DatasetRef,
    seed: u64,
) -> Result<ExpansionInputs> {
    let (nt, name) = novel_train.load(seed, "novel_train")?;
    let (ne, _) = novel_test.load(seed, "novel_test")?;
    let mut names = class_labels(&base);
    let n = names.len();
    let original_train = original_space(&original_train.load(seed, "original_train")?, &names)?;
    let original_test = original_space(&original_test.load(seed, "original_test")?, &names)?;
    names.push(name);
    Ok(ExpansionInputs {
        novel_class: novel_train.class.unwrap_or(0),
        novel_test: ne.relabeled(n, names.clone())?,
        novel_train: nt,
        names,
        base,
        original_train,
        original_test,
    })
}

fn base_record(base: &Model, original_test: &LabeledDataset) -> Result<RunRecord> {
    Ok(RunRecord {
        id: "base".into(),
        method: "base".into(),
        cell: "all".into(),
        metrics: BTreeMap::from([(ORIGINAL_ACCURACY.to_string(), accuracy(base, original_test)?)]),
        ..Default::default()
    })
}

fn run_expand_class(c: &ExpandClassConfig, seed: u64, dir: &RunDir) -> Result<Vec<RunRecord>> {
    let mut base = load_model(&c.base)?;
    if base.metadata.id.is_empty() {
        base.metadata.id = "base".into();
    }
    let inp = expansion_inputs(base, &c.novel_train, &c.novel_test, &c.original_train, &c.original_test, seed)?;
    let n = inp.names.len() - 1;
    let label = inp.names[n].clone();
    let original_sub = inp.original_train.random_subset(
        c.original_subsample.min(inp.original_train.len()),
        named_seed(seed, "original_subsample"),
    );
    let pool = FeaturePool::from_models([&inp.base])?;
    let units = tasks(&inp.novel_train, inp.novel_class, c.slices.as_ref(), seed, "combinet")?;
    let search_seed = named_seed(seed, "search");
    let records = units
        .par_iter()
        .enumerate()
        .map(|(i, task)| -> Result<RunRecord> {
            let t = Instant::now();
            let novel = task.novel.relabeled(n, inp.names.clone())?;
            let mapping = build_classifier_mapping(&inp.base, &novel.images)?;
            let initial = apply_mapping_new_class(&inp.base, &mapping, &label)?;
            let s = sub_seed(search_seed, i as u64);
            let (best, runs) = match c.heuristic {
                HeuristicChoice::Combined => {
                    let h = CombinedAccuracy::new(&initial, &novel, &original_sub, c.lambda)?;
                    search_restarts(&initial, &pool, &h, &c.search, s)?
                }
                HeuristicChoice::NewClass => {
                    let h = NewClassAccuracy::new(&initial, &novel)?;
                    search_restarts(&initial, &pool, &h, &c.search, s)?
                }
            };
            let mut model = best.best.materialize()?;
            model.metadata.id = task.id.clone();
            let mut artifacts = BTreeMap::new();
            dir.expansion(&best.best, &task.id, &mut artifacts, "expansion")?;
            dir.model(&model, &task.id, &mut artifacts, "model")?;
            dir.search_traces(&runs, &task.id, &mut artifacts)?;
            let wall = t.elapsed().as_secs_f64();
            dir.summary(&best, c.search.restarts, wall, &task.id, &mut artifacts)?;
            Ok(RunRecord {
                id: task.id.clone(),
                method: "combinet".into(),
                cell: task.cell.clone(),
                slice: task.slice.clone(),
                metrics: BTreeMap::from([
                    (NOVEL_ACCURACY.to_string(), accuracy(&model, &inp.novel_test)?),
                    (ORIGINAL_ACCURACY.to_string(), accuracy(&model, &inp.original_test)?),
                ]),
                mappings: vec![mapping],
                artifacts,
                wall_seconds: wall,
                ..Default::default()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![base_record(&inp.base, &inp.original_test)?];
    out.extend(records);
    Ok(out)
}

fn run_expand_multi(c: &ExpandMultiConfig, seed: u64, dir: &RunDir) -> Result<Vec<RunRecord>> {
    if c.novel_train.is_empty() || c.novel_train.len() != c.novel_test.len() {
        return Err(Error::Config("novel_train and novel_test must list the same nonzero number of classes".into()));
    }
    let t = Instant::now();
    let mut base = load_model(&c.base)?;
    if base.metadata.id.is_empty() {
        base.metadata.id = "base".into();
    }
    let mut names = class_labels(&base);
    let n = names.len();
    let original_train = original_space(&c.original_train.load(seed, "original_train")?, &names)?;
    let original_test = original_space(&c.original_test.load(seed, "original_test")?, &names)?;
    let mut trains = Vec::new();
    let mut tests = Vec::new();
    for (k, (tr, te)) in c.novel_train.iter().zip(&c.novel_test).enumerate() {
        let (d, name) = tr.load(seed, &format!("novel_train{k}"))?;
        let (e, _) = te.load(seed, &format!("novel_test{k}"))?;
        names.push(name);
        trains.push(d);
        tests.push(e);
    }
    let mut mappings = Vec::new();
    let mut novel_all: Option<LabeledDataset> = None;
    let mut test_all: Option<LabeledDataset> = None;
    for (k, (d, e)) in trains.iter().zip(&tests).enumerate() {
        mappings.push((build_classifier_mapping(&base, &d.images)?, names[n + k].clone()));
        let d = d.relabeled(n + k, names.clone())?;
        let e = e.relabeled(n + k, names.clone())?;
        novel_all = Some(match novel_all {
            Some(acc) => acc.merged(&d),
            None => d,
        });
        test_all = Some(match test_all {
            Some(acc) => acc.merged(&e),
            None => e,
        });
    }
    let novel_all = novel_all.expect("nonempty");
    let novel_test = test_all.expect("nonempty");
    let initial = apply_mapping_new_classes(&base, &mappings)?;
    let original_sub =
        original_train.random_subset(c.original_subsample.min(original_train.len()), named_seed(seed, "original_subsample"));
    let h = CombinedAccuracy::new(&initial, &novel_all, &original_sub, c.lambda)?;
    let pool = FeaturePool::from_models([&base])?;
    let (best, runs) = search_restarts(&initial, &pool, &h, &c.search, named_seed(seed, "search"))?;
    let mut model = best.best.materialize()?;
    let id = "combinet-multi";
    model.metadata.id = id.into();
    model.metadata.class_labels = names.clone();
    let mut artifacts = BTreeMap::new();
    dir.expansion(&best.best, id, &mut artifacts, "expansion")?;
    dir.model(&model, id, &mut artifacts, "model")?;
    dir.search_traces(&runs, id, &mut artifacts)?;
    let wall = t.elapsed().as_secs_f64();
    dir.summary(&best, c.search.restarts, wall, id, &mut artifacts)?;
    let everything = under_names(&original_test, &names)?.merged(&novel_test);
    let per_class = per_class_accuracy(&model, &everything, n + trains.len())?;
    let known: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_acc = known.iter().sum::<f64>() / known.len().max(1) as f64;
    Ok(vec![
        base_record(&base, &original_test)?,
        RunRecord {
            id: id.into(),
            method: "combinet".into(),
            cell: format!("+{}", trains.len()),
            metrics: BTreeMap::from([
                (NOVEL_ACCURACY.to_string(), accuracy(&model, &novel_test)?),
                (ORIGINAL_ACCURACY.to_string(), accuracy(&model, &original_test)?),
                ("macro_accuracy".to_string(), macro_acc),
            ]),
            per_class_accuracy: per_class,
            mappings: mappings.into_iter().map(|(m, _)| m).collect(),
            artifacts,
            wall_seconds: wall,
            ..Default::default()
        },
    ])
}

/// FNV-1a over the bit patterns of the named parameters.
pub fn param_checksum(m: &Model, names: &[String]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for name in names {
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
        if let Ok(t) = m.param(name) {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
    }
    h
}

fn run_baseline(c: &BaselineConfig, seed: u64, dir: &RunDir) -> Result<Vec<RunRecord>> {
    let base = match &c.base {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let base_names = match &base {
        Some(b) => class_labels(b),
        None => c.original_train.load(seed, "original_train")?.class_names,
    };
    let (nt, name) = c.novel_train.load(seed, "novel_train")?;
    let (ne, _) = c.novel_test.load(seed, "novel_test")?;
    let n = base_names.len();
    let original_train = original_space(&c.original_train.load(seed, "original_train")?, &base_names)?;
    let original_test = original_space(&c.original_test.load(seed, "original_test")?, &base_names)?;
    let mut names = base_names.clone();
    names.push(name);
    let novel_test = ne.relabeled(n, names.clone())?;
    let method = c.method.name();
    let units = tasks(&nt, c.novel_train.class.unwrap_or(0), c.slices.as_ref(), seed, method)?;
    let need_base = || {
        base.as_ref()
            .ok_or_else(|| Error::Config(format!("the {method} baseline needs a base model")))
    };
    let records = units
        .par_iter()
        .enumerate()
        .map(|(i, task)| -> Result<RunRecord> {
            let t = Instant::now();
            let novel = task.novel.relabeled(n, names.clone())?;
            let merged = under_names(&original_train, &names)?.merged(&novel);
            let cfg = TrainConfig {
                seed: sub_seed(named_seed(seed, "train"), i as u64),
                ..c.training.clone()
            };
            let mut artifacts = BTreeMap::new();
            let mut notes = BTreeMap::new();
            let metrics = match c.method {
                BaselineMethod::Standard | BaselineMethod::Transfer => {
                    let (mut model, curve) = if c.method == BaselineMethod::Standard {
                        let arch = c
                            .arch
                            .as_ref()
                            .ok_or_else(|| Error::Config("the standard baseline needs an arch".into()))?;
                        let shape = novel.images[0].shape().to_vec();
                        train_from_scratch(&arch.build(&shape, n + 1)?, &merged, &cfg)?
                    } else {
                        let b = need_base()?;
                        let out = transfer_retrain(b, &merged, n + 1, &cfg)?;
                        let dense = dense_param_names(b);
                        let frozen: Vec<String> = b.params().keys().filter(|k| !dense.contains(k)).cloned().collect();
                        notes.insert("frozen_checksum_source".into(), format!("{:016x}", param_checksum(b, &frozen)));
                        notes.insert("frozen_checksum_result".into(), format!("{:016x}", param_checksum(&out.0, &frozen)));
                        out
                    };
                    model.metadata.id = task.id.clone();
                    model.metadata.class_labels = names.clone();
                    dir.model(&model, &task.id, &mut artifacts, "model")?;
                    let rel = format!("traces/{}-curve.csv", task.id);
                    write_curve_csv(&dir.path(&rel), &curve)?;
                    artifacts.insert("curve".into(), rel);
                    BTreeMap::from([
                        (NOVEL_ACCURACY.to_string(), accuracy(&model, &novel_test)?),
                        (ORIGINAL_ACCURACY.to_string(), accuracy(&model, &original_test)?),
                    ])
                }
                BaselineMethod::Zeroshot => {
                    let b = need_base()?;
                    let mut per_class: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
                    for class in 0..n {
                        let imgs = original_train.images_of(class);
                        if !imgs.is_empty() {
                            per_class.insert(class, imgs);
                        }
                    }
                    per_class.insert(n, novel.images.clone());
                    let zs = zero_shot_classifier(b, &per_class)?;
                    let centroids: Vec<Entry> = zs
                        .centroids()
                        .iter()
                        .map(|(k, t)| Entry::f32(format!("centroid{k}"), t.clone()))
                        .collect();
                    let rel = format!("models/{}-centroids.cnta", task.id);
                    write_archive(&dir.path(&rel), &centroids)?;
                    artifacts.insert("centroids".into(), rel);
                    BTreeMap::from([
                        (NOVEL_ACCURACY.to_string(), zs.accuracy(&novel_test)?),
                        (ORIGINAL_ACCURACY.to_string(), zs.accuracy(&original_test)?),
                    ])
                }
            };
            Ok(RunRecord {
                id: task.id.clone(),
                method: method.into(),
                cell: task.cell.clone(),
                slice: task.slice.clone(),
                metrics,
                artifacts,
                notes,
                wall_seconds: t.elapsed().as_secs_f64(),
                ..Default::default()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    if let Some(b) = &base {
        out.push(base_record(b, &original_test)?);
    }
    out.extend(records);
    Ok(out)
}

fn run_gan_train(c: &GanTrainConfig, seed: u64, dir: &RunDir) -> Result<Vec<RunRecord>> {
    let t = Instant::now();
    let (data, name) = c.data.load(seed, "data")?;
    let first = data.images.first().ok_or_else(|| Error::Config("empty GAN training set".into()))?;
    let (g, d) = c.gan.build(first.shape())?;
    let pair = GanPair::new(g, d)?;
    let real: Vec<Tensor> = data.images.iter().map(to_tanh_range).collect();
    let cfg = train_cfg(&c.training, seed, "gan");
    let (mut trained, curve) = train_gan_from_scratch(&pair, &real, &cfg)?;
    let id = c.id.clone().unwrap_or(name);
    for (m, role) in [(&mut trained.generator, "generator"), (&mut trained.discriminator, "discriminator")] {
        m.metadata.id = format!("{id}-{role}");
        m.metadata.seed = Some(cfg.seed);
        m.metadata.dataset_id = Some(data.provenance.clone());
        m.metadata.epochs = Some(curve.epochs.len());
    }
    let mut artifacts = BTreeMap::new();
    dir.model(&trained.generator, &format!("{id}-generator"), &mut artifacts, "generator")?;
    dir.model(&trained.discriminator, &format!("{id}-discriminator"), &mut artifacts, "discriminator")?;
    let rel = format!("traces/{id}-gan-curve.csv");
    write_gan_curve_csv(&dir.path(&rel), &curve)?;
    artifacts.insert("curve".into(), rel);
    let preview: Vec<Tensor> = generate(&trained.generator, 64, named_seed(seed, "preview"))?
        .iter()
        .map(from_tanh_range)
        .collect();
    let rel = format!("samples/{id}.png");
    write_contact_sheet(&dir.path(&rel), &preview, 8)?;
    artifacts.insert("preview".into(), rel);
    let mut metrics = BTreeMap::new();
    if let Some(last) = curve.epochs.last() {
        metrics.insert("d_real".to_string(), last.d_real as f64);
        metrics.insert("d_fake".to_string(), last.d_fake as f64);
    }
    Ok(vec![RunRecord {
        id,
        method: "gan".into(),
        cell: data.len().to_string(),
        metrics,
        artifacts,
        wall_seconds: t.elapsed().as_secs_f64(),
        ..Default::default()
    }])
}

/// Images as `u8` pixels, stacked `[n, c, h, w]`.
fn samples_entry(images: &[Tensor]) -> Entry {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images.first().map(Tensor::shape).unwrap_or(&[]));
    let bytes = images
        .iter()
        .flat_map(|t| t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    Entry {
        name: "samples".into(),
        data: EntryData::U8 { shape, bytes },
    }
}

struct GeneratorMetrics {
    kl: f64,
    inception: f64,
}

fn score_generator(
    generator: &Model,
    reference: &Model,
    real: &[Tensor],
    n: usize,
    seed: u64,
) -> Result<(GeneratorMetrics, Vec<Tensor>)> {
    let images: Vec<Tensor> = generate(generator, n.max(1), seed)?.iter().map(from_tanh_range).collect();
    let p = class_distribution(reference, real)?;
    let q = class_distribution(reference, &images)?;
    Ok((
        GeneratorMetrics {
            kl: kl_divergence(&p, &q)?,
            inception: inception_style_score(reference, &images)?,
        },
        images,
    ))
}

fn write_samples(dir: &RunDir, name: &str, images: &[Tensor], reference: &Model, class: usize, k: usize, artifacts: &mut BTreeMap<String, String>) -> Result<()> {
    let rel = format!("samples/{name}.cnta");
    write_archive(&dir.path(&rel), &[samples_entry(images)])?;
    artifacts.insert("samples".into(), rel);
    if k > 0 {
        let top: Vec<Tensor> = top_k_by_confidence(reference, images, class, k)?
            .into_iter()
            .map(|i| images[i].clone())
            .collect();
        let rel = format!("samples/{name}-top{k}.png");
        write_contact_sheet(&dir.path(&rel), &top, (k as f64).sqrt().ceil() as usize)?;
        artifacts.insert("top_k".into(), rel);
    }
    Ok(())
}

fn run_combigan(c: &CombiganRunConfig, seed: u64, dir: &RunDir) -> Result<Vec<RunRecord>> {
    let t = Instant::now();
    let sources = c
        .sources
        .iter()
        .map(|s| Ok(GanPair::new(load_model(&s.generator)?, load_model(&s.discriminator)?)?))
        .collect::<Result<Vec<_>>>()?;
    let (novel, name) = c.novel.load(seed, "novel")?;
    let (real, _) = c.real.load(seed, "real")?;
    let reference = load_model(&c.reference)?;
    let novel_t: Vec<Tensor> = novel.images.iter().map(to_tanh_range).collect();
    let external = match &c.driver_discriminator {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let mut cfg = c.combigan.clone();
    cfg.search.seed = named_seed(seed, "search");
    let res = combigan(&sources, &novel_t, c.driver, external.as_ref(), &cfg, &name)?;
    let search_wall = t.elapsed().as_secs_f64();
    let generator = res.generator_model()?;
    let sample_seed = named_seed(seed, "samples");
    let p_real = class_distribution(&reference, &real.images)?;
    let target = combinet_core::metrics::argmax(&p_real.probs().iter().map(|&v| v as f32).collect::<Vec<_>>());

    let method = driver_name(c.driver);
    let mut artifacts = BTreeMap::new();
    dir.model(&generator, "combi-generator", &mut artifacts, "generator")?;
    dir.expansion(&res.generator.best, "combi-generator", &mut artifacts, "generator_expansion")?;
    dir.search_traces(std::slice::from_ref(&res.generator), "combi-generator", &mut artifacts)?;
    dir.summary(&res.generator, cfg.search.restarts, search_wall, "combi-generator", &mut artifacts)?;
    if let Some(d) = &res.discriminator {
        dir.model(&d.best.materialize()?, "combi-discriminator", &mut artifacts, "discriminator")?;
        dir.expansion(&d.best, "combi-discriminator", &mut artifacts, "discriminator_expansion")?;
        let rel = "traces/combi-discriminator.csv".to_string();
        write_trace_csv(&dir.path(&rel), &d.trace)?;
        artifacts.insert("discriminator_trace".into(), rel);
        let rel = "traces/combi-discriminator.summary.json".to_string();
        write_json(&dir.path(&rel), &SearchSummary::new(d, cfg.search.restarts, search_wall))?;
        artifacts.insert("discriminator_summary".into(), rel);
    }
    let (m, images) = score_generator(&generator, &reference, &real.images, c.samples, sample_seed)?;
    write_samples(dir, "combi-generator", &images, &reference, target, c.top_k, &mut artifacts)?;
    let mut out = vec![RunRecord {
        id: "combi-generator".into(),
        method,
        cell: novel.len().to_string(),
        metrics: BTreeMap::from([(KL.to_string(), m.kl), (INCEPTION.to_string(), m.inception)]),
        mappings: vec![res.mapping.clone()],
        artifacts,
        wall_seconds: t.elapsed().as_secs_f64(),
        ..Default::default()
    }];
    for g in &c.compare {
        let t = Instant::now();
        let model = load_model(&g.generator)?;
        let (m, images) = score_generator(&model, &reference, &real.images, c.samples, sample_seed)?;
        let mut artifacts = BTreeMap::new();
        write_samples(dir, &g.name, &images, &reference, target, c.top_k, &mut artifacts)?;
        out.push(RunRecord {
            id: g.name.clone(),
            method: g.name.clone(),
            cell: novel.len().to_string(),
            metrics: BTreeMap::from([(KL.to_string(), m.kl), (INCEPTION.to_string(), m.inception)]),
            artifacts,
            wall_seconds: t.elapsed().as_secs_f64(),
            ..Default::default()
        });
    }
    out.push(RunRecord {
        id: "real".into(),
        method: "real".into(),
        cell: novel.len().to_string(),
        metrics: BTreeMap::from([
            (KL.to_string(), 0.0),
            (INCEPTION.to_string(), inception_style_score(&reference, &real.images)?),
        ]),
        ..Default::default()
    });
    Ok(out)
}

fn run_evaluate(c: &EvaluateConfig, seed: u64, _dir: &RunDir) -> Result<Vec<RunRecord>> {
    let t = Instant::now();
    let model = load_model(&c.model)?;
    let (method, metrics, per_class) = match &c.reference {
        Some(r) => {
            let reference = load_model(r)?;
            let real = c
                .real
                .as_ref()
                .ok_or_else(|| Error::Config("generator evaluation needs real samples".into()))?
                .load(seed, "real")?
                .0;
            let (m, _) = score_generator(&model, &reference, &real.images, c.samples, named_seed(seed, "samples"))?;
            ("generator", BTreeMap::from([(KL.to_string(), m.kl), (INCEPTION.to_string(), m.inception)]), Vec::new())
        }
        None => {
            let data = c
                .data
                .as_ref()
                .ok_or_else(|| Error::Config("classifier evaluation needs data".into()))?
                .load(seed, "data")?;
            let data = original_space(&data, &class_labels(&model))?;
            (
                "classifier",
                BTreeMap::from([("accuracy".to_string(), accuracy(&model, &data)?)]),
                per_class_accuracy(&model, &data, model.num_outputs())?,
            )
        }
    };
    Ok(vec![RunRecord {
        id: model.metadata.id.clone(),
        method: method.into(),
        cell: "all".into(),
        metrics,
        per_class_accuracy: per_class,
        wall_seconds: t.elapsed().as_secs_f64(),
        ..Default::default()
    }])
}
