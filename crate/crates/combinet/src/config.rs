//! Declarative experiment configs (UTF-8 JSON).

use std::path::{Path, PathBuf};

use combinet_core::data::{synth_dataset, CifarFormat, LabeledDataset, SynthSpec};
use combinet_core::gan::{CombiGanConfig, GeneratorDriver};
use combinet_core::metrics::{DEFAULT_LAMBDA, DEFAULT_ORIGINAL_SUBSAMPLE};
use combinet_core::model::{build_cifarnet_with, build_dcgan_discriminator, build_dcgan_generator, build_dense_discriminator, build_dense_generator, build_mlp, CifarNetWidths};
use combinet_core::rng::named_seed;
use combinet_core::search::SearchConfig;
use combinet_core::trainer::TrainConfig;
use combinet_core::Model;
use serde::{Deserialize, Serialize};

use crate::artifacts::load_dataset;
use crate::cifar::load_cifar_batches;
use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    pub experiment: Experiment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    TrainBase(TrainBaseConfig),
    ExpandClass(ExpandClassConfig),
    ExpandMulti(ExpandMultiConfig),
    Baseline(BaselineConfig),
    GanTrain(GanTrainConfig),
    Combigan(CombiganRunConfig),
    Evaluate(EvaluateConfig),
}

impl Experiment {
    pub fn verb(&self) -> &'static str {
        match self {
            Experiment::TrainBase(_) => "train-base",
            Experiment::ExpandClass(_) => "expand-class",
            Experiment::ExpandMulti(_) => "expand-multi",
            Experiment::Baseline(_) => "baseline",
            Experiment::GanTrain(_) => "gan-train",
            Experiment::Combigan(_) => "combigan",
            Experiment::Evaluate(_) => "evaluate",
        }
    }
}

/// Where samples come from. Synthetic sets without a seed draw one from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetRef {
    Synth {
        spec: SynthSpec,
        #[serde(default)]
        seed: Option<u64>,
    },
    Cifar {
        paths: Vec<PathBuf>,
        format: CifarFormat,
    },
    /// A dataset manifest written by [`crate::artifacts::save_dataset`].
    Archive { path: PathBuf },
}

impl DatasetRef {
    /// `label` names the stream drawn from `master` when no explicit seed is set.
    pub fn load(&self, master: u64, label: &str) -> Result<LabeledDataset> {
        match self {
            DatasetRef::Synth { spec, seed } => Ok(synth_dataset(spec, seed.unwrap_or_else(|| named_seed(master, label)))?),
            DatasetRef::Cifar { paths, format } => load_cifar_batches(paths, *format),
            DatasetRef::Archive { path } => load_dataset(path),
        }
    }

    fn paths(&self) -> Vec<PathBuf> {
        match self {
            DatasetRef::Synth { .. } => Vec::new(),
            DatasetRef::Cifar { paths, .. } => paths.clone(),
            DatasetRef::Archive { path } => vec![path.clone()],
        }
    }
}

/// One class (or all samples) of a dataset, used as a novel concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NovelData {
    pub data: DatasetRef,
    /// Class to keep; every sample when absent.
    #[serde(default)]
    pub class: Option<usize>,
    /// Concept name; defaults to the selected class name.
    #[serde(default)]
    pub name: Option<String>,
    /// Keep at most this many samples (seeded subsample).
    #[serde(default)]
    pub limit: Option<usize>,
}

impl NovelData {
    /// Selected samples, plus the concept name.
    pub fn load(&self, master: u64, label: &str) -> Result<(LabeledDataset, String)> {
        let all = self.data.load(master, label)?;
        let chosen = match self.class {
            Some(c) => {
                if c >= all.num_classes() {
                    return Err(Error::Config(format!("class {c} not in {} classes", all.num_classes())));
                }
                all.subset(&all.indices_of(c))
            }
            None => all,
        };
        let chosen = match self.limit {
            Some(n) if n < chosen.len() => chosen.random_subset(n, named_seed(master, &format!("{label}-limit"))),
            _ => chosen,
        };
        let name = self.name.clone().unwrap_or_else(|| match self.class {
            Some(c) => chosen.class_names[c].clone(),
            None if chosen.num_classes() == 1 => chosen.class_names[0].clone(),
            None => "novel".into(),
        });
        Ok((chosen, name))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum ArchSpec {
    Cifarnet {
        #[serde(default)]
        widths: CifarNetWidths,
    },
    Mlp { hidden: Vec<usize> },
}

impl ArchSpec {
    pub fn build(&self, input_shape: &[usize], classes: usize) -> Result<Model> {
        match self {
            ArchSpec::Cifarnet { widths } => {
                let shape = <[usize; 3]>::try_from(input_shape)
                    .map_err(|_| Error::Config(format!("cifarnet needs [c, h, w] input, got {input_shape:?}")))?;
                Ok(build_cifarnet_with(classes, shape, *widths)?)
            }
            ArchSpec::Mlp { hidden } => Ok(build_mlp(input_shape, hidden, classes)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum GanArch {
    Dense { latent: usize, hidden: usize },
    /// 16×16 output.
    Dcgan { latent: usize, width: usize },
}

impl GanArch {
    pub fn build(&self, image_shape: &[usize]) -> Result<(Model, Model)> {
        match *self {
            GanArch::Dense { latent, hidden } => Ok((
                build_dense_generator(latent, hidden, image_shape)?,
                build_dense_discriminator(image_shape, hidden)?,
            )),
            GanArch::Dcgan { latent, width } => {
                let channels = image_shape[0];
                Ok((build_dcgan_generator(latent, channels, width)?, build_dcgan_discriminator(channels, width)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceGrid {
    pub sizes: Vec<usize>,
    #[serde(default = "five")]
    pub count: usize,
}

fn five() -> usize {
    5
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_subsample() -> usize {
    DEFAULT_ORIGINAL_SUBSAMPLE
}

fn default_samples() -> usize {
    10_000
}

fn default_top_k() -> usize {
    16
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeuristicChoice {
    /// Blend of novel-class and original-class accuracy.
    #[default]
    Combined,
    /// Novel-class accuracy only.
    NewClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBaseConfig {
    pub model: ArchSpec,
    pub train: DatasetRef,
    #[serde(default)]
    pub test: Option<DatasetRef>,
    pub training: TrainConfig,
    #[serde(default = "base_id")]
    pub id: String,
}

fn base_id() -> String {
    "base".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandClassConfig {
    /// Model manifest of the trained base classifier.
    pub base: PathBuf,
    pub novel_train: NovelData,
    pub novel_test: NovelData,
    pub original_train: DatasetRef,
    pub original_test: DatasetRef,
    #[serde(default)]
    pub heuristic: HeuristicChoice,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_subsample")]
    pub original_subsample: usize,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub slices: Option<SliceGrid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandMultiConfig {
    pub base: PathBuf,
    pub novel_train: Vec<NovelData>,
    pub novel_test: Vec<NovelData>,
    pub original_train: DatasetRef,
    pub original_test: DatasetRef,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_subsample")]
    pub original_subsample: usize,
    #[serde(default)]
    pub search: SearchConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Standard,
    Transfer,
    Zeroshot,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Standard => "standard",
            BaselineMethod::Transfer => "transfer",
            BaselineMethod::Zeroshot => "zeroshot",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Source model for transfer and zeroshot.
    #[serde(default)]
    pub base: Option<PathBuf>,
    /// Architecture trained from scratch by the standard baseline.
    #[serde(default)]
    pub arch: Option<ArchSpec>,
    pub novel_train: NovelData,
    pub novel_test: NovelData,
    pub original_train: DatasetRef,
    pub original_test: DatasetRef,
    pub training: TrainConfig,
    #[serde(default)]
    pub slices: Option<SliceGrid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub gan: GanArch,
    pub data: NovelData,
    pub training: TrainConfig,
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanSource {
    pub generator: PathBuf,
    pub discriminator: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedGenerator {
    pub name: String,
    pub generator: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombiganRunConfig {
    pub sources: Vec<GanSource>,
    /// Novel training samples driving the mapping and discriminator search.
    pub novel: NovelData,
    /// Held-out real novel samples defining the target class distribution.
    pub real: NovelData,
    /// Classifier used for the KL and inception-style metrics.
    pub reference: PathBuf,
    #[serde(default = "combined")]
    pub driver: GeneratorDriver,
    /// Discriminator for the naive and transfer drivers.
    #[serde(default)]
    pub driver_discriminator: Option<PathBuf>,
    #[serde(default)]
    pub combigan: CombiGanConfig,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Other generators scored with the same metrics, e.g. a naive GAN.
    #[serde(default)]
    pub compare: Vec<NamedGenerator>,
}

fn combined() -> GeneratorDriver {
    GeneratorDriver::Combined
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateConfig {
    /// Classifier, or generator when `reference` is set.
    pub model: PathBuf,
    #[serde(default)]
    pub data: Option<DatasetRef>,
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub real: Option<NovelData>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Files the experiment reads; all must exist before any compute starts.
    pub fn referenced_paths(&self) -> Vec<PathBuf> {
        let novel = |n: &NovelData| n.data.paths();
        let mut out = Vec::new();
        match &self.experiment {
            Experiment::TrainBase(c) => {
                out.extend(c.train.paths());
                out.extend(c.test.iter().flat_map(DatasetRef::paths));
            }
            Experiment::ExpandClass(c) => {
                out.push(c.base.clone());
                out.extend(novel(&c.novel_train));
                out.extend(novel(&c.novel_test));
                out.extend(c.original_train.paths());
                out.extend(c.original_test.paths());
            }
            Experiment::ExpandMulti(c) => {
                out.push(c.base.clone());
                out.extend(c.novel_train.iter().chain(&c.novel_test).flat_map(novel));
                out.extend(c.original_train.paths());
                out.extend(c.original_test.paths());
            }
            Experiment::Baseline(c) => {
                out.extend(c.base.clone());
                out.extend(novel(&c.novel_train));
                out.extend(novel(&c.novel_test));
                out.extend(c.original_train.paths());
                out.extend(c.original_test.paths());
            }
            Experiment::GanTrain(c) => out.extend(novel(&c.data)),
            Experiment::Combigan(c) => {
                for s in &c.sources {
                    out.push(s.generator.clone());
                    out.push(s.discriminator.clone());
                }
                out.extend(novel(&c.novel));
                out.extend(novel(&c.real));
                out.push(c.reference.clone());
                out.extend(c.driver_discriminator.clone());
                out.extend(c.compare.iter().map(|g| g.generator.clone()));
            }
            Experiment::Evaluate(c) => {
                out.push(c.model.clone());
                out.extend(c.data.iter().flat_map(DatasetRef::paths));
                out.extend(c.reference.clone());
                out.extend(c.real.iter().flat_map(novel));
            }
        }
        out
    }

    pub fn check_inputs(&self) -> Result<()> {
        let missing: Vec<String> = self
            .referenced_paths()
            .into_iter()
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("missing input files: {}", missing.join(", "))))
        }
    }
}
