//! Small adversarial networks and their recombination.
//!
//! Source GANs are trained per dataset. A combined discriminator is searched
//! from the source discriminators, then a combined generator is searched from
//! the source generators with a discriminator as its heuristic.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::ConceptualExpansion;
use crate::mapping::{apply_mapping_full, Mapping};
use crate::metrics::{Heuristic, PrefixCache};
use crate::model::Model;
use crate::rng::{named_seed, rng, sub_seed};
use crate::search::{run_restarts, FeaturePool, SearchConfig, SearchResult};
use crate::tensor::Tensor;
use crate::trainer::{backward, backward_through, bce, init_parameters, zero_grads, Sgd, TrainConfig};

/// A generator and discriminator trained against each other.
#[derive(Clone, Debug, PartialEq)]
pub struct GanPair {
    pub generator: Model,
    pub discriminator: Model,
    pub latent_dim: usize,
}

impl GanPair {
    pub fn new(generator: Model, discriminator: Model) -> Result<Self> {
        let latent_dim = generator.input_shape().iter().product();
        if generator.output_shape() != discriminator.input_shape() {
            return Err(Error::Shape {
                op: "gan pair",
                lhs: generator.output_shape(),
                rhs: discriminator.input_shape().to_vec(),
            });
        }
        if discriminator.output_shape() != [1] {
            return Err(Error::InvalidShape(format!(
                "discriminator must output one probability, got {:?}",
                discriminator.output_shape()
            )));
        }
        Ok(Self {
            generator,
            discriminator,
            latent_dim,
        })
    }

    pub fn image_shape(&self) -> &[usize] {
        self.discriminator.input_shape()
    }

    /// Real-probability of one image.
    pub fn score(&self, x: &Tensor) -> Result<f32> {
        Ok(self.discriminator.forward(x)?.data()[0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpochStats {
    pub epoch: usize,
    pub d_loss: f32,
    pub g_loss: f32,
    /// Mean discriminator output on real and generated batches.
    pub d_real: f32,
    pub d_fake: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanCurve {
    pub epochs: Vec<GanEpochStats>,
    pub steps: usize,
}

/// Map `[0, 1]` pixels to the generator's `[-1, 1]` range.
pub fn to_tanh_range(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| 2.0 * v - 1.0).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Map generator output back to `[0, 1]` pixels.
pub fn from_tanh_range(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| (0.5 * (v + 1.0)).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// `n` standard-normal latent vectors.
pub fn latent_batch(latent_dim: usize, n: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let z = (0..latent_dim).map(|_| StandardNormal.sample(&mut r)).collect();
            Tensor::new(alloc::vec![latent_dim], z).expect("positive latent dim")
        })
        .collect()
}

/// `n` generator outputs from seeded latent draws.
pub fn generate(generator: &Model, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::Precondition("generate needs n >= 1".into()));
    }
    let latent_dim = generator.input_shape().iter().product();
    latent_batch(latent_dim, n, seed)
        .iter()
        .map(|z| generator.forward(z))
        .collect()
}

/// Like [`generate`] for an expansion.
pub fn generate_expansion(ce: &ConceptualExpansion, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    generate(&ce.materialize()?, n, seed)
}

/// Freshly initialized copy of `pair`, then [`train_gan`].
pub fn train_gan_from_scratch(pair: &GanPair, real: &[Tensor], cfg: &TrainConfig) -> Result<(GanPair, GanCurve)> {
    let mut fresh = pair.clone();
    init_parameters(&mut fresh.generator, cfg.weight_init, named_seed(cfg.seed, "generator-init"));
    init_parameters(&mut fresh.discriminator, cfg.weight_init, named_seed(cfg.seed, "discriminator-init"));
    train_gan(&fresh, real, cfg)
}

/// Alternating SGD from `pair`'s current parameters.
///
/// Every batch takes one discriminator step on binary cross-entropy (real
/// labelled 1, generated labelled 0) followed by one generator step on
/// `-ln D(G(z))`. `real` images are in the generator's `[-1, 1]` range.
pub fn train_gan(pair: &GanPair, real: &[Tensor], cfg: &TrainConfig) -> Result<(GanPair, GanCurve)> {
    cfg.validate()?;
    if real.is_empty() {
        return Err(Error::Precondition("empty GAN training set".into()));
    }
    let mut gen = pair.generator.clone();
    let mut disc = pair.discriminator.clone();
    let mut g_opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut d_opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut order_rng = rng(named_seed(cfg.seed, "order"));
    let latent_seed = named_seed(cfg.seed, "latent");
    let mut curve = GanCurve::default();
    let n_disc = disc.layers().len();
    'epochs: for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..real.len()).collect();
        crate::data::shuffle(&mut idx, &mut order_rng);
        let mut sums = [0.0f32; 4];
        let mut batches = 0;
        for (b, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| curve.steps >= m) {
                break 'epochs;
            }
            let z = latent_batch(pair.latent_dim, chunk.len(), sub_seed(latent_seed, curve.steps as u64));
            let inv = 1.0 / (2 * chunk.len()) as f32;

            // Discriminator step.
            let mut d_grads = zero_grads(&disc);
            let mut d_loss = 0.0f32;
            let (mut d_real, mut d_fake) = (0.0f32, 0.0f32);
            let fakes = z.iter().map(|z| gen.forward(z)).collect::<Result<Vec<_>>>()?;
            let samples = chunk
                .iter()
                .map(|&i| (&real[i], 1.0f32))
                .chain(fakes.iter().map(|f| (f, 0.0f32)));
            for (x, y) in samples {
                let acts = disc.forward_trace(x)?;
                let p = acts[n_disc].data()[0];
                d_loss += bce(p, y);
                if y > 0.5 {
                    d_real += p;
                } else {
                    d_fake += p;
                }
                let g = Tensor::new(acts[n_disc - 1].shape().to_vec(), alloc::vec![(p - y) * inv])?;
                backward_through(&disc, &acts, n_disc - 1, g, &mut d_grads, false)?;
            }
            d_loss *= inv;
            if !d_loss.is_finite() || d_grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: d_loss,
                });
            }
            d_opt.step(&mut disc, &d_grads, &|_| true);

            // Generator step against the updated discriminator.
            let mut g_grads = zero_grads(&gen);
            let mut scratch = zero_grads(&disc);
            let mut g_loss = 0.0f32;
            let g_inv = 1.0 / chunk.len() as f32;
            for z in &z {
                let g_acts = gen.forward_trace(z)?;
                let fake = g_acts.last().expect("nonempty trace");
                let d_acts = disc.forward_trace(fake)?;
                let p = d_acts[n_disc].data()[0];
                g_loss += bce(p, 1.0);
                let g = Tensor::new(d_acts[n_disc - 1].shape().to_vec(), alloc::vec![(p - 1.0) * g_inv])?;
                let gx = backward_through(&disc, &d_acts, n_disc - 1, g, &mut scratch, true)?
                    .expect("input gradient requested");
                backward(&gen, &g_acts, gx, &mut g_grads, false)?;
            }
            g_loss *= g_inv;
            if !g_loss.is_finite() || g_grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: g_loss,
                });
            }
            g_opt.step(&mut gen, &g_grads, &|_| true);

            curve.steps += 1;
            batches += 1;
            let n = chunk.len() as f32;
            sums[0] += d_loss;
            sums[1] += g_loss;
            sums[2] += d_real / n;
            sums[3] += d_fake / n;
        }
        let k = batches.max(1) as f32;
        curve.epochs.push(GanEpochStats {
            epoch,
            d_loss: sums[0] / k,
            g_loss: sums[1] / k,
            d_real: sums[2] / k,
            d_fake: sums[3] / k,
        });
    }
    for m in [&mut gen, &mut disc] {
        m.metadata.seed = Some(cfg.seed);
        m.metadata.epochs = Some(curve.epochs.len());
    }
    Ok((GanPair::new(gen, disc)?, curve))
}

/// Discriminator probability above which a sample counts as real.
pub const REAL_THRESHOLD: f32 = 0.5;

/// Map each source by the fraction of novel samples its discriminator calls real.
/// Samples are in the generator's `[-1, 1]` range.
pub fn build_gan_mapping(sources: &[GanPair], novel: &[Tensor]) -> Result<Mapping> {
    if sources.is_empty() || novel.is_empty() {
        return Err(Error::Precondition("GAN mapping needs sources and samples".into()));
    }
    let mut weights = Vec::with_capacity(sources.len());
    for (k, s) in sources.iter().enumerate() {
        let mut real = 0;
        for x in novel {
            if s.score(x)? > REAL_THRESHOLD {
                real += 1;
            }
        }
        weights.push((k, real as f64 / novel.len() as f64, real));
    }
    if weights.iter().all(|w| w.1 == 0.0) {
        let uniform: Vec<_> = (0..sources.len()).map(|k| (k, 1.0, 0)).collect();
        return Mapping::from_weights(&uniform);
    }
    Mapping::from_weights(&weights)
}

fn mean_output(outputs: &[Tensor]) -> f64 {
    outputs.iter().map(|o| o.data()[0] as f64).sum::<f64>() / outputs.len() as f64
}

/// Mean score on real novel samples minus mean score on source fakes.
#[derive(Clone, Debug)]
pub struct DiscriminatorSeparation {
    real: PrefixCache,
    fake: PrefixCache,
}

impl DiscriminatorSeparation {
    pub fn new(initial: &ConceptualExpansion, real: &[Tensor], fakes: &[Tensor]) -> Result<Self> {
        if real.is_empty() || fakes.is_empty() {
            return Err(Error::Precondition("separation needs real and fake samples".into()));
        }
        let reference = initial.materialize()?;
        Ok(Self {
            real: PrefixCache::new(reference.clone(), real)?,
            fake: PrefixCache::new(reference, fakes)?,
        })
    }

    pub fn score_model(&self, disc: &Model) -> Result<f64> {
        Ok(mean_output(&self.real.outputs(disc)?) - mean_output(&self.fake.outputs(disc)?))
    }
}

impl Heuristic for DiscriminatorSeparation {
    fn score(&self, ce: &ConceptualExpansion) -> Result<f64> {
        self.score_model(&ce.materialize()?)
    }
}

/// Mean discriminator score over a fixed latent batch pushed through the candidate generator.
#[derive(Clone, Debug)]
pub struct GeneratorScore {
    latents: PrefixCache,
    discriminator: Model,
}

/// Default size of the fixed latent batch.
pub const DEFAULT_LATENT_BATCH: usize = 256;

impl GeneratorScore {
    pub fn new(initial: &ConceptualExpansion, discriminator: Model, batch: usize, seed: u64) -> Result<Self> {
        let generator = initial.materialize()?;
        if generator.output_shape() != discriminator.input_shape() {
            return Err(Error::Shape {
                op: "generator heuristic",
                lhs: generator.output_shape(),
                rhs: discriminator.input_shape().to_vec(),
            });
        }
        if batch == 0 {
            return Err(Error::Precondition("latent batch must be nonempty".into()));
        }
        let latent_dim = generator.input_shape().iter().product();
        let z = latent_batch(latent_dim, batch, seed);
        Ok(Self {
            latents: PrefixCache::new(generator, &z)?,
            discriminator,
        })
    }

    pub fn score_model(&self, generator: &Model) -> Result<f64> {
        let images = self.latents.outputs(generator)?;
        let mut total = 0.0f64;
        for x in &images {
            total += self.discriminator.forward(x)?.data()[0] as f64;
        }
        Ok(total / images.len() as f64)
    }
}

impl Heuristic for GeneratorScore {
    fn score(&self, ce: &ConceptualExpansion) -> Result<f64> {
        self.score_model(&ce.materialize()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombiGanConfig {
    pub search: SearchConfig,
    /// Generated samples per source in the discriminator heuristic's fake pool.
    pub fakes_per_source: usize,
    pub latent_batch: usize,
}

impl Default for CombiGanConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            fakes_per_source: 64,
            latent_batch: DEFAULT_LATENT_BATCH,
        }
    }
}

/// Search a combined discriminator for the novel concept.
pub fn expand_discriminator(
    sources: &[GanPair],
    mapping: &Mapping,
    novel: &[Tensor],
    cfg: &CombiGanConfig,
    target: &str,
) -> Result<SearchResult> {
    let discs: Vec<Model> = sources.iter().map(|s| s.discriminator.clone()).collect();
    let initial = apply_mapping_full(&discs, mapping, target)?;
    let fake_seed = named_seed(cfg.search.seed, "fakes");
    let mut fakes = Vec::new();
    for (k, s) in sources.iter().enumerate() {
        fakes.extend(generate(&s.generator, cfg.fakes_per_source.max(1), sub_seed(fake_seed, k as u64))?);
    }
    let heuristic = DiscriminatorSeparation::new(&initial, novel, &fakes)?;
    let pool = FeaturePool::from_models_whole(&discs)?;
    let mut res = run_restarts(&initial, &pool, &heuristic, &cfg.search)?;
    res.best.metadata_mut().id = format!("combi-disc-{target}");
    Ok(res)
}

/// Search a combined generator scored by `driver`.
pub fn expand_generator(
    sources: &[GanPair],
    mapping: &Mapping,
    driver: &Model,
    cfg: &CombiGanConfig,
    target: &str,
) -> Result<SearchResult> {
    let gens: Vec<Model> = sources.iter().map(|s| s.generator.clone()).collect();
    let initial = apply_mapping_full(&gens, mapping, target)?;
    let heuristic = GeneratorScore::new(
        &initial,
        driver.clone(),
        cfg.latent_batch,
        named_seed(cfg.search.seed, "latents"),
    )?;
    let pool = FeaturePool::from_models_whole(&gens)?;
    let mut res = run_restarts(&initial, &pool, &heuristic, &cfg.search)?;
    res.best.metadata_mut().id = format!("combi-gen-{target}");
    Ok(res)
}

/// Which discriminator drives the generator search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorDriver {
    /// The searched combined discriminator.
    Combined,
    /// A discriminator trained from scratch on the novel data.
    Naive,
    /// A source discriminator fine-tuned on the novel data.
    Transfer,
}

#[derive(Clone, Debug)]
pub struct CombiGanResult {
    pub mapping: Mapping,
    pub discriminator: Option<SearchResult>,
    pub generator: SearchResult,
    pub driver: GeneratorDriver,
}

impl CombiGanResult {
    pub fn generator_model(&self) -> Result<Model> {
        self.generator.best.materialize()
    }
}

/// Discriminator search (when the combined driver is used), then generator search.
/// `external` supplies the driving discriminator for the naive and transfer variants.
pub fn combigan(
    sources: &[GanPair],
    novel: &[Tensor],
    driver: GeneratorDriver,
    external: Option<&Model>,
    cfg: &CombiGanConfig,
    target: &str,
) -> Result<CombiGanResult> {
    let mapping = build_gan_mapping(sources, novel)?;
    let (disc_result, driving) = match (driver, external) {
        (GeneratorDriver::Combined, _) => {
            let res = expand_discriminator(sources, &mapping, novel, cfg, target)?;
            let model = res.best.materialize()?;
            (Some(res), model)
        }
        (_, Some(d)) => (None, d.clone()),
        (_, None) => {
            return Err(Error::Precondition(format!(
                "{driver:?} variant needs an external discriminator"
            )))
        }
    };
    let generator = expand_generator(sources, &mapping, &driving, cfg, target)?;
    Ok(CombiGanResult {
        mapping,
        discriminator: disc_result,
        generator,
        driver,
    })
}

/// Human-readable label of a driver.
pub fn driver_name(d: GeneratorDriver) -> String {
    String::from(match d {
        GeneratorDriver::Combined => "combigan",
        GeneratorDriver::Naive => "combi+n",
        GeneratorDriver::Transfer => "combi+t",
    })
}
