//! Labeled image datasets, seeded slicing, CIFAR record parsing and
//! synthetic desk-scale generators.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng, sub_seed, Rng};
use crate::tensor::Tensor;

/// Images with integer labels; every image is `[c,h,w]` with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Precondition(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Precondition(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Dataset positions holding `class`, ascending.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn images_of(&self, class: usize) -> Vec<Tensor> {
        self.indices_of(class)
            .into_iter()
            .map(|i| self.images[i].clone())
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Append `other`, whose labels are interpreted in its own class list and
    /// remapped by class name (new names are appended).
    pub fn merged(&self, other: &LabeledDataset) -> LabeledDataset {
        let mut names = self.class_names.clone();
        let remap: Vec<usize> = other
            .class_names
            .iter()
            .map(|n| match names.iter().position(|m| m == n) {
                Some(i) => i,
                None => {
                    names.push(n.clone());
                    names.len() - 1
                }
            })
            .collect();
        let mut out = self.clone();
        out.class_names = names;
        out.images.extend(other.images.iter().cloned());
        out.labels.extend(other.labels.iter().map(|&l| remap[l]));
        out.provenance = format!("{}+{}", self.provenance, other.provenance);
        out
    }

    /// Same images with every label set to `label` under `class_names`.
    pub fn relabeled(&self, label: usize, class_names: Vec<String>) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.images.clone(),
            vec![label; self.len()],
            class_names,
            self.provenance.clone(),
        )
    }

    /// Seeded shuffle-then-cut split; the first part receives `round(len * fraction)` samples.
    pub fn split(&self, fraction: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        shuffle(&mut idx, &mut rng(seed));
        let cut = libm::round(self.len() as f64 * fraction.clamp(0.0, 1.0)) as usize;
        let (a, b) = idx.split_at(cut);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        (self.subset(&a), self.subset(&b))
    }

    /// Up to `n` samples per class taken from a seeded permutation.
    pub fn per_class_subsample(&self, n: usize, seed: u64) -> LabeledDataset {
        let mut keep = Vec::new();
        for c in 0..self.num_classes() {
            let mut idx = self.indices_of(c);
            shuffle(&mut idx, &mut rng(sub_seed(seed, c as u64)));
            idx.truncate(n);
            keep.extend(idx);
        }
        keep.sort_unstable();
        self.subset(&keep)
    }

    /// Seeded random subset of `n` samples (all samples when `n >= len`).
    pub fn random_subset(&self, n: usize, seed: u64) -> LabeledDataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut keep = index::sample(&mut rng(seed), self.len(), n).into_vec();
        keep.sort_unstable();
        self.subset(&keep)
    }
}

/// Fisher-Yates with the crate's generator.
pub fn shuffle<T>(items: &mut [T], r: &mut Rng) {
    for i in (1..items.len()).rev() {
        let j = r.random_range(0..=i);
        items.swap(i, j);
    }
}

/// One random slice of a class: `size` samples, slice `index` of a family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub class: usize,
    pub size: usize,
    pub index: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    #[serde(flatten)]
    pub spec: SliceSpec,
    /// Positions in the source dataset, ascending.
    pub indices: Vec<usize>,
}

/// Specs for `count` slices of each size.
pub fn slice_grid(class: usize, sizes: &[usize], count: usize, seed: u64) -> Vec<SliceSpec> {
    sizes
        .iter()
        .flat_map(|&size| {
            (0..count).map(move |index| SliceSpec {
                class,
                size,
                index,
                seed,
            })
        })
        .collect()
}

fn binomial_at_least(n: usize, k: usize, target: usize) -> bool {
    // C(n, k) >= target without overflow.
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c >= target as u128 {
            return true;
        }
    }
    c >= target as u128
}

const SLICE_REDRAWS: u64 = 64;

/// Draw one slice. Slices of a family `(class, size, seed)` are drawn in
/// index order and redrawn on collision, so indices `0..=k` are pairwise
/// distinct whenever the class has at least `k + 1` distinct subsets.
pub fn make_slice(dataset: &LabeledDataset, spec: SliceSpec) -> Result<Slice> {
    let members = dataset.indices_of(spec.class);
    if spec.size == 0 || spec.size > members.len() {
        return Err(Error::Precondition(format!(
            "slice size {} not in 1..={} for class {}",
            spec.size,
            members.len(),
            spec.class
        )));
    }
    let family = sub_seed(sub_seed(spec.seed, spec.class as u64), spec.size as u64);
    let can_differ = binomial_at_least(members.len(), spec.size, spec.index + 1);
    let mut taken: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut current = Vec::new();
    for i in 0..=spec.index {
        let base = sub_seed(family, i as u64);
        for attempt in 0..SLICE_REDRAWS {
            let mut r = rng(sub_seed(base, attempt));
            let mut pick: Vec<usize> = index::sample(&mut r, members.len(), spec.size)
                .into_iter()
                .map(|j| members[j])
                .collect();
            pick.sort_unstable();
            current = pick;
            if !can_differ || !taken.contains(&current) {
                break;
            }
        }
        taken.insert(current.clone());
    }
    Ok(Slice {
        spec,
        indices: current,
    })
}

pub fn make_slices(dataset: &LabeledDataset, specs: &[SliceSpec]) -> Result<Vec<Slice>> {
    specs.iter().map(|&s| make_slice(dataset, s)).collect()
}

/// CIFAR binary flavours.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarFormat {
    Cifar10,
    Cifar100,
}

impl CifarFormat {
    pub fn record_len(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 3073,
            CifarFormat::Cifar100 => 3074,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            CifarFormat::Cifar10 => &CIFAR10_CLASSES,
            CifarFormat::Cifar100 => &CIFAR100_CLASSES,
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

pub const CIFAR100_CLASSES: [&str; 100] = [
    "apple", "aquarium_fish", "baby", "bear", "beaver", "bed", "bee", "beetle", "bicycle", "bottle",
    "bowl", "boy", "bridge", "bus", "butterfly", "camel", "can", "castle", "caterpillar", "cattle",
    "chair", "chimpanzee", "clock", "cloud", "cockroach", "couch", "crab", "crocodile", "cup",
    "dinosaur", "dolphin", "elephant", "flatfish", "forest", "fox", "girl", "hamster", "house",
    "kangaroo", "keyboard", "lamp", "lawn_mower", "leopard", "lion", "lizard", "lobster", "man",
    "maple_tree", "motorcycle", "mountain", "mouse", "mushroom", "oak_tree", "orange", "orchid",
    "otter", "palm_tree", "pear", "pickup_truck", "pine_tree", "plain", "plate", "poppy",
    "porcupine", "possum", "rabbit", "raccoon", "ray", "road", "rocket", "rose", "sea", "seal",
    "shark", "shrew", "skunk", "skyscraper", "snail", "snake", "spider", "squirrel", "streetcar",
    "sunflower", "sweet_pepper", "table", "tank", "telephone", "television", "tiger", "tractor",
    "train", "trout", "tulip", "turtle", "wardrobe", "whale", "willow_tree", "wolf", "woman",
    "worm",
];

/// Decode CIFAR binary records. CIFAR-100 keeps the fine label.
pub fn parse_cifar(bytes: &[u8], format: CifarFormat, provenance: &str) -> Result<LabeledDataset> {
    let rec = format.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        let expected = (bytes.len() / rec + 1) * rec;
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % rec,
            detail: format!(
                "expected a multiple of {rec} bytes (e.g. {expected}), got {}",
                bytes.len()
            ),
        });
    }
    let label_bytes = rec - 3072;
    let classes = format.class_names();
    let mut images = Vec::with_capacity(bytes.len() / rec);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[label_bytes - 1] as usize;
        if label >= classes.len() {
            return Err(Error::Format {
                offset: i * rec + label_bytes - 1,
                detail: format!("label {label} out of range"),
            });
        }
        let px = r[label_bytes..].iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Tensor::new(vec![3, 32, 32], px)?);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, classes, provenance)
}

/// Class-conditional pixel templates shared by the template generators.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub templates: Vec<Tensor>,
    pub noise: f32,
    /// Samples are translated by up to this many pixels on each axis.
    pub max_shift: usize,
    /// Fill value for pixels uncovered by a translation.
    pub background: f32,
}

impl TemplateSet {
    /// Each template is a dim background with 2-4 bright random rectangles per channel.
    pub fn shapes(classes: usize, shape: &[usize], noise: f32, template_seed: u64) -> Result<Self> {
        let [c, h, w] = image_dims(shape)?;
        let mut templates = Vec::with_capacity(classes);
        for k in 0..classes {
            let mut r = rng(sub_seed(template_seed, k as u64));
            let mut t = vec![0.1f32; c * h * w];
            for ch in 0..c {
                let n_rects = r.random_range(2..=4);
                for _ in 0..n_rects {
                    let rh = r.random_range(h.div_ceil(4)..=h.div_ceil(2));
                    let rw = r.random_range(w.div_ceil(4)..=w.div_ceil(2));
                    let y0 = r.random_range(0..=h - rh);
                    let x0 = r.random_range(0..=w - rw);
                    let v = r.random_range(0.6f32..1.0);
                    for y in y0..y0 + rh {
                        for x in x0..x0 + rw {
                            t[(ch * h + y) * w + x] = v;
                        }
                    }
                }
            }
            templates.push(Tensor::new(vec![c, h, w], t)?);
        }
        Ok(Self {
            templates,
            noise,
            max_shift: 0,
            background: 0.1,
        })
    }

    pub fn with_shift(mut self, max_shift: usize) -> Self {
        self.max_shift = max_shift;
        self
    }

    /// Each template is a uniform-random mean image in `[0.2, 0.8]`.
    pub fn blobs(classes: usize, shape: &[usize], spread: f32, template_seed: u64) -> Result<Self> {
        let [c, h, w] = image_dims(shape)?;
        let templates = (0..classes)
            .map(|k| {
                let mut r = rng(sub_seed(template_seed, k as u64));
                let t = (0..c * h * w).map(|_| r.random_range(0.2f32..0.8)).collect();
                Tensor::new(vec![c, h, w], t)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            templates,
            noise: spread,
            max_shift: 0,
            background: 0.5,
        })
    }

    fn shifted(&self, t: &Tensor, r: &mut Rng) -> Tensor {
        let s = self.max_shift as i64;
        let dy = r.random_range(-s..=s);
        let dx = r.random_range(-s..=s);
        let [c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2]];
        let mut out = vec![self.background; t.len()];
        for ch in 0..c {
            for y in 0..h as i64 {
                let sy = y - dy;
                if !(0..h as i64).contains(&sy) {
                    continue;
                }
                for x in 0..w as i64 {
                    let sx = x - dx;
                    if (0..w as i64).contains(&sx) {
                        out[(ch * h + y as usize) * w + x as usize] =
                            t.data()[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out).expect("shape preserved")
    }

    fn noisy(&self, mean: &Tensor, r: &mut Rng) -> Tensor {
        let shifted;
        let mean = if self.max_shift > 0 {
            shifted = self.shifted(mean, r);
            &shifted
        } else {
            mean
        };
        let normal = Normal::new(0.0f32, self.noise.max(0.0)).expect("finite std");
        let data = mean
            .data()
            .iter()
            .map(|&m| (m + normal.sample(r)).clamp(0.0, 1.0))
            .collect();
        Tensor::new(mean.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn sample(&self, class: usize, r: &mut Rng) -> Tensor {
        self.noisy(&self.templates[class], r)
    }

    /// `weight * template_a + (1 - weight) * template_b`, before noise.
    pub fn blend_template(&self, a: usize, b: usize, weight: f32) -> Tensor {
        let mut t = self.templates[a].scale(weight);
        t.add_scaled(&self.templates[b], 1.0 - weight)
            .expect("templates share a shape");
        t
    }

    pub fn blend_sample(&self, a: usize, b: usize, weight: f32, r: &mut Rng) -> Tensor {
        self.noisy(&self.blend_template(a, b, weight), r)
    }
}

fn image_dims(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] if c > 0 && h > 1 && w > 1 => Ok([c, h, w]),
        _ => Err(Error::InvalidShape(format!("image shape {shape:?} must be [c,h,w]"))),
    }
}

/// Declarative description of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum SynthSpec {
    /// Class-conditional Gaussians around random mean images.
    GaussianBlobs {
        classes: usize,
        per_class: usize,
        shape: Vec<usize>,
        spread: f32,
        template_seed: u64,
    },
    /// Random rectangle templates plus pixel noise and optional translation.
    ShapeTemplates {
        classes: usize,
        per_class: usize,
        shape: Vec<usize>,
        noise: f32,
        template_seed: u64,
        #[serde(default)]
        max_shift: usize,
    },
    /// Pixel blends of two shape-template classes, all labeled as one novel class.
    Blend {
        classes: usize,
        shape: Vec<usize>,
        noise: f32,
        template_seed: u64,
        #[serde(default)]
        max_shift: usize,
        class_a: usize,
        class_b: usize,
        weight: f32,
        count: usize,
        label: String,
    },
}

impl SynthSpec {
    pub fn generator_id(&self) -> &'static str {
        match self {
            SynthSpec::GaussianBlobs { .. } => "gaussian-blobs",
            SynthSpec::ShapeTemplates { .. } => "shape-templates",
            SynthSpec::Blend { .. } => "blend",
        }
    }

    pub fn templates(&self) -> Result<TemplateSet> {
        match self {
            SynthSpec::GaussianBlobs {
                classes,
                shape,
                spread,
                template_seed,
                ..
            } => TemplateSet::blobs(*classes, shape, *spread, *template_seed),
            SynthSpec::ShapeTemplates {
                classes,
                shape,
                noise,
                template_seed,
                max_shift,
                ..
            }
            | SynthSpec::Blend {
                classes,
                shape,
                noise,
                template_seed,
                max_shift,
                ..
            } => Ok(TemplateSet::shapes(*classes, shape, *noise, *template_seed)?.with_shift(*max_shift)),
        }
    }
}

/// Known generator ids.
pub const GENERATORS: [&str; 3] = ["gaussian-blobs", "shape-templates", "blend"];

/// Reject generator ids this crate cannot build.
pub fn check_generator(id: &str) -> Result<()> {
    if GENERATORS.contains(&id) {
        Ok(())
    } else {
        Err(Error::Unknown {
            kind: "generator",
            name: id.to_string(),
        })
    }
}

/// Build a synthetic dataset; samples are drawn in class-major order from `seed`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<LabeledDataset> {
    let templates = spec.templates()?;
    let mut r = rng(seed);
    match spec {
        SynthSpec::GaussianBlobs {
            classes, per_class, ..
        }
        | SynthSpec::ShapeTemplates {
            classes, per_class, ..
        } => {
            let mut images = Vec::with_capacity(classes * per_class);
            let mut labels = Vec::with_capacity(classes * per_class);
            for k in 0..*classes {
                for _ in 0..*per_class {
                    images.push(templates.sample(k, &mut r));
                    labels.push(k);
                }
            }
            let names = (0..*classes).map(|k| format!("class{k}")).collect();
            LabeledDataset::new(
                images,
                labels,
                names,
                format!("{}:seed={seed}", spec.generator_id()),
            )
        }
        SynthSpec::Blend {
            classes,
            class_a,
            class_b,
            weight,
            count,
            label,
            ..
        } => {
            if class_a >= classes || class_b >= classes {
                return Err(Error::Precondition(format!(
                    "blend classes {class_a},{class_b} out of range for {classes}"
                )));
            }
            let images = (0..*count)
                .map(|_| templates.blend_sample(*class_a, *class_b, *weight, &mut r))
                .collect();
            LabeledDataset::new(
                images,
                vec![0; *count],
                vec![label.clone()],
                format!("blend({class_a},{class_b},{weight}):seed={seed}"),
            )
        }
    }
}
