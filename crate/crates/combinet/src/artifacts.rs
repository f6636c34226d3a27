//! Models, expansions and datasets on disk: a JSON manifest next to a CNTA archive.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use combinet_core::data::LabeledDataset;
use combinet_core::expansion::{AlphaKind, ParamExpansion, Term};
use combinet_core::model::Architecture;
use combinet_core::{Alpha, ConceptualExpansion, ExpandedVariable, FeatureOrigin, Metadata, Model, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cnta::{read_archive, write_archive, Entry, EntryData};
use crate::error::{io_err, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const LAYER_KINDS: [&str; 12] = [
    "conv2d",
    "transposed_conv2d",
    "maxpool2d",
    "dense",
    "batchnorm_inference",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "softmax",
    "flatten",
    "reshape",
];

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    kind: String,
    architecture: Architecture,
    class_labels: Vec<String>,
    metadata: Metadata,
    archive: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AlphaRecord {
    /// Scalar alpha; `bits` is authoritative, `value` is for readers.
    Scalar { value: f32, bits: u32 },
    /// Archive entry holding a full-tensor alpha.
    Tensor(String),
}

#[derive(Serialize, Deserialize)]
struct TermRecord {
    origin: FeatureOrigin,
    feature: String,
    alpha: AlphaRecord,
}

#[derive(Serialize, Deserialize)]
struct VariableRecord {
    param: String,
    row: Option<usize>,
    alpha_kind: AlphaKind,
    terms: Vec<TermRecord>,
}

#[derive(Serialize, Deserialize)]
struct ExpansionManifest {
    format_version: u32,
    kind: String,
    architecture: Architecture,
    metadata: Metadata,
    target_concept: String,
    archive: String,
    variables: Vec<VariableRecord>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    kind: String,
    class_names: Vec<String>,
    provenance: String,
    len: usize,
    archive: String,
}

fn archive_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("cnta")
}

fn archive_name(manifest: &Path) -> String {
    archive_path(manifest)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "archive.cnta".into())
}

fn write_manifest<T: Serialize>(path: &Path, manifest: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn json_format_error(text: &str, e: serde_json::Error) -> Error {
    Error::Format {
        offset: byte_offset(text, e.line(), e.column()),
        detail: e.to_string(),
    }
}

/// Parse a manifest, checking version, kind and layer kinds before typed decoding.
fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path, kind: &str) -> Result<T> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
        offset: e.valid_up_to(),
        detail: "manifest is not UTF-8".into(),
    })?;
    let value: Value = serde_json::from_str(text).map_err(|e| json_format_error(text, e))?;
    let version = value.get("format_version").and_then(Value::as_u64);
    match version {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::UnsupportedVersion(u32::try_from(v).unwrap_or(u32::MAX))),
        None => {
            return Err(Error::Format {
                offset: 0,
                detail: "manifest lacks format_version".into(),
            })
        }
    }
    let found = value.get("kind").and_then(Value::as_str).unwrap_or_default();
    if found != kind {
        return Err(Error::Config(format!("{} holds a {found:?}, expected a {kind:?}", path.display())));
    }
    if let Some(layers) = value.pointer("/architecture/layers").and_then(Value::as_array) {
        for layer in layers {
            let k = layer.get("kind").and_then(Value::as_str).unwrap_or("<missing>");
            if !LAYER_KINDS.contains(&k) {
                return Err(Error::UnsupportedArchitecture(format!("unknown layer kind {k:?}")));
            }
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Format {
        offset: 0,
        detail: e.to_string(),
    })
}

fn sibling(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

fn f32_entries(entries: Vec<Entry>) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for e in entries {
        match e.data {
            EntryData::F32(t) => {
                if out.insert(e.name.clone(), t).is_some() {
                    return Err(Error::Config(format!("duplicate archive entry {}", e.name)));
                }
            }
            EntryData::U8 { .. } => return Err(Error::Config(format!("entry {} is not f32", e.name))),
        }
    }
    Ok(out)
}

/// Write `<path>` (manifest) and `<path>.cnta` (parameters).
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        kind: "model".into(),
        architecture: model.architecture().clone(),
        class_labels: model.metadata.class_labels.clone(),
        metadata: model.metadata.clone(),
        archive: archive_name(path),
    };
    write_manifest(path, &manifest)?;
    let entries: Vec<Entry> = model.params().iter().map(|(n, t)| Entry::f32(n.clone(), t.clone())).collect();
    write_archive(&sibling(path, &manifest.archive), &entries)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let manifest: ModelManifest = read_manifest(path, "model")?;
    let params = f32_entries(read_archive(&sibling(path, &manifest.archive))?)?;
    let mut metadata = manifest.metadata;
    metadata.class_labels = manifest.class_labels;
    Ok(Model::from_parts(manifest.architecture, params, metadata)?)
}

/// Like [`save_model`] for an expansion; features shared between terms are stored once.
pub fn save_expansion(ce: &ConceptualExpansion, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut by_ptr: BTreeMap<usize, String> = BTreeMap::new();
    let mut variables = Vec::new();
    for key in ce.keys() {
        let var = ce.variable(&key).expect("key listed by expansion");
        let mut terms = Vec::with_capacity(var.len());
        for t in var.terms() {
            let ptr = Arc::as_ptr(&t.feature) as usize;
            let feature = by_ptr
                .entry(ptr)
                .or_insert_with(|| {
                    let name = format!("f{}", entries.len());
                    entries.push(Entry::f32(name.clone(), (*t.feature).clone()));
                    name
                })
                .clone();
            let alpha = match &t.alpha {
                Alpha::Scalar(v) => AlphaRecord::Scalar {
                    value: *v,
                    bits: v.to_bits(),
                },
                Alpha::Tensor(a) => {
                    let name = format!("a{}", entries.len());
                    entries.push(Entry::f32(name.clone(), (**a).clone()));
                    AlphaRecord::Tensor(name)
                }
            };
            terms.push(TermRecord {
                origin: t.origin.clone(),
                feature,
                alpha,
            });
        }
        variables.push(VariableRecord {
            param: key.param.clone(),
            row: key.row,
            alpha_kind: var.kind(),
            terms,
        });
    }
    let manifest = ExpansionManifest {
        format_version: FORMAT_VERSION,
        kind: "expansion".into(),
        architecture: ce.architecture().clone(),
        metadata: ce.metadata().clone(),
        target_concept: ce.target_concept().to_string(),
        archive: archive_name(path),
        variables,
    };
    write_manifest(path, &manifest)?;
    write_archive(&sibling(path, &manifest.archive), &entries)
}

pub fn load_expansion(path: &Path) -> Result<ConceptualExpansion> {
    let manifest: ExpansionManifest = read_manifest(path, "expansion")?;
    let tensors: BTreeMap<String, Arc<Tensor>> = f32_entries(read_archive(&sibling(path, &manifest.archive))?)?
        .into_iter()
        .map(|(k, v)| (k, Arc::new(v)))
        .collect();
    let get = |name: &str| {
        tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("archive lacks entry {name}")))
    };
    let mut whole: BTreeMap<String, ExpandedVariable> = BTreeMap::new();
    let mut rows: BTreeMap<String, BTreeMap<usize, ExpandedVariable>> = BTreeMap::new();
    for v in manifest.variables {
        let terms = v
            .terms
            .into_iter()
            .map(|t| {
                let alpha = match t.alpha {
                    AlphaRecord::Scalar { bits, .. } => Alpha::Scalar(f32::from_bits(bits)),
                    AlphaRecord::Tensor(name) => Alpha::Tensor(get(&name)?),
                };
                Ok(Term {
                    feature: get(&t.feature)?,
                    alpha,
                    origin: t.origin,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let var = ExpandedVariable::new(v.alpha_kind, terms)?;
        let dup = match v.row {
            None => whole.insert(v.param.clone(), var).is_some(),
            Some(r) => rows.entry(v.param.clone()).or_default().insert(r, var).is_some(),
        };
        if dup {
            return Err(Error::Config(format!("variable {}[{:?}] listed twice", v.param, v.row)));
        }
    }
    let mut variables: BTreeMap<String, ParamExpansion> =
        whole.into_iter().map(|(k, v)| (k, ParamExpansion::Whole(v))).collect();
    for (param, by_row) in rows {
        if by_row.keys().copied().ne(0..by_row.len()) {
            return Err(Error::Config(format!("rows of {param} are not contiguous from 0")));
        }
        if variables.contains_key(&param) {
            return Err(Error::Config(format!("{param} is both whole and row-split")));
        }
        variables.insert(param, ParamExpansion::Rows(by_row.into_values().collect()));
    }
    Ok(ConceptualExpansion::new(
        manifest.architecture,
        manifest.metadata,
        variables,
        manifest.target_concept,
    )?)
}

/// Images are stored stacked as one `[n, c, h, w]` entry, labels as an f32 vector.
pub fn save_dataset(data: &LabeledDataset, path: &Path) -> Result<()> {
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        kind: "dataset".into(),
        class_names: data.class_names.clone(),
        provenance: data.provenance.clone(),
        len: data.len(),
        archive: archive_name(path),
    };
    write_manifest(path, &manifest)?;
    let mut entries = Vec::new();
    if let Some(first) = data.images.first() {
        let mut shape = vec![data.len()];
        shape.extend_from_slice(first.shape());
        let images = Tensor::stack_rows(&data.images, &shape)?;
        entries.push(Entry::f32("images", images));
    }
    let labels = data.labels.iter().map(|&l| l as f32).collect();
    entries.push(Entry::f32("labels", Tensor::new(vec![data.len()], labels)?));
    write_archive(&sibling(path, &manifest.archive), &entries)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let manifest: DatasetManifest = read_manifest(path, "dataset")?;
    let mut t = f32_entries(read_archive(&sibling(path, &manifest.archive))?)?;
    let labels = t.remove("labels").ok_or_else(|| Error::Config("dataset archive lacks labels".into()))?;
    let images = match t.remove("images") {
        Some(stack) => (0..manifest.len).map(|i| stack.row(i)).collect::<Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };
    let labels: Vec<usize> = labels.data().iter().map(|&l| l as usize).collect();
    if labels.len() != manifest.len {
        return Err(Error::Config(format!(
            "manifest lists {} samples, archive holds {}",
            manifest.len,
            labels.len()
        )));
    }
    Ok(LabeledDataset::new(images, labels, manifest.class_names, manifest.provenance)?)
}
