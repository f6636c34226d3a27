use std::path::Path;

use combinet_core::data::{parse_cifar, CifarFormat, LabeledDataset};

use crate::error::{io_err, Error, Result};

/// Read a CIFAR-10/100 binary batch file. Records keep their file order.
pub fn load_cifar_binary(path: &Path, format: CifarFormat) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let provenance = format!("{}:{}", cifar_name(format), path.display());
    parse_cifar(&bytes, format, &provenance).map_err(|e| match e {
        combinet_core::Error::Format { offset, detail } => Error::Format { offset, detail },
        other => other.into(),
    })
}

/// Concatenate several batch files, e.g. the five CIFAR-10 training batches.
pub fn load_cifar_batches(paths: &[impl AsRef<Path>], format: CifarFormat) -> Result<LabeledDataset> {
    let mut parts = paths.iter().map(|p| load_cifar_binary(p.as_ref(), format));
    let first = parts
        .next()
        .ok_or_else(|| Error::Config("no CIFAR files given".into()))??;
    parts.try_fold(first, |acc, next| Ok(acc.merged(&next?)))
}

fn cifar_name(format: CifarFormat) -> &'static str {
    match format {
        CifarFormat::Cifar10 => "cifar10",
        CifarFormat::Cifar100 => "cifar100",
    }
}
