//! CSV curves and traces, run summaries, PNG contact sheets.

use std::path::Path;

use combinet_core::gan::GanCurve;
use combinet_core::search::{SearchResult, TraceRow};
use combinet_core::trainer::TrainingCurve;
use combinet_core::{Model, Tensor};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_curve_csv(path: &Path, curve: &TrainingCurve) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "train_loss", "train_accuracy"])?;
    for e in &curve.epochs {
        w.serialize((e.epoch, e.train_loss, e.train_accuracy))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_gan_curve_csv(path: &Path, curve: &GanCurve) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "d_loss", "g_loss", "d_real", "d_fake"])?;
    for e in &curve.epochs {
        w.serialize((e.epoch, e.d_loss, e.g_loss, e.d_real, e.d_fake))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub mutation_type: String,
    pub candidate_score: f64,
    pub best_score: f64,
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = writer(path)?;
    for row in trace {
        w.serialize(TraceRecord {
            step: row.step,
            mutation_type: row.mutation.as_str().into(),
            candidate_score: row.candidate_score,
            best_score: row.best_score,
        })?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Per-search summary stored next to its trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub seed: u64,
    pub restarts: usize,
    pub run_scores: Vec<f64>,
    pub best_run: usize,
    pub initial_score: f64,
    pub best_score: f64,
    /// Neighbors scored by the winning run.
    pub neighbors: usize,
    pub visited: usize,
    pub wall_seconds: f64,
}

impl SearchSummary {
    pub fn new(res: &SearchResult, restarts: usize, wall_seconds: f64) -> Self {
        Self {
            seed: res.seed,
            restarts,
            run_scores: res.run_scores.clone(),
            best_run: res.best_run,
            initial_score: res.initial_score,
            best_score: res.best_score,
            neighbors: res.evaluations(),
            visited: res.visited,
            wall_seconds,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Probability the reference classifier assigns to `class`.
pub fn class_confidence(reference: &Model, x: &Tensor, class: usize) -> Result<f64> {
    let y = reference.forward(x)?;
    let sum: f64 = y.data().iter().map(|&v| v as f64).sum();
    let p = y.data().get(class).copied().ok_or_else(|| {
        Error::Config(format!("class {class} outside the reference's {} outputs", y.len()))
    })?;
    Ok(p as f64 / sum)
}

/// Indices of the `k` images the reference is most confident show `class`.
pub fn top_k_by_confidence(reference: &Model, images: &[Tensor], class: usize, k: usize) -> Result<Vec<usize>> {
    let mut scored = images
        .iter()
        .enumerate()
        .map(|(i, x)| Ok((class_confidence(reference, x, class)?, i)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Tile `[c, h, w]` images (values in `[0, 1]`, c = 1 or 3) into a grid.
pub fn contact_sheet(images: &[Tensor], columns: usize) -> Result<RgbImage> {
    let first = images.first().ok_or_else(|| Error::Config("contact sheet needs images".into()))?;
    let [c, h, w] = <[usize; 3]>::try_from(first.shape())
        .map_err(|_| Error::Config(format!("expected [c, h, w] images, got {:?}", first.shape())))?;
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("{c} channels cannot be drawn")));
    }
    let cols = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (cw, ch) = (w + 1, h + 1);
    let mut sheet = RgbImage::from_pixel((cols * cw + 1) as u32, (rows * ch + 1) as u32, Rgb([32, 32, 32]));
    let to_byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (n, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::Config("contact sheet images differ in shape".into()));
        }
        let (x0, y0) = ((n % cols) * cw + 1, (n / cols) * ch + 1);
        let d = img.data();
        for y in 0..h {
            for x in 0..w {
                let px = |k: usize| to_byte(d[k * h * w + y * w + x]);
                let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
                sheet.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb(rgb));
            }
        }
    }
    Ok(sheet)
}

pub fn write_contact_sheet(path: &Path, images: &[Tensor], columns: usize) -> Result<()> {
    contact_sheet(images, columns)?.save(path)?;
    Ok(())
}
