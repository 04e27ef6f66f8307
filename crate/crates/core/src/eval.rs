//! Metrics, fold aggregation and attention-map export.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Bag;
use crate::error::{argument, Error, Result};

pub fn accuracy(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(argument(format!(
            "accuracy needs equal non-empty lengths, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mann–Whitney AUC from average ranks; tied scores share credit.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(argument("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(argument("NaN score"));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(3);
        write!(f, "{:.p$} ± {:.p$}", self.mean, self.std)
    }
}

pub fn aggregate_folds(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(argument("no folds to aggregate"));
    }
    let (mean, std) = mean_std(values);
    Ok(Aggregate { mean, std })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub accuracy: Vec<f64>,
    pub auc: Vec<f64>,
    pub accuracy_summary: Aggregate,
    pub auc_summary: Aggregate,
}

impl FoldMetrics {
    pub fn new(accuracy: Vec<f64>, auc: Vec<f64>) -> Result<Self> {
        Ok(Self {
            accuracy_summary: aggregate_folds(&accuracy)?,
            auc_summary: aggregate_folds(&auc)?,
            accuracy,
            auc,
        })
    }
}

/// Pixel extent of the image that produced a bag and the instance patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapLayout {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

pub fn attention_records(bag: &Bag, weights: &[f64]) -> Result<Vec<AttentionRecord>> {
    if weights.len() != bag.len() {
        return Err(argument(format!(
            "{} weights for a bag of {}",
            weights.len(),
            bag.len()
        )));
    }
    Ok(bag
        .instances
        .iter()
        .zip(weights)
        .map(|(p, &w)| AttentionRecord {
            row: p.origin.0,
            col: p.origin.1,
            weight: w,
        })
        .collect())
}

/// Single-channel heatmap in `[0, 1]`: each pixel takes the largest max-normalized
/// weight among the patches covering it.
pub fn render_heatmap(records: &[AttentionRecord], layout: &MapLayout) -> Result<Vec<f64>> {
    let max = records.iter().map(|r| r.weight).fold(0.0, f64::max);
    let mut raster = vec![0.0; layout.height * layout.width];
    for r in records {
        if r.row + layout.patch_size > layout.height || r.col + layout.patch_size > layout.width {
            return Err(argument(format!(
                "patch at ({}, {}) falls outside the {}×{} layout",
                r.row, r.col, layout.height, layout.width
            )));
        }
        let v = if max > 0.0 { r.weight / max } else { 0.0 };
        for y in r.row..r.row + layout.patch_size {
            for px in &mut raster[y * layout.width + r.col..y * layout.width + r.col + layout.patch_size] {
                *px = f64::max(*px, v);
            }
        }
    }
    Ok(raster)
}

pub fn write_attention_records(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    let mut s = String::from("row,col,weight\n");
    for r in records {
        s.push_str(&format!("{},{},{:?}\n", r.row, r.col, r.weight));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_attention_records(path: &Path) -> Result<Vec<AttentionRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("{}:{}: expected row,col,weight", path.display(), n + 1));
        let mut parts = line.split(',');
        let row = parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let col = parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let weight = parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        out.push(AttentionRecord { row, col, weight });
    }
    Ok(out)
}

/// Write `<stem>.png` (heatmap) and `<stem>.csv` (raw weights) into `dir`.
pub fn export_attention_map(
    bag: &Bag,
    weights: &[f64],
    layout: &MapLayout,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf)> {
    let records = attention_records(bag, weights)?;
    let raster = render_heatmap(&records, layout)?;
    fs::create_dir_all(dir)?;
    let png = dir.join(format!("{stem}.png"));
    let csv = dir.join(format!("{stem}.csv"));
    let bytes: Vec<u8> = raster.iter().map(|v| (v * 255.0).round() as u8).collect();
    image::save_buffer(
        &png,
        &bytes,
        layout.width as u32,
        layout.height as u32,
        image::ExtendedColorType::L8,
    )?;
    write_attention_records(&csv, &records)?;
    Ok((png, csv))
}

/// AUC of attention weights against the planted instance labels of one bag.
pub fn instance_recovery_score(attention: &[f64], instance_truth: &[bool]) -> Result<f64> {
    roc_auc(attention, instance_truth)
}
