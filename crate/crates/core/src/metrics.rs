//! Evaluation metrics for reconstructions, property predictions and design
//! variability.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::VoxelGrid;

/// Fraction of voxels that agree between paired grids.
pub fn recon_accuracy(originals: &[VoxelGrid], reconstructions: &[VoxelGrid]) -> Result<f64> {
    if originals.len() != reconstructions.len() || originals.is_empty() {
        return Err(Error::shape(format!(
            "{} originals vs {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    let mut diff = 0.0;
    let mut total = 0usize;
    for (o, r) in originals.iter().zip(reconstructions) {
        if o.edge() != r.edge() {
            return Err(Error::shape(format!("edge {} vs {}", o.edge(), r.edge())));
        }
        diff += o.values().iter().zip(r.values()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        total += o.len();
    }
    Ok(1.0 - diff / total as f64)
}

/// Coefficient of determination, `1 - SSE/SST`.
pub fn r_squared(truth: &[f64], predictions: &[f64]) -> Result<f64> {
    if truth.len() != predictions.len() || truth.len() < 2 {
        return Err(Error::shape(format!("{} truths vs {} predictions", truth.len(), predictions.len())));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::ConstantTruth);
    }
    let sse: f64 = truth.iter().zip(predictions).map(|(t, p)| (t - p).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

/// Root-mean-square error over the given value range.
pub fn nrmse(truth: &[f64], predictions: &[f64], range_min: f64, range_max: f64) -> Result<f64> {
    if truth.len() != predictions.len() || truth.is_empty() {
        return Err(Error::shape(format!("{} truths vs {} predictions", truth.len(), predictions.len())));
    }
    if !(range_max > range_min) {
        return Err(Error::ZeroRange);
    }
    let mse = truth.iter().zip(predictions).map(|(t, p)| (t - p).powi(2)).sum::<f64>() / truth.len() as f64;
    Ok(mse.sqrt() / (range_max - range_min))
}

/// Mean over generated grids of the voxel mismatch relative to the solid
/// volume of the original.
pub fn relative_voxel_difference(original: &VoxelGrid, generated: &[VoxelGrid]) -> Result<f64> {
    let solid: f64 = original.values().iter().sum();
    if solid == 0.0 {
        return Err(Error::EmptyStructure);
    }
    if generated.is_empty() {
        return Err(Error::shape("no generated grids"));
    }
    let mut acc = 0.0;
    for g in generated {
        if g.edge() != original.edge() {
            return Err(Error::shape(format!("edge {} vs {}", g.edge(), original.edge())));
        }
        acc += original.values().iter().zip(g.values()).map(|(a, b)| (a - b).abs()).sum::<f64>() / solid;
    }
    Ok(acc / generated.len() as f64)
}

/// Sample standard deviation over the absolute mean, in percent.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InsufficientSamples(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::ZeroMean);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(100.0 * var.sqrt() / mean.abs())
}

/// One row of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub metric: String,
    pub property: String,
    pub value: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn new(split: &str, metric: &str, property: &str, value: f64, n: usize) -> Self {
        Self {
            split: split.into(),
            metric: metric.into(),
            property: property.into(),
            value,
            n,
        }
    }
}

/// R² and range-normalized RMSE rows for E and nu.
pub fn property_reports(split: &str, truth: &[[f64; 2]], predictions: &[[f64; 2]]) -> Result<Vec<MetricReport>> {
    let mut rows = Vec::new();
    for (p, name) in ["E", "nu"].into_iter().enumerate() {
        let t: Vec<f64> = truth.iter().map(|v| v[p]).collect();
        let y: Vec<f64> = predictions.iter().map(|v| v[p]).collect();
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        rows.push(MetricReport::new(split, "r2", name, r_squared(&t, &y)?, t.len()));
        rows.push(MetricReport::new(split, "nrmse", name, nrmse(&t, &y, lo, hi)?, t.len()));
    }
    Ok(rows)
}

/// Appends rows to an evaluation CSV, writing the header when the file is
/// new or empty.
pub fn append_reports(path: &Path, rows: &[MetricReport]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    if fresh && rows.is_empty() {
        w.write_record(["split", "metric", "property", "value", "n"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
