//! Labeled volumes and segmentation quality measures.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::voxel_index;

/// Per-voxel labels in `[0, c)`, depth-fastest like [`crate::features::Volume`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledVolume {
    dims: [usize; 3],
    c: usize,
    labels: Vec<u8>,
}

impl LabeledVolume {
    pub fn new(dims: [usize; 3], c: usize, labels: Vec<u8>) -> Result<Self> {
        if c == 0 || c > 256 {
            return Err(Error::InvalidDimension(format!("label count {c} outside 1..=256")));
        }
        let count: usize = dims.iter().product();
        if labels.len() != count || count == 0 {
            return Err(Error::InvalidDimension(format!(
                "label dims {dims:?} need {count} voxels, got {}",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= c) {
            return Err(Error::Domain(format!("voxel {i} has label {} >= {c}", labels[i])));
        }
        Ok(Self { dims, c, labels })
    }

    /// From `usize` labels, as produced by rounding.
    pub fn from_indices(dims: [usize; 3], c: usize, labels: &[usize]) -> Result<Self> {
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Domain(format!("label {l} >= {c}")));
        }
        Self::new(dims, c, labels.iter().map(|&l| l as u8).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, d: usize, a: usize, b: usize) -> u8 {
        self.labels[voxel_index(self.dims, d, a, b)]
    }

    /// Depth column at A-scan `a` of B-scan `b`; contiguous in the depth-fastest layout.
    pub fn column(&self, a: usize, b: usize) -> &[u8] {
        let start = voxel_index(self.dims, 0, a, b);
        &self.labels[start..start + self.dims[0]]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[u8]> {
        self.labels.chunks_exact(self.dims[0])
    }
}

fn check_pair(pred: &LabeledVolume, truth: &LabeledVolume) -> Result<()> {
    if pred.dims != truth.dims {
        return Err(Error::InvalidDimension(format!(
            "prediction dims {:?} differ from truth dims {:?}",
            pred.dims, truth.dims
        )));
    }
    if pred.c != truth.c {
        return Err(Error::InvalidDimension(format!(
            "prediction has {} labels, truth has {}",
            pred.c, truth.c
        )));
    }
    Ok(())
}

fn dice_counts(pred: &[u8], truth: &[u8], layer: u8) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == layer, t == layer) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// `2TP / (2TP + FP + FN)` for one layer; 1 when the layer is absent from both.
pub fn dice(pred: &LabeledVolume, truth: &LabeledVolume, layer: usize) -> Result<f64> {
    check_pair(pred, truth)?;
    if layer >= pred.c {
        return Err(Error::InvalidDimension(format!("layer {layer} >= {}", pred.c)));
    }
    Ok(dice_counts(&pred.labels, &truth.labels, layer as u8))
}

fn is_ordered_column(col: &[u8]) -> bool {
    col.windows(2).all(|w| w[0] <= w[1])
}

/// First depth index whose label exceeds `boundary`, if any.
fn boundary_position(col: &[u8], boundary: usize) -> Option<usize> {
    col.iter().position(|&l| l as usize > boundary)
}

/// Mean absolute boundary error over the columns where it is defined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaeResult {
    /// In voxels; `NaN` if no column qualified.
    pub mean: f64,
    pub std: f64,
    pub columns: usize,
    /// Columns skipped because either volume is unordered there.
    pub unordered: usize,
    /// Columns skipped because the boundary is missing in either volume.
    pub missing: usize,
}

/// Position error of boundary `boundary` (between layers `boundary` and `boundary + 1`),
/// located per column as the first depth whose label exceeds `boundary`.
pub fn mae(pred: &LabeledVolume, truth: &LabeledVolume, boundary: usize) -> Result<MaeResult> {
    check_pair(pred, truth)?;
    if boundary + 1 >= pred.c {
        return Err(Error::InvalidDimension(format!(
            "boundary {boundary} needs at least {} layers",
            boundary + 2
        )));
    }
    let mut errs = Vec::new();
    let (mut unordered, mut missing) = (0, 0);
    for (p, t) in pred.columns().zip(truth.columns()) {
        if !is_ordered_column(p) || !is_ordered_column(t) {
            unordered += 1;
            continue;
        }
        match (boundary_position(p, boundary), boundary_position(t, boundary)) {
            (Some(bp), Some(bt)) => errs.push(bp.abs_diff(bt) as f64),
            _ => missing += 1,
        }
    }
    let (mean, std) = mean_std(&errs);
    Ok(MaeResult {
        mean,
        std,
        columns: errs.len(),
        unordered,
        missing,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Depth-adjacent voxel pairs within a column whose deeper label is smaller.
pub fn count_order_violations(pred: &LabeledVolume) -> usize {
    pred.columns()
        .map(|col| col.windows(2).filter(|w| w[1] < w[0]).count())
        .sum()
}

/// Evaluation summary written as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_layer_dice: Vec<f64>,
    /// Spread of per-B-scan DICE around the volume value.
    #[serde(default)]
    pub per_layer_dice_std: Vec<f64>,
    /// `None` where no column qualified.
    pub per_boundary_mae: Vec<Option<f64>>,
    #[serde(default)]
    pub per_boundary_mae_std: Vec<Option<f64>>,
    pub violations: usize,
    #[serde(default)]
    pub excluded_columns: usize,
    pub runtime_s: f64,
    pub converged: bool,
}

impl MetricsReport {
    /// Scores `pred` against `truth`; `runtime_s` and `converged` describe the run that
    /// produced `pred`.
    pub fn evaluate(pred: &LabeledVolume, truth: &LabeledVolume, runtime_s: f64, converged: bool) -> Result<Self> {
        check_pair(pred, truth)?;
        let [n, na, nb] = pred.dims;
        let slice = n * na;
        let mut per_layer_dice = Vec::with_capacity(pred.c);
        let mut per_layer_dice_std = Vec::with_capacity(pred.c);
        for l in 0..pred.c {
            per_layer_dice.push(dice(pred, truth, l)?);
            let per_bscan: Vec<f64> = (0..nb)
                .map(|b| {
                    let r = b * slice..(b + 1) * slice;
                    dice_counts(&pred.labels[r.clone()], &truth.labels[r], l as u8)
                })
                .collect();
            per_layer_dice_std.push(mean_std(&per_bscan).1);
        }
        let mut per_boundary_mae = Vec::new();
        let mut per_boundary_mae_std = Vec::new();
        let mut excluded_columns = 0;
        for k in 0..pred.c.saturating_sub(1) {
            let m = mae(pred, truth, k)?;
            excluded_columns = excluded_columns.max(m.unordered + m.missing);
            per_boundary_mae.push((m.columns > 0).then_some(m.mean));
            per_boundary_mae_std.push((m.columns > 0).then_some(m.std));
        }
        Ok(Self {
            per_layer_dice,
            per_layer_dice_std,
            per_boundary_mae,
            per_boundary_mae_std,
            violations: count_order_violations(pred),
            excluded_columns,
            runtime_s,
            converged,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
