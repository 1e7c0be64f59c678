//! Recurrent label propagation through a video.
//!
//! Each target frame draws labels from the first frame (ground truth) and
//! from the `L` most recent predicted frames. Every reference contributes a
//! k-NN filtered, mutually weighted affinity; the transformed label maps are
//! averaged cell by cell.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;

use crate::affinity::{compute_affinity, compute_mutual_affinity, Affinity, FeatureMap};
use crate::backbone::Backbone;
use crate::dataset::Keypoint;
use crate::error::{dim_err, invalid, Error, Result};
use crate::image::Image;
pub use crate::label::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Mask,
    Keypoint,
}

impl FromStr for LabelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Self::Mask),
            "keypoint" => Ok(Self::Keypoint),
            other => Err(Error::Validation(format!("unknown task {other:?}, expected mask or keypoint"))),
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mask => "mask",
            Self::Keypoint => "keypoint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    /// Number of preceding predicted frames used as extra references.
    pub context: usize,
    pub k: usize,
    pub temperature: f64,
    pub kind: LabelKind,
    /// Use the mutually weighted affinity; plain softmax affinity otherwise.
    pub mutual: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { context: 7, k: 5, temperature: 0.05, kind: LabelKind::Mask, mutual: true }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return invalid("k must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return invalid("temperature must be positive");
        }
        Ok(())
    }
}

/// Keeps the `k` largest entries (ties to the lower index) and renormalizes.
pub fn knn_filter(row: &[f64], k: usize) -> Vec<f64> {
    if k >= row.len() {
        let s: f64 = row.iter().sum();
        return row.iter().map(|v| v / s).collect();
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; row.len()];
    let kept = &order[..k];
    let total: f64 = kept.iter().map(|&j| row[j]).sum();
    for &j in kept {
        out[j] = if total > 0.0 { row[j] / total } else { 1.0 / k as f64 };
    }
    out
}

/// Row-wise [`knn_filter`] of an affinity.
pub fn knn_filter_affinity(affinity: &Affinity, k: usize) -> Result<Affinity> {
    let mut values = affinity.values().clone();
    for mut row in values.outer_iter_mut() {
        let filtered = knn_filter(row.as_slice().expect("row-major affinity"), k);
        row.iter_mut().zip(filtered).for_each(|(d, v)| *d = v);
    }
    Affinity::from_matrix(values, affinity.kind(), affinity.target_grid())
}

/// Reference frame indices for target `t`: frame 0, then `t-L .. t-1`.
pub fn reference_frames(t: usize, context: usize) -> Vec<usize> {
    let mut refs = vec![0];
    let start = t.saturating_sub(context).max(1);
    refs.extend(start..t);
    refs
}

fn propagation_affinity(target: &FeatureMap, reference: &FeatureMap, cfg: &PropagationConfig) -> Result<Affinity> {
    let a = if cfg.mutual {
        compute_mutual_affinity(target, reference, cfg.temperature)?
    } else {
        compute_affinity(target, reference, cfg.temperature)?
    };
    knn_filter_affinity(&a, cfg.k)
}

/// Soft label maps for every frame; entry 0 is `first_labels` itself.
pub fn propagate_sequence(features: &[FeatureMap], first_labels: &LabelMap, cfg: &PropagationConfig) -> Result<Vec<LabelMap>> {
    cfg.validate()?;
    if features.is_empty() {
        return invalid("propagation needs at least one frame");
    }
    let grid = (features[0].height(), features[0].width());
    if (first_labels.height(), first_labels.width()) != grid {
        return dim_err(format!(
            "labels on a {}x{} grid, frame features on {}x{}",
            first_labels.height(),
            first_labels.width(),
            grid.0,
            grid.1
        ));
    }
    let normalized: Vec<FeatureMap> = features.iter().map(|f| f.normalized_with_norms().0).collect();
    let mut labels = vec![first_labels.clone()];
    for t in 1..normalized.len() {
        let refs = reference_frames(t, cfg.context);
        let preds: Vec<Array2<f64>> = refs
            .par_iter()
            .map(|&r| {
                let a = propagation_affinity(&normalized[t], &normalized[r], cfg)?;
                Ok(labels[r].values().dot(&a.values().t()))
            })
            .collect::<Result<_>>()?;
        let mut mean = Array2::zeros(preds[0].dim());
        for p in &preds {
            mean += p;
        }
        mean /= preds.len() as f64;
        labels.push(LabelMap::new(normalized[t].height(), normalized[t].width(), mean)?);
    }
    Ok(labels)
}

/// Feature maps of every frame in evaluation mode.
pub fn frame_features(backbone: &Backbone, frames: &[Image]) -> Result<Vec<FeatureMap>> {
    frames.par_iter().map(|f| backbone.forward(f)).collect()
}

fn check_mask_grid(h: usize, w: usize, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
        return invalid(format!("mask {w}x{h} not divisible by stride {stride}"));
    }
    Ok((h / stride, w / stride))
}

/// One-hot class map at feature resolution by per-cell majority vote (ties
/// to the lower class id).
pub fn mask_to_labels(mask: &Array2<u8>, stride: usize, class_count: usize) -> Result<LabelMap> {
    let (h, w) = mask.dim();
    let (gh, gw) = check_mask_grid(h, w, stride)?;
    if let Some(&bad) = mask.iter().find(|&&v| v as usize >= class_count) {
        return invalid(format!("class id {bad} out of range for {class_count} classes"));
    }
    let mut values = Array2::zeros((class_count, gh * gw));
    let mut counts = vec![0usize; class_count];
    for cy in 0..gh {
        for cx in 0..gw {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in cy * stride..(cy + 1) * stride {
                for x in cx * stride..(cx + 1) * stride {
                    counts[mask[[y, x]] as usize] += 1;
                }
            }
            let mut best = 0;
            for (k, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = k;
                }
            }
            values[[best, cy * gw + cx]] = 1.0;
        }
    }
    LabelMap::new(gh, gw, values)
}

/// Per-cell argmax upsampled to pixels by nearest neighbor.
pub fn labels_to_mask(labels: &LabelMap, stride: usize) -> Array2<u8> {
    let arg = labels.argmax();
    let gw = labels.width();
    Array2::from_shape_fn((labels.height() * stride, gw * stride), |(y, x)| arg[(y / stride) * gw + x / stride] as u8)
}

/// Propagates a first-frame class mask and returns one pixel mask per frame.
pub fn propagate_masks(features: &[FeatureMap], first_mask: &Array2<u8>, stride: usize, cfg: &PropagationConfig) -> Result<Vec<Array2<u8>>> {
    let classes = first_mask.iter().copied().max().unwrap_or(0) as usize + 1;
    let labels = mask_to_labels(first_mask, stride, classes)?;
    let soft = propagate_sequence(features, &labels, cfg)?;
    let mut out = vec![first_mask.clone()];
    out.extend(soft.iter().skip(1).map(|l| labels_to_mask(l, stride)));
    Ok(out)
}

/// Gaussian heatmap per keypoint (sigma of one cell) on the feature grid.
pub fn keypoints_to_heatmaps(keypoints: &[Keypoint], grid: (usize, usize), stride: usize) -> Result<LabelMap> {
    let (gh, gw) = grid;
    let s = stride as f64;
    for k in keypoints {
        if !(k.x >= 0.0 && k.y >= 0.0 && k.x <= (gw as f64) * s && k.y <= (gh as f64) * s) {
            return invalid(format!("keypoint {} at ({}, {}) lies outside the frame", k.id, k.x, k.y));
        }
    }
    let values = Array2::from_shape_fn((keypoints.len(), gh * gw), |(c, j)| {
        let (cx, cy) = (keypoints[c].x / s - 0.5, keypoints[c].y / s - 0.5);
        let dx = (j % gw) as f64 - cx;
        let dy = (j / gw) as f64 - cy;
        (-(dx * dx + dy * dy) / 2.0).exp()
    });
    LabelMap::new(gh, gw, values)
}

/// Argmax cell of each heatmap channel, mapped to the cell center in pixels.
pub fn heatmaps_to_keypoints(heatmaps: &LabelMap, ids: &[u32], stride: usize) -> Vec<Keypoint> {
    let gw = heatmaps.width();
    let s = stride as f64;
    heatmaps
        .values()
        .outer_iter()
        .zip(ids)
        .map(|(row, &id)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            Keypoint { id, x: ((best % gw) as f64 + 0.5) * s, y: ((best / gw) as f64 + 0.5) * s }
        })
        .collect()
}

/// Propagates first-frame keypoints; entry 0 holds the given keypoints.
pub fn propagate_keypoints(
    features: &[FeatureMap],
    keypoints: &[Keypoint],
    stride: usize,
    cfg: &PropagationConfig,
) -> Result<Vec<Vec<Keypoint>>> {
    if features.is_empty() {
        return invalid("propagation needs at least one frame");
    }
    let grid = (features[0].height(), features[0].width());
    let heat = keypoints_to_heatmaps(keypoints, grid, stride)?;
    let ids: Vec<u32> = keypoints.iter().map(|k| k.id).collect();
    let soft = propagate_sequence(features, &heat, cfg)?;
    let mut out = vec![keypoints.to_vec()];
    out.extend(soft.iter().skip(1).map(|l| heatmaps_to_keypoints(l, &ids, stride)));
    Ok(out)
}
