//! Dataset-level inference and evaluation: propagate first-frame annotations
//! through every video and score predictions against ground truth.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3};

use crate::backbone::Backbone;
use crate::dataset::{load_index_png, read_keypoints, save_index_png, write_keypoints, DatasetIndex, Keypoint, VideoEntry};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::metrics::{evaluate_keypoint_sequence, evaluate_semantic_sequence, evaluate_vos_sequence, MetricReport};
use crate::propagation::{frame_features, propagate_keypoints, propagate_masks, LabelKind, PropagationConfig};

/// Extends the image to multiples of `stride` by repeating edge pixels.
pub fn pad_to_stride(image: &Image, stride: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let d = image.data();
    Image::from_clamped(Array3::from_shape_fn((3, ph, pw), |(c, y, x)| d[[c, y.min(h - 1), x.min(w - 1)]]))
}

fn pad_mask(mask: &Array2<u8>, stride: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    Array2::from_shape_fn((ph, pw), |(y, x)| mask[[y.min(h - 1), x.min(w - 1)]])
}

fn frame_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn padded_features(backbone: &Backbone, entry: &VideoEntry) -> Result<Vec<crate::affinity::FeatureMap>> {
    let frames: Vec<Image> = entry.load_frames()?.iter().map(|f| pad_to_stride(f, backbone.stride())).collect();
    frame_features(backbone, &frames)
}

/// Propagates the first-frame mask of `entry` to every frame.
pub fn propagate_video_masks(backbone: &Backbone, entry: &VideoEntry, cfg: &PropagationConfig) -> Result<Vec<Array2<u8>>> {
    let first = entry
        .mask_path(0)
        .ok_or_else(|| Error::Validation(format!("{}: no mask for the first frame", entry.name)))?;
    let first = load_index_png(first)?;
    let (h, w) = (entry.height as usize, entry.width as usize);
    if first.dim() != (h, w) {
        return invalid(format!("{}: first mask is {:?}, frames are {h}x{w}", entry.name, first.dim()));
    }
    let features = padded_features(backbone, entry)?;
    let masks = propagate_masks(&features, &pad_mask(&first, backbone.stride()), backbone.stride(), cfg)?;
    Ok(masks.into_iter().map(|m| m.slice(s![..h, ..w]).to_owned()).collect())
}

/// Propagates the first-frame keypoints of `entry` to every frame.
pub fn propagate_video_keypoints(backbone: &Backbone, entry: &VideoEntry, cfg: &PropagationConfig) -> Result<Vec<Vec<Keypoint>>> {
    let first = entry
        .keypoint_path(0)
        .ok_or_else(|| Error::Validation(format!("{}: no keypoints for the first frame", entry.name)))?;
    let first = read_keypoints(first)?;
    let features = padded_features(backbone, entry)?;
    let (w, h) = (entry.width as f64, entry.height as f64);
    let mut out = propagate_keypoints(&features, &first, backbone.stride(), cfg)?;
    for frame in out.iter_mut().skip(1) {
        for k in frame.iter_mut() {
            k.x = k.x.min(w);
            k.y = k.y.min(h);
        }
    }
    Ok(out)
}

/// Writes predictions for every video (or for `only`, if given) under
/// `out/<video>/masks` or `out/<video>/keypoints`. Returns the videos written.
pub fn propagate_dataset(
    backbone: &Backbone,
    index: &DatasetIndex,
    cfg: &PropagationConfig,
    out: &Path,
    only: Option<&[String]>,
) -> Result<Vec<String>> {
    let mut written = Vec::new();
    for entry in &index.videos {
        if only.is_some_and(|o| !o.contains(&entry.name)) {
            continue;
        }
        let dir = out.join(&entry.name);
        match cfg.kind {
            LabelKind::Mask => {
                let masks = propagate_video_masks(backbone, entry, cfg)?;
                let dir = dir.join("masks");
                std::fs::create_dir_all(&dir)?;
                for (m, f) in masks.iter().zip(&entry.frames) {
                    save_index_png(m, &dir.join(format!("{}.png", frame_stem(f))))?;
                }
            }
            LabelKind::Keypoint => {
                let kps = propagate_video_keypoints(backbone, entry, cfg)?;
                let dir = dir.join("keypoints");
                std::fs::create_dir_all(&dir)?;
                for (k, f) in kps.iter().zip(&entry.frames) {
                    write_keypoints(k, &dir.join(format!("{}.txt", frame_stem(f))))?;
                }
            }
        }
        log::info!("propagated {}", entry.name);
        written.push(entry.name.clone());
    }
    if written.is_empty() {
        return invalid("no videos selected for propagation");
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    /// Per-object J and F on instance masks.
    Vos,
    /// PCK on keypoints.
    Keypoint,
    /// mIoU on class maps with the given class count.
    Semantic(usize),
}

impl FromStr for EvalTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vos" => Ok(Self::Vos),
            "keypoint" => Ok(Self::Keypoint),
            "semantic" => Ok(Self::Semantic(0)),
            other => Err(Error::Validation(format!("unknown task {other:?}, expected vos, keypoint or semantic"))),
        }
    }
}

impl EvalTask {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Vos => "vos",
            Self::Keypoint => "keypoint",
            Self::Semantic(_) => "semantic",
        }
    }
}

fn prediction_path(pred_root: &Path, video: &str, sub: &str, gt_file: &Path, ext: &str) -> PathBuf {
    pred_root.join(video).join(sub).join(format!("{}.{ext}", frame_stem(gt_file)))
}

/// Scores predictions under `pred_root` against every annotated video of `gt`.
/// Frames without ground truth are skipped; a missing prediction is an error.
pub fn evaluate_dataset(pred_root: &Path, gt: &DatasetIndex, task: EvalTask, only: Option<&[String]>) -> Result<MetricReport> {
    let mut sequences = Vec::new();
    for entry in &gt.videos {
        if only.is_some_and(|o| !o.contains(&entry.name)) {
            continue;
        }
        match task {
            EvalTask::Vos | EvalTask::Semantic(_) => {
                let Some(masks) = &entry.masks else { continue };
                if masks.first().is_none_or(|m| m.is_none()) {
                    continue;
                }
                let (mut p, mut g) = (Vec::new(), Vec::new());
                for gt_path in masks.iter().flatten() {
                    let pp = prediction_path(pred_root, &entry.name, "masks", gt_path, "png");
                    if !pp.exists() {
                        return invalid(format!("missing prediction {}", pp.display()));
                    }
                    p.push(load_index_png(&pp)?);
                    g.push(load_index_png(gt_path)?);
                }
                sequences.push(match task {
                    EvalTask::Semantic(classes) => evaluate_semantic_sequence(&entry.name, &p, &g, classes)?,
                    _ => evaluate_vos_sequence(&entry.name, &p, &g, None)?,
                });
            }
            EvalTask::Keypoint => {
                let Some(kps) = &entry.keypoints else { continue };
                if kps.first().is_none_or(|k| k.is_none()) {
                    continue;
                }
                let (mut p, mut g) = (Vec::new(), Vec::new());
                for gt_path in kps.iter().flatten() {
                    let pp = prediction_path(pred_root, &entry.name, "keypoints", gt_path, "txt");
                    if !pp.exists() {
                        return invalid(format!("missing prediction {}", pp.display()));
                    }
                    p.push(read_keypoints(&pp)?);
                    g.push(read_keypoints(gt_path)?);
                }
                let fallback = entry.width.max(entry.height) as f64;
                sequences.push(evaluate_keypoint_sequence(&entry.name, &p, &g, fallback)?);
            }
        }
    }
    if sequences.is_empty() {
        return invalid(format!("no annotated sequences to evaluate for task {}", task.name()));
    }
    Ok(MetricReport::from_sequences(task.name(), sequences))
}

/// Mean J of mask propagation over the given videos, without touching disk.
pub fn mean_region_similarity(backbone: &Backbone, videos: &[&VideoEntry], cfg: &PropagationConfig) -> Result<f64> {
    let mut sum = 0.0;
    for entry in videos {
        let pred = propagate_video_masks(backbone, entry, cfg)?;
        let gt: Vec<Array2<u8>> = (0..entry.len())
            .map(|t| {
                let p = entry.mask_path(t).ok_or_else(|| Error::Validation(format!("{}: frame {t} has no mask", entry.name)))?;
                load_index_png(p)
            })
            .collect::<Result<_>>()?;
        sum += evaluate_vos_sequence(&entry.name, &pred, &gt, None)?.metrics["J"];
    }
    Ok(if videos.is_empty() { 0.0 } else { sum / videos.len() as f64 })
}
