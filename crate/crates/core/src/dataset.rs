//! Dataset layout on disk: indexing, indexed-mask PNGs and keypoint files.
//!
//! Native layout: `<root>/<video>/frames/NNNNN.png` with optional
//! `masks/NNNNN.png` and `keypoints/NNNNN.txt`. A DAVIS-style layout with
//! `JPEGImages/<seq>/` and `Annotations/<seq>/` is also recognized.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEntry {
    pub name: String,
    pub frames: Vec<PathBuf>,
    /// One path per frame; missing annotation files are `None`.
    pub masks: Option<Vec<Option<PathBuf>>>,
    pub keypoints: Option<Vec<Option<PathBuf>>>,
    pub width: u32,
    pub height: u32,
}

impl VideoEntry {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load_frame(&self, t: usize) -> Result<Image> {
        Image::load(&self.frames[t])
    }

    pub fn load_frames(&self) -> Result<Vec<Image>> {
        (0..self.len()).map(|t| self.load_frame(t)).collect()
    }

    pub fn mask_path(&self, t: usize) -> Option<&Path> {
        self.masks.as_ref().and_then(|m| m[t].as_deref())
    }

    pub fn keypoint_path(&self, t: usize) -> Option<&Path> {
        self.keypoints.as_ref().and_then(|k| k[t].as_deref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub videos: Vec<VideoEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.name == name)
    }
}

fn sorted_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let ok = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
            .unwrap_or(false);
        if ok && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Pairs every frame with the annotation file sharing its stem.
fn match_annotations(frames: &[PathBuf], dir: &Path, exts: &[&str]) -> Result<Option<Vec<Option<PathBuf>>>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let files = sorted_files(dir, exts)?;
    Ok(Some(
        frames
            .iter()
            .map(|f| {
                let s = stem(f);
                files.iter().find(|a| stem(a) == s).cloned()
            })
            .collect(),
    ))
}

fn build_entry(
    name: String,
    frames: Vec<PathBuf>,
    masks: Option<Vec<Option<PathBuf>>>,
    keypoints: Option<Vec<Option<PathBuf>>>,
) -> Result<Option<VideoEntry>> {
    if frames.len() < 2 {
        log::warn!("skipping video {name}: {} frame(s), at least 2 required", frames.len());
        return Ok(None);
    }
    let (width, height) = image::image_dimensions(&frames[0])?;
    for f in &frames[1..] {
        let dims = image::image_dimensions(f)?;
        if dims != (width, height) {
            return Err(Error::Validation(format!(
                "video {name}: frame {} is {}x{}, expected {width}x{height}",
                f.display(),
                dims.0,
                dims.1
            )));
        }
    }
    Ok(Some(VideoEntry { name, frames, masks, keypoints, width, height }))
}

fn index_davis(root: &Path) -> Result<Vec<VideoEntry>> {
    let mut images = root.join("JPEGImages");
    let mut annotations = root.join("Annotations");
    // the official release nests sequences under a resolution folder
    if images.join("480p").is_dir() {
        images = images.join("480p");
        annotations = annotations.join("480p");
    }
    let mut videos = Vec::new();
    for seq in sorted_dirs(&images)? {
        let name = seq.file_name().unwrap().to_string_lossy().into_owned();
        let frames = sorted_files(&seq, &["jpg", "jpeg", "png"])?;
        let masks = match_annotations(&frames, &annotations.join(&name), &["png"])?;
        if let Some(v) = build_entry(name, frames, masks, None)? {
            videos.push(v);
        }
    }
    Ok(videos)
}

fn index_native(root: &Path) -> Result<Vec<VideoEntry>> {
    let mut videos = Vec::new();
    for dir in sorted_dirs(root)? {
        let frames_dir = dir.join("frames");
        if !frames_dir.is_dir() {
            continue;
        }
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let frames = sorted_files(&frames_dir, &["png", "jpg", "jpeg"])?;
        let masks = match_annotations(&frames, &dir.join("masks"), &["png"])?;
        let keypoints = match_annotations(&frames, &dir.join("keypoints"), &["txt"])?;
        if let Some(v) = build_entry(name, frames, masks, keypoints)? {
            videos.push(v);
        }
    }
    Ok(videos)
}

/// A single video from a directory of numbered frame images, with an
/// optional first-frame mask or keypoint file.
pub fn video_from_dir(dir: &Path, first_mask: Option<&Path>, first_keypoints: Option<&Path>) -> Result<VideoEntry> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("video directory {} does not exist", dir.display())));
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "video".into());
    let frames = sorted_files(dir, &["png", "jpg", "jpeg"])?;
    let first_only = |p: Option<&Path>| {
        p.map(|p| {
            let mut v = vec![None; frames.len()];
            if let Some(slot) = v.first_mut() {
                *slot = Some(p.to_path_buf());
            }
            v
        })
    };
    let (masks, keypoints) = (first_only(first_mask), first_only(first_keypoints));
    build_entry(name, frames, masks, keypoints)?
        .ok_or_else(|| Error::Validation(format!("video {} needs at least 2 frames", dir.display())))
}

/// Builds a sorted, validated index of every usable video below `root`.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} is not a directory", root.display())));
    }
    let videos = if root.join("JPEGImages").is_dir() { index_davis(root)? } else { index_native(root)? };
    if videos.is_empty() {
        return Err(Error::Config(format!("no usable videos under {}", root.display())));
    }
    Ok(DatasetIndex { root: root.to_path_buf(), videos })
}

/// Writes a single-channel 8-bit PNG whose values are class ids.
pub fn save_index_png(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([mask[[y as usize, x as usize]]]));
    img.save(path)?;
    Ok(())
}

/// Reads class ids from a grayscale or palette PNG. Palette images keep their
/// raw indices; RGB images map black to 0 and other colors to ids in order of
/// first appearance.
pub fn load_index_png(path: &Path) -> Result<Array2<u8>> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let stride = info.line_size;
    let unpack = |bits: usize| -> Array2<u8> {
        let per_byte = 8 / bits;
        let mask = ((1u16 << bits) - 1) as u8;
        Array2::from_shape_fn((h, w), |(y, x)| {
            let byte = data[y * stride + x / per_byte];
            let shift = 8 - bits * (x % per_byte + 1);
            (byte >> shift) & mask
        })
    };
    use png::{BitDepth, ColorType};
    match (info.color_type, info.bit_depth) {
        (ColorType::Indexed | ColorType::Grayscale, BitDepth::Eight) => {
            Ok(Array2::from_shape_fn((h, w), |(y, x)| data[y * stride + x]))
        }
        (ColorType::Indexed | ColorType::Grayscale, BitDepth::One) => Ok(unpack(1)),
        (ColorType::Indexed | ColorType::Grayscale, BitDepth::Two) => Ok(unpack(2)),
        (ColorType::Indexed | ColorType::Grayscale, BitDepth::Four) => Ok(unpack(4)),
        (ColorType::Rgb | ColorType::Rgba, BitDepth::Eight) => {
            let ch = if info.color_type == ColorType::Rgb { 3 } else { 4 };
            let mut palette: Vec<[u8; 3]> = Vec::new();
            let mut out = Array2::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let o = y * stride + x * ch;
                    let c = [data[o], data[o + 1], data[o + 2]];
                    if c == [0, 0, 0] {
                        continue;
                    }
                    let id = match palette.iter().position(|p| *p == c) {
                        Some(i) => i + 1,
                        None => {
                            palette.push(c);
                            palette.len()
                        }
                    };
                    if id > 255 {
                        return Err(Error::Format(format!("{}: more than 255 label colors", path.display())));
                    }
                    out[[y, x]] = id as u8;
                }
            }
            Ok(out)
        }
        (ct, bd) => Err(Error::Format(format!("{}: unsupported mask format {ct:?}/{bd:?}", path.display()))),
    }
}

/// One `id x y` line per keypoint.
pub fn write_keypoints(kps: &[Keypoint], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for k in kps {
        writeln!(w, "{} {:.4} {:.4}", k.id, k.x, k.y)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_keypoints(path: &Path) -> Result<Vec<Keypoint>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("{}:{}: expected `id x y`", path.display(), i + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        out.push(Keypoint {
            id: parts[0].parse().map_err(|_| bad())?,
            x: parts[1].parse().map_err(|_| bad())?,
            y: parts[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
