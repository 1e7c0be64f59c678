//! Patch-level tracking: a reference patch is located in a later frame by
//! matching its feature cells against every cell of the frame.

use rand::Rng;

use crate::affinity::{similarity_logits, FeatureMap};
use crate::backbone::Backbone;
use crate::error::{invalid, dim_err, Error, Result};
use crate::image::Image;

/// Fraction of per-cell argmax matches retained for localization.
pub const KEEP_FRACTION: f64 = 0.2;
/// Minimum retained matches for a usable track.
pub const MIN_MATCHES: usize = 4;
pub const STEP_SCALE_RANGE: (f64, f64) = (0.7, 1.4);
pub const BOX_SCALE_RANGE: (f64, f64) = (0.5, 2.0);

/// A crop region in frame pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchBox {
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub height: f64,
    pub scale: f64,
}

impl PatchBox {
    pub fn new(center_x: f64, center_y: f64, width: f64, height: f64, scale: f64) -> Result<Self> {
        let vals = [center_x, center_y, width, height, scale];
        if vals.iter().any(|v| !v.is_finite()) || width <= 0.0 || height <= 0.0 || scale <= 0.0 {
            return invalid(format!("invalid patch box {vals:?}"));
        }
        Ok(Self { center_x, center_y, width, height, scale })
    }

    /// Box with top-left `(x0, y0)` and unit scale.
    pub fn from_top_left(x0: f64, y0: f64, width: f64, height: f64) -> Self {
        Self { center_x: x0 + width / 2.0, center_y: y0 + height / 2.0, width, height, scale: 1.0 }
    }

    pub fn left(&self) -> f64 {
        self.center_x - self.width / 2.0
    }

    pub fn top(&self) -> f64 {
        self.center_y - self.height / 2.0
    }

    /// Clamps the scale and moves/shrinks the box so it lies inside a
    /// `frame_width x frame_height` frame.
    pub fn clamped(&self, frame_width: usize, frame_height: usize) -> PatchBox {
        let (fw, fh) = (frame_width as f64, frame_height as f64);
        let scale = self.scale.clamp(BOX_SCALE_RANGE.0, BOX_SCALE_RANGE.1);
        let width = self.width.min(fw);
        let height = self.height.min(fh);
        let cx = self.center_x.clamp(width / 2.0, fw - width / 2.0);
        let cy = self.center_y.clamp(height / 2.0, fh - height / 2.0);
        PatchBox { center_x: cx, center_y: cy, width, height, scale }
    }

    pub fn inside(&self, frame_width: usize, frame_height: usize) -> bool {
        let eps = 1e-9;
        self.left() >= -eps
            && self.top() >= -eps
            && self.left() + self.width <= frame_width as f64 + eps
            && self.top() + self.height <= frame_height as f64 + eps
    }
}

/// A reference patch and its tracked counterpart, both resampled to the same size.
#[derive(Debug, Clone)]
pub struct TrackedPair {
    pub reference_patch: Image,
    pub target_patch: Image,
    pub reference_box: PatchBox,
    pub target_box: PatchBox,
    pub match_confidence: f64,
}

/// One retained correspondence, in feature-cell coordinates `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub patch: (f64, f64),
    pub frame: (f64, f64),
    pub similarity: f64,
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    pub target_box: PatchBox,
    pub confidence: f64,
    pub matches: Vec<Match>,
}

/// Uniformly random `patch_size` square fully inside the frame.
pub fn random_crop<R: Rng + ?Sized>(frame: &Image, patch_size: usize, rng: &mut R) -> Result<PatchBox> {
    if patch_size == 0 {
        return invalid("patch size must be positive");
    }
    if frame.width() < patch_size || frame.height() < patch_size {
        return invalid(format!(
            "frame {}x{} smaller than patch size {patch_size}",
            frame.width(),
            frame.height()
        ));
    }
    let x0 = rng.gen_range(0..=frame.width() - patch_size);
    let y0 = rng.gen_range(0..=frame.height() - patch_size);
    Ok(PatchBox::from_top_left(x0 as f64, y0 as f64, patch_size as f64, patch_size as f64))
}

fn coordinate_std(points: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let n = points.clone().count() as f64;
    let (mx, my) = points.clone().fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x / n, ay + y / n));
    let (vx, vy) = points.fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + (x - mx).powi(2) / n, ay + (y - my).powi(2) / n));
    (vx.sqrt() + vy.sqrt()) / 2.0
}

/// Spread ratio of frame to patch coordinates, clamped per step.
pub fn estimate_scale(matches: &[Match]) -> Result<f64> {
    if matches.len() < MIN_MATCHES {
        return Err(Error::TrackingFailure(format!(
            "scale estimation needs {MIN_MATCHES} matches, got {}",
            matches.len()
        )));
    }
    let sp = coordinate_std(matches.iter().map(|m| m.patch));
    if sp <= 1e-12 {
        return Ok(1.0);
    }
    let sf = coordinate_std(matches.iter().map(|m| m.frame));
    Ok((sf / sp).clamp(STEP_SCALE_RANGE.0, STEP_SCALE_RANGE.1))
}

/// Locates the patch described by `patch` inside `frame`.
///
/// Features are compared by cosine similarity. Each patch cell votes for its
/// best frame cell; the strongest votes are kept and the box center is the
/// similarity-weighted mean of the positions they imply for the patch center.
pub fn track_patch(patch: &FeatureMap, frame: &FeatureMap, stride: usize) -> Result<TrackResult> {
    if patch.channels() != frame.channels() {
        return dim_err(format!("patch has {} channels, frame {}", patch.channels(), frame.channels()));
    }
    if stride == 0 {
        return invalid("stride must be positive");
    }
    if frame.height() < patch.height() || frame.width() < patch.width() || frame.cells() <= patch.cells() {
        return invalid("target frame grid must be strictly larger than the patch grid");
    }
    let (p, _) = patch.normalized_with_norms();
    let (f, _) = frame.normalized_with_norms();
    let sim = similarity_logits(p.values(), f.values(), 1.0);
    let (lo, hi) = sim.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= 1e-9 {
        return Err(Error::TrackingFailure("features carry no discriminative signal".into()));
    }
    let mut best: Vec<Match> = sim
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            // ties resolve to the lowest frame index
            let (j, &s) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc });
            Match {
                patch: ((i % patch.width()) as f64, (i / patch.width()) as f64),
                frame: ((j % frame.width()) as f64, (j / frame.width()) as f64),
                similarity: (s - lo) / (hi - lo),
            }
        })
        .collect();
    let keep = (KEEP_FRACTION * best.len() as f64).ceil() as usize;
    if keep < MIN_MATCHES {
        return Err(Error::TrackingFailure(format!("only {keep} matches kept, need {MIN_MATCHES}")));
    }
    best.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    best.truncate(keep);
    let scale = estimate_scale(&best)?;
    let total: f64 = best.iter().map(|m| m.similarity).sum();
    let uniform = total <= 1e-12;
    let pcx = (patch.width() as f64 - 1.0) / 2.0;
    let pcy = (patch.height() as f64 - 1.0) / 2.0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for m in &best {
        let w = if uniform { 1.0 / best.len() as f64 } else { m.similarity / total };
        cx += w * (m.frame.0 - scale * (m.patch.0 - pcx));
        cy += w * (m.frame.1 - scale * (m.patch.1 - pcy));
    }
    let confidence = if uniform { 0.0 } else { total / best.len() as f64 };
    let s = stride as f64;
    let target_box = PatchBox {
        center_x: (cx + 0.5) * s,
        center_y: (cy + 0.5) * s,
        width: patch.width() as f64 * s * scale,
        height: patch.height() as f64 * s * scale,
        scale,
    }
    .clamped(frame.width() * stride, frame.height() * stride);
    Ok(TrackResult { target_box, confidence, matches: best })
}

/// Crops a reference patch from `reference`, tracks it into `target` with the
/// backbone's current features and resamples the tracked region to the same
/// size. When the frame is no larger than the patch, or tracking fails, the
/// reference box is reused.
pub fn make_pair<R: Rng + ?Sized>(
    backbone: &Backbone,
    reference: &Image,
    target: &Image,
    patch_size: usize,
    rng: &mut R,
) -> Result<TrackedPair> {
    if reference.height() != target.height() || reference.width() != target.width() {
        return dim_err("reference and target frames differ in size");
    }
    let reference_box = random_crop(reference, patch_size, rng)?;
    let reference_patch = reference.crop(reference_box.left() as usize, reference_box.top() as usize, patch_size, patch_size)?;
    let stride = backbone.stride();
    let frame_larger = target.width() > patch_size || target.height() > patch_size;
    let tracked = if frame_larger {
        let pf = backbone.forward(&reference_patch)?;
        let ff = backbone.forward(&crop_to_stride(target, stride)?)?;
        match track_patch(&pf, &ff, stride) {
            Ok(t) => Some(t),
            Err(Error::TrackingFailure(msg)) => {
                log::debug!("tracking failed, reusing reference box: {msg}");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let (target_box, match_confidence) = match tracked {
        Some(t) => (t.target_box, t.confidence),
        None => (reference_box, 0.0),
    };
    let target_patch = target.crop_resampled(
        target_box.center_x,
        target_box.center_y,
        target_box.width,
        target_box.height,
        patch_size,
        patch_size,
    );
    Ok(TrackedPair { reference_patch, target_patch, reference_box, target_box, match_confidence })
}

fn crop_to_stride(frame: &Image, stride: usize) -> Result<Image> {
    let w = frame.width() / stride * stride;
    let h = frame.height() / stride * stride;
    if w == frame.width() && h == frame.height() {
        return Ok(frame.clone());
    }
    frame.crop(0, 0, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn distinct_frame(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::new(h, w, Array2::from_shape_fn((c, h * w), |_| rng.gen_range(-1.0..1.0))).unwrap()
    }

    fn sub_grid(f: &FeatureMap, x0: usize, y0: usize, pw: usize, ph: usize) -> FeatureMap {
        let c = f.channels();
        let v = Array2::from_shape_fn((c, pw * ph), |(ch, i)| f.values()[[ch, (y0 + i / pw) * f.width() + x0 + i % pw]]);
        FeatureMap::new(ph, pw, v).unwrap()
    }

    #[test]
    fn random_crop_full_frame_and_determinism() {
        let frame = Image::constant(32, 32, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_crop(&frame, 32, &mut rng).unwrap();
        assert_eq!((b.center_x, b.center_y, b.width, b.scale), (16.0, 16.0, 32.0, 1.0));
        let a1 = random_crop(&Image::constant(64, 64, 0.0), 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let a2 = random_crop(&Image::constant(64, 64, 0.0), 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a1, a2);
        assert!(random_crop(&frame, 33, &mut rng).is_err());
    }

    #[test]
    fn random_crop_top_left_is_uniform() {
        let frame = Image::constant(512, 512, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..10_000 {
            let b = random_crop(&frame, 256, &mut rng).unwrap();
            assert!(b.inside(512, 512));
            sx += b.left();
            sy += b.top();
        }
        assert!((sx / 1e4 - 128.0).abs() < 5.0 && (sy / 1e4 - 128.0).abs() < 5.0);
    }

    #[test]
    fn planted_patch_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = distinct_frame(&mut rng, 12, 12, 8);
        let patch = sub_grid(&frame, 5, 3, 4, 4);
        let r = track_patch(&patch, &frame, 4).unwrap();
        // patch center in pixels: (5 + 2) * 4, (3 + 2) * 4
        assert!((r.target_box.center_x - 28.0).abs() <= 4.0, "{:?}", r.target_box);
        assert!((r.target_box.center_y - 20.0).abs() <= 4.0, "{:?}", r.target_box);
        assert!((r.target_box.scale - 1.0).abs() < 1e-9);
        assert!(r.confidence > 0.5 && r.confidence <= 1.0);
    }

    #[test]
    fn translation_displacement_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stride = 4;
        let reference = distinct_frame(&mut rng, 16, 16, 8);
        // content moved by (16, 8) pixels = (4, 2) cells
        let patch = sub_grid(&reference, 4, 4, 6, 6);
        let mut moved = Array2::from_shape_fn((8, 256), |_| rng.gen_range(-1.0..1.0));
        for y in 0..16usize {
            for x in 0..16usize {
                if x >= 4 && y >= 2 {
                    let src = (y - 2) * 16 + (x - 4);
                    for c in 0..8 {
                        moved[[c, y * 16 + x]] = reference.values()[[c, src]];
                    }
                }
            }
        }
        let target = FeatureMap::new(16, 16, moved).unwrap();
        let r = track_patch(&patch, &target, stride).unwrap();
        let dx = r.target_box.center_x - (4.0 + 3.0) * 4.0;
        let dy = r.target_box.center_y - (4.0 + 3.0) * 4.0;
        assert!((dx - 16.0).abs() <= 4.0 && (dy - 8.0).abs() <= 4.0, "({dx}, {dy})");
    }

    #[test]
    fn uniform_features_fail_or_have_low_confidence() {
        let frame = FeatureMap::new(8, 8, Array2::from_elem((4, 64), 0.3)).unwrap();
        let patch = FeatureMap::new(4, 4, Array2::from_elem((4, 16), 0.3)).unwrap();
        match track_patch(&patch, &frame, 4) {
            Err(Error::TrackingFailure(_)) => {}
            Ok(r) => assert!(r.confidence < 0.1),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn too_few_matches_is_a_failure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frame = distinct_frame(&mut rng, 6, 6, 4);
        let patch = sub_grid(&frame, 0, 0, 2, 2);
        assert!(matches!(track_patch(&patch, &frame, 4), Err(Error::TrackingFailure(_))));
    }

    fn similarity_matches(s: f64) -> Vec<Match> {
        let mut out = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                let p = (x as f64, y as f64);
                out.push(Match { patch: p, frame: (10.0 + s * p.0, 5.0 + s * p.1), similarity: 1.0 });
            }
        }
        out
    }

    #[test]
    fn scale_estimation() {
        assert!((estimate_scale(&similarity_matches(1.2)).unwrap() - 1.2).abs() < 1e-3);
        assert_eq!(estimate_scale(&similarity_matches(1.0)).unwrap(), 1.0);
        assert_eq!(estimate_scale(&similarity_matches(3.0)).unwrap(), 1.4);
        let same = vec![Match { patch: (1.0, 1.0), frame: (2.0, 3.0), similarity: 1.0 }; 5];
        assert_eq!(estimate_scale(&same).unwrap(), 1.0);
        assert!(estimate_scale(&same[..3]).is_err());
    }

    #[test]
    fn clamping_keeps_box_inside() {
        let b = PatchBox::new(-10.0, 70.0, 32.0, 80.0, 3.0).unwrap().clamped(64, 64);
        assert!(b.inside(64, 64));
        assert_eq!(b.scale, 2.0);
        assert!(PatchBox::new(0.0, 0.0, -1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn make_pair_shares_patch_size_and_is_deterministic() {
        let backbone = Backbone::new(crate::backbone::BackboneConfig { channels: 8, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Image::from_fn(48, 48, |_, _, _| rng.gen_range(0.0..1.0));
        let b = Image::from_fn(48, 48, |_, _, _| rng.gen_range(0.0..1.0));
        let p1 = make_pair(&backbone, &a, &b, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p2 = make_pair(&backbone, &a, &b, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p1.target_patch.data().dim(), p1.reference_patch.data().dim());
        assert_eq!(p1.target_box, p2.target_box);
        assert_eq!(p1.target_patch, p2.target_patch);
        assert!(p1.target_box.inside(48, 48));
        // frame equal to patch falls back to the full-frame box
        let full = make_pair(&backbone, &a, &b, 48, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(full.target_box, full.reference_box);
        assert_eq!(full.target_patch.data(), b.data());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn tracked_boxes_lie_inside_frame(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let frame = distinct_frame(&mut rng, 10, 10, 6);
                let patch = distinct_frame(&mut rng, 5, 5, 6);
                if let Ok(r) = track_patch(&patch, &frame, 4) {
                    prop_assert!(r.target_box.inside(40, 40));
                    prop_assert!(r.confidence >= 0.0 && r.confidence <= 1.0);
                }
            }

            #[test]
            fn planted_patches_are_translation_equivariant(seed in any::<u64>(), x0 in 0usize..6, y0 in 0usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let frame = distinct_frame(&mut rng, 10, 10, 8);
                let patch = sub_grid(&frame, x0, y0, 4, 4);
                let r = track_patch(&patch, &frame, 4).unwrap();
                let ex = (x0 as f64 + 2.0) * 4.0;
                let ey = (y0 as f64 + 2.0) * 4.0;
                prop_assert!((r.target_box.center_x - ex).abs() <= 4.0);
                prop_assert!((r.target_box.center_y - ey).abs() <= 4.0);
            }
        }
    }
}
