//! Region, contour, keypoint and semantic-segmentation metrics.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::Keypoint;
use crate::error::{dim_err, invalid, Result};

fn check_shapes<A, B>(a: &Array2<A>, b: &Array2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return dim_err(format!("mask shapes differ: {:?} vs {:?}", a.dim(), b.dim()));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with at least one in-bounds 4-neighbor of opposite value.
pub fn boundary(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if !mask[[y, x]] {
            return false;
        }
        let n = [
            (y > 0).then(|| mask[[y - 1, x]]),
            (y + 1 < h).then(|| mask[[y + 1, x]]),
            (x > 0).then(|| mask[[y, x - 1]]),
            (x + 1 < w).then(|| mask[[y, x + 1]]),
        ];
        n.contains(&Some(false))
    })
}

/// Boundary tolerance used when none is given: 0.8% of the diagonal, rounded up.
pub fn default_radius(height: usize, width: usize) -> f64 {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil()
}

/// Fraction of `points` that have a `targets` pixel within `radius`.
fn matched_fraction(points: &Array2<bool>, targets: &Array2<bool>, radius: f64) -> (usize, usize) {
    let (h, w) = points.dim();
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    let (mut hit, mut total) = (0, 0);
    for ((y, x), &p) in points.indexed_iter() {
        if !p {
            continue;
        }
        total += 1;
        let found = (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                yy >= 0
                    && xx >= 0
                    && (yy as usize) < h
                    && (xx as usize) < w
                    && ((dy * dy + dx * dx) as f64) <= r2
                    && targets[[yy as usize, xx as usize]]
            })
        });
        hit += found as usize;
    }
    (hit, total)
}

/// Contour F-measure with a pixel tolerance.
pub fn boundary_f(pred: &Array2<bool>, gt: &Array2<bool>, radius: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    if !(radius >= 0.0) {
        return invalid("boundary radius must be non-negative");
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (p_hit, p_total) = matched_fraction(&bp, &bg, radius);
    let (g_hit, g_total) = matched_fraction(&bg, &bp, radius);
    if p_total == 0 && g_total == 0 {
        return Ok(1.0);
    }
    if p_total == 0 || g_total == 0 {
        return Ok(0.0);
    }
    let precision = p_hit as f64 / p_total as f64;
    let recall = g_hit as f64 / g_total as f64;
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// Fraction of keypoints within `alpha * reference_scale` of ground truth.
pub fn pck(pred: &[(f64, f64)], gt: &[(f64, f64)], alpha: f64, reference_scale: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return dim_err(format!("{} predicted keypoints for {} ground-truth keypoints", pred.len(), gt.len()));
    }
    if !(reference_scale > 0.0) {
        return invalid("reference scale must be positive");
    }
    if gt.is_empty() {
        return Ok(1.0);
    }
    let thr = alpha * reference_scale;
    let hits = pred.iter().zip(gt).filter(|(p, g)| (p.0 - g.0).hypot(p.1 - g.1) <= thr).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Larger side of the ground-truth keypoints' bounding box.
pub fn keypoint_scale(gt: &[(f64, f64)]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in gt {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    (x1 - x0).max(y1 - y0)
}

/// Mean IoU over classes present in either map.
pub fn miou(pred: &Array2<u8>, gt: &Array2<u8>, class_count: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut inter = vec![0usize; class_count];
    let mut union = vec![0usize; class_count];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= class_count || g >= class_count {
            return invalid(format!("class id {} out of range for {class_count} classes", p.max(g)));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let ious: Vec<f64> = (0..class_count).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    Ok(if ious.is_empty() { 1.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub frames: usize,
    pub objects: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub sequences: Vec<SequenceReport>,
    pub mean: BTreeMap<String, f64>,
    pub frames_evaluated: usize,
    pub objects_evaluated: usize,
}

impl MetricReport {
    /// Averages every metric over sequences.
    pub fn from_sequences(task: &str, sequences: Vec<SequenceReport>) -> Self {
        let mut mean = BTreeMap::new();
        if let Some(first) = sequences.first() {
            for key in first.metrics.keys() {
                let vals: Vec<f64> = sequences.iter().filter_map(|s| s.metrics.get(key)).copied().collect();
                mean.insert(key.clone(), vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Self {
            task: task.to_string(),
            frames_evaluated: sequences.iter().map(|s| s.frames).sum(),
            objects_evaluated: sequences.iter().map(|s| s.objects).sum(),
            sequences,
            mean,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| crate::Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Per-object J and F over frames `1..`, the first frame being given.
pub fn evaluate_vos_sequence(name: &str, pred: &[Array2<u8>], gt: &[Array2<u8>], radius: Option<f64>) -> Result<SequenceReport> {
    if pred.len() != gt.len() {
        return dim_err(format!("{name}: {} predicted frames for {} ground-truth frames", pred.len(), gt.len()));
    }
    let mut ids: Vec<u8> = gt.first().map(|m| m.iter().copied().filter(|&v| v != 0).collect()).unwrap_or_default();
    ids.sort_unstable();
    ids.dedup();
    let (mut js, mut fs) = (Vec::new(), Vec::new());
    for (p, g) in pred.iter().zip(gt).skip(1) {
        check_shapes(p, g)?;
        let r = radius.unwrap_or_else(|| default_radius(g.nrows(), g.ncols()));
        for &id in &ids {
            let pm = p.mapv(|v| v == id);
            let gm = g.mapv(|v| v == id);
            js.push(jaccard(&pm, &gm)?);
            fs.push(boundary_f(&pm, &gm, r)?);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 1.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mut metrics = BTreeMap::new();
    metrics.insert("J".to_string(), mean(&js));
    metrics.insert("F".to_string(), mean(&fs));
    metrics.insert("JF".to_string(), (mean(&js) + mean(&fs)) / 2.0);
    Ok(SequenceReport { name: name.to_string(), frames: pred.len().saturating_sub(1), objects: ids.len(), metrics })
}

/// PCK at 0.1 and 0.2 over frames `1..`, matching keypoints by id. The
/// threshold scale is the ground-truth keypoint box; when that box is under
/// one pixel (a single keypoint), `fallback_scale` is used instead.
pub fn evaluate_keypoint_sequence(
    name: &str,
    pred: &[Vec<Keypoint>],
    gt: &[Vec<Keypoint>],
    fallback_scale: f64,
) -> Result<SequenceReport> {
    if pred.len() != gt.len() {
        return dim_err(format!("{name}: {} predicted frames for {} ground-truth frames", pred.len(), gt.len()));
    }
    let (mut p1, mut p2) = (Vec::new(), Vec::new());
    for (p, g) in pred.iter().zip(gt).skip(1) {
        let gpts: Vec<(f64, f64)> = g.iter().map(|k| (k.x, k.y)).collect();
        let mut ppts = Vec::with_capacity(g.len());
        for k in g {
            let m = p
                .iter()
                .find(|q| q.id == k.id)
                .ok_or_else(|| crate::Error::Dimension(format!("{name}: keypoint {} missing from prediction", k.id)))?;
            ppts.push((m.x, m.y));
        }
        let box_scale = keypoint_scale(&gpts);
        let scale = if box_scale >= 1.0 { box_scale } else { fallback_scale };
        p1.push(pck(&ppts, &gpts, 0.1, scale)?);
        p2.push(pck(&ppts, &gpts, 0.2, scale)?);
    }
    let mean = |v: &[f64]| if v.is_empty() { 1.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mut metrics = BTreeMap::new();
    metrics.insert("PCK@0.1".to_string(), mean(&p1));
    metrics.insert("PCK@0.2".to_string(), mean(&p2));
    Ok(SequenceReport {
        name: name.to_string(),
        frames: pred.len().saturating_sub(1),
        objects: gt.first().map(|g| g.len()).unwrap_or(0),
        metrics,
    })
}

/// Mean per-frame mIoU over frames `1..`.
pub fn evaluate_semantic_sequence(name: &str, pred: &[Array2<u8>], gt: &[Array2<u8>], class_count: usize) -> Result<SequenceReport> {
    if pred.len() != gt.len() {
        return dim_err(format!("{name}: {} predicted frames for {} ground-truth frames", pred.len(), gt.len()));
    }
    let mut vals = Vec::new();
    for (p, g) in pred.iter().zip(gt).skip(1) {
        vals.push(miou(p, g, class_count)?);
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("mIoU".to_string(), if vals.is_empty() { 1.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 });
    Ok(SequenceReport { name: name.to_string(), frames: vals.len(), objects: class_count, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(y, x)| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
    }

    #[test]
    fn jaccard_examples() {
        let a = square(6, 6, 1, 1, 3);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &square(6, 6, 4, 4, 2)).unwrap(), 0.0);
        let p = array![[true, true], [false, false]];
        let g = array![[false, true], [true, false]];
        assert!((jaccard(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = Array2::from_elem((3, 3), false);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert!(jaccard(&e, &Array2::from_elem((2, 3), false)).is_err());
    }

    #[test]
    fn boundary_f_examples() {
        let a = square(10, 10, 2, 2, 5);
        assert_eq!(boundary_f(&a, &a, 1.0).unwrap(), 1.0);
        assert_eq!(boundary_f(&square(20, 20, 0, 0, 3), &square(20, 20, 14, 14, 3), 2.0).unwrap(), 0.0);
        // single-pixel squares one pixel apart
        assert_eq!(boundary_f(&square(5, 5, 2, 2, 1), &square(5, 5, 2, 3, 1), 1.0).unwrap(), 1.0);
        assert_eq!(boundary_f(&square(5, 5, 2, 2, 1), &square(5, 5, 2, 3, 1), 0.0).unwrap(), 0.0);
        let e = Array2::from_elem((4, 4), false);
        assert_eq!(boundary_f(&e, &e, 1.0).unwrap(), 1.0);
        assert_eq!(boundary_f(&e, &a.slice(ndarray::s![..4, ..4]).to_owned(), 1.0).unwrap(), 0.0);
        assert_eq!(default_radius(480, 854), 8.0);
        assert_eq!(default_radius(64, 64), 1.0);
    }

    #[test]
    fn boundary_is_inner_contour() {
        let b = boundary(&square(5, 5, 1, 1, 3));
        assert_eq!(b.iter().filter(|&&v| v).count(), 8);
        assert!(!b[[2, 2]]);
        // a full frame has no boundary since out-of-bounds neighbors are ignored
        assert_eq!(boundary(&Array2::from_elem((3, 3), true)).iter().filter(|&&v| v).count(), 0);
    }

    #[test]
    fn pck_examples() {
        let gt: Vec<(f64, f64)> = (0..15).map(|i| (i as f64 * 10.0, 0.0)).collect();
        assert_eq!(pck(&gt, &gt, 0.1, 100.0).unwrap(), 1.0);
        let far: Vec<(f64, f64)> = gt.iter().map(|p| (p.0, p.1 + 50.0)).collect();
        assert_eq!(pck(&far, &gt, 0.1, 100.0).unwrap(), 0.0);
        let mut mixed = far.clone();
        mixed[..3].copy_from_slice(&gt[..3]);
        assert!((pck(&mixed, &gt, 0.1, 100.0).unwrap() - 0.2).abs() < 1e-15);
        assert!(pck(&gt[..2], &gt, 0.1, 1.0).is_err());
        assert_eq!(keypoint_scale(&[(0.0, 0.0), (4.0, 10.0)]), 10.0);
    }

    #[test]
    fn miou_examples() {
        let a = array![[0u8, 1], [1, 0]];
        assert_eq!(miou(&a, &a, 2).unwrap(), 1.0);
        assert_eq!(miou(&a, &a.mapv(|v| 1 - v), 2).unwrap(), 0.0);
        // 4 agree on 1, 1 agrees on 0, 4 disagree: class 1 is 4/8, class 0 is 1/5
        let gt = array![[1u8, 1, 1], [1, 1, 0], [0, 1, 0]];
        let pred = array![[1u8, 1, 1], [1, 0, 1], [1, 0, 0]];
        let v = miou(&pred, &gt, 2).unwrap();
        assert!((v - 0.35).abs() < 1e-12, "{v}");
        assert!(miou(&a, &a, 1).is_err());
    }

    #[test]
    fn report_round_trips_as_json() {
        let gt = vec![array![[0u8, 1], [1, 1]]; 3];
        let s = evaluate_vos_sequence("a", &gt, &gt, None).unwrap();
        assert_eq!(s.metrics["J"], 1.0);
        let r = MetricReport::from_sequences("vos", vec![s.clone(), SequenceReport { name: "b".into(), ..s }]);
        assert_eq!(r.frames_evaluated, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        r.save(&p).unwrap();
        assert_eq!(MetricReport::load(&p).unwrap(), r);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mask() -> impl Strategy<Value = Array2<bool>> {
            proptest::collection::vec(any::<bool>(), 36).prop_map(|v| Array2::from_shape_vec((6, 6), v).unwrap())
        }

        proptest! {
            #[test]
            fn symmetric(a in mask(), b in mask()) {
                prop_assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
                prop_assert_eq!(boundary_f(&a, &b, 1.0).unwrap(), boundary_f(&b, &a, 1.0).unwrap());
                let f = boundary_f(&a, &b, 1.0).unwrap();
                prop_assert!((0.0..=1.0).contains(&f));
            }

            #[test]
            fn correct_pixel_never_lowers_j(a in mask(), b in mask(), idx in 0usize..36) {
                let (y, x) = (idx / 6, idx % 6);
                if b[[y, x]] {
                    let mut a2 = a.clone();
                    a2[[y, x]] = true;
                    prop_assert!(jaccard(&a2, &b).unwrap() >= jaccard(&a, &b).unwrap());
                }
            }

            #[test]
            fn pck_monotone_in_alpha(pts in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 0.0f64..50.0, 0.0f64..50.0), 1..15), a1 in 0.0f64..1.0, a2 in 0.0f64..1.0) {
                let pred: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1)).collect();
                let gt: Vec<(f64, f64)> = pts.iter().map(|p| (p.2, p.3)).collect();
                let (lo, hi) = (a1.min(a2), a1.max(a2));
                prop_assert!(pck(&pred, &gt, lo, 40.0).unwrap() <= pck(&pred, &gt, hi, 40.0).unwrap());
            }
        }
    }
}
