//! Affinity constructions between flattened feature maps and the linear label
//! transformation they drive.
//!
//! An affinity has one row per target cell and one column per reference cell.
//! Every row is a softmax over reference cells of the feature dot products, so
//! `transform_labels` turns reference labels into convex combinations at each
//! target cell.

use image::GrayImage;
use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{dim_err, invalid, Error, Result};
use crate::label::LabelMap;

/// Tolerance used when checking unit-norm columns and row sums.
pub const UNIT_TOLERANCE: f64 = 1e-5;

/// A `C x N` feature grid, column `j` holding spatial cell `j` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    values: Array2<f64>,
    normalized: bool,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, values: Array2<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.nrows() == 0 {
            return invalid("feature map needs positive channels, height and width");
        }
        if values.ncols() != height * width {
            return dim_err(format!(
                "feature map has {} columns, grid {height}x{width} needs {}",
                values.ncols(),
                height * width
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("feature values must be finite");
        }
        Ok(Self { height, width, values, normalized: false })
    }

    /// Columns rescaled to unit L2 norm. Zero columns are rejected.
    pub fn normalized(&self) -> Result<FeatureMap> {
        if self.normalized {
            return Ok(self.clone());
        }
        let mut values = self.values.clone();
        for (j, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if norm <= f64::EPSILON {
                return invalid(format!("cannot normalize zero feature column {j}"));
            }
            col.mapv_inplace(|v| v / norm);
        }
        Ok(Self { height: self.height, width: self.width, values, normalized: true })
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Unit-norm columns plus the original norms. Columns with a vanishing
    /// norm become the uniform unit vector and report a norm of zero, which
    /// [`normalize_backward`] treats as a dead cell.
    pub fn normalized_with_norms(&self) -> (FeatureMap, Vec<f64>) {
        let c = self.channels().max(1) as f64;
        let mut values = self.values.clone();
        let mut norms = Vec::with_capacity(self.cells());
        for mut col in values.axis_iter_mut(Axis(1)) {
            let norm = col.dot(&col).sqrt();
            if norm <= 1e-12 {
                col.fill(1.0 / c.sqrt());
                norms.push(0.0);
            } else {
                col.mapv_inplace(|v| v / norm);
                norms.push(norm);
            }
        }
        (Self { height: self.height, width: self.width, values, normalized: true }, norms)
    }
}

/// Gradient through column normalization: `(g - f_hat (f_hat . g)) / |f|`.
pub fn normalize_backward(normalized: &Array2<f64>, norms: &[f64], grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    for ((mut g, f), &n) in out.axis_iter_mut(Axis(1)).zip(normalized.axis_iter(Axis(1))).zip(norms) {
        if n == 0.0 {
            g.fill(0.0);
            continue;
        }
        let d = g.dot(&f);
        g.zip_mut_with(&f, |gv, &fv| *gv = (*gv - fv * d) / n);
    }
    out
}

/// Reference features of a whole batch concatenated along the spatial axis.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    maps: Vec<FeatureMap>,
    offsets: Vec<usize>,
    positive_index: usize,
    concatenated: Array2<f64>,
}

impl BatchFeatures {
    pub fn new(maps: Vec<FeatureMap>, positive_index: usize) -> Result<Self> {
        if maps.is_empty() {
            return invalid("batch needs at least one video");
        }
        if positive_index >= maps.len() {
            return invalid(format!(
                "positive index {positive_index} out of range for {} videos",
                maps.len()
            ));
        }
        let channels = maps[0].channels();
        if let Some(m) = maps.iter().find(|m| m.channels() != channels) {
            return dim_err(format!("batch mixes {} and {} channels", channels, m.channels()));
        }
        let mut offsets = Vec::with_capacity(maps.len() + 1);
        offsets.push(0);
        for m in &maps {
            offsets.push(offsets.last().unwrap() + m.cells());
        }
        let views: Vec<ArrayView2<f64>> = maps.iter().map(|m| m.values.view()).collect();
        let concatenated = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(Self { maps, offsets, positive_index, concatenated })
    }

    /// Same batch with a different positive block.
    pub fn with_positive(&self, positive_index: usize) -> Result<Self> {
        if positive_index >= self.maps.len() {
            return invalid(format!(
                "positive index {positive_index} out of range for {} videos",
                self.maps.len()
            ));
        }
        let mut out = self.clone();
        out.positive_index = positive_index;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn positive_index(&self) -> usize {
        self.positive_index
    }

    pub fn channels(&self) -> usize {
        self.maps[0].channels()
    }

    /// Column range of the positive block inside the concatenation.
    pub fn positive_range(&self) -> std::ops::Range<usize> {
        self.offsets[self.positive_index]..self.offsets[self.positive_index + 1]
    }

    /// Number of reference embeddings a single target embedding is contrasted
    /// against in one transformation direction.
    pub fn negative_count(&self) -> usize {
        let r = self.positive_range();
        self.offsets[self.maps.len()] - (r.end - r.start)
    }

    pub fn concatenated(&self) -> &Array2<f64> {
        &self.concatenated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityKind {
    Intra,
    Inter,
    Mutual,
}

/// Row-stochastic match probabilities, one row per target cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinity {
    values: Array2<f64>,
    kind: AffinityKind,
    target_grid: (usize, usize),
}

impl Affinity {
    /// Wraps an existing matrix after checking row-stochasticity.
    pub fn from_matrix(values: Array2<f64>, kind: AffinityKind, target_grid: (usize, usize)) -> Result<Self> {
        if values.nrows() != target_grid.0 * target_grid.1 {
            return dim_err(format!(
                "affinity has {} rows, target grid {:?} needs {}",
                values.nrows(),
                target_grid,
                target_grid.0 * target_grid.1
            ));
        }
        for (i, row) in values.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return invalid(format!("affinity row {i} has a negative or non-finite entry"));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > UNIT_TOLERANCE {
                return invalid(format!("affinity row {i} sums to {sum}"));
            }
        }
        Ok(Self { values, kind, target_grid })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn kind(&self) -> AffinityKind {
        self.kind
    }

    pub fn target_grid(&self) -> (usize, usize) {
        self.target_grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// 8-bit grayscale rendering, `rows x cols`, each row scaled by its own max.
    pub fn to_heatmap(&self) -> GrayImage {
        let mut img = GrayImage::new(self.cols() as u32, self.rows() as u32);
        for (i, row) in self.values.axis_iter(Axis(0)).enumerate() {
            let max = row.fold(0.0f64, |m, &v| m.max(v));
            for (j, &v) in row.iter().enumerate() {
                let q = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                img.put_pixel(j as u32, i as u32, image::Luma([q as u8]));
            }
        }
        img
    }
}

/// Positive and negative column blocks of an inter-video affinity.
#[derive(Debug, Clone, PartialEq)]
pub struct SubAffinityPair {
    pub positive: Array2<f64>,
    pub negative: Array2<f64>,
    target_grid: (usize, usize),
}

impl SubAffinityPair {
    pub fn target_grid(&self) -> (usize, usize) {
        self.target_grid
    }
}

/// Row softmax with per-row max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    Ok(())
}

fn check_channels(a: usize, b: usize) -> Result<()> {
    if a != b {
        return dim_err(format!("channel mismatch: target {a} vs reference {b}"));
    }
    Ok(())
}

/// Scaled dot products `f_t^T f_r / temperature`, shape `N1 x N2`.
pub fn similarity_logits(target: &Array2<f64>, reference: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut s = target.t().dot(reference);
    if temperature != 1.0 {
        s.mapv_inplace(|v| v / temperature);
    }
    s
}

/// Softmax of target-reference dot products over the reference cells.
pub fn compute_affinity(target: &FeatureMap, reference: &FeatureMap, temperature: f64) -> Result<Affinity> {
    check_temperature(temperature)?;
    check_channels(target.channels(), reference.channels())?;
    let logits = similarity_logits(&target.values, &reference.values, temperature);
    Ok(Affinity {
        values: softmax_rows(&logits),
        kind: AffinityKind::Intra,
        target_grid: (target.height, target.width),
    })
}

/// One softmax over the reference cells of every video in the batch, plus the
/// split into the positive block and the remaining (negative) blocks. The
/// negative part keeps batch order with the positive block removed.
pub fn compute_inter_affinity(
    target: &FeatureMap,
    batch: &BatchFeatures,
    temperature: f64,
) -> Result<(Affinity, SubAffinityPair)> {
    check_temperature(temperature)?;
    check_channels(target.channels(), batch.channels())?;
    let logits = similarity_logits(&target.values, batch.concatenated(), temperature);
    let values = softmax_rows(&logits);
    let sub = split_positive(&values, batch.positive_range());
    let grid = (target.height, target.width);
    Ok((
        Affinity { values, kind: AffinityKind::Inter, target_grid: grid },
        SubAffinityPair { positive: sub.0, negative: sub.1, target_grid: grid },
    ))
}

pub(crate) fn split_positive(values: &Array2<f64>, pos: std::ops::Range<usize>) -> (Array2<f64>, Array2<f64>) {
    let positive = values.slice(s![.., pos.clone()]).to_owned();
    let before = values.slice(s![.., ..pos.start]);
    let after = values.slice(s![.., pos.end..]);
    let negative = ndarray::concatenate(Axis(1), &[before, after]).expect("row counts agree");
    (positive, negative)
}

/// Positive block rescaled row-wise to sum to one. Because both the inter
/// and intra softmax share numerators, this reproduces the intra affinity of
/// the positive pair.
pub fn renormalize_positive(sub: &SubAffinityPair) -> Result<Affinity> {
    let mut values = sub.positive.clone();
    for (i, mut row) in values.axis_iter_mut(Axis(0)).enumerate() {
        let sum = row.sum();
        if !(sum > 0.0) {
            return Err(Error::DegenerateRow { row: i });
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(Affinity { values, kind: AffinityKind::Intra, target_grid: sub.target_grid })
}

/// Mutual correlation weights from a similarity matrix. Similarities are
/// clamped at zero; a row or column whose max is zero contributes a zero factor.
pub fn mutual_weights_from_similarity(similarity: &Array2<f64>) -> Array2<f64> {
    let s = similarity.mapv(|v| v.max(0.0));
    let row_max: Vec<f64> = s.axis_iter(Axis(0)).map(|r| r.fold(0.0f64, |m, &v| m.max(v))).collect();
    let col_max: Vec<f64> = s.axis_iter(Axis(1)).map(|c| c.fold(0.0f64, |m, &v| m.max(v))).collect();
    let mut w = s;
    for ((i, j), v) in w.indexed_iter_mut() {
        let over_col = if col_max[j] > 0.0 { *v / col_max[j] } else { 0.0 };
        let over_row = if row_max[i] > 0.0 { *v / row_max[i] } else { 0.0 };
        *v = over_col * over_row;
    }
    w
}

/// `w(i,j) = [s/max_i s] * [s/max_j s]` on unit-normalized features.
pub fn mutual_weights(target: &FeatureMap, reference: &FeatureMap) -> Result<Array2<f64>> {
    check_channels(target.channels(), reference.channels())?;
    if !target.normalized || !reference.normalized {
        return invalid("mutual weights need unit-normalized feature maps");
    }
    let s = target.values.t().dot(&reference.values);
    Ok(mutual_weights_from_similarity(&s))
}

/// Softmax of `w(i,j) * f_t(i)^T f_r(j) / temperature` for caller-supplied weights.
pub fn weighted_affinity(
    target: &FeatureMap,
    reference: &FeatureMap,
    weights: &Array2<f64>,
    temperature: f64,
) -> Result<Affinity> {
    check_temperature(temperature)?;
    check_channels(target.channels(), reference.channels())?;
    if weights.dim() != (target.cells(), reference.cells()) {
        return dim_err(format!(
            "weights {:?} do not match {}x{} affinity",
            weights.dim(),
            target.cells(),
            reference.cells()
        ));
    }
    let mut logits = similarity_logits(&target.values, &reference.values, temperature);
    logits.zip_mut_with(weights, |l, &w| *l *= w);
    Ok(Affinity {
        values: softmax_rows(&logits),
        kind: AffinityKind::Mutual,
        target_grid: (target.height, target.width),
    })
}

/// Mutually correlated affinity: the dot products are reweighted by
/// [`mutual_weights`] before the row softmax, suppressing one-sided matches.
pub fn compute_mutual_affinity(target: &FeatureMap, reference: &FeatureMap, temperature: f64) -> Result<Affinity> {
    let w = mutual_weights(target, reference)?;
    weighted_affinity(target, reference, &w, temperature)
}

/// `L_t = A L_r`: each target cell becomes the affinity-weighted mix of
/// reference labels. Labels are stored `K x N`, so this is `L_r A^T`.
pub fn transform_labels(affinity: &Affinity, labels: &LabelMap) -> Result<LabelMap> {
    if labels.cells() != affinity.cols() {
        return dim_err(format!(
            "labels have {} cells, affinity has {} reference columns",
            labels.cells(),
            affinity.cols()
        ));
    }
    let out = labels.values().dot(&affinity.values.t());
    LabelMap::new(affinity.target_grid.0, affinity.target_grid.1, out)
}
