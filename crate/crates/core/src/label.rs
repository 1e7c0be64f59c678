use ndarray::Array2;

use crate::error::{dim_err, invalid, Result};

/// Any per-cell quantity that an affinity can carry between frames: encoded
/// colors, class one-hots, keypoint heatmaps. Shape `K x N`, `N = height * width`,
/// cells in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Array2<f64>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Array2<f64>) -> Result<Self> {
        if values.ncols() != height * width {
            return dim_err(format!(
                "label map has {} cells, grid {height}x{width} needs {}",
                values.ncols(),
                height * width
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("label values must be finite");
        }
        Ok(Self { height, width, values })
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

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Per-cell argmax over channels, ties resolved toward the lower channel.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.cells())
            .map(|j| {
                let col = self.values.column(j);
                let mut best = 0;
                for (k, &v) in col.iter().enumerate() {
                    if v > col[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}
