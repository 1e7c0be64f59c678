//! Training objectives and their combination.
//!
//! Each loss has a forward function on plain values plus a gradient helper
//! used by [`crate::objective`]. L1 terms are mean-reduced over every pixel and
//! channel; the sparsity term is the mean entry of the negative block.

use ndarray::{Array2, Array3, Axis};

use crate::affinity::Affinity;
use crate::error::{dim_err, Result};
use crate::image::Image;

/// Per-cell `(x, y)` coordinates in grid units, row-major like [`crate::FeatureMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrid {
    height: usize,
    width: usize,
    coords: Vec<(f64, f64)>,
}

impl CoordinateGrid {
    pub fn new(height: usize, width: usize) -> Self {
        let coords = (0..height * width).map(|j| ((j % width) as f64, (j / width) as f64)).collect();
        Self { height, width, coords }
    }

    pub fn from_coords(coords: Vec<(f64, f64)>) -> Self {
        Self { height: 1, width: coords.len(), coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }
}

/// Which loss terms contribute to the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub intra: bool,
    pub inter: bool,
    pub sparse: bool,
    pub cycle: bool,
    pub concentration: bool,
}

impl LossSwitches {
    pub const ALL: LossSwitches = LossSwitches { intra: true, inter: true, sparse: true, cycle: true, concentration: true };

    /// Intra-video self-supervision and the two regularizers only.
    pub const INTRA_ONLY: LossSwitches = LossSwitches { intra: true, inter: false, sparse: false, cycle: true, concentration: true };

    pub fn without_inter(self) -> Self {
        Self { inter: false, sparse: false, ..self }
    }

    pub fn needs_inter(&self) -> bool {
        self.inter || self.sparse
    }
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self::ALL
    }
}

/// Raw component values before switching.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub self_loss: f64,
    pub intra_inter: f64,
    pub sparse: f64,
    pub cycle: f64,
    pub concentration: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub self_loss: f64,
    pub intra_inter_loss: f64,
    pub sparse_loss: f64,
    pub cycle_loss: f64,
    pub concentration_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.self_loss, self.intra_inter_loss, self.sparse_loss, self.cycle_loss, self.concentration_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// One structured log line.
    pub fn log_line(&self, step: u64, lr: f64, wall_seconds: f64) -> String {
        format!(
            "step={step} lr={lr:.6e} self={:.8} intra_inter={:.8} sparse={:.8} cycle={:.8} concentration={:.8} total={:.8} wall={wall_seconds:.3}",
            self.self_loss, self.intra_inter_loss, self.sparse_loss, self.cycle_loss, self.concentration_loss, self.total
        )
    }

    /// Parses a line written by [`LossReport::log_line`], returning the step too.
    pub fn parse_log_line(line: &str) -> Option<(u64, LossReport)> {
        let mut step = None;
        let mut r = LossReport::default();
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=')?;
            match k {
                "step" => step = v.parse().ok(),
                "self" => r.self_loss = v.parse().ok()?,
                "intra_inter" => r.intra_inter_loss = v.parse().ok()?,
                "sparse" => r.sparse_loss = v.parse().ok()?,
                "cycle" => r.cycle_loss = v.parse().ok()?,
                "concentration" => r.concentration_loss = v.parse().ok()?,
                "total" => r.total = v.parse().ok()?,
                _ => {}
            }
        }
        Some((step?, r))
    }
}

/// Unweighted sum of the enabled components; disabled ones are reported as 0.
pub fn loss_total(components: &LossComponents, switches: &LossSwitches) -> LossReport {
    let pick = |on: bool, v: f64| if on { v } else { 0.0 };
    let mut r = LossReport {
        self_loss: pick(switches.intra, components.self_loss),
        intra_inter_loss: pick(switches.inter, components.intra_inter),
        sparse_loss: pick(switches.sparse, components.sparse),
        cycle_loss: pick(switches.cycle, components.cycle),
        concentration_loss: pick(switches.concentration, components.concentration),
        total: 0.0,
    };
    r.total = r.self_loss + r.intra_inter_loss + r.sparse_loss + r.cycle_loss + r.concentration_loss;
    r
}

fn l1_mean(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// Gradient of `mean |a - b|` with respect to `a`.
pub(crate) fn l1_mean_grad(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let n = a.len() as f64;
    let mut g = a - b;
    g.mapv_inplace(|d| {
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    });
    g
}

/// Mean absolute difference between the transformed and the real target.
pub fn loss_self(transformed: &Image, target: &Image) -> Result<f64> {
    l1_mean(transformed.data(), target.data())
}

/// Mean absolute difference between the intra- and inter-video transformations.
pub fn loss_intra_inter(intra_transformed: &Image, inter_transformed: &Image) -> Result<f64> {
    l1_mean(intra_transformed.data(), inter_transformed.data())
}

/// Mean entry of the negative sub-affinity; zero for an empty block.
pub fn loss_sparse(negative: &Array2<f64>) -> f64 {
    if negative.is_empty() {
        0.0
    } else {
        negative.mean().unwrap_or(0.0)
    }
}

fn check_cycle_shapes(a_fwd: &Array2<f64>, a_bwd: &Array2<f64>) -> Result<()> {
    if a_fwd.nrows() != a_bwd.ncols() || a_fwd.ncols() != a_bwd.nrows() {
        return dim_err(format!(
            "cycle needs N1xN2 and N2xN1 affinities, got {:?} and {:?}",
            a_fwd.dim(),
            a_bwd.dim()
        ));
    }
    Ok(())
}

/// Round-trip deviation `mean((A_fwd A_bwd - I)^2)` over the `N1 x N1`
/// target-to-target composition.
pub fn loss_cycle_matrix(a_fwd: &Array2<f64>, a_bwd: &Array2<f64>) -> Result<f64> {
    check_cycle_shapes(a_fwd, a_bwd)?;
    let n1 = a_fwd.nrows();
    let mut p = a_fwd.dot(a_bwd);
    for i in 0..n1 {
        p[[i, i]] -= 1.0;
    }
    Ok(p.iter().map(|v| v * v).sum::<f64>() / (n1 * n1) as f64)
}

pub fn loss_cycle(a_fwd: &Affinity, a_bwd: &Affinity) -> Result<f64> {
    loss_cycle_matrix(a_fwd.values(), a_bwd.values())
}

/// Gradients of [`loss_cycle_matrix`] with respect to both affinities.
pub(crate) fn loss_cycle_grad(a_fwd: &Array2<f64>, a_bwd: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let n1 = a_fwd.nrows();
    let mut p = a_fwd.dot(a_bwd);
    for i in 0..n1 {
        p[[i, i]] -= 1.0;
    }
    let scale = 1.0 / (n1 * n1) as f64;
    let loss = p.iter().map(|v| v * v).sum::<f64>() * scale;
    let dp = p.mapv(|v| 2.0 * v * scale);
    (loss, dp.dot(&a_bwd.t()), a_fwd.t().dot(&dp))
}

fn check_coords(a: &Array2<f64>, coords: &CoordinateGrid) -> Result<()> {
    if a.ncols() != coords.len() {
        return dim_err(format!("{} coordinates for {} affinity columns", coords.len(), a.ncols()));
    }
    Ok(())
}

/// Mean over target cells of the spatial variance of each affinity row over
/// the reference coordinates.
pub fn loss_concentration_matrix(a: &Array2<f64>, coords: &CoordinateGrid) -> Result<f64> {
    check_coords(a, coords)?;
    let c = coords.coords();
    let mut total = 0.0;
    for row in a.axis_iter(Axis(0)) {
        let (mut mx, mut my) = (0.0, 0.0);
        for (&p, &(x, y)) in row.iter().zip(c) {
            mx += p * x;
            my += p * y;
        }
        let mut v = 0.0;
        for (&p, &(x, y)) in row.iter().zip(c) {
            v += p * ((x - mx).powi(2) + (y - my).powi(2));
        }
        total += v;
    }
    Ok(total / a.nrows() as f64)
}

pub fn loss_concentration(a: &Affinity, coords: &CoordinateGrid) -> Result<f64> {
    loss_concentration_matrix(a.values(), coords)
}

/// Gradient of [`loss_concentration_matrix`]: `d v_i / d A(i,j) = |c_j|^2 - 2 c_hat_i . c_j`.
pub(crate) fn loss_concentration_grad(a: &Array2<f64>, coords: &CoordinateGrid) -> (f64, Array2<f64>) {
    let c = coords.coords();
    let n1 = a.nrows() as f64;
    let sq: Vec<f64> = c.iter().map(|&(x, y)| x * x + y * y).collect();
    let mut grad = Array2::zeros(a.dim());
    let mut total = 0.0;
    for (i, row) in a.axis_iter(Axis(0)).enumerate() {
        let (mut mx, mut my, mut m2) = (0.0, 0.0, 0.0);
        for ((&p, &(x, y)), &s) in row.iter().zip(c).zip(&sq) {
            mx += p * x;
            my += p * y;
            m2 += p * s;
        }
        total += m2 - (mx * mx + my * my);
        for (j, (&(x, y), &s)) in c.iter().zip(&sq).enumerate() {
            grad[[i, j]] = (s - 2.0 * (mx * x + my * y)) / n1;
        }
    }
    (total / n1, grad)
}
