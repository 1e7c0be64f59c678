//! The full per-batch training objective with analytic gradients with respect
//! to every reference and target feature map.
//!
//! For each video the intra affinity is built in both directions (`r -> t` and
//! `t -> r`). With more than one video, the inter affinity of each direction
//! uses the same-role features of every video in the batch as keys, so the
//! other videos act as negatives. Per-video losses are averaged over the two
//! directions and then over the batch.

use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::affinity::{similarity_logits, softmax_rows, FeatureMap};
use crate::codec::{EncodedFrame, TransformCodec};
use crate::error::{dim_err, invalid, Error, Result};
use crate::image::Image;
use crate::losses::{
    l1_mean_grad, loss_concentration_grad, loss_cycle_grad, loss_sparse, loss_total, CoordinateGrid,
    LossComponents, LossReport, LossSwitches,
};

/// Images and their encodings for one tracked pair.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub reference_image: Image,
    pub target_image: Image,
    pub reference_encoded: EncodedFrame,
    pub target_encoded: EncodedFrame,
}

impl PairSample {
    pub fn new(codec: &TransformCodec, reference_image: Image, target_image: Image) -> Result<Self> {
        let reference_encoded = codec.encode(&reference_image)?;
        let target_encoded = codec.encode(&target_image)?;
        Ok(Self { reference_image, target_image, reference_encoded, target_encoded })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub temperature: f64,
    pub switches: LossSwitches,
}

/// Gradient of the batch total with respect to one video's two feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGradients {
    pub reference: Array2<f64>,
    pub target: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub report: LossReport,
    pub components: LossComponents,
    pub gradients: Vec<FeatureGradients>,
}

struct Role<'a> {
    features: Vec<&'a Array2<f64>>,
    keys: Array2<f64>,
    encoded: Vec<&'a EncodedFrame>,
    encoded_keys: Array2<f64>,
    offsets: Vec<usize>,
}

impl<'a> Role<'a> {
    fn new(features: Vec<&'a Array2<f64>>, encoded: Vec<&'a EncodedFrame>) -> Result<Self> {
        let mut offsets = vec![0];
        for f in &features {
            offsets.push(offsets.last().unwrap() + f.ncols());
        }
        let views: Vec<ArrayView2<f64>> = features.iter().map(|f| f.view()).collect();
        let keys = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Dimension(e.to_string()))?;
        let views: Vec<ArrayView2<f64>> = encoded.iter().map(|e| e.values.view()).collect();
        let encoded_keys = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(Self { features, keys, encoded, encoded_keys, offsets })
    }

    fn block(&self, b: usize) -> Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }
}

#[derive(Default)]
struct DirectionLosses {
    self_loss: f64,
    intra_inter: f64,
    sparse: f64,
    concentration: f64,
}

struct DirectionPass {
    affinity: Array2<f64>,
    affinity_grad: Array2<f64>,
    inter: Option<(Array2<f64>, Array2<f64>)>,
    losses: DirectionLosses,
}

/// `dS = A * (dA - rowsum(dA * A))` for a row softmax.
pub(crate) fn softmax_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut ds = da.clone();
    for (mut drow, arow) in ds.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
        let inner: f64 = drow.iter().zip(arow.iter()).map(|(d, a)| d * a).sum();
        drow.zip_mut_with(&arow, |d, &p| *d = p * (*d - inner));
    }
    ds
}

struct Context<'a> {
    codec: &'a TransformCodec,
    settings: ObjectiveSettings,
    weight: f64,
    batch: usize,
}

impl Context<'_> {
    fn transform(&self, encoded_keys: &Array2<f64>, affinity: &Array2<f64>, grid: (usize, usize)) -> EncodedFrame {
        EncodedFrame {
            height: grid.0,
            width: grid.1,
            values: encoded_keys.dot(&affinity.t()),
            codec_id: self.codec.id(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        query: &Array2<f64>,
        grid: (usize, usize),
        own_keys: &Array2<f64>,
        own_encoded: &EncodedFrame,
        role: &Role,
        block: Range<usize>,
        key_coords: &CoordinateGrid,
        target: &Image,
    ) -> Result<DirectionPass> {
        let sw = self.settings.switches;
        let w = self.weight;
        let tau = self.settings.temperature;
        let mut losses = DirectionLosses::default();

        let affinity = softmax_rows(&similarity_logits(query, own_keys, tau));
        let transformed = self.transform(&own_encoded.values, &affinity, grid);
        let raw = self.codec.decode_unclamped(&transformed)?;
        let img = raw.mapv(|v| v.clamp(0.0, 1.0));
        let n_pix = img.len() as f64;
        losses.self_loss = img.iter().zip(target.data().iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n_pix;
        let mut img_grad = if sw.intra {
            l1_mean_grad(&img, target.data()).mapv(|g| g * w)
        } else {
            Array3::zeros(img.dim())
        };

        let mut inter = None;
        if sw.needs_inter() && self.batch > 1 {
            let inter_aff = softmax_rows(&similarity_logits(query, &role.keys, tau));
            let inter_trans = self.transform(&role.encoded_keys, &inter_aff, grid);
            let inter_img = self.codec.decode_unclamped(&inter_trans)?.mapv(|v| v.clamp(0.0, 1.0));
            losses.intra_inter =
                img.iter().zip(inter_img.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n_pix;
            let mut inter_grad = Array2::zeros(inter_aff.dim());
            if sw.inter {
                let g = l1_mean_grad(&img, &inter_img);
                img_grad.scaled_add(w, &g);
                let inter_img_grad = g.mapv(|v| -v * w);
                let d_trans = self.codec.decode_vjp(&inter_trans, &inter_img_grad)?;
                inter_grad += &d_trans.t().dot(&role.encoded_keys);
            }
            let negative_cols = role.keys.ncols() - block.len();
            let pos_mass: f64 = inter_aff.slice(s![.., block.clone()]).sum();
            losses.sparse = (inter_aff.nrows() as f64 - pos_mass) / (inter_aff.nrows() * negative_cols) as f64;
            if sw.sparse {
                let g = w / (inter_aff.nrows() * negative_cols) as f64;
                for (j, mut col) in inter_grad.axis_iter_mut(Axis(1)).enumerate() {
                    if !block.contains(&j) {
                        col.mapv_inplace(|v| v + g);
                    }
                }
            }
            inter = Some((inter_aff, inter_grad));
        }

        let d_trans = self.codec.decode_vjp(&transformed, &img_grad)?;
        let mut affinity_grad = d_trans.t().dot(&own_encoded.values);
        let (conc, conc_grad) = loss_concentration_grad(&affinity, key_coords);
        losses.concentration = conc;
        if sw.concentration {
            affinity_grad.scaled_add(w, &conc_grad);
        }
        Ok(DirectionPass { affinity, affinity_grad, inter, losses })
    }
}

fn check_inputs(samples: &[PairSample], reference: &[FeatureMap], target: &[FeatureMap]) -> Result<()> {
    if samples.is_empty() {
        return invalid("objective needs at least one pair");
    }
    if reference.len() != samples.len() || target.len() != samples.len() {
        return dim_err("feature and sample counts differ");
    }
    let c = reference[0].channels();
    let grid = (reference[0].height(), reference[0].width());
    for (r, t) in reference.iter().zip(target) {
        for f in [r, t] {
            if f.channels() != c || (f.height(), f.width()) != grid {
                return dim_err("all feature maps in a batch must share channels and grid");
            }
        }
    }
    for s in samples {
        for e in [&s.reference_encoded, &s.target_encoded] {
            if (e.height, e.width) != grid {
                return dim_err(format!(
                    "encoded grid {}x{} differs from feature grid {}x{}",
                    e.height, e.width, grid.0, grid.1
                ));
            }
        }
    }
    Ok(())
}

/// Evaluates every enabled loss over the batch and returns the gradient of
/// the total with respect to each feature map.
pub fn batch_objective(
    samples: &[PairSample],
    reference: &[FeatureMap],
    target: &[FeatureMap],
    codec: &TransformCodec,
    settings: ObjectiveSettings,
) -> Result<ObjectiveOutput> {
    check_inputs(samples, reference, target)?;
    if !(settings.temperature > 0.0) {
        return invalid("temperature must be positive");
    }
    let n = samples.len();
    let grid = (reference[0].height(), reference[0].width());
    let coords = CoordinateGrid::new(grid.0, grid.1);
    let ref_role = Role::new(
        reference.iter().map(|f| f.values()).collect(),
        samples.iter().map(|s| &s.reference_encoded).collect(),
    )?;
    let tgt_role = Role::new(
        target.iter().map(|f| f.values()).collect(),
        samples.iter().map(|s| &s.target_encoded).collect(),
    )?;
    let ctx = Context { codec, settings, weight: 1.0 / (2 * n) as f64, batch: n };
    let tau = settings.temperature;
    let sw = settings.switches;

    let mut grads: Vec<FeatureGradients> = reference
        .iter()
        .map(|f| FeatureGradients { reference: Array2::zeros(f.values().dim()), target: Array2::zeros(f.values().dim()) })
        .collect();
    let mut comps = LossComponents::default();

    for b in 0..n {
        // r -> t: target cells query reference keys
        let mut fwd = ctx.direction(
            tgt_role.features[b],
            grid,
            ref_role.features[b],
            ref_role.encoded[b],
            &ref_role,
            ref_role.block(b),
            &coords,
            &samples[b].target_image,
        )?;
        // t -> r
        let mut bwd = ctx.direction(
            ref_role.features[b],
            grid,
            tgt_role.features[b],
            tgt_role.encoded[b],
            &tgt_role,
            tgt_role.block(b),
            &coords,
            &samples[b].reference_image,
        )?;

        let (cycle, g_fwd, g_bwd) = loss_cycle_grad(&fwd.affinity, &bwd.affinity);
        if sw.cycle {
            fwd.affinity_grad.scaled_add(1.0 / n as f64, &g_fwd);
            bwd.affinity_grad.scaled_add(1.0 / n as f64, &g_bwd);
        }

        for pass in [&fwd, &bwd] {
            comps.self_loss += pass.losses.self_loss / (2 * n) as f64;
            comps.intra_inter += pass.losses.intra_inter / (2 * n) as f64;
            comps.sparse += pass.losses.sparse / (2 * n) as f64;
            comps.concentration += pass.losses.concentration / (2 * n) as f64;
        }
        comps.cycle += cycle / n as f64;

        // backpropagate both directions into the feature maps
        let passes = [(&fwd, &tgt_role, &ref_role, true), (&bwd, &ref_role, &tgt_role, false)];
        for (pass, query_role, key_role, query_is_target) in passes {
            let q = query_role.features[b];
            let ds = softmax_backward(&pass.affinity, &pass.affinity_grad);
            let mut dq = key_role.features[b].dot(&ds.t());
            let dk = q.dot(&ds);
            if query_is_target {
                grads[b].reference.scaled_add(1.0 / tau, &dk);
            } else {
                grads[b].target.scaled_add(1.0 / tau, &dk);
            }
            if let Some((inter_aff, inter_grad)) = &pass.inter {
                let ds = softmax_backward(inter_aff, inter_grad);
                dq += &key_role.keys.dot(&ds.t());
                let dk_all = q.dot(&ds);
                for (v, g) in grads.iter_mut().enumerate() {
                    let blk = dk_all.slice(s![.., key_role.block(v)]);
                    let dst = if query_is_target { &mut g.reference } else { &mut g.target };
                    dst.scaled_add(1.0 / tau, &blk);
                }
            }
            if query_is_target {
                grads[b].target.scaled_add(1.0 / tau, &dq);
            } else {
                grads[b].reference.scaled_add(1.0 / tau, &dq);
            }
        }
    }

    Ok(ObjectiveOutput { report: loss_total(&comps, &sw), components: comps, gradients: grads })
}

/// Mean sparsity value of an explicit negative block; kept alongside
/// [`batch_objective`] so tests can cross-check the fused computation.
pub fn sparse_from_inter(inter: &Array2<f64>, positive: Range<usize>) -> f64 {
    let (_, neg) = crate::affinity::split_positive(inter, positive);
    loss_sparse(&neg)
}
