//! Minimal convolutional layers with hand-written backward passes.
//!
//! Activations are `(channels, height, width)` tensors of `f32`. Forward passes
//! take `&self` and return an explicit cache, so several forward/backward passes
//! can run concurrently against the same parameters; gradients come back as
//! plain vectors in [`Sequential::params`] order.

use std::io::{Read, Write};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type Tensor = Array3<f32>;

const NORM_EPS: f32 = 1e-5;

/// A named, flat parameter blob with its logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { name, shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    weight: Param,
    bias: Option<Param>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
        let data = (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect();
        let weight = Param::new(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            data,
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels]));
        Self { in_channels, out_channels, kernel, stride, padding: kernel / 2, weight, bias }
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.out_channels, self.in_channels * self.kernel * self.kernel), &self.weight.data)
            .expect("weight shape")
    }

    fn im2col(&self, x: &Tensor) -> Array2<f32> {
        let (c, h, w) = x.dim();
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut cols = Array2::<f32>::zeros((c * k * k, ho * wo));
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ci);
            for ky in 0..k {
                for kx in 0..k {
                    let mut row = cols.row_mut((ci * k + ky) * k + kx);
                    let row = row.as_slice_mut().expect("contiguous");
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = plane.row(iy as usize);
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f32>, shape: (usize, usize, usize)) -> Tensor {
        let (c, h, w) = shape;
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut x = Tensor::zeros(shape);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = cols.row((ci * k + ky) * k + kx);
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                x[[ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Array2<f32>) {
        let (_, h, w) = x.dim();
        let (ho, wo) = self.out_size(h, w);
        let cols = self.im2col(x);
        let mut y = self.weight_matrix().dot(&cols);
        if let Some(b) = &self.bias {
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(&b.data) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let y = y.into_shape_with_order((self.out_channels, ho, wo)).expect("conv output shape");
        (y, cols)
    }

    fn backward(&self, cols: &Array2<f32>, in_shape: (usize, usize, usize), dy: &Tensor, need_input: bool) -> (Option<Tensor>, Vec<Vec<f32>>) {
        let (oc, ho, wo) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((oc, ho * wo))
            .expect("contiguous gradient");
        let dw = dy2.dot(&cols.t());
        let mut grads = vec![dw.into_raw_vec_and_offset().0];
        if self.bias.is_some() {
            grads.push(dy2.sum_axis(Axis(1)).to_vec());
        }
        let dx = need_input.then(|| {
            let dcols = self.weight_matrix().t().dot(&dy2);
            self.col2im(&dcols, in_shape)
        });
        (dx, grads)
    }
}

/// Per-instance, per-channel normalization with a learned affine transform.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    gamma: Param,
    beta: Param,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Tensor, Vec<f32>) {
        let (c, h, w) = x.dim();
        let n = (h * w) as f32;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(c);
        for mut plane in xhat.axis_iter_mut(Axis(0)) {
            let mean = plane.sum() / n;
            let var = plane.fold(0.0f32, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            plane.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        for (ci, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let (g, b) = (self.gamma.data[ci], self.beta.data[ci]);
            plane.mapv_inplace(|v| v * g + b);
        }
        (y, xhat, inv_std)
    }

    fn backward(&self, xhat: &Tensor, inv_std: &[f32], dy: &Tensor) -> (Tensor, Vec<Vec<f32>>) {
        let (c, h, w) = dy.dim();
        let n = (h * w) as f32;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = Tensor::zeros((c, h, w));
        for ci in 0..c {
            let xh = xhat.index_axis(Axis(0), ci);
            let g = dy.index_axis(Axis(0), ci);
            let sum_dy: f32 = g.sum();
            let sum_dy_xh: f32 = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            dgamma[ci] = sum_dy_xh;
            dbeta[ci] = sum_dy;
            let scale = self.gamma.data[ci] * inv_std[ci] / n;
            let mut out = dx.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gv, &xv| {
                *o = scale * (n * gv - sum_dy - xv * sum_dy_xh);
            });
        }
        (dx, vec![dgamma, dbeta])
    }
}

/// Two-layer residual unit with an optional projection shortcut.
#[derive(Debug, Clone)]
pub struct Residual {
    main: Sequential,
    shortcut: Option<Sequential>,
}

impl Residual {
    /// Basic block: 3x3 conv, norm, relu, 3x3 conv, norm, then add and relu.
    pub fn basic<R: Rng>(name: &str, in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let main = Sequential::new(vec![
            Layer::Conv(Conv2d::new(&format!("{name}.conv1"), in_channels, out_channels, 3, stride, false, rng)),
            Layer::Norm(InstanceNorm::new(&format!("{name}.norm1"), out_channels)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(&format!("{name}.conv2"), out_channels, out_channels, 3, 1, false, rng)),
            Layer::Norm(InstanceNorm::new(&format!("{name}.norm2"), out_channels)),
        ]);
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| {
            Sequential::new(vec![
                Layer::Conv(Conv2d::new(&format!("{name}.down"), in_channels, out_channels, 1, stride, false, rng)),
                Layer::Norm(InstanceNorm::new(&format!("{name}.down_norm"), out_channels)),
            ])
        });
        Self { main, shortcut }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Norm(InstanceNorm),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    /// Nearest-neighbor upsampling by an integer factor.
    Upsample(usize),
    Residual(Box<Residual>),
}

#[derive(Debug)]
pub enum Cache {
    Conv { cols: Array2<f32>, in_shape: (usize, usize, usize) },
    Norm { xhat: Tensor, inv_std: Vec<f32> },
    Relu { out: Tensor },
    MaxPool { argmax: Vec<usize>, in_shape: (usize, usize, usize) },
    Upsample { in_shape: (usize, usize, usize) },
    Residual { main: Vec<Cache>, shortcut: Option<Vec<Cache>>, out: Tensor },
}

fn max_pool(x: &Tensor, kernel: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let (c, h, w) = x.dim();
    let pad = kernel / 2;
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    let mut y = Tensor::zeros((c, ho, wo));
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let v = x[[ci, iy as usize, ix as usize]];
                        if v > best {
                            best = v;
                            best_idx = (ci * h + iy as usize) * w + ix as usize;
                        }
                    }
                }
                y[[ci, oy, ox]] = best;
                argmax.push(best_idx);
            }
        }
    }
    (y, argmax)
}

fn upsample_nearest(x: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = x.dim();
    Tensor::from_shape_fn((c, h * f, w * f), |(ci, y, xx)| x[[ci, y / f, xx / f]])
}

impl Layer {
    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::Norm(n) => vec![&n.gamma, &n.beta],
            Layer::Residual(r) => {
                let mut out = r.main.params();
                if let Some(s) = &r.shortcut {
                    out.extend(s.params());
                }
                out
            }
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::Norm(n) => vec![&mut n.gamma, &mut n.beta],
            Layer::Residual(r) => {
                let mut out = r.main.params_mut();
                if let Some(s) = &mut r.shortcut {
                    out.extend(s.params_mut());
                }
                out
            }
            _ => Vec::new(),
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> (Tensor, Option<Cache>) {
        match self {
            Layer::Conv(c) => {
                let (y, cols) = c.forward(x);
                (y, train.then(|| Cache::Conv { cols, in_shape: x.dim() }))
            }
            Layer::Norm(n) => {
                let (y, xhat, inv_std) = n.forward(x);
                (y, train.then_some(Cache::Norm { xhat, inv_std }))
            }
            Layer::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                let cache = train.then(|| Cache::Relu { out: y.clone() });
                (y, cache)
            }
            Layer::MaxPool { kernel, stride } => {
                let (y, argmax) = max_pool(x, *kernel, *stride);
                (y, train.then_some(Cache::MaxPool { argmax, in_shape: x.dim() }))
            }
            Layer::Upsample(f) => (upsample_nearest(x, *f), train.then_some(Cache::Upsample { in_shape: x.dim() })),
            Layer::Residual(r) => {
                let (main_y, main_c) = r.main.run(x, train);
                let (short_y, short_c) = match &r.shortcut {
                    Some(s) => {
                        let (y, c) = s.run(x, train);
                        (y, Some(c))
                    }
                    None => (x.clone(), None),
                };
                let y = (main_y + short_y).mapv(|v| v.max(0.0));
                let cache = train.then(|| Cache::Residual { main: main_c, shortcut: short_c, out: y.clone() });
                (y, cache)
            }
        }
    }

    fn backward(&self, cache: &Cache, dy: &Tensor, need_input: bool) -> (Option<Tensor>, Vec<Vec<f32>>) {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv { cols, in_shape }) => c.backward(cols, *in_shape, dy, need_input),
            (Layer::Norm(n), Cache::Norm { xhat, inv_std }) => {
                let (dx, g) = n.backward(xhat, inv_std, dy);
                (Some(dx), g)
            }
            (Layer::Relu, Cache::Relu { out }) => {
                let mut dx = dy.clone();
                dx.zip_mut_with(out, |d, &o| {
                    if o <= 0.0 {
                        *d = 0.0
                    }
                });
                (Some(dx), Vec::new())
            }
            (Layer::MaxPool { .. }, Cache::MaxPool { argmax, in_shape }) => {
                let mut dx = Tensor::zeros(*in_shape);
                let flat = dx.as_slice_mut().expect("contiguous");
                for (g, &idx) in dy.iter().zip(argmax) {
                    flat[idx] += g;
                }
                (Some(dx), Vec::new())
            }
            (Layer::Upsample(f), Cache::Upsample { in_shape }) => {
                let mut dx = Tensor::zeros(*in_shape);
                for ((ci, y, x), &g) in dy.indexed_iter() {
                    dx[[ci, y / f, x / f]] += g;
                }
                (Some(dx), Vec::new())
            }
            (Layer::Residual(r), Cache::Residual { main, shortcut, out }) => {
                let mut d = dy.clone();
                d.zip_mut_with(out, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
                let (dmain, mut grads) = r.main.backward_from(main, &d, true);
                let mut dx = dmain.expect("input gradient requested");
                match (&r.shortcut, shortcut) {
                    (Some(s), Some(sc)) => {
                        let (ds, sg) = s.backward_from(sc, &d, true);
                        dx += &ds.expect("input gradient requested");
                        grads.extend(sg);
                    }
                    _ => dx += &d,
                }
                (Some(dx), grads)
            }
            _ => panic!("layer/cache mismatch"),
        }
    }
}

/// A chain of layers.
#[derive(Debug, Clone)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn run(&self, x: &Tensor, train: bool) -> (Tensor, Vec<Cache>) {
        let mut caches = Vec::with_capacity(if train { self.layers.len() } else { 0 });
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward(&cur, train);
            if let Some(c) = c {
                caches.push(c);
            }
            cur = y;
        }
        (cur, caches)
    }

    /// Inference pass without caches.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x, false).0
    }

    /// Forward pass keeping everything the backward pass needs.
    pub fn forward_train(&self, x: &Tensor) -> (Tensor, Vec<Cache>) {
        self.run(x, true)
    }

    /// Backpropagates `dy`. Returns the input gradient when requested and the
    /// parameter gradients in [`Sequential::params`] order.
    pub fn backward_from(&self, caches: &[Cache], dy: &Tensor, need_input: bool) -> (Option<Tensor>, Vec<Vec<f32>>) {
        assert_eq!(caches.len(), self.layers.len(), "forward_train caches required");
        let mut per_layer: Vec<Vec<Vec<f32>>> = Vec::with_capacity(self.layers.len());
        let mut grad = dy.clone();
        let mut dx = None;
        for (idx, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let want = need_input || idx > 0;
            let (d, g) = layer.backward(cache, &grad, want);
            per_layer.push(g);
            match d {
                Some(d) if idx > 0 => grad = d,
                d => dx = d,
            }
        }
        per_layer.reverse();
        (dx, per_layer.into_iter().flatten().collect())
    }
}

/// Adaptive moment estimation over a flat list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Vec<f32>], lr: f32) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Sums gradient lists elementwise in the given order.
pub fn accumulate(into: &mut [Vec<f32>], from: &[Vec<f32>]) {
    for (a, b) in into.iter_mut().zip(from) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

// little-endian blob helpers shared by checkpoint formats

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Writes `count, then (name, rank, dims, data)` for every parameter.
pub(crate) fn write_params<W: Write>(w: &mut W, params: &[&Param]) -> Result<()> {
    write_u32(w, params.len() as u32)?;
    for p in params {
        write_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        write_u32(w, p.shape.len() as u32)?;
        for &d in &p.shape {
            write_u32(w, d as u32)?;
        }
        write_f32s(w, &p.data)?;
    }
    Ok(())
}

/// Reads parameter blobs into `params`, checking names and shapes.
pub(crate) fn read_params<R: Read>(r: &mut R, params: &mut [&mut Param]) -> Result<()> {
    let count = read_u32(r)? as usize;
    if count != params.len() {
        return Err(Error::Format(format!("checkpoint has {count} parameters, model has {}", params.len())));
    }
    for p in params.iter_mut() {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(Error::Format("parameter name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name not utf-8".into()))?;
        if name != p.name {
            return Err(Error::Format(format!("expected parameter {}, found {name}", p.name)));
        }
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank.min(8) {
            shape.push(read_u32(r)? as usize);
        }
        if shape != p.shape {
            return Err(Error::Format(format!("parameter {name} has shape {shape:?}, expected {:?}", p.shape)));
        }
        p.data = read_f32s(r, p.len())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_shape_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
    }

    // loss = sum(y * probe) so dL/dy = probe
    fn probe_loss(net: &Sequential, x: &Tensor, probe: &Tensor) -> f64 {
        net.forward(x).iter().zip(probe.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }

    // Central differences at two step sizes; coordinates where they disagree
    // sit next to a relu or max-pool kink and are skipped.
    fn numeric(f: impl Fn(f32) -> f64) -> Option<f64> {
        let d = |h: f32| (f(h) - f(-h)) / (2.0 * h as f64);
        let (a, b) = (d(1e-2), d(2.5e-3));
        ((a - b).abs() <= 5e-3 * (1.0 + a.abs())).then_some(b)
    }

    #[allow(clippy::needless_range_loop)]
    fn check_gradients(mut net: Sequential, x: Tensor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, caches) = net.forward_train(&x);
        let probe = random_tensor(&mut rng, y.dim());
        let (dx, grads) = net.backward_from(&caches, &probe, true);
        let dx = dx.unwrap();
        let (mut checked, mut total) = (0, 0);
        for idx in (0..x.len()).step_by(5) {
            total += 1;
            let f = |h: f32| {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[idx] += h;
                probe_loss(&net, &xp, &probe)
            };
            if let Some(num) = numeric(f) {
                checked += 1;
                let ana = dx.as_slice().unwrap()[idx] as f64;
                assert!((num - ana).abs() <= 1e-2 * (1.0 + ana.abs()), "input grad {idx}: {num} vs {ana}");
            }
        }
        for k in 0..grads.len() {
            let len = net.params()[k].len();
            for idx in [0usize, len / 2, len - 1] {
                total += 1;
                let orig = net.params()[k].data[idx];
                let mut eval = |h: f32| {
                    net.params_mut()[k].data[idx] = orig + h;
                    let l = probe_loss(&net, &x, &probe);
                    net.params_mut()[k].data[idx] = orig;
                    l
                };
                let d = |h: f32, e: &mut dyn FnMut(f32) -> f64| (e(h) - e(-h)) / (2.0 * h as f64);
                let (a, b) = (d(1e-2, &mut eval), d(2.5e-3, &mut eval));
                if (a - b).abs() > 5e-3 * (1.0 + a.abs()) {
                    continue;
                }
                checked += 1;
                let ana = grads[k][idx] as f64;
                assert!(
                    (b - ana).abs() <= 1e-2 * (1.0 + ana.abs()),
                    "param {} [{idx}]: {b} vs {ana}",
                    net.params()[k].name
                );
            }
        }
        assert!(checked * 4 >= total * 3, "only {checked} of {total} coordinates were smooth enough to check");
    }

    #[test]
    fn conv_norm_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new("c1", 2, 3, 3, 1, true, &mut rng)),
            Layer::Norm(InstanceNorm::new("n1", 3)),
            Layer::Relu,
            Layer::Conv(Conv2d::new("c2", 3, 4, 3, 2, false, &mut rng)),
        ]);
        let x = random_tensor(&mut rng, (2, 6, 6));
        check_gradients(net, x, 2);
    }

    #[test]
    fn residual_pool_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new("stem", 2, 3, 3, 1, false, &mut rng)),
            Layer::MaxPool { kernel: 3, stride: 2 },
            Layer::Residual(Box::new(Residual::basic("b1", 3, 4, 2, &mut rng))),
            Layer::Residual(Box::new(Residual::basic("b2", 4, 4, 1, &mut rng))),
            Layer::Upsample(2),
        ]);
        let x = random_tensor(&mut rng, (2, 8, 8));
        check_gradients(net, x, 4);
    }

    #[test]
    fn conv_output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv2d::new("c", 3, 5, 3, 2, false, &mut rng);
        let net = Sequential::new(vec![Layer::Conv(c)]);
        assert_eq!(net.forward(&Tensor::zeros((3, 16, 12))).dim(), (5, 8, 6));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Param::new("p".into(), vec![2], vec![1.0, -1.0]);
        let mut adam = Adam::new(&[2]);
        adam.step(&mut [&mut p], &[vec![0.5, -0.5]], 0.1);
        assert!((p.data[0] - 0.9).abs() < 1e-5 && (p.data[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn param_blob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Sequential::new(vec![Layer::Conv(Conv2d::new("c", 2, 2, 3, 1, true, &mut rng))]);
        let mut buf = Vec::new();
        write_params(&mut buf, &net.params()).unwrap();
        let mut other = Sequential::new(vec![Layer::Conv(Conv2d::new("c", 2, 2, 3, 1, true, &mut ChaCha8Rng::seed_from_u64(8)))]);
        read_params(&mut buf.as_slice(), &mut other.params_mut()).unwrap();
        assert_eq!(net.params(), other.params());
        let mut wrong = Sequential::new(vec![Layer::Conv(Conv2d::new("d", 2, 2, 3, 1, true, &mut rng))]);
        assert!(read_params(&mut buf.as_slice(), &mut wrong.params_mut()).is_err());
    }
}
