//! Frozen encoder/decoder pair mapping images to transformable embeddings at
//! affinity resolution and back.
//!
//! The default [`ColorCodec`] area-averages each `stride x stride` block and
//! decodes with bilinear upsampling, so transforming encoded frames is color
//! copying. [`LearnedCodec`] is a small convolutional autoencoder pre-trained on
//! still images and frozen afterwards.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, invalid, Error, Result};
use crate::image::Image;
use crate::nn::{self, Adam, Conv2d, Layer, Sequential, Tensor};

const CODEC_MAGIC: &[u8; 8] = b"VCORRCDC";
const CODEC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodecId {
    Color,
    Learned,
}

impl CodecId {
    fn tag(self) -> u32 {
        match self {
            CodecId::Color => 0,
            CodecId::Learned => 1,
        }
    }
}

impl std::str::FromStr for CodecId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(CodecId::Color),
            "learned" => Ok(CodecId::Learned),
            other => Err(Error::Config(format!("unknown codec {other:?} (expected color or learned)"))),
        }
    }
}

/// Encoded image at affinity resolution, `C_e x N` with `N = height * width`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub height: usize,
    pub width: usize,
    pub values: Array2<f64>,
    pub codec_id: CodecId,
}

impl EncodedFrame {
    pub fn channels(&self) -> usize {
        self.values.nrows()
    }
}

/// Separable bilinear upsampling weights with half-pixel alignment.
#[derive(Debug, Clone)]
struct AxisWeights {
    taps: Vec<(usize, usize, f64)>,
}

impl AxisWeights {
    fn new(input: usize, factor: usize) -> Self {
        let taps = (0..input * factor)
            .map(|o| {
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect();
        Self { taps }
    }
}

fn bilinear_up(values: &Array2<f64>, h: usize, w: usize, factor: usize) -> Array3<f64> {
    let c = values.nrows();
    let ys = AxisWeights::new(h, factor);
    let xs = AxisWeights::new(w, factor);
    let mut out = Array3::zeros((c, h * factor, w * factor));
    for ch in 0..c {
        let v = values.row(ch);
        for (oy, &(y0, y1, ty)) in ys.taps.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.taps.iter().enumerate() {
                let top = v[y0 * w + x0] * (1.0 - tx) + v[y0 * w + x1] * tx;
                let bot = v[y1 * w + x0] * (1.0 - tx) + v[y1 * w + x1] * tx;
                out[[ch, oy, ox]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_up`].
fn bilinear_up_adjoint(grad: &Array3<f64>, h: usize, w: usize, factor: usize) -> Array2<f64> {
    let c = grad.shape()[0];
    let ys = AxisWeights::new(h, factor);
    let xs = AxisWeights::new(w, factor);
    let mut out = Array2::zeros((c, h * w));
    for ch in 0..c {
        for (oy, &(y0, y1, ty)) in ys.taps.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.taps.iter().enumerate() {
                let g = grad[[ch, oy, ox]];
                if g == 0.0 {
                    continue;
                }
                out[[ch, y0 * w + x0]] += g * (1.0 - ty) * (1.0 - tx);
                out[[ch, y0 * w + x1]] += g * (1.0 - ty) * tx;
                out[[ch, y1 * w + x0]] += g * ty * (1.0 - tx);
                out[[ch, y1 * w + x1]] += g * ty * tx;
            }
        }
    }
    out
}

fn check_divisible(image: &Image, stride: usize) -> Result<(usize, usize)> {
    if !image.height().is_multiple_of(stride) || !image.width().is_multiple_of(stride) {
        return invalid(format!(
            "image {}x{} not divisible by stride {stride}",
            image.width(),
            image.height()
        ));
    }
    Ok((image.height() / stride, image.width() / stride))
}

/// Block-average encoder and bilinear decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorCodec {
    pub stride: usize,
}

impl ColorCodec {
    pub fn new(stride: usize) -> Self {
        assert!(stride > 0, "stride must be positive");
        Self { stride }
    }

    pub fn encode(&self, image: &Image) -> Result<EncodedFrame> {
        let (gh, gw) = check_divisible(image, self.stride)?;
        let s = self.stride;
        let norm = (s * s) as f64;
        let data = image.data();
        let values = Array2::from_shape_fn((3, gh * gw), |(c, j)| {
            let (gy, gx) = (j / gw, j % gw);
            let mut acc = 0.0;
            for y in gy * s..(gy + 1) * s {
                for x in gx * s..(gx + 1) * s {
                    acc += data[[c, y, x]];
                }
            }
            acc / norm
        });
        Ok(EncodedFrame { height: gh, width: gw, values, codec_id: CodecId::Color })
    }

    fn decode_raw(&self, encoded: &EncodedFrame) -> Array3<f64> {
        bilinear_up(&encoded.values, encoded.height, encoded.width, self.stride)
    }
}

/// Three-layer convolutional encoder with a mirrored decoder.
#[derive(Debug, Clone)]
pub struct LearnedCodec {
    stride: usize,
    embed_channels: usize,
    encoder: Sequential,
    decoder: Sequential,
}

const LEARNED_HIDDEN: usize = 16;

impl LearnedCodec {
    pub fn new(stride: usize, embed_channels: usize, seed: u64) -> Result<Self> {
        let downs = match stride {
            4 => 2,
            8 => 3,
            other => return invalid(format!("learned codec supports stride 4 or 8, got {other}")),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3, LEARNED_HIDDEN, LEARNED_HIDDEN, embed_channels];
        let mut enc = Vec::new();
        for i in 0..3 {
            let s = if i >= 3 - downs { 2 } else { 1 };
            enc.push(Layer::Conv(Conv2d::new(&format!("enc{i}"), widths[i], widths[i + 1], 3, s, true, &mut rng)));
            if i < 2 {
                enc.push(Layer::Relu);
            }
        }
        let mut dec = Vec::new();
        for i in 0..3 {
            if i < downs {
                dec.push(Layer::Upsample(2));
            }
            dec.push(Layer::Conv(Conv2d::new(&format!("dec{i}"), widths[3 - i], widths[2 - i], 3, 1, true, &mut rng)));
            if i < 2 {
                dec.push(Layer::Relu);
            }
        }
        Ok(Self { stride, embed_channels, encoder: Sequential::new(enc), decoder: Sequential::new(dec) })
    }

    fn image_tensor(image: &Image) -> Tensor {
        image.data().mapv(|v| v as f32)
    }

    fn encoded_tensor(encoded: &EncodedFrame) -> Tensor {
        Tensor::from_shape_fn((encoded.channels(), encoded.height, encoded.width), |(c, y, x)| {
            encoded.values[[c, y * encoded.width + x]] as f32
        })
    }

    pub fn encode(&self, image: &Image) -> Result<EncodedFrame> {
        let (gh, gw) = check_divisible(image, self.stride)?;
        let y = self.encoder.forward(&Self::image_tensor(image));
        let values = y
            .into_shape_with_order((self.embed_channels, gh * gw))
            .expect("encoder output grid")
            .mapv(|v| v as f64);
        Ok(EncodedFrame { height: gh, width: gw, values, codec_id: CodecId::Learned })
    }

    fn decode_raw(&self, encoded: &EncodedFrame) -> Array3<f64> {
        self.decoder.forward(&Self::encoded_tensor(encoded)).mapv(|v| v as f64)
    }

    fn decode_vjp(&self, encoded: &EncodedFrame, grad: &Array3<f64>) -> Array2<f64> {
        let (y, caches) = self.decoder.forward_train(&Self::encoded_tensor(encoded));
        let mut dy = grad.mapv(|v| v as f32);
        dy.zip_mut_with(&y, |g, &v| {
            if !(0.0..=1.0).contains(&v) {
                *g = 0.0;
            }
        });
        let (dx, _) = self.decoder.backward_from(&caches, &dy, true);
        let dx = dx.expect("input gradient requested");
        dx.into_shape_with_order((self.embed_channels, encoded.height * encoded.width))
            .expect("decoder input grid")
            .mapv(|v| v as f64)
    }

    /// Fits the autoencoder to reconstruct `images` with an L1 objective.
    pub fn pretrain(&mut self, images: &[Image], steps: usize, lr: f32, seed: u64) -> Result<f64> {
        if images.is_empty() {
            return invalid("codec pre-training needs at least one image");
        }
        for img in images {
            check_divisible(img, self.stride)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_sizes: Vec<usize> = self.encoder.params().iter().map(|p| p.len()).collect();
        let dec_sizes: Vec<usize> = self.decoder.params().iter().map(|p| p.len()).collect();
        let mut adam_enc = Adam::new(&enc_sizes);
        let mut adam_dec = Adam::new(&dec_sizes);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut last = 0.0;
        for step in 0..steps {
            if step % images.len() == 0 {
                order.shuffle(&mut rng);
            }
            let x = Self::image_tensor(&images[order[step % images.len()]]);
            let (z, enc_cache) = self.encoder.forward_train(&x);
            let (y, dec_cache) = self.decoder.forward_train(&z);
            let n = y.len() as f32;
            let mut loss = 0.0f64;
            let mut dy = y.clone();
            dy.zip_mut_with(&x, |d, &t| {
                let diff = *d - t;
                loss += diff.abs() as f64;
                *d = diff.signum() / n;
            });
            last = loss / n as f64;
            let (dz, dec_grads) = self.decoder.backward_from(&dec_cache, &dy, true);
            let (_, enc_grads) = self.encoder.backward_from(&enc_cache, &dz.expect("latent gradient"), false);
            adam_dec.step(&mut self.decoder.params_mut(), &dec_grads, lr);
            adam_enc.step(&mut self.encoder.params_mut(), &enc_grads, lr);
        }
        Ok(last)
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }
}

/// The frozen codec used by training and transformation.
#[derive(Debug, Clone)]
pub enum TransformCodec {
    Color(ColorCodec),
    Learned(Box<LearnedCodec>),
}

impl TransformCodec {
    pub fn color(stride: usize) -> Self {
        TransformCodec::Color(ColorCodec::new(stride))
    }

    pub fn id(&self) -> CodecId {
        match self {
            TransformCodec::Color(_) => CodecId::Color,
            TransformCodec::Learned(_) => CodecId::Learned,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            TransformCodec::Color(c) => c.stride,
            TransformCodec::Learned(l) => l.stride,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            TransformCodec::Color(_) => 3,
            TransformCodec::Learned(l) => l.embed_channels,
        }
    }

    pub fn encode(&self, image: &Image) -> Result<EncodedFrame> {
        match self {
            TransformCodec::Color(c) => c.encode(image),
            TransformCodec::Learned(l) => l.encode(image),
        }
    }

    fn check(&self, encoded: &EncodedFrame) -> Result<()> {
        if encoded.channels() != self.channels() || encoded.values.ncols() != encoded.height * encoded.width {
            return dim_err(format!(
                "encoded frame {}x{} cells, {} channels does not fit codec with {} channels",
                encoded.height,
                encoded.width,
                encoded.channels(),
                self.channels()
            ));
        }
        Ok(())
    }

    /// Decoded image before clamping to `[0, 1]`.
    pub fn decode_unclamped(&self, encoded: &EncodedFrame) -> Result<Array3<f64>> {
        self.check(encoded)?;
        Ok(match self {
            TransformCodec::Color(c) => c.decode_raw(encoded),
            TransformCodec::Learned(l) => l.decode_raw(encoded),
        })
    }

    pub fn decode(&self, encoded: &EncodedFrame) -> Result<Image> {
        Ok(Image::from_clamped(self.decode_unclamped(encoded)?))
    }

    /// Vector-Jacobian product of the clamped decoder: maps a gradient over
    /// decoded pixels to a gradient over encoded cells.
    pub fn decode_vjp(&self, encoded: &EncodedFrame, grad: &Array3<f64>) -> Result<Array2<f64>> {
        self.check(encoded)?;
        let expect = [3, encoded.height * self.stride(), encoded.width * self.stride()];
        if grad.shape() != expect {
            return dim_err(format!("decoder gradient shape {:?}, expected {expect:?}", grad.shape()));
        }
        Ok(match self {
            TransformCodec::Color(c) => {
                let raw = c.decode_raw(encoded);
                let mut g = grad.clone();
                g.zip_mut_with(&raw, |d, &v| {
                    if !(0.0..=1.0).contains(&v) {
                        *d = 0.0;
                    }
                });
                bilinear_up_adjoint(&g, encoded.height, encoded.width, c.stride)
            }
            TransformCodec::Learned(l) => l.decode_vjp(encoded, grad),
        })
    }

    /// Bit patterns of every codec parameter, for freeze checks.
    pub fn parameter_bits(&self) -> Vec<u32> {
        match self {
            TransformCodec::Color(c) => vec![c.stride as u32],
            TransformCodec::Learned(l) => l
                .encoder
                .params()
                .into_iter()
                .chain(l.decoder.params())
                .flat_map(|p| p.data.iter().map(|v| v.to_bits()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CODEC_MAGIC)?;
        nn::write_u32(&mut w, CODEC_VERSION)?;
        nn::write_u32(&mut w, self.id().tag())?;
        nn::write_u32(&mut w, self.stride() as u32)?;
        nn::write_u32(&mut w, self.channels() as u32)?;
        match self {
            TransformCodec::Color(_) => nn::write_params(&mut w, &[])?,
            TransformCodec::Learned(l) => {
                let params: Vec<_> = l.encoder.params().into_iter().chain(l.decoder.params()).collect();
                nn::write_params(&mut w, &params)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CODEC_MAGIC {
            return Err(Error::Format("not a codec checkpoint".into()));
        }
        let version = nn::read_u32(&mut r)?;
        if version != CODEC_VERSION {
            return Err(Error::Format(format!("unsupported codec version {version}")));
        }
        let tag = nn::read_u32(&mut r)?;
        let stride = nn::read_u32(&mut r)? as usize;
        let channels = nn::read_u32(&mut r)? as usize;
        match tag {
            0 => {
                nn::read_params(&mut r, &mut [])?;
                Ok(TransformCodec::color(stride))
            }
            1 => {
                let mut codec = LearnedCodec::new(stride, channels, 0)?;
                {
                    let mut params: Vec<_> = codec.encoder.params_mut();
                    params.extend(codec.decoder.params_mut());
                    nn::read_params(&mut r, &mut params)?;
                }
                Ok(TransformCodec::Learned(Box::new(codec)))
            }
            other => Err(Error::Format(format!("unknown codec id {other}"))),
        }
    }
}
