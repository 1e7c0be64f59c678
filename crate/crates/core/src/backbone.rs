//! Trainable feature extractor producing [`FeatureMap`]s from image patches.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affinity::FeatureMap;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::nn::{self, Cache, Conv2d, InstanceNorm, Layer, Param, Residual, Sequential, Tensor};

const BACKBONE_MAGIC: &[u8; 8] = b"VCORRBKB";
const BACKBONE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Plain conv/norm/relu stages.
    Small,
    /// ResNet-18 trunk with the last two stages kept at stride 8.
    ResNet18,
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Architecture::Small),
            "resnet18" => Ok(Architecture::ResNet18),
            other => Err(Error::Config(format!("unknown backbone architecture {other:?}"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Small => "small",
            Architecture::ResNet18 => "resnet18",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub arch: Architecture,
    pub stride: usize,
    pub channels: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { arch: Architecture::Small, stride: 4, channels: 64, depth: 4, seed: 0 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride != 4 && self.stride != 8 {
            return Err(Error::Config(format!("backbone stride must be 4 or 8, got {}", self.stride)));
        }
        match self.arch {
            Architecture::Small => {
                let downs = self.stride.trailing_zeros() as usize;
                if self.depth < downs + 1 {
                    return Err(Error::Config(format!(
                        "depth {} too shallow for stride {}",
                        self.depth, self.stride
                    )));
                }
                if self.channels < 2 {
                    return Err(Error::Config("backbone needs at least 2 channels".into()));
                }
            }
            Architecture::ResNet18 => {
                if self.stride != 8 || self.channels != 512 {
                    return Err(Error::Config("resnet18 trunk has stride 8 and 512 channels".into()));
                }
            }
        }
        Ok(())
    }
}

/// Everything retained by a training forward pass.
#[derive(Debug)]
pub struct BackboneTrace {
    caches: Vec<Cache>,
    out_shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    net: Sequential,
}

fn small_net(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Sequential {
    let downs = cfg.stride.trailing_zeros() as usize;
    let mut layers = Vec::new();
    let mut in_c = 3;
    for stage in 0..cfg.depth {
        let out_c = if stage == 0 { (cfg.channels / 2).max(1) } else { cfg.channels };
        let stride = if (1..=downs).contains(&stage) { 2 } else { 1 };
        layers.push(Layer::Conv(Conv2d::new(&format!("stage{stage}.conv"), in_c, out_c, 3, stride, false, rng)));
        layers.push(Layer::Norm(InstanceNorm::new(&format!("stage{stage}.norm"), out_c)));
        layers.push(Layer::Relu);
        in_c = out_c;
    }
    Sequential::new(layers)
}

fn resnet18_net(rng: &mut ChaCha8Rng) -> Sequential {
    let mut layers = vec![
        Layer::Conv(Conv2d::new("stem.conv", 3, 64, 7, 2, false, rng)),
        Layer::Norm(InstanceNorm::new("stem.norm", 64)),
        Layer::Relu,
        Layer::MaxPool { kernel: 3, stride: 2 },
    ];
    let stages = [(64, 1), (128, 2), (256, 1), (512, 1)];
    let mut in_c = 64;
    for (i, &(out_c, stride)) in stages.iter().enumerate() {
        layers.push(Layer::Residual(Box::new(Residual::basic(&format!("layer{}.0", i + 1), in_c, out_c, stride, rng))));
        layers.push(Layer::Residual(Box::new(Residual::basic(&format!("layer{}.1", i + 1), out_c, out_c, 1, rng))));
        in_c = out_c;
    }
    Sequential::new(layers)
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = match config.arch {
            Architecture::Small => small_net(&config, &mut rng),
            Architecture::ResNet18 => resnet18_net(&mut rng),
        };
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn stride(&self) -> usize {
        self.config.stride
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.net.params().iter().map(|p| p.len()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.net.param_count()
    }

    fn input(&self, patch: &Image) -> Result<Tensor> {
        let s = self.config.stride;
        if !patch.height().is_multiple_of(s) || !patch.width().is_multiple_of(s) {
            return invalid(format!(
                "patch {}x{} not divisible by backbone stride {s}",
                patch.width(),
                patch.height()
            ));
        }
        // centered input
        Ok(patch.data().mapv(|v| (v - 0.5) as f32))
    }

    fn to_features(&self, y: Tensor) -> Result<FeatureMap> {
        let (c, h, w) = y.dim();
        let values = y
            .into_shape_with_order((c, h * w))
            .expect("contiguous output")
            .mapv(|v| v as f64);
        FeatureMap::new(h, w, values)
    }

    /// Evaluation-mode pass.
    pub fn forward(&self, patch: &Image) -> Result<FeatureMap> {
        let x = self.input(patch)?;
        self.to_features(self.net.forward(&x))
    }

    pub fn forward_train(&self, patch: &Image) -> Result<(FeatureMap, BackboneTrace)> {
        let x = self.input(patch)?;
        let (y, caches) = self.net.forward_train(&x);
        let out_shape = y.dim();
        Ok((self.to_features(y)?, BackboneTrace { caches, out_shape }))
    }

    /// Parameter gradients for an upstream gradient over the `C x N` features.
    pub fn backward(&self, trace: &BackboneTrace, feature_grad: &Array2<f64>) -> Vec<Vec<f32>> {
        let (c, h, w) = trace.out_shape;
        assert_eq!(feature_grad.dim(), (c, h * w), "feature gradient shape");
        let dy = Tensor::from_shape_fn((c, h, w), |(ci, y, x)| feature_grad[[ci, y * w + x]] as f32);
        self.net.backward_from(&trace.caches, &dy, false).1
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BACKBONE_MAGIC)?;
        nn::write_u32(w, BACKBONE_VERSION)?;
        nn::write_u32(
            w,
            match self.config.arch {
                Architecture::Small => 0,
                Architecture::ResNet18 => 1,
            },
        )?;
        nn::write_u32(w, self.config.stride as u32)?;
        nn::write_u32(w, self.config.channels as u32)?;
        nn::write_u32(w, self.config.depth as u32)?;
        nn::write_u64(w, self.config.seed)?;
        nn::write_params(w, &self.net.params())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BACKBONE_MAGIC {
            return Err(Error::Format("not a backbone checkpoint".into()));
        }
        let version = nn::read_u32(r)?;
        if version != BACKBONE_VERSION {
            return Err(Error::Format(format!("unsupported backbone version {version}")));
        }
        let arch = match nn::read_u32(r)? {
            0 => Architecture::Small,
            1 => Architecture::ResNet18,
            other => return Err(Error::Format(format!("unknown architecture tag {other}"))),
        };
        let stride = nn::read_u32(r)? as usize;
        let channels = nn::read_u32(r)? as usize;
        let depth = nn::read_u32(r)? as usize;
        let seed = nn::read_u64(r)?;
        let mut backbone = Backbone::new(BackboneConfig { arch, stride, channels, depth, seed })
            .map_err(|e| Error::Format(e.to_string()))?;
        nn::read_params(r, &mut backbone.net.params_mut())?;
        Ok(backbone)
    }

    /// Writes the checkpoint plus a `.manifest` text file listing parameter
    /// names and shapes next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        self.write_manifest(&manifest_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let c = &self.config;
        out.push_str(&format!(
            "# arch={} stride={} channels={} depth={} seed={}\n",
            c.arch, c.stride, c.channels, c.depth, c.seed
        ));
        for p in self.net.params() {
            let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{} {}\n", p.name, dims.join("x")));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest");
    checkpoint.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scale_output_grid() {
        let b = Backbone::new(BackboneConfig::default()).unwrap();
        let f = b.forward(&Image::constant(64, 64, 0.3)).unwrap();
        assert_eq!((f.height(), f.width(), f.channels()), (16, 16, 64));
        let count = b.parameter_count();
        assert!((80_000..120_000).contains(&count), "parameter count {count}");
    }

    #[test]
    fn paper_scale_grid_with_stride_eight() {
        let cfg = BackboneConfig { stride: 8, channels: 8, depth: 4, ..Default::default() };
        let b = Backbone::new(cfg).unwrap();
        let f = b.forward(&Image::constant(256, 256, 0.5)).unwrap();
        assert_eq!((f.height(), f.width()), (32, 32));
        assert_eq!(f.cells(), 1024);
    }

    #[test]
    fn resnet18_trunk_has_stride_eight() {
        let cfg = BackboneConfig { arch: Architecture::ResNet18, stride: 8, channels: 512, depth: 4, seed: 1 };
        let b = Backbone::new(cfg).unwrap();
        let f = b.forward(&Image::constant(32, 32, 0.5)).unwrap();
        assert_eq!((f.channels(), f.height(), f.width()), (512, 4, 4));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let b = Backbone::new(BackboneConfig { seed: 9, ..Default::default() }).unwrap();
        let img = Image::from_fn(16, 16, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f64 / 11.0);
        assert_eq!(b.forward(&img).unwrap(), b.forward(&img).unwrap());
    }

    #[test]
    fn indivisible_patch_rejected() {
        let b = Backbone::new(BackboneConfig::default()).unwrap();
        assert!(matches!(b.forward(&Image::constant(10, 12, 0.5)), Err(Error::Validation(_))));
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(Backbone::new(BackboneConfig { stride: 2, ..Default::default() }).is_err());
        assert!(Backbone::new(BackboneConfig { depth: 2, ..Default::default() }).is_err());
        assert!(Backbone::new(BackboneConfig { arch: Architecture::ResNet18, ..Default::default() }).is_err());
    }

    #[test]
    fn checkpoint_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let b = Backbone::new(BackboneConfig { channels: 8, seed: 3, ..Default::default() }).unwrap();
        b.save(&path).unwrap();
        let loaded = Backbone::load(&path).unwrap();
        assert_eq!(loaded.config(), b.config());
        assert_eq!(loaded.params(), b.params());
        let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(manifest.contains("stage0.conv.weight 4x3x3x3"));
        assert_eq!(manifest.lines().count(), 1 + b.params().len());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let b = Backbone::new(BackboneConfig { channels: 8, seed: 4, ..Default::default() }).unwrap();
        let img = Image::from_fn(16, 16, |c, y, x| (((c + 1) * (y * 5 + x * 3)) % 17) as f64 / 17.0);
        let (f, trace) = b.forward_train(&img).unwrap();
        let g = b.backward(&trace, &f.values().mapv(|v| v.sin() + 0.3));
        for (p, grad) in b.params().iter().zip(&g) {
            assert!(grad.iter().any(|&v| v != 0.0), "{} received no gradient", p.name);
        }
    }
}
