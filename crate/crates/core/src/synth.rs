//! Synthetic videos of textured moving shapes with exact masks and centers.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::dataset::{save_index_png, write_keypoints, Keypoint};
use crate::error::{invalid, Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    Translate,
    TranslateScale,
}

impl FromStr for MotionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(Self::Translate),
            "translate+scale" => Ok(Self::TranslateScale),
            other => Err(Error::Config(format!("unknown motion kind {other:?}"))),
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Translate => "translate",
            Self::TranslateScale => "translate+scale",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Solid,
    Noise,
}

impl FromStr for TextureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solid" => Ok(Self::Solid),
            "noise" => Ok(Self::Noise),
            other => Err(Error::Config(format!("unknown texture kind {other:?}"))),
        }
    }
}

impl fmt::Display for TextureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Solid => "solid",
            Self::Noise => "noise",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub video_count: usize,
    pub frames_per_video: usize,
    pub width: usize,
    pub height: usize,
    pub object_count: usize,
    pub motion: MotionKind,
    pub texture: TextureKind,
    pub seed: u64,
    /// Largest per-axis speed in pixels per frame.
    pub max_speed: f64,
    /// Fixed velocity for every object instead of a random one.
    pub velocity: Option<(f64, f64)>,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Standard deviation of independent per-frame pixel noise.
    pub frame_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            video_count: 16,
            frames_per_video: 20,
            width: 64,
            height: 64,
            object_count: 2,
            motion: MotionKind::Translate,
            texture: TextureKind::Noise,
            seed: 0,
            max_speed: 2.0,
            velocity: None,
            min_radius: 9.0,
            max_radius: 15.0,
            frame_noise: 0.0,
        }
    }
}

/// Largest allowed per-frame displacement: two cells of a stride-4 backbone.
pub const MAX_DISPLACEMENT: f64 = 8.0;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.video_count == 0 || self.frames_per_video == 0 {
            return invalid("video_count and frames must be positive");
        }
        if self.width < 8 || self.height < 8 {
            return invalid("frames must be at least 8x8");
        }
        if self.object_count == 0 || self.object_count > 254 {
            return invalid("object count must be in 1..=254");
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return invalid("radii must satisfy 0 < min_radius <= max_radius");
        }
        if 2.0 * self.max_radius * 1.2 >= self.width.min(self.height) as f64 {
            return invalid("objects too large for the frame");
        }
        let (vx, vy) = self.velocity.unwrap_or((self.max_speed, self.max_speed));
        if !(self.max_speed >= 0.0) || vx.hypot(vy) > MAX_DISPLACEMENT {
            return invalid(format!("per-frame displacement must not exceed {MAX_DISPLACEMENT} pixels"));
        }
        if !(self.frame_noise >= 0.0) {
            return invalid("frame_noise must be non-negative");
        }
        Ok(())
    }

    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let d = Self::default();
        let velocity = match kv.take::<String>("velocity")? {
            None => None,
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(format!("velocity: {e}")));
                match parts.as_slice() {
                    [x, y] => Some((parse(x)?, parse(y)?)),
                    _ => return Err(Error::Config(format!("velocity expects vx,vy, found {v:?}"))),
                }
            }
        };
        let spec = Self {
            video_count: kv.take_or("video_count", d.video_count)?,
            frames_per_video: kv.take_or("frames", d.frames_per_video)?,
            width: kv.take_or("width", d.width)?,
            height: kv.take_or("height", d.height)?,
            object_count: kv.take_or("objects", d.object_count)?,
            motion: kv.take_or("motion", d.motion)?,
            texture: kv.take_or("texture", d.texture)?,
            seed: kv.take_or("seed", d.seed)?,
            max_speed: kv.take_or("max_speed", d.max_speed)?,
            velocity,
            min_radius: kv.take_or("min_radius", d.min_radius)?,
            max_radius: kv.take_or("max_radius", d.max_radius)?,
            frame_noise: kv.take_or("frame_noise", d.frame_noise)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(KeyValues::load(path)?)
    }
}

/// One generated video held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub frames: Vec<Image>,
    /// Instance ids per pixel, 0 for background.
    pub masks: Vec<Array2<u8>>,
    pub keypoints: Vec<Vec<Keypoint>>,
}

/// Smooth random field: bilinear interpolation of a random lattice.
#[derive(Debug, Clone)]
struct ValueNoise {
    cell: f64,
    grid: Array2<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, extent: f64, cell: f64) -> Self {
        let n = (extent / cell).ceil() as usize + 3;
        Self { cell, grid: Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..1.0)) }
    }

    /// Samples at `(x, y)`, with the lattice origin offset so negative
    /// local coordinates stay in range.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let n = self.grid.nrows();
        let half = (n as f64 - 1.0) / 2.0;
        let gx = (x / self.cell + half).clamp(0.0, n as f64 - 1.001);
        let gy = (y / self.cell + half).clamp(0.0, n as f64 - 1.001);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let g = &self.grid;
        let top = g[[y0, x0]] * (1.0 - fx) + g[[y0, x0 + 1]] * fx;
        let bot = g[[y0 + 1, x0]] * (1.0 - fx) + g[[y0 + 1, x0 + 1]] * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Per-channel color field: base color plus two octaves of noise.
#[derive(Debug, Clone)]
struct Texture {
    base: [f64; 3],
    amplitude: f64,
    coarse: Vec<ValueNoise>,
    fine: Vec<ValueNoise>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, kind: TextureKind, extent: f64, coarse_cell: f64) -> Self {
        let base = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
        let amplitude = match kind {
            TextureKind::Solid => 0.0,
            TextureKind::Noise => rng.gen_range(0.35..0.6),
        };
        let coarse = (0..3).map(|_| ValueNoise::new(rng, extent, coarse_cell)).collect();
        let fine = (0..3).map(|_| ValueNoise::new(rng, extent, coarse_cell / 2.5)).collect();
        Self { base, amplitude, coarse, fine }
    }

    fn color(&self, c: usize, x: f64, y: f64) -> f64 {
        if self.amplitude == 0.0 {
            return self.base[c];
        }
        let n = 0.65 * (self.coarse[c].sample(x, y) - 0.5) + 0.35 * (self.fine[c].sample(x, y) - 0.5);
        (self.base[c] + 2.0 * self.amplitude * n).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Ellipse { rx: f64, ry: f64 },
    /// Convex polygon given by vertex radii at evenly spaced angles.
    Polygon { radii: Vec<f64>, phase: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { rx, ry } => (x / rx).powi(2) + (y / ry).powi(2) <= 1.0,
            Shape::Polygon { radii, phase } => {
                let n = radii.len();
                let verts: Vec<(f64, f64)> = (0..n)
                    .map(|i| {
                        let a = phase + i as f64 * std::f64::consts::TAU / n as f64;
                        (radii[i] * a.cos(), radii[i] * a.sin())
                    })
                    .collect();
                (0..n).all(|i| {
                    let (ax, ay) = verts[i];
                    let (bx, by) = verts[(i + 1) % n];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
                })
            }
        }
    }

    fn extent(&self) -> f64 {
        match self {
            Shape::Ellipse { rx, ry } => rx.max(*ry),
            Shape::Polygon { radii, .. } => radii.iter().cloned().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone)]
struct Object {
    shape: Shape,
    texture: Texture,
    position: (f64, f64),
    velocity: (f64, f64),
    scale_phase: f64,
}

fn random_object(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Object {
    let r = rng.gen_range(spec.min_radius..=spec.max_radius);
    let shape = if rng.gen_bool(0.5) {
        Shape::Ellipse { rx: r, ry: r * rng.gen_range(0.6..1.0) }
    } else {
        let n = rng.gen_range(5..=7);
        Shape::Polygon { radii: (0..n).map(|_| r * rng.gen_range(0.85..1.0)).collect(), phase: rng.gen_range(0.0..1.0) }
    };
    let cell = rng.gen_range(3.0..5.0);
    let texture = Texture::new(rng, spec.texture, 4.0 * r, cell);
    let margin = shape.extent() * 1.2;
    let position = (
        rng.gen_range(margin..=spec.width as f64 - margin),
        rng.gen_range(margin..=spec.height as f64 - margin),
    );
    let velocity = spec.velocity.unwrap_or_else(|| {
        if spec.max_speed == 0.0 {
            (0.0, 0.0)
        } else {
            (rng.gen_range(-spec.max_speed..=spec.max_speed), rng.gen_range(-spec.max_speed..=spec.max_speed))
        }
    });
    Object { shape, texture, position, velocity, scale_phase: rng.gen_range(0.0..std::f64::consts::TAU) }
}

fn object_scale(spec: &SyntheticSpec, obj: &Object, t: usize) -> f64 {
    match spec.motion {
        MotionKind::Translate => 1.0,
        MotionKind::TranslateScale => 1.0 + 0.15 * (obj.scale_phase + 0.25 * t as f64).sin(),
    }
}

/// Advances one frame, reflecting off the walls so the object stays inside.
fn step(spec: &SyntheticSpec, obj: &mut Object) {
    let margin = obj.shape.extent() * 1.2;
    let bounds = [(margin, spec.width as f64 - margin), (margin, spec.height as f64 - margin)];
    let mut p = [obj.position.0 + obj.velocity.0, obj.position.1 + obj.velocity.1];
    let mut v = [obj.velocity.0, obj.velocity.1];
    for axis in 0..2 {
        let (lo, hi) = bounds[axis];
        if p[axis] < lo {
            p[axis] = 2.0 * lo - p[axis];
            v[axis] = -v[axis];
        } else if p[axis] > hi {
            p[axis] = 2.0 * hi - p[axis];
            v[axis] = -v[axis];
        }
        p[axis] = p[axis].clamp(lo, hi);
    }
    obj.position = (p[0], p[1]);
    obj.velocity = (v[0], v[1]);
}

/// Generates one video deterministically from the generator seed and the video index.
pub fn generate_video(spec: &SyntheticSpec, index: usize) -> Result<SyntheticVideo> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (w, h) = (spec.width, spec.height);
    let cell = rng.gen_range(5.0..8.0);
    let background = Texture::new(&mut rng, spec.texture, 2.0 * w.max(h) as f64, cell);
    let mut objects: Vec<Object> = (0..spec.object_count).map(|_| random_object(spec, &mut rng)).collect();
    let mut video = SyntheticVideo { frames: Vec::new(), masks: Vec::new(), keypoints: Vec::new() };
    for t in 0..spec.frames_per_video {
        if t > 0 {
            for o in objects.iter_mut() {
                step(spec, o);
            }
        }
        let mut ids = Array2::<u8>::zeros((h, w));
        let mut local = Array2::<(f64, f64)>::from_elem((h, w), (0.0, 0.0));
        for (k, o) in objects.iter().enumerate() {
            let s = object_scale(spec, o, t);
            for y in 0..h {
                for x in 0..w {
                    let lx = (x as f64 + 0.5 - o.position.0) / s;
                    let ly = (y as f64 + 0.5 - o.position.1) / s;
                    if o.shape.contains(lx, ly) {
                        ids[[y, x]] = (k + 1) as u8;
                        local[[y, x]] = (lx, ly);
                    }
                }
            }
        }
        let noise: Vec<f64> = if spec.frame_noise > 0.0 {
            let normal = rand_distr::Normal::new(0.0, spec.frame_noise).expect("valid noise");
            (0..3 * h * w).map(|_| rng.sample(normal)).collect()
        } else {
            Vec::new()
        };
        let frame = Image::from_fn(h, w, |c, y, x| {
            let id = ids[[y, x]] as usize;
            let v = if id == 0 {
                background.color(c, x as f64 + 0.5 - w as f64 / 2.0, y as f64 + 0.5 - h as f64 / 2.0)
            } else {
                let (lx, ly) = local[[y, x]];
                objects[id - 1].texture.color(c, lx, ly)
            };
            let n = noise.get((c * h + y) * w + x).copied().unwrap_or(0.0);
            (v + n).clamp(0.0, 1.0)
        });
        let kps = objects
            .iter()
            .enumerate()
            .map(|(k, o)| Keypoint { id: k as u32 + 1, x: o.position.0, y: o.position.1 })
            .collect();
        video.frames.push(frame);
        video.masks.push(ids);
        video.keypoints.push(kps);
    }
    Ok(video)
}

pub fn video_name(index: usize) -> String {
    format!("video_{index:03}")
}

/// Writes the whole synthetic dataset below `root`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    for v in 0..spec.video_count {
        let video = generate_video(spec, v)?;
        write_video(&video, &root.join(video_name(v)))?;
    }
    Ok(())
}

pub fn write_video(video: &SyntheticVideo, dir: &Path) -> Result<()> {
    for sub in ["frames", "masks", "keypoints"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    for (t, ((frame, mask), kps)) in video.frames.iter().zip(&video.masks).zip(&video.keypoints).enumerate() {
        frame.save_png(&dir.join("frames").join(format!("{t:05}.png")))?;
        save_index_png(mask, &dir.join("masks").join(format!("{t:05}.png")))?;
        write_keypoints(kps, &dir.join("keypoints").join(format!("{t:05}.txt")))?;
    }
    Ok(())
}
