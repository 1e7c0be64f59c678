//! Offline training: batch assembly with patch tracking, the batch objective,
//! backpropagation through the backbone, lr scheduling and checkpointing.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{manifest_path, Architecture, Backbone, BackboneConfig};
use crate::codec::{CodecId, TransformCodec};
use crate::config::KeyValues;
use crate::dataset::{index_dataset, DatasetIndex};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{LossReport, LossSwitches};
use crate::nn::{self, Adam};
use crate::objective::{batch_objective, ObjectiveSettings, PairSample};
use crate::tracker::{make_pair, TrackedPair};

const STATE_MAGIC: &[u8; 8] = b"VCORRTRN";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    pub lr_halving_epochs: u64,
    pub warmup_epochs: u64,
    pub total_epochs: u64,
    /// Optimizer steps counted as one epoch.
    pub steps_per_epoch: u64,
    pub temperature: f64,
    pub switches: LossSwitches,
    pub seed: u64,
    pub codec: CodecId,
    /// Frozen codec file, required for the learned codec.
    pub codec_path: Option<PathBuf>,
    pub backbone: BackboneConfig,
    /// Largest frame gap between reference and target.
    pub max_frame_gap: usize,
    /// Threads used for batch assembly; 1 runs inline.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("run"),
            batch_size: 4,
            patch_size: 64,
            learning_rate: 1e-3,
            lr_halving_epochs: 10,
            warmup_epochs: 5,
            total_epochs: 20,
            steps_per_epoch: 100,
            temperature: 0.07,
            switches: LossSwitches::ALL,
            seed: 0,
            codec: CodecId::Color,
            codec_path: None,
            backbone: BackboneConfig::default(),
            max_frame_gap: 5,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.warmup_epochs > self.total_epochs {
            return bad(format!("warmup_epochs {} exceeds total_epochs {}", self.warmup_epochs, self.total_epochs));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return bad("learning_rate and temperature must be positive".into());
        }
        if self.lr_halving_epochs == 0 || self.steps_per_epoch == 0 {
            return bad("lr_halving_epochs and steps_per_epoch must be positive".into());
        }
        if self.max_frame_gap == 0 || self.workers == 0 {
            return bad("max_frame_gap and workers must be positive".into());
        }
        self.backbone.validate()?;
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(self.backbone.stride) {
            return bad(format!("patch_size {} must be a positive multiple of the stride", self.patch_size));
        }
        if self.codec == CodecId::Learned && self.codec_path.is_none() {
            return bad("codec = learned requires codec_path".into());
        }
        if !self.switches.intra && !self.switches.inter && !self.switches.sparse && !self.switches.cycle && !self.switches.concentration {
            return bad("at least one loss must be enabled".into());
        }
        Ok(())
    }

    /// Parses a config; relative paths are resolved against `base`.
    pub fn from_key_values(mut kv: KeyValues, base: &Path) -> Result<Self> {
        let d = Self::default();
        let path = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let switches = LossSwitches {
            intra: kv.take_bool("loss_intra", true)?,
            inter: kv.take_bool("loss_inter", true)?,
            sparse: kv.take_bool("loss_sparse", true)?,
            cycle: kv.take_bool("loss_cycle", true)?,
            concentration: kv.take_bool("loss_concentration", true)?,
        };
        let seed = kv.take_or("seed", d.seed)?;
        let backbone = BackboneConfig {
            arch: kv.take_or::<String>("backbone", "small".into())?.parse::<Architecture>()?,
            stride: kv.take_or("backbone_stride", d.backbone.stride)?,
            channels: kv.take_or("backbone_channels", d.backbone.channels)?,
            depth: kv.take_or("backbone_depth", d.backbone.depth)?,
            seed,
        };
        let cfg = Self {
            dataset: path(kv.take_or("dataset", d.dataset)?),
            output: path(kv.take_or("output", d.output)?),
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            patch_size: kv.take_or("patch_size", d.patch_size)?,
            learning_rate: kv.take_or("learning_rate", d.learning_rate)?,
            lr_halving_epochs: kv.take_or("lr_halving_epochs", d.lr_halving_epochs)?,
            warmup_epochs: kv.take_or("warmup_epochs", d.warmup_epochs)?,
            total_epochs: kv.take_or("total_epochs", d.total_epochs)?,
            steps_per_epoch: kv.take_or("steps_per_epoch", d.steps_per_epoch)?,
            temperature: kv.take_or("temperature", d.temperature)?,
            switches,
            seed,
            codec: kv.take_or::<String>("codec", "color".into())?.parse()?,
            codec_path: kv.take::<PathBuf>("codec_path")?.map(path),
            backbone,
            max_frame_gap: kv.take_or("max_frame_gap", d.max_frame_gap)?,
            workers: kv.take_or("workers", d.workers)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_key_values(KeyValues::load(path)?, base)
    }

    pub fn total_steps(&self) -> u64 {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn epoch_of(&self, step: u64) -> u64 {
        step / self.steps_per_epoch
    }

    /// Loss switches in effect during `epoch`; warm-up drops the inter-video terms.
    pub fn switches_at(&self, epoch: u64) -> LossSwitches {
        if epoch < self.warmup_epochs {
            self.switches.without_inter()
        } else {
            self.switches
        }
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        learning_rate(self.learning_rate, self.lr_halving_epochs, epoch)
    }

    pub fn load_codec(&self) -> Result<TransformCodec> {
        let codec = match (self.codec, &self.codec_path) {
            (CodecId::Color, _) => TransformCodec::color(self.backbone.stride),
            (CodecId::Learned, Some(p)) => TransformCodec::load(p)?,
            (CodecId::Learned, None) => return Err(Error::Config("codec = learned requires codec_path".into())),
        };
        if codec.stride() != self.backbone.stride {
            return Err(Error::Config(format!(
                "codec stride {} differs from backbone stride {}",
                codec.stride(),
                self.backbone.stride
            )));
        }
        Ok(codec)
    }
}

/// `base * 0.5^floor(epoch / halving)`.
pub fn learning_rate(base: f64, halving_epochs: u64, epoch: u64) -> f64 {
    let halvings = (epoch / halving_epochs.max(1)).min(1074) as i32;
    base * 0.5f64.powi(halvings)
}

/// Frames of one training video, held in memory.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub name: String,
    pub frames: Vec<Image>,
}

pub fn load_videos(index: &DatasetIndex) -> Result<Vec<VideoFrames>> {
    index
        .videos
        .iter()
        .map(|v| Ok(VideoFrames { name: v.name.clone(), frames: v.load_frames()? }))
        .collect()
}

/// Where one pair of a batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSource {
    pub video: usize,
    pub reference_frame: usize,
    pub target_frame: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<TrackedPair>,
    pub sources: Vec<PairSource>,
}

fn step_rng(seed: u64, step: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(1 << 16).wrapping_add(slot));
    rng
}

/// Picks `n` distinct videos then a reference frame and a target up to
/// `max_gap` frames ahead in each, and tracks a random patch. The draw
/// depends only on `(seed, step)`, whatever the worker count.
#[allow(clippy::too_many_arguments)]
pub fn build_batch(
    videos: &[VideoFrames],
    backbone: &Backbone,
    n: usize,
    patch_size: usize,
    max_gap: usize,
    seed: u64,
    step: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Batch> {
    let usable: Vec<usize> = (0..videos.len()).filter(|&i| videos[i].frames.len() >= 2).collect();
    if usable.len() < n {
        return Err(Error::Config(format!("batch of {n} needs {n} videos with at least 2 frames, dataset has {}", usable.len())));
    }
    let mut rng = step_rng(seed, step, 0);
    let chosen: Vec<usize> = sample(&mut rng, usable.len(), n).into_iter().map(|i| usable[i]).collect();
    let sources: Vec<PairSource> = chosen
        .iter()
        .map(|&v| {
            let len = videos[v].frames.len();
            let reference_frame = rng.gen_range(0..len - 1);
            let gap = rng.gen_range(1..=max_gap.min(len - 1 - reference_frame));
            PairSource { video: v, reference_frame, target_frame: reference_frame + gap }
        })
        .collect();
    let track = |(slot, s): (usize, &PairSource)| {
        let mut rng = step_rng(seed, step, slot as u64 + 1);
        let frames = &videos[s.video].frames;
        make_pair(backbone, &frames[s.reference_frame], &frames[s.target_frame], patch_size, &mut rng)
    };
    let pairs: Result<Vec<TrackedPair>> = match pool {
        Some(pool) => pool.install(|| sources.par_iter().enumerate().map(track).collect()),
        None => sources.iter().enumerate().map(track).collect(),
    };
    Ok(Batch { pairs: pairs?, sources })
}

/// Optimizer, schedule and running statistics around the backbone.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub backbone: Backbone,
    pub optimizer: Adam,
    /// Sum and count of step totals in the current epoch.
    pub running_total: f64,
    pub running_count: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let backbone = Backbone::new(cfg.backbone)?;
        let optimizer = Adam::new(&backbone.param_sizes());
        Ok(Self { step: 0, epoch: 0, lr: cfg.lr_at(0), backbone, optimizer, running_total: 0.0, running_count: 0 })
    }

    pub fn running_mean(&self) -> f64 {
        if self.running_count == 0 {
            0.0
        } else {
            self.running_total / self.running_count as f64
        }
    }

    /// Writes backbone then optimizer trailer, via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.backbone.write_to(&mut w)?;
            w.write_all(STATE_MAGIC)?;
            nn::write_u32(&mut w, STATE_VERSION)?;
            nn::write_u64(&mut w, self.step)?;
            nn::write_u64(&mut w, self.epoch)?;
            w.write_all(&self.lr.to_le_bytes())?;
            w.write_all(&self.running_total.to_le_bytes())?;
            nn::write_u64(&mut w, self.running_count)?;
            nn::write_u64(&mut w, self.optimizer.t)?;
            for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
                nn::write_f32s(&mut w, m)?;
                nn::write_f32s(&mut w, v)?;
            }
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        self.backbone.write_manifest(&manifest_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let backbone = Backbone::read_from(&mut r)?;
        let mut magic = [0u8; 8];
        std::io::Read::read_exact(&mut r, &mut magic).map_err(|_| Error::Format("checkpoint has no training state".into()))?;
        if &magic != STATE_MAGIC {
            return Err(Error::Format("checkpoint has no training state".into()));
        }
        let version = nn::read_u32(&mut r)?;
        if version != STATE_VERSION {
            return Err(Error::Format(format!("unsupported training state version {version}")));
        }
        let step = nn::read_u64(&mut r)?;
        let epoch = nn::read_u64(&mut r)?;
        let lr = f64::from_bits(nn::read_u64(&mut r)?);
        let running_total = f64::from_bits(nn::read_u64(&mut r)?);
        let running_count = nn::read_u64(&mut r)?;
        let mut optimizer = Adam::new(&backbone.param_sizes());
        optimizer.t = nn::read_u64(&mut r)?;
        for (m, v) in optimizer.m.iter_mut().zip(optimizer.v.iter_mut()) {
            *m = nn::read_f32s(&mut r, m.len())?;
            *v = nn::read_f32s(&mut r, v.len())?;
        }
        Ok(Self { step, epoch, lr, backbone, optimizer, running_total, running_count })
    }
}

/// One optimizer update on `batch` with the given switches.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    codec: &TransformCodec,
    temperature: f64,
    switches: LossSwitches,
) -> Result<LossReport> {
    let bb = &state.backbone;
    let mut samples = Vec::with_capacity(batch.pairs.len());
    let (mut refs, mut tgts, mut traces) = (Vec::new(), Vec::new(), Vec::new());
    for pair in &batch.pairs {
        let (fr, tr) = bb.forward_train(&pair.reference_patch)?;
        let (ft, tt) = bb.forward_train(&pair.target_patch)?;
        let (fr, nr) = fr.normalized_with_norms();
        let (ft, nt) = ft.normalized_with_norms();
        samples.push(PairSample::new(codec, pair.reference_patch.clone(), pair.target_patch.clone())?);
        refs.push((fr, nr));
        tgts.push((ft, nt));
        traces.push((tr, tt));
    }
    let ref_maps: Vec<_> = refs.iter().map(|(f, _)| f.clone()).collect();
    let tgt_maps: Vec<_> = tgts.iter().map(|(f, _)| f.clone()).collect();
    let out = batch_objective(&samples, &ref_maps, &tgt_maps, codec, ObjectiveSettings { temperature, switches })?;
    let grads_finite = out.gradients.iter().all(|g| g.reference.iter().chain(g.target.iter()).all(|v| v.is_finite()));
    if !out.report.is_finite() || !grads_finite {
        let dump: Vec<String> = batch
            .sources
            .iter()
            .map(|s| format!("video {} frames {}->{}", s.video, s.reference_frame, s.target_frame))
            .collect();
        return Err(Error::Aborted(format!("non-finite loss at step {}: {:?}; batch: {}", state.step, out.report, dump.join(", "))));
    }
    let mut total: Vec<Vec<f32>> = bb.param_sizes().iter().map(|&n| vec![0.0; n]).collect();
    for (b, g) in out.gradients.iter().enumerate() {
        let dr = crate::affinity::normalize_backward(refs[b].0.values(), &refs[b].1, &g.reference);
        let dt = crate::affinity::normalize_backward(tgts[b].0.values(), &tgts[b].1, &g.target);
        nn::accumulate(&mut total, &bb.backward(&traces[b].0, &dr));
        nn::accumulate(&mut total, &bb.backward(&traces[b].1, &dt));
    }
    if total.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Aborted(format!("non-finite parameter gradient at step {}", state.step)));
    }
    let lr = state.lr as f32;
    state.optimizer.step(&mut state.backbone.params_mut(), &total, lr);
    state.step += 1;
    state.running_total += out.report.total;
    state.running_count += 1;
    Ok(out.report)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    /// Reports of the steps run by this call, with their step numbers.
    pub reports: Vec<(u64, LossReport)>,
}

pub fn checkpoint_path(output: &Path, epoch: u64) -> PathBuf {
    output.join(format!("epoch_{epoch:04}.ckpt"))
}

pub fn final_checkpoint_path(output: &Path) -> PathBuf {
    output.join("final.ckpt")
}

pub fn log_path(output: &Path) -> PathBuf {
    output.join("train.log")
}

/// Runs warm-up then joint training, writing a checkpoint after every epoch.
/// With `resume`, continues from the stored step.
pub fn run_training(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let codec = cfg.load_codec()?;
    let index = index_dataset(&cfg.dataset)?;
    let videos = load_videos(&index)?;
    if videos.len() < cfg.batch_size {
        return Err(Error::Config(format!("batch_size {} exceeds the {} usable videos", cfg.batch_size, videos.len())));
    }
    std::fs::create_dir_all(&cfg.output)?;
    codec.save(&cfg.output.join("codec.bin"))?;
    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| Error::Config(format!("cannot start workers: {e}")))?,
        )
    } else {
        None
    };

    let mut state = match resume {
        Some(p) => {
            let s = TrainState::load(p)?;
            if *s.backbone.config() != cfg.backbone {
                return Err(Error::Config("resume checkpoint backbone differs from the config".into()));
            }
            s
        }
        None => {
            let s = TrainState::new(cfg)?;
            s.save(&checkpoint_path(&cfg.output, 0))?;
            s
        }
    };
    if cfg.total_epochs == 0 {
        return Ok(TrainSummary { final_checkpoint: checkpoint_path(&cfg.output, 0), reports: Vec::new() });
    }

    let mut log = OpenOptions::new().create(true).append(true).open(log_path(&cfg.output))?;
    let start = Instant::now();
    let mut reports = Vec::new();
    while state.step < cfg.total_steps() {
        let epoch = cfg.epoch_of(state.step);
        if epoch != state.epoch {
            state.epoch = epoch;
            state.running_total = 0.0;
            state.running_count = 0;
        }
        state.lr = cfg.lr_at(epoch);
        let batch = build_batch(
            &videos,
            &state.backbone,
            cfg.batch_size,
            cfg.patch_size,
            cfg.max_frame_gap,
            cfg.seed,
            state.step,
            pool.as_ref(),
        )?;
        let step = state.step;
        let report = train_step(&mut state, &batch, &codec, cfg.temperature, cfg.switches_at(epoch))?;
        writeln!(log, "{}", report.log_line(step, state.lr, start.elapsed().as_secs_f64()))?;
        reports.push((step, report));
        if state.step % cfg.steps_per_epoch == 0 {
            log::info!("epoch {} done, mean total {:.5}, lr {:.3e}", epoch + 1, state.running_mean(), state.lr);
            state.save(&checkpoint_path(&cfg.output, epoch + 1))?;
        }
    }
    log.flush()?;
    let final_checkpoint = final_checkpoint_path(&cfg.output);
    state.save(&final_checkpoint)?;
    Ok(TrainSummary { final_checkpoint, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticSpec};

    fn tiny_dataset(dir: &Path, videos: usize) -> PathBuf {
        let root = dir.join("data");
        let spec = SyntheticSpec {
            video_count: videos,
            frames_per_video: 6,
            width: 32,
            height: 32,
            object_count: 1,
            min_radius: 5.0,
            max_radius: 7.0,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, &root).unwrap();
        root
    }

    fn tiny_config(dir: &Path, data: &Path) -> TrainConfig {
        TrainConfig {
            dataset: data.to_path_buf(),
            output: dir.join("run"),
            batch_size: 2,
            patch_size: 16,
            learning_rate: 1e-3,
            lr_halving_epochs: 1,
            warmup_epochs: 1,
            total_epochs: 2,
            steps_per_epoch: 2,
            backbone: BackboneConfig { channels: 8, depth: 3, ..BackboneConfig::default() },
            ..TrainConfig::default()
        }
    }

    fn strip_wall(line: &str) -> String {
        line.split_whitespace().filter(|f| !f.starts_with("wall=")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let text = "dataset = d\noutput = /tmp/out\nbatch_size = 2\nloss_inter = false\nbackbone_channels = 16\nseed = 9\n";
        let cfg = TrainConfig::from_key_values(KeyValues::parse(text).unwrap(), Path::new("/base")).unwrap();
        assert_eq!(cfg.dataset, PathBuf::from("/base/d"));
        assert_eq!(cfg.output, PathBuf::from("/tmp/out"));
        assert!(!cfg.switches.inter);
        assert_eq!(cfg.backbone.seed, 9);
        let err = TrainConfig::from_key_values(KeyValues::parse("batchsize = 2\n").unwrap(), Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = TrainConfig::from_key_values(KeyValues::parse("warmup_epochs = 30\n").unwrap(), Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn lr_schedule_closed_form() {
        assert_eq!(learning_rate(1e-4, 40, 39), 1e-4);
        assert_eq!(learning_rate(1e-4, 40, 40), 5e-5);
        assert_eq!(learning_rate(1e-4, 40, 85), 2.5e-5);
        let cfg = TrainConfig::default();
        for e in 0..50 {
            assert_eq!(cfg.lr_at(e), cfg.learning_rate * 0.5f64.powi((e / cfg.lr_halving_epochs) as i32));
        }
    }

    #[test]
    fn warmup_drops_inter_terms() {
        let cfg = TrainConfig::default();
        let w = cfg.switches_at(0);
        assert!(!w.inter && !w.sparse && w.intra && w.cycle && w.concentration);
        assert_eq!(cfg.switches_at(cfg.warmup_epochs), LossSwitches::ALL);
    }

    #[test]
    fn batches_are_seeded_and_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path(), 4);
        let videos = load_videos(&index_dataset(&data).unwrap()).unwrap();
        let cfg = tiny_config(dir.path(), &data);
        let bb = Backbone::new(cfg.backbone).unwrap();
        let a = build_batch(&videos, &bb, 4, 16, 5, 3, 7, None).unwrap();
        let b = build_batch(&videos, &bb, 4, 16, 5, 3, 7, None).unwrap();
        assert_eq!(a.sources, b.sources);
        let mut vids: Vec<usize> = a.sources.iter().map(|s| s.video).collect();
        vids.sort_unstable();
        assert_eq!(vids, vec![0, 1, 2, 3]);
        for s in &a.sources {
            let gap = s.target_frame - s.reference_frame;
            assert!((1..=5).contains(&gap));
        }
        for (p, q) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(p.target_patch, q.target_patch);
            assert_eq!(p.reference_patch.width(), 16);
            assert_eq!(p.target_patch.height(), 16);
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let c = build_batch(&videos, &bb, 4, 16, 5, 3, 7, Some(&pool)).unwrap();
        assert_eq!(a.sources, c.sources);
        assert!(a.pairs.iter().zip(&c.pairs).all(|(p, q)| p.target_patch == q.target_patch));
        assert!(matches!(build_batch(&videos, &bb, 5, 16, 5, 3, 7, None), Err(Error::Config(_))));
    }

    #[test]
    fn step_reports_components_and_updates_backbone_only() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path(), 3);
        let videos = load_videos(&index_dataset(&data).unwrap()).unwrap();
        let cfg = tiny_config(dir.path(), &data);
        let codec = cfg.load_codec().unwrap();
        let codec_bits = codec.parameter_bits();
        let mut state = TrainState::new(&cfg).unwrap();
        let before: Vec<f32> = state.backbone.params().iter().flat_map(|p| p.data.clone()).collect();

        let batch = build_batch(&videos, &state.backbone, 1, 16, 5, 0, 0, None).unwrap();
        let r = train_step(&mut state, &batch, &codec, 0.07, LossSwitches::ALL).unwrap();
        assert_eq!((r.intra_inter_loss, r.sparse_loss), (0.0, 0.0));

        let batch = build_batch(&videos, &state.backbone, 2, 16, 5, 0, 1, None).unwrap();
        let r = train_step(&mut state, &batch, &codec, 0.07, cfg.switches_at(0)).unwrap();
        assert_eq!((r.intra_inter_loss, r.sparse_loss), (0.0, 0.0));
        assert!(r.self_loss > 0.0);

        let r = train_step(&mut state, &batch, &codec, 0.07, LossSwitches::ALL).unwrap();
        for v in [r.self_loss, r.intra_inter_loss, r.sparse_loss, r.cycle_loss, r.concentration_loss] {
            assert!(v > 0.0, "{r:?}");
        }
        let after: Vec<f32> = state.backbone.params().iter().flat_map(|p| p.data.clone()).collect();
        assert_ne!(before, after);
        assert_eq!(codec.parameter_bits(), codec_bits);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn zero_epochs_writes_init_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path(), 2);
        let cfg = TrainConfig { total_epochs: 0, warmup_epochs: 0, ..tiny_config(dir.path(), &data) };
        let s = run_training(&cfg, None).unwrap();
        assert_eq!(s.final_checkpoint, checkpoint_path(&cfg.output, 0));
        assert!(s.reports.is_empty());
        let ckpts: Vec<_> = std::fs::read_dir(&cfg.output)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "ckpt"))
            .collect();
        assert_eq!(ckpts.len(), 1);
        let init = TrainState::load(&s.final_checkpoint).unwrap();
        assert_eq!(init.step, 0);
    }

    #[test]
    fn seeded_runs_match_and_resume_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path(), 3);
        let cfg = tiny_config(dir.path(), &data);
        let a = run_training(&cfg, None).unwrap();
        let b = run_training(&TrainConfig { output: dir.path().join("run_b"), ..cfg.clone() }, None).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.reports.len(), 4);
        assert_eq!(std::fs::read(&a.final_checkpoint).unwrap(), std::fs::read(&b.final_checkpoint).unwrap());

        let resumed = run_training(
            &TrainConfig { output: dir.path().join("run_c"), ..cfg.clone() },
            Some(&checkpoint_path(&cfg.output, 1)),
        )
        .unwrap();
        assert_eq!(resumed.reports, a.reports[2..].to_vec());
        assert_eq!(std::fs::read(&resumed.final_checkpoint).unwrap(), std::fs::read(&a.final_checkpoint).unwrap());

        let log = std::fs::read_to_string(log_path(&cfg.output)).unwrap();
        let lines: Vec<String> = log.lines().map(strip_wall).collect();
        assert_eq!(lines.len(), 4);
        let (step, parsed) = LossReport::parse_log_line(log.lines().nth(3).unwrap()).unwrap();
        assert_eq!(step, 3);
        assert!((parsed.total - a.reports[3].1.total).abs() < 1e-7);
        let lrs: Vec<&str> = log.lines().map(|l| l.split_whitespace().nth(1).unwrap()).collect();
        assert_eq!(lrs[0], lrs[1]);
        assert_ne!(lrs[1], lrs[2]);
    }

    #[test]
    fn warmup_matches_inter_disabled_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(dir.path(), 3);
        let cfg = tiny_config(dir.path(), &data);
        let full = run_training(&cfg, None).unwrap();
        let no_inter = TrainConfig {
            output: dir.path().join("intra"),
            switches: LossSwitches::ALL.without_inter(),
            ..cfg.clone()
        };
        let intra = run_training(&no_inter, None).unwrap();
        let warm = cfg.steps_per_epoch as usize;
        assert_eq!(full.reports[..warm], intra.reports[..warm]);
        assert_ne!(full.reports[warm..], intra.reports[warm..]);
    }
}
