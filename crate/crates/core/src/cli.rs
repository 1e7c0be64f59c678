//! Command-line front end. Exit codes: 0 success, 1 usage, validation or
//! configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::affinity::compute_affinity;
use crate::backbone::Backbone;
use crate::dataset::{index_dataset, save_index_png, video_from_dir, write_keypoints};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pipeline::{evaluate_dataset, pad_to_stride, propagate_dataset, propagate_video_keypoints, propagate_video_masks, EvalTask};
use crate::propagation::{LabelKind, PropagationConfig};
use crate::synth::{generate_synthetic, SyntheticSpec};
use crate::tracker::{make_pair, PatchBox};
use crate::trainer::{run_training, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "vcorr", version, about = "Dense video correspondence: training, label propagation and evaluation")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Seed for every random draw; overrides seeds in config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic video dataset.
    GenData(GenDataArgs),
    /// Train a backbone from a key=value config.
    Train(TrainArgs),
    /// Propagate first-frame masks or keypoints through a video or a dataset.
    Propagate(PropagateArgs),
    /// Score predictions against ground truth and write a JSON report.
    Eval(EvalArgs),
    /// Track a random patch between two frames and draw both boxes.
    TrackDebug(TrackDebugArgs),
    /// Write the affinity between two frames as a grayscale heatmap.
    AffinityDump(AffinityDumpArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator config; defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory of numbered frames of a single video.
    #[arg(long, conflicts_with = "dataset", requires = "labels")]
    pub video: Option<PathBuf>,
    /// First-frame mask (PNG) or keypoint file for `--video`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Dataset root; every video with first-frame annotations is propagated.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `mask` or `keypoint`.
    #[arg(long, default_value = "mask")]
    pub task: LabelKind,
    /// Preceding predicted frames used as references.
    #[arg(long = "L", default_value_t = 7)]
    pub context: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.05)]
    pub temperature: f64,
    /// Use the plain softmax affinity instead of the mutually weighted one.
    #[arg(long)]
    pub no_mutual: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction root laid out as `<video>/masks` or `<video>/keypoints`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth dataset root.
    #[arg(long)]
    pub gt: PathBuf,
    /// `vos`, `keypoint` or `semantic`.
    #[arg(long, default_value = "vos")]
    pub task: EvalTask,
    /// Class count for the semantic task.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Report path; the report is also printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrackDebugArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Reference and target frame.
    #[arg(long, num_args = 2, value_names = ["REFERENCE", "TARGET"])]
    pub pair: Vec<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub patch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AffinityDumpArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Reference and target frame; rows of the heatmap are target cells.
    #[arg(long, num_args = 2, value_names = ["REFERENCE", "TARGET"])]
    pub pair: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub temperature: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Propagate(a) => propagate(a),
        Command::Eval(a) => eval(a),
        Command::TrackDebug(a) => track_debug(a, cli.seed.unwrap_or(0)),
        Command::AffinityDump(a) => affinity_dump(a),
    }
}

fn gen_data(a: GenDataArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticSpec::load(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    generate_synthetic(&spec, &a.out)?;
    println!("wrote {} videos to {}", spec.video_count, a.out.display());
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.backbone.seed = s;
    }
    let summary = run_training(&cfg, a.resume.as_deref())?;
    println!("{}", summary.final_checkpoint.display());
    Ok(())
}

fn propagate(a: PropagateArgs) -> Result<()> {
    let backbone = Backbone::load(&a.ckpt)?;
    let cfg = PropagationConfig { context: a.context, k: a.k, temperature: a.temperature, kind: a.task, mutual: !a.no_mutual };
    cfg.validate()?;
    match (&a.video, &a.dataset) {
        (Some(video), None) => {
            let labels = a.labels.as_deref().ok_or_else(|| Error::Config("--video requires --labels".into()))?;
            std::fs::create_dir_all(&a.out)?;
            match a.task {
                LabelKind::Mask => {
                    let entry = video_from_dir(video, Some(labels), None)?;
                    for (m, f) in propagate_video_masks(&backbone, &entry, &cfg)?.iter().zip(&entry.frames) {
                        save_index_png(m, &a.out.join(format!("{}.png", stem(f))))?;
                    }
                }
                LabelKind::Keypoint => {
                    let entry = video_from_dir(video, None, Some(labels))?;
                    for (k, f) in propagate_video_keypoints(&backbone, &entry, &cfg)?.iter().zip(&entry.frames) {
                        write_keypoints(k, &a.out.join(format!("{}.txt", stem(f))))?;
                    }
                }
            }
            println!("propagated {} to {}", video.display(), a.out.display());
        }
        (None, Some(root)) => {
            let index = index_dataset(root)?;
            let names = propagate_dataset(&backbone, &index, &cfg, &a.out, None)?;
            println!("propagated {} videos to {}", names.len(), a.out.display());
        }
        _ => return Err(Error::Config("give exactly one of --video or --dataset".into())),
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn eval(a: EvalArgs) -> Result<()> {
    let task = match (a.task, a.classes) {
        (EvalTask::Semantic(_), Some(c)) if c > 0 => EvalTask::Semantic(c),
        (EvalTask::Semantic(_), _) => return Err(Error::Config("semantic evaluation needs --classes".into())),
        (t, _) => t,
    };
    let gt = index_dataset(&a.gt)?;
    let report = evaluate_dataset(&a.pred, &gt, task, None)?;
    if let Some(out) = &a.out {
        report.save(out)?;
    }
    println!("{}", report.to_json());
    Ok(())
}

fn pair_frames(pair: &[PathBuf]) -> Result<(Image, Image)> {
    match pair {
        [r, t] => Ok((Image::load(r)?, Image::load(t)?)),
        _ => Err(Error::Config("--pair takes two frames".into())),
    }
}

fn draw_box(img: &mut image::RgbImage, b: &PatchBox, x_offset: u32, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = b.left().round() as i64 + x_offset as i64;
    let y0 = b.top().round() as i64;
    let x1 = x0 + b.width.round() as i64 - 1;
    let y1 = y0 + b.height.round() as i64 - 1;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn track_debug(a: TrackDebugArgs, seed: u64) -> Result<()> {
    let backbone = Backbone::load(&a.ckpt)?;
    let (reference, target) = pair_frames(&a.pair)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = make_pair(&backbone, &reference, &target, a.patch_size, &mut rng)?;
    let rw = reference.width() as u32;
    let mut canvas = image::RgbImage::new(rw * 2, reference.height() as u32);
    image::imageops::replace(&mut canvas, &reference.to_rgb8(), 0, 0);
    image::imageops::replace(&mut canvas, &target.to_rgb8(), rw as i64, 0);
    draw_box(&mut canvas, &pair.reference_box, 0, [255, 0, 0]);
    draw_box(&mut canvas, &pair.target_box, rw, [0, 255, 0]);
    canvas.save(&a.out)?;
    let b = |b: &PatchBox| serde_json::json!({"center_x": b.center_x, "center_y": b.center_y, "width": b.width, "height": b.height, "scale": b.scale});
    let doc = serde_json::json!({
        "reference_box": b(&pair.reference_box),
        "target_box": b(&pair.target_box),
        "confidence": pair.match_confidence,
    });
    println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    Ok(())
}

fn affinity_dump(a: AffinityDumpArgs) -> Result<()> {
    let backbone = Backbone::load(&a.ckpt)?;
    let (reference, target) = pair_frames(&a.pair)?;
    let s = backbone.stride();
    let fr = backbone.forward(&pad_to_stride(&reference, s))?.normalized_with_norms().0;
    let ft = backbone.forward(&pad_to_stride(&target, s))?.normalized_with_norms().0;
    let aff = compute_affinity(&ft, &fr, a.temperature)?;
    let max_dev = aff.values().rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    aff.to_heatmap().save(&a.out)?;
    println!(
        "{}",
        serde_json::json!({"rows": aff.rows(), "cols": aff.cols(), "max_row_sum_error": max_dev, "out": a.out.display().to_string()})
    );
    Ok(())
}
