//! Subcommand arguments and implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use reftrack_core::dit::{track_token_index, ModelConfig};
use reftrack_core::inference::{predict_clip, predict_long_video, trace_attention, InferenceOptions, PaddingPolicy, Prediction, VideoInput};
use reftrack_core::metrics::{evaluate, EvalResult, MetricOptions, MetricSummary, QuerySpec, SweepAxis, SweepRow, BASE_THRESHOLDS};
use reftrack_core::model::Tracker;
use reftrack_core::synthscene::{generate_clip, generate_clip_strided, perturb_geometry, SceneDistribution, SceneSpec, TrackClip};
use reftrack_core::trainer::{example_loss, train, StepRecord, TrainConfig, TrainingExample};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::clipio::{prediction_container, read_clip, read_prediction, write_clip};
use crate::container::{Entry, TensorContainer};
use crate::error::{CliError, Result};
use crate::figures::write_pgm;

/// Environment variable supplying the default seed.
pub const SEED_ENV: &str = "TCR3_SEED";

#[derive(Debug, Parser)]
#[command(name = "reftrack", version, about = "Dense 3D point tracking from a reference frame")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic clips.
    Synth(SynthArgs),
    /// Train a model on a directory of clips.
    Train(TrainArgs),
    /// Predict tracks and visibility for one clip.
    Infer(InferArgs),
    /// Score a prediction against a clip's ground truth.
    Eval(EvalArgs),
    /// Dump attention of one track token.
    Attn(AttnArgs),
    /// Evaluate over temporal stride and video length grids.
    Sweep(SweepArgs),
}

/// `--seed`, else `TCR3_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// JSON scene spec (seed replaced per clip) or scene distribution.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Image size and clip length when no spec file is given.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 12)]
    pub frames: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Relative depth noise applied to the input geometry.
    #[arg(long, default_value_t = 0.0)]
    pub depth_noise: f64,
    /// Camera rotation noise in radians.
    #[arg(long, default_value_t = 0.0)]
    pub rot_noise: f64,
    /// Camera translation noise in scene units.
    #[arg(long, default_value_t = 0.0)]
    pub trans_noise: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SceneSource {
    Scene(SceneSpec),
    Distribution(SceneDistribution),
}

impl SceneSource {
    pub fn scene(&self, seed: u64) -> SceneSpec {
        match self {
            SceneSource::Scene(s) => SceneSpec { seed, ..s.clone() },
            SceneSource::Distribution(d) => d.sample(seed),
        }
    }
}

/// Writes `count` clips with seeds `seed + i`; returns manifest paths.
pub fn cmd_synth(args: &SynthArgs) -> Result<Vec<PathBuf>> {
    let seed = resolve_seed(args.seed)?;
    let source = match &args.spec {
        Some(p) => read_json(p)?,
        None => SceneSource::Distribution(SceneDistribution::new(args.width, args.height, args.frames)),
    };
    create_dir(&args.out)?;
    let noisy = args.depth_noise != 0.0 || args.rot_noise != 0.0 || args.trans_noise != 0.0;
    (0..args.count)
        .map(|i| {
            let s = seed + i as u64;
            let scene = source.scene(s);
            let mut clip = generate_clip_strided::<f32>(&scene, args.stride)?;
            if noisy {
                clip = perturb_geometry(&clip, args.depth_noise, (args.rot_noise, args.trans_noise), s)?;
            }
            write_clip(&args.out, &format!("clip-{i:04}"), &clip, Some(&scene))
        })
        .collect()
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of clip manifests.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Line-delimited JSON log; defaults to the checkpoint path with a
    /// `.jsonl` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lora_rank: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use each frame's own latent as its track latent.
    #[arg(long)]
    pub no_anchor: bool,
    /// Give every track latent the temporal index of frame 0.
    #[arg(long)]
    pub no_rope_align: bool,
    /// Regress absolute normalized tracks instead of residuals.
    #[arg(long)]
    pub no_residual: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainFile {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub clips: usize,
    pub examples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub records: Vec<StepRecord>,
}

/// Clip manifests in a directory, sorted by name.
pub fn list_manifests(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}

/// Resolves model and training configuration; flags override the file.
pub fn train_configs(args: &TrainArgs, first: &TrackClip<f32>) -> Result<(ModelConfig, TrainConfig)> {
    let file: TrainFile = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let mut model = file.model.unwrap_or_else(|| {
        let d = ModelConfig::default();
        ModelConfig {
            grid_w: first.width / d.patch,
            grid_h: first.height / d.patch,
            frames: first.len(),
            ..d
        }
    });
    let mut train = file.train.unwrap_or_default();
    if let Some(s) = args.steps {
        train.steps = s;
    }
    if let Some(r) = args.lora_rank {
        model.lora_rank = r;
    }
    if let Some(lr) = args.learning_rate {
        train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    train.seed = match args.seed {
        Some(s) => s,
        None if std::env::var(SEED_ENV).is_ok() => resolve_seed(None)?,
        None => train.seed,
    };
    model.first_frame_anchoring &= !args.no_anchor;
    model.temporal_rope_alignment &= !args.no_rope_align;
    model.residual_head &= !args.no_residual;
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

/// Builds training examples; clips with a recorded scene are re-rendered
/// at every configured stride.
pub fn load_examples(model: &Tracker<f32>, data: &Path, strides: &[usize]) -> Result<(usize, Vec<TrainingExample<f32>>)> {
    let manifests = list_manifests(data)?;
    let mut examples = Vec::new();
    for path in &manifests {
        let (clip, m) = read_clip::<f32>(path)?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match &m.scene {
            Some(scene) if strides != [m.stride] => {
                for &s in strides {
                    let c = if s == m.stride { clip.clone() } else { generate_clip_strided(scene, s)? };
                    examples.push(TrainingExample::from_clip(model, &c, format!("{id}@{s}"))?);
                }
            }
            _ => examples.push(TrainingExample::from_clip(model, &clip, id)?),
        }
    }
    Ok((manifests.len(), examples))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let manifests = list_manifests(&args.data)?;
    let first = manifests
        .first()
        .ok_or_else(|| CliError::Usage(format!("no clip manifests in {}", args.data.display())))?;
    let (first, _) = read_clip::<f32>(first)?;
    let (model_cfg, train_cfg) = train_configs(args, &first)?;
    let mut model: Tracker<f32> = Tracker::new(&model_cfg, train_cfg.seed)?;
    let (clips, examples) = load_examples(&model, &args.data, &train_cfg.strides)?;
    let mean_loss = |m: &Tracker<f32>| -> Result<f64> {
        let mut total = 0.0;
        for e in &examples {
            total += example_loss(m, e, &train_cfg)?.total;
        }
        Ok(total / examples.len() as f64)
    };
    let initial_loss = mean_loss(&model)?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("jsonl"));
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    let mut log_err = None;
    let records = if train_cfg.steps == 0 {
        Vec::new()
    } else {
        train(&mut model, &examples, &train_cfg, |r| {
            if log_err.is_none() {
                if let Err(e) = serde_json::to_string(r).map_err(CliError::from).and_then(|s| Ok(writeln!(log, "{s}")?)) {
                    log_err = Some(e);
                }
            }
        })?
    };
    if let Some(e) = log_err {
        return Err(e);
    }
    log.flush()?;
    save_checkpoint(&args.out, &model, Some(&train_cfg), records.len())?;
    Ok(TrainSummary {
        clips,
        examples: examples.len(),
        initial_loss,
        final_loss: mean_loss(&model)?,
        records,
    })
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Clip manifest.
    #[arg(long)]
    pub clip: PathBuf,
    /// Output prediction container.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep every `stride`-th frame of the clip.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Keep at most this many frames after striding.
    #[arg(long)]
    pub length: Option<usize>,
    /// Fail instead of windowing when the clip exceeds the model length.
    #[arg(long)]
    pub single_pass: bool,
    /// Return the decoded frame-0 tracks instead of the reference pointmap.
    #[arg(long)]
    pub no_anchor_identity: bool,
    /// Pad short windows by repeating their last frame.
    #[arg(long)]
    pub pad_windows: bool,
}

/// Frame indices kept by `--stride` and `--length`.
pub fn subsample_indices(len: usize, stride: usize, length: Option<usize>) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(CliError::Usage("stride must be at least 1".into()));
    }
    let idx: Vec<usize> = (0..len).step_by(stride).take(length.unwrap_or(usize::MAX)).collect();
    if idx.len() < 2 && len > 1 {
        return Err(CliError::Usage(format!("stride {stride} and length {length:?} leave fewer than 2 of {len} frames")));
    }
    Ok(idx)
}

pub fn infer_options(args: &InferArgs) -> InferenceOptions {
    InferenceOptions {
        anchor_identity: !args.no_anchor_identity,
        padding: if args.pad_windows { PaddingPolicy::RepeatLast } else { PaddingPolicy::None },
    }
}

/// Runs single-pass or windowed inference depending on the clip length.
pub fn run_inference(model: &Tracker<f32>, clip: &TrackClip<f32>, options: &InferenceOptions, single_pass: bool) -> Result<Prediction<f32>> {
    let input = VideoInput::from(clip);
    Ok(if single_pass {
        predict_clip(model, input, options)?
    } else {
        predict_long_video(model, input, options)?.prediction
    })
}

pub fn cmd_infer(args: &InferArgs) -> Result<Prediction<f32>> {
    let (model, _) = load_checkpoint::<f32>(&args.checkpoint)?;
    let (clip, _) = read_clip::<f32>(&args.clip)?;
    let indices = subsample_indices(clip.len(), args.stride, args.length)?;
    let clip = clip.select_frames(&indices);
    let pred = run_inference(&model, &clip, &infer_options(args), args.single_pass)?;
    let mut c = prediction_container(&pred)?;
    let idx: Vec<f64> = indices.iter().map(|&i| i as f64).collect();
    c.push(Entry::from_scalars("frame_indices", &[idx.len()], &idx)?)?;
    c.save(&args.out)?;
    Ok(pred)
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Prediction container written by `infer`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth clip manifest.
    #[arg(long)]
    pub gt: PathBuf,
    /// Output JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Base thresholds, rescaled by scene scale unless the clip is metric.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// `all`, `grid:STEP` or `random:COUNT[:SEED]`.
    #[arg(long, default_value = "all")]
    pub queries: String,
    #[arg(long)]
    pub include_occluded: bool,
}

pub fn parse_queries(s: &str) -> Result<QuerySpec> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| p.parse::<u64>().map_err(|_| CliError::Usage(format!("bad query spec {s}")));
    match parts.as_slice() {
        ["all"] => Ok(QuerySpec::All),
        ["grid", n] => Ok(QuerySpec::Grid { step: num(n)? as usize }),
        ["random", n] => Ok(QuerySpec::Random { count: num(n)? as usize, seed: 0 }),
        ["random", n, seed] => Ok(QuerySpec::Random {
            count: num(n)? as usize,
            seed: num(seed)?,
        }),
        _ => Err(CliError::Usage(format!("bad query spec {s}"))),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalResult> {
    let c = TensorContainer::load(&args.pred)?;
    let (tracks, vis) = read_prediction::<f32>(&c)?;
    let (mut gt, _) = read_clip::<f32>(&args.gt)?;
    if let Some(e) = c.get("frame_indices") {
        let idx: Vec<usize> = e.to_scalars::<f64>()?.into_iter().map(|v| v as usize).collect();
        if idx.iter().any(|&i| i >= gt.len()) {
            return Err(CliError::Format("prediction frame indices exceed the clip".into()));
        }
        gt = gt.select_frames(&idx);
    }
    let options = MetricOptions {
        thresholds: args.thresholds.clone().unwrap_or_else(|| BASE_THRESHOLDS.to_vec()),
        include_occluded: args.include_occluded,
        queries: parse_queries(&args.queries)?,
    };
    let result = evaluate(&tracks, &vis, &gt, &options)?;
    write_json(&args.out, &result)?;
    Ok(result)
}

#[derive(Debug, Clone, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub clip: PathBuf,
    /// Query pixel in the reference frame.
    #[arg(long)]
    pub x: usize,
    #[arg(long)]
    pub y: usize,
    /// Target frame of the track token.
    #[arg(long)]
    pub frame: usize,
    /// Output directory for the report and heatmaps.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnReport {
    pub pixel: [usize; 2],
    pub cell: [usize; 2],
    pub frame: usize,
    pub token: usize,
    /// Layer-averaged share of geometry attention per frame.
    pub frame_mass: Vec<f64>,
    /// Per-layer share of geometry attention per frame.
    pub layer_frame_mass: Vec<Vec<f64>>,
    pub argmax_frame: usize,
}

/// Head-averaged attention of one query over one frame's geometry tokens,
/// laid out on the latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnHeatmap {
    pub layer: usize,
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Attention report and heatmaps for the track token covering pixel
/// `(x, y)` at frame `j`.
pub fn attention_report(model: &Tracker<f32>, clip: &TrackClip<f32>, x: usize, y: usize, j: usize) -> Result<(AttnReport, Vec<AttnHeatmap>)> {
    let cfg = &model.config;
    let (cx, cy) = (x / cfg.patch, y / cfg.patch);
    let (trace, seq) = trace_attention(model, clip.into(), &[(j, cx, cy)])?;
    let frames = clip.len();
    let frame_mass = trace.frame_mass(&seq, 0, frames);
    let layer_frame_mass = (0..trace.layers).map(|l| trace.layer_frame_mass(&seq, 0, l, frames)).collect();
    let argmax_frame = (0..frames).max_by(|a, b| frame_mass[*a].total_cmp(&frame_mass[*b])).unwrap_or(0);
    let hw = cfg.tokens_per_frame();
    let mut maps = Vec::new();
    for layer in 0..trace.layers {
        for frame in 0..frames {
            let values = (0..hw)
                .map(|r| (0..trace.heads).map(|h| trace.weights(layer, h).at(0, frame * hw + r) as f64).sum::<f64>() / trace.heads as f64)
                .collect();
            maps.push(AttnHeatmap {
                layer,
                frame,
                width: cfg.grid_w,
                height: cfg.grid_h,
                values,
            });
        }
    }
    let report = AttnReport {
        pixel: [x, y],
        cell: [cx, cy],
        frame: j,
        token: track_token_index(frames, cfg.grid_h, cfg.grid_w, j, cx, cy),
        frame_mass,
        layer_frame_mass,
        argmax_frame,
    };
    Ok((report, maps))
}

/// Writes `report.json` and one `layer{L}_frame{K}.pgm` per heatmap. Each
/// latent cell becomes one pixel, scaled so the layer's largest weight
/// maps to 255.
pub fn cmd_attn(args: &AttnArgs) -> Result<AttnReport> {
    let (model, _) = load_checkpoint::<f32>(&args.checkpoint)?;
    let (clip, _) = read_clip::<f32>(&args.clip)?;
    let (report, maps) = attention_report(&model, &clip, args.x, args.y, args.frame)?;
    create_dir(&args.out)?;
    for layer in 0..report.layer_frame_mass.len() {
        let of_layer: Vec<&AttnHeatmap> = maps.iter().filter(|m| m.layer == layer).collect();
        let max = of_layer.iter().flat_map(|m| m.values.iter().copied()).fold(0.0, f64::max);
        for m in of_layer {
            let scaled: Vec<f64> = m.values.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
            write_pgm(&args.out.join(format!("layer{}_frame{}.pgm", m.layer, m.frame)), m.width, m.height, &scaled)?;
        }
    }
    write_json(&args.out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene distribution JSON; defaults to the model's image size.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub clips: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub max_stride: usize,
    #[arg(long, value_delimiter = ',', default_values_t = (1..=10).map(|i| 12 * i).collect::<Vec<usize>>())]
    pub lengths: Vec<usize>,
    /// Base thresholds, rescaled by scene scale.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
}

/// Stride rows keep the model's clip length and vary the spacing between
/// frames; length rows use consecutive frames and windowed inference.
pub fn run_sweep(model: &Tracker<f32>, dist: &SceneDistribution, clips: usize, seed: u64, max_stride: usize, lengths: &[usize], thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    let options = MetricOptions {
        thresholds: thresholds.to_vec(),
        ..MetricOptions::default()
    };
    let scenes: Vec<SceneSpec> = (0..clips).map(|i| dist.sample(seed + i as u64)).collect();
    let infer = InferenceOptions::default();
    let score = |clip: &TrackClip<f32>| -> Result<EvalResult> {
        let pred = predict_long_video(model, clip.into(), &infer)?.prediction;
        Ok(evaluate(&pred.tracks, &pred.visibility, clip, &options)?)
    };
    let mut rows = Vec::new();
    for stride in 1..=max_stride {
        let results = scenes
            .iter()
            .map(|s| score(&generate_clip_strided(&SceneSpec { frames: model.config.frames, ..s.clone() }, stride)?))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SweepRow {
            axis: SweepAxis::Stride,
            value: stride,
            summary: MetricSummary::from_results(&results),
        });
    }
    for &length in lengths {
        let results = scenes
            .iter()
            .map(|s| score(&generate_clip(&SceneSpec { frames: length, ..s.clone() })?))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SweepRow {
            axis: SweepAxis::Length,
            value: length,
            summary: MetricSummary::from_results(&results),
        });
    }
    Ok(rows)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>> {
    let (model, _) = load_checkpoint::<f32>(&args.checkpoint)?;
    let dist = match &args.spec {
        Some(p) => read_json(p)?,
        None => SceneDistribution::new(model.config.image_width(), model.config.image_height(), model.config.frames),
    };
    let thresholds = args.thresholds.clone().unwrap_or_else(|| BASE_THRESHOLDS.to_vec());
    let rows = run_sweep(&model, &dist, args.clips, resolve_seed(args.seed)?, args.max_stride, &args.lengths, &thresholds)?;
    std::fs::write(&args.out, reftrack_core::metrics::sweep_csv(&rows)).map_err(|e| CliError::io(&args.out, e))?;
    Ok(rows)
}
