//! Clip prediction and anchored, interleaved window inference for long
//! videos.

use serde::{Deserialize, Serialize};

use crate::dit::{track_token_index, AttentionTrace, TokenSequence};
use crate::error::{input_err, Error, Result};
use crate::geometry::{compute_normalization, unproject_to_world, CameraModel, DepthMap, NormalizationStats, Pointmap, VisibilityMap};
use crate::model::{run_pipeline, unpatch_outputs, PatchInputs, Tracker};
use crate::scalar::Scalar;
use crate::synthscene::{RgbFrame, TrackClip};

/// Relative tolerance when checking that reconstruction pointmaps match
/// their depth maps and cameras.
pub const WORLD_FRAME_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PaddingPolicy {
    /// Short passes run with fewer frames.
    #[default]
    None,
    /// Short passes are filled up to capacity by repeating their last frame.
    RepeatLast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub length: usize,
    pub capacity: usize,
    pub stride: usize,
    /// Original frame indices of each pass, excluding the anchor frame 0.
    pub groups: Vec<Vec<usize>>,
    pub padding: PaddingPolicy,
}

impl WindowPlan {
    /// Frames fed to pass `g`: the anchor, the group, then any padding.
    pub fn pass_frames(&self, g: usize) -> Vec<usize> {
        let group = &self.groups[g];
        let mut frames = Vec::with_capacity(self.capacity + 1);
        frames.push(0);
        frames.extend_from_slice(group);
        if self.padding == PaddingPolicy::RepeatLast {
            let last = *group.last().expect("groups are non-empty");
            frames.resize(self.capacity + 1, last);
        }
        frames
    }

    /// Temporal RoPE indices of pass `g`.
    pub fn rope_indices(&self, g: usize) -> Vec<usize> {
        (0..self.pass_frames(g).len()).collect()
    }
}

/// Splits frames `1..L` into `s = ceil((L-1)/F)` interleaved groups; frame
/// `i` joins group `(i-1) mod s`.
pub fn plan_windows(length: usize, capacity: usize) -> Result<WindowPlan> {
    plan_windows_with(length, capacity, PaddingPolicy::None)
}

pub fn plan_windows_with(length: usize, capacity: usize, padding: PaddingPolicy) -> Result<WindowPlan> {
    if length < 2 {
        return Err(input_err(format!("window planning needs at least 2 frames, got {length}")));
    }
    if capacity == 0 {
        return Err(input_err("window capacity must be at least 1"));
    }
    let stride = (length - 1).div_ceil(capacity);
    let mut groups = vec![Vec::new(); stride];
    for i in 1..length {
        groups[(i - 1) % stride].push(i);
    }
    Ok(WindowPlan {
        length,
        capacity,
        stride,
        groups,
        padding,
    })
}

/// Borrowed model inputs for one video.
#[derive(Clone, Copy, Debug)]
pub struct VideoInput<'a, T> {
    pub frames: &'a [RgbFrame<T>],
    pub depths: &'a [DepthMap<T>],
    pub cameras: &'a [CameraModel],
    pub recon: &'a [Pointmap<T>],
}

impl<'a, T: Scalar> From<&'a TrackClip<T>> for VideoInput<'a, T> {
    fn from(clip: &'a TrackClip<T>) -> Self {
        Self {
            frames: &clip.frames,
            depths: &clip.depths,
            cameras: &clip.cameras,
            recon: &clip.recon_pointmaps,
        }
    }
}

impl<'a, T: Scalar> VideoInput<'a, T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks counts and that every reconstruction pointmap is its depth map
    /// lifted with its camera, i.e. that all frames share one world frame.
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 || self.depths.len() != n || self.cameras.len() != n || self.recon.len() != n {
            return Err(input_err(format!(
                "video input counts differ: {} frames, {} depths, {} cameras, {} pointmaps",
                n,
                self.depths.len(),
                self.cameras.len(),
                self.recon.len()
            )));
        }
        for (j, ((d, cam), pm)) in self.depths.iter().zip(self.cameras).zip(self.recon).enumerate() {
            let lifted = unproject_to_world(d, cam)?;
            if lifted.points.len() != pm.points.len() {
                return Err(input_err(format!("frame {j}: pointmap and depth sizes differ")));
            }
            for (a, b) in lifted.points.iter().zip(&pm.points) {
                let scale = 1.0 + a.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
                if (0..3).any(|k| (a[k].as_f64() - b[k].as_f64()).abs() > WORLD_FRAME_TOLERANCE * scale) {
                    return Err(input_err(format!(
                        "frame {j}: reconstruction pointmap is not in the world frame given by its camera"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sub-video made of the listed frames.
    pub fn select(&self, indices: &[usize]) -> OwnedVideo<T> {
        OwnedVideo {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            depths: indices.iter().map(|&i| self.depths[i].clone()).collect(),
            cameras: indices.iter().map(|&i| self.cameras[i]).collect(),
            recon: indices.iter().map(|&i| self.recon[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OwnedVideo<T> {
    pub frames: Vec<RgbFrame<T>>,
    pub depths: Vec<DepthMap<T>>,
    pub cameras: Vec<CameraModel>,
    pub recon: Vec<Pointmap<T>>,
}

impl<T: Scalar> OwnedVideo<T> {
    pub fn view(&self) -> VideoInput<'_, T> {
        VideoInput {
            frames: &self.frames,
            depths: &self.depths,
            cameras: &self.cameras,
            recon: &self.recon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceOptions {
    /// Return the reference pointmap itself for frame 0 instead of the
    /// decoded prediction (only with the residual head).
    pub anchor_identity: bool,
    pub padding: PaddingPolicy,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            anchor_identity: true,
            padding: PaddingPolicy::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// Predicted tracking pointmaps in world coordinates, one per frame.
    pub tracks: Vec<Pointmap<T>>,
    pub visibility: Vec<VisibilityMap<T>>,
    /// Frame-0 tracks decoded by the model, kept even when `tracks[0]` is
    /// the identity anchor.
    pub decoded_anchor: Pointmap<T>,
    pub stats: NormalizationStats<T>,
}

fn recover<T: Scalar>(
    model: &Tracker<T>,
    reference: &Pointmap<T>,
    decoded: &crate::geometry::ResidualMap<T>,
    stats: &NormalizationStats<T>,
    j: usize,
) -> Pointmap<T> {
    let points = decoded
        .values
        .iter()
        .zip(&reference.points)
        .map(|(d, r)| {
            if model.config.residual_head {
                [r[0] + stats.scale * d[0], r[1] + stats.scale * d[1], r[2] + stats.scale * d[2]]
            } else {
                stats.denormalize_point(*d)
            }
        })
        .collect();
    Pointmap {
        width: reference.width,
        height: reference.height,
        points,
        frame_index: 0,
        timestamp_index: j,
    }
}

/// Runs one pass with externally supplied normalization statistics.
pub fn predict_clip_with_stats<T: Scalar>(
    model: &Tracker<T>,
    input: VideoInput<'_, T>,
    stats: &NormalizationStats<T>,
    options: &InferenceOptions,
) -> Result<Prediction<T>> {
    let n = input.len();
    if n == 0 {
        return Err(input_err("cannot predict an empty clip"));
    }
    if n > model.config.frames {
        return Err(input_err(format!(
            "clip has {n} frames but the model holds {}; use windowed inference",
            model.config.frames
        )));
    }
    let inputs = PatchInputs::new(&model.config, input.frames, input.recon, stats)?;
    let out = run_pipeline(model, &inputs, None)?;
    let (decoded, visibility) = unpatch_outputs(&model.config, &out.outputs, n)?;
    let reference = &input.recon[0];
    let mut tracks: Vec<Pointmap<T>> = decoded
        .iter()
        .enumerate()
        .map(|(j, d)| recover(model, reference, d, stats, j))
        .collect();
    let decoded_anchor = tracks[0].clone();
    if options.anchor_identity && model.config.residual_head {
        tracks[0] = Pointmap {
            frame_index: 0,
            timestamp_index: 0,
            ..reference.clone()
        };
    }
    if tracks.iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite("predicted tracks are not finite".into()));
    }
    Ok(Prediction {
        tracks,
        visibility,
        decoded_anchor,
        stats: *stats,
    })
}

/// Single-pass prediction for a clip no longer than the model capacity.
pub fn predict_clip<T: Scalar>(model: &Tracker<T>, input: VideoInput<'_, T>, options: &InferenceOptions) -> Result<Prediction<T>> {
    input.validate()?;
    let stats = compute_normalization(input.recon, input.depths)?;
    predict_clip_with_stats(model, input, &stats, options)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongPrediction<T> {
    pub prediction: Prediction<T>,
    /// `None` when the video fit in a single pass.
    pub plan: Option<WindowPlan>,
    /// Statistics used by each pass.
    pub pass_stats: Vec<NormalizationStats<T>>,
}

/// Anchored interleaved window inference: every pass sees frame 0 followed
/// by one group of the plan, all passes share statistics computed over the
/// whole video, and outputs are scattered back to their original indices.
pub fn predict_long_video<T: Scalar>(
    model: &Tracker<T>,
    input: VideoInput<'_, T>,
    options: &InferenceOptions,
) -> Result<LongPrediction<T>> {
    input.validate()?;
    let length = input.len();
    let stats = compute_normalization(input.recon, input.depths)?;
    if length <= model.config.frames {
        let prediction = predict_clip_with_stats(model, input, &stats, options)?;
        return Ok(LongPrediction {
            prediction,
            plan: None,
            pass_stats: vec![stats],
        });
    }
    let plan = plan_windows_with(length, model.config.frames - 1, options.padding)?;
    let mut tracks: Vec<Option<Pointmap<T>>> = vec![None; length];
    let mut visibility: Vec<Option<VisibilityMap<T>>> = vec![None; length];
    let mut decoded_anchor = None;
    let mut pass_stats = Vec::with_capacity(plan.groups.len());
    for g in 0..plan.groups.len() {
        let frames = plan.pass_frames(g);
        let sub = input.select(&frames);
        let pred = predict_clip_with_stats(model, sub.view(), &stats, options)?;
        pass_stats.push(pred.stats);
        let keep = if g == 0 { 0 } else { 1 };
        for (slot, &orig) in frames.iter().enumerate().take(plan.groups[g].len() + 1).skip(keep) {
            let mut t = pred.tracks[slot].clone();
            t.timestamp_index = orig;
            tracks[orig] = Some(t);
            visibility[orig] = Some(pred.visibility[slot].clone());
        }
        if g == 0 {
            decoded_anchor = Some(pred.decoded_anchor);
        }
    }
    let missing = tracks.iter().position(Option::is_none);
    if let Some(i) = missing {
        return Err(input_err(format!("window plan left frame {i} without a prediction")));
    }
    Ok(LongPrediction {
        prediction: Prediction {
            tracks: tracks.into_iter().map(Option::unwrap).collect(),
            visibility: visibility.into_iter().map(Option::unwrap).collect(),
            decoded_anchor: decoded_anchor.expect("at least one pass"),
            stats,
        },
        plan: Some(plan),
        pass_stats,
    })
}

/// Attention captured for track tokens at `(frame, x, y)` latent cells.
pub fn trace_attention<T: Scalar>(
    model: &Tracker<T>,
    input: VideoInput<'_, T>,
    queries: &[(usize, usize, usize)],
) -> Result<(AttentionTrace<T>, TokenSequence<T>)> {
    input.validate()?;
    let cfg = &model.config;
    let n = input.len();
    if n > cfg.frames {
        return Err(input_err(format!("clip has {n} frames but the model holds {}", cfg.frames)));
    }
    let indices = queries
        .iter()
        .map(|&(j, x, y)| {
            if j >= n || x >= cfg.grid_w || y >= cfg.grid_h {
                Err(input_err(format!("query ({j}, {x}, {y}) outside the {n}x{}x{} token grid", cfg.grid_w, cfg.grid_h)))
            } else {
                Ok(track_token_index(n, cfg.grid_h, cfg.grid_w, j, x, y))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = compute_normalization(input.recon, input.depths)?;
    let inputs = PatchInputs::new(cfg, input.frames, input.recon, &stats)?;
    let out = run_pipeline(model, &inputs, Some(&indices))?;
    Ok((out.trace.expect("trace requested"), out.sequence))
}
