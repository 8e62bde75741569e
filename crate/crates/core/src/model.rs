//! The full tracker: codec plus transformer, run end to end in patch space
//! with a matching backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dit::{assign_positions, backward_tokens, build_dual_latents, forward_tokens, AttentionTrace, DitCache, DitParams, ModelConfig, TokenSequence};
use crate::error::{input_err, shape_err, Result};
use crate::geometry::{normalize, NormalizationStats, Pointmap, ResidualMap, VisibilityMap};
use crate::latentcodec::{patchify, unpatchify, CodecParams, LatentGrid};
use crate::nn::{join, sigmoid, Parameters};
use crate::scalar::Scalar;
use crate::synthscene::RgbFrame;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Tracker<T> {
    pub config: ModelConfig,
    pub codec: CodecParams<T>,
    pub dit: DitParams<T>,
}

impl<T: Scalar> Tracker<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codec = CodecParams::new(config.patch, config.latent_channels, &mut rng)?;
        let dit = DitParams::new(config, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            codec,
            dit,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_all();
        z
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tracker<U> {
        Tracker {
            config: self.config.clone(),
            codec: self.codec.cast(),
            dit: self.dit.cast(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Tracker<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.codec.visit(&join(prefix, "codec"), f);
        self.dit.visit(&join(prefix, "dit"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        self.codec.visit_mut(&join(prefix, "codec"), f);
        self.dit.visit_mut(&join(prefix, "dit"), f);
    }
}

/// Model inputs of one clip in patch space.
#[derive(Clone, Debug)]
pub struct PatchInputs<T> {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// `(frames * h * w) x 3p^2`, frame-major.
    pub rgb: Mat<T>,
    /// Normalized reconstruction pointmaps, same layout as `rgb`.
    pub pointmaps: Mat<T>,
}

fn stack_patches<T: Scalar>(images: &[&[[T; 3]]], width: usize, height: usize, p: usize) -> Result<Mat<T>> {
    let per = (width / p) * (height / p);
    let mut out = Mat::zeros(images.len() * per, 3 * p * p);
    for (j, img) in images.iter().enumerate() {
        let m = patchify(img, width, height, p)?;
        out.data[j * m.len()..(j + 1) * m.len()].copy_from_slice(&m.data);
    }
    Ok(out)
}

impl<T: Scalar> PatchInputs<T> {
    /// Normalizes the reconstruction pointmaps with `stats` and patchifies
    /// them together with the frames.
    pub fn new(
        cfg: &ModelConfig,
        frames: &[RgbFrame<T>],
        recon: &[Pointmap<T>],
        stats: &NormalizationStats<T>,
    ) -> Result<Self> {
        if frames.is_empty() || frames.len() != recon.len() {
            return Err(input_err(format!("{} frames with {} pointmaps", frames.len(), recon.len())));
        }
        let (width, height) = (cfg.image_width(), cfg.image_height());
        if frames.iter().any(|f| (f.width, f.height) != (width, height))
            || recon.iter().any(|r| (r.width, r.height) != (width, height))
        {
            return Err(shape_err(format!("model expects {width}x{height} inputs")));
        }
        let normalized: Vec<Pointmap<T>> = recon.iter().map(|r| normalize(r, stats)).collect();
        let rgb: Vec<&[[T; 3]]> = frames.iter().map(|f| f.pixels.as_slice()).collect();
        let pms: Vec<&[[T; 3]]> = normalized.iter().map(|r| r.points.as_slice()).collect();
        Ok(Self {
            width,
            height,
            frames: frames.len(),
            rgb: stack_patches(&rgb, width, height, cfg.patch)?,
            pointmaps: stack_patches(&pms, width, height, cfg.patch)?,
        })
    }
}

/// Decoder outputs in patch space.
#[derive(Clone, Debug)]
pub struct PatchOutputs<T> {
    /// Residual (or absolute, without the residual head) normalized tracks.
    pub tracks: Mat<T>,
    /// Raw visibility decoder output; pixel logits average each triple.
    pub visibility: Mat<T>,
}

impl<T: Scalar> PatchOutputs<T> {
    /// Per-pixel logits in patch order (`row * p^2 + dy * p + dx`).
    pub fn logits(&self) -> Vec<T> {
        let third = T::of(1.0 / 3.0);
        self.visibility
            .data
            .chunks_exact(3)
            .map(|c| (c[0] + c[1] + c[2]) * third)
            .collect()
    }
}

pub struct PipelineCache<T> {
    geometry_rows: usize,
    dit: DitCache<T>,
    track_latent: Mat<T>,
    vis_latent: Mat<T>,
}

pub struct PipelineOutput<T> {
    pub outputs: PatchOutputs<T>,
    pub sequence: TokenSequence<T>,
    pub trace: Option<AttentionTrace<T>>,
    pub cache: PipelineCache<T>,
}

/// Encodes, assembles tokens, runs the transformer and decodes both heads.
pub fn run_pipeline<T: Scalar>(
    model: &Tracker<T>,
    inputs: &PatchInputs<T>,
    trace_queries: Option<&[usize]>,
) -> Result<PipelineOutput<T>> {
    let cfg = &model.config;
    let (c, hw) = (cfg.latent_channels, cfg.tokens_per_frame());
    let z_rgb = model.codec.rgb_encoder.apply(&inputs.rgb);
    let z_pm = model.codec.pm_encoder.apply(&inputs.pointmaps);
    let geometry = (0..inputs.frames)
        .map(|j| {
            let values = Mat::from_fn(hw, 2 * c, |r, k| {
                if k < c {
                    z_rgb.at(j * hw + r, k)
                } else {
                    z_pm.at(j * hw + r, k - c)
                }
            });
            LatentGrid::new(cfg.grid_h, cfg.grid_w, values)
        })
        .collect::<Result<Vec<_>>>()?;
    let track = build_dual_latents(&geometry, cfg.first_frame_anchoring)?;
    let sequence = assign_positions(&geometry, &track, cfg.temporal_rope_alignment)?;
    let out = forward_tokens(cfg, &model.dit, &sequence, trace_queries)?;
    let rows = inputs.frames * hw;
    let track_latent = Mat::from_fn(rows, c, |r, k| out.outputs.at(rows + r, k));
    let vis_latent = Mat::from_fn(rows, c, |r, k| out.outputs.at(rows + r, c + k));
    let outputs = PatchOutputs {
        tracks: model.codec.track_decoder.apply(&track_latent),
        visibility: model.codec.visibility_decoder.apply(&vis_latent),
    };
    Ok(PipelineOutput {
        outputs,
        sequence,
        trace: out.trace,
        cache: PipelineCache {
            geometry_rows: rows,
            dit: out.cache,
            track_latent,
            vis_latent,
        },
    })
}

/// Back-propagates gradients of the decoded patch outputs into `grad`.
pub fn backward_pipeline<T: Scalar>(
    model: &Tracker<T>,
    inputs: &PatchInputs<T>,
    cache: &PipelineCache<T>,
    d_tracks: &Mat<T>,
    d_visibility: &Mat<T>,
    grad: &mut Tracker<T>,
) {
    let cfg = &model.config;
    let (c, hw, rows) = (cfg.latent_channels, cfg.tokens_per_frame(), cache.geometry_rows);
    let d_track_latent = model
        .codec
        .track_decoder
        .backward(&cache.track_latent, None, d_tracks, &mut grad.codec.track_decoder, true)
        .expect("dx requested");
    let d_vis_latent = model
        .codec
        .visibility_decoder
        .backward(&cache.vis_latent, None, d_visibility, &mut grad.codec.visibility_decoder, true)
        .expect("dx requested");
    let mut d_out = Mat::zeros(2 * rows, 2 * c);
    for r in 0..rows {
        let dst = d_out.row_mut(rows + r);
        dst[..c].copy_from_slice(d_track_latent.row(r));
        dst[c..].copy_from_slice(d_vis_latent.row(r));
    }
    let d_tokens = backward_tokens(cfg, &model.dit, &cache.dit, &d_out, &mut grad.dit);
    let mut d_geometry = d_tokens.row_block(0, rows);
    for r in 0..rows {
        let target = if cfg.first_frame_anchoring { r % hw } else { r };
        for (d, s) in d_geometry.row_mut(target).iter_mut().zip(d_tokens.row(rows + r)) {
            *d += *s;
        }
    }
    let d_rgb = d_geometry.col_block(0, c);
    let d_pm = d_geometry.col_block(c, c);
    model.codec.rgb_encoder.backward(&inputs.rgb, None, &d_rgb, &mut grad.codec.rgb_encoder, false);
    model.codec.pm_encoder.backward(&inputs.pointmaps, None, &d_pm, &mut grad.codec.pm_encoder, false);
}

/// Converts patch outputs back to per-frame maps.
pub fn unpatch_outputs<T: Scalar>(
    cfg: &ModelConfig,
    outputs: &PatchOutputs<T>,
    frames: usize,
) -> Result<(Vec<ResidualMap<T>>, Vec<VisibilityMap<T>>)> {
    let (width, height, p) = (cfg.image_width(), cfg.image_height(), cfg.patch);
    let hw = cfg.tokens_per_frame();
    let logits = outputs.logits();
    let per = hw * p * p;
    let mut residuals = Vec::with_capacity(frames);
    let mut vis = Vec::with_capacity(frames);
    for j in 0..frames {
        let values = unpatchify(&outputs.tracks.row_block(j * hw, hw), width, height, p)?;
        residuals.push(ResidualMap { width, height, values });
        let triples: Vec<[T; 3]> = logits[j * per..(j + 1) * per].iter().map(|l| [*l; 3]).collect();
        let pix = unpatchify(&Mat::from_vec(hw, 3 * p * p, triples.concat()), width, height, p)?;
        vis.push(VisibilityMap::new(width, height, pix.iter().map(|v| sigmoid(v[0])).collect())?);
    }
    Ok((residuals, vis))
}

/// Patchifies per-frame `H x W x 3` targets in the same layout as
/// [`PatchInputs`].
pub fn patch_targets<T: Scalar>(cfg: &ModelConfig, maps: &[&[[T; 3]]]) -> Result<Mat<T>> {
    stack_patches(maps, cfg.image_width(), cfg.image_height(), cfg.patch)
}

/// Per-pixel scalars (such as visibility labels) in patch order.
pub fn patch_scalars<T: Scalar>(cfg: &ModelConfig, maps: &[&[T]]) -> Result<Vec<T>> {
    let triples: Vec<Vec<[T; 3]>> = maps.iter().map(|m| m.iter().map(|v| [*v; 3]).collect()).collect();
    let refs: Vec<&[[T; 3]]> = triples.iter().map(|v| v.as_slice()).collect();
    Ok(patch_targets(cfg, &refs)?.data.chunks_exact(3).map(|c| c[0]).collect())
}
