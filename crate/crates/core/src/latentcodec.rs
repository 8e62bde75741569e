//! Linear patch codec: per-frame encoders for RGB and pointmaps and the two
//! decoder heads for residual tracks and visibility.

use rand::Rng;

use crate::error::{input_err, shape_err, Result};
use crate::geometry::{Pointmap, ResidualMap, VisibilityMap};
use crate::nn::{orthonormal_columns, sigmoid, Linear, Parameters};
use crate::scalar::Scalar;
use crate::synthscene::RgbFrame;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecParams<T> {
    pub patch: usize,
    pub channels: usize,
    pub rgb_encoder: Linear<T>,
    pub pm_encoder: Linear<T>,
    pub track_decoder: Linear<T>,
    pub visibility_decoder: Linear<T>,
}

/// `h x w` grid of latent vectors, stored as an `(h*w) x channels` matrix in
/// row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T> {
    pub h: usize,
    pub w: usize,
    pub values: Mat<T>,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn new(h: usize, w: usize, values: Mat<T>) -> Result<Self> {
        if values.rows != h * w {
            return Err(shape_err(format!("latent grid {h}x{w} needs {} rows, got {}", h * w, values.rows)));
        }
        Ok(Self { h, w, values })
    }

    pub fn channels(&self) -> usize {
        self.values.cols
    }

    pub fn at(&self, x: usize, y: usize) -> &[T] {
        self.values.row(y * self.w + x)
    }

    pub fn all_finite(&self) -> bool {
        self.values.all_finite()
    }

    /// Copies channels `start..start+count`.
    pub fn channel_slice(&self, start: usize, count: usize) -> LatentGrid<T> {
        LatentGrid {
            h: self.h,
            w: self.w,
            values: self.values.col_block(start, count),
        }
    }
}

impl<T: Scalar> CodecParams<T> {
    /// Encoders start from orthonormal column sets and each decoder from the
    /// transpose of its paired encoder, so `decode(encode(x)) = x` when
    /// `channels == 3 p^2`.
    pub fn new<R: Rng>(patch: usize, channels: usize, rng: &mut R) -> Result<Self> {
        if patch == 0 || channels == 0 {
            return Err(input_err("patch size and latent channels must be positive"));
        }
        let k = 3 * patch * patch;
        let basis = |rng: &mut R| -> Mat<T> {
            if channels <= k {
                orthonormal_columns(k, channels, rng)
            } else {
                orthonormal_columns::<T, R>(channels, k, rng).t().to_mat()
            }
        };
        let rgb = basis(rng);
        let pm = basis(rng);
        let vis = basis(rng);
        let linear = |weight: Mat<T>| Linear {
            bias: Mat::zeros(1, weight.cols),
            weight,
            lora: None,
        };
        Ok(Self {
            patch,
            channels,
            rgb_encoder: linear(rgb),
            track_decoder: linear(pm.t().to_mat()),
            pm_encoder: linear(pm),
            visibility_decoder: linear(vis.t().to_mat()),
        })
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn check_image(&self, width: usize, height: usize) -> Result<()> {
        let p = self.patch;
        if width == 0 || height == 0 || !width.is_multiple_of(p) || !height.is_multiple_of(p) {
            return Err(shape_err(format!("image {width}x{height} is not divisible by patch size {p}")));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> CodecParams<U> {
        CodecParams {
            patch: self.patch,
            channels: self.channels,
            rgb_encoder: self.rgb_encoder.cast(),
            pm_encoder: self.pm_encoder.cast(),
            track_decoder: self.track_decoder.cast(),
            visibility_decoder: self.visibility_decoder.cast(),
        }
    }
}

impl<T: Scalar> Parameters<T> for CodecParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.rgb_encoder.visit(&crate::nn::join(prefix, "rgb_encoder"), f);
        self.pm_encoder.visit(&crate::nn::join(prefix, "pm_encoder"), f);
        self.track_decoder.visit(&crate::nn::join(prefix, "track_decoder"), f);
        self.visibility_decoder.visit(&crate::nn::join(prefix, "visibility_decoder"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        self.rgb_encoder.visit_mut(&crate::nn::join(prefix, "rgb_encoder"), f);
        self.pm_encoder.visit_mut(&crate::nn::join(prefix, "pm_encoder"), f);
        self.track_decoder.visit_mut(&crate::nn::join(prefix, "track_decoder"), f);
        self.visibility_decoder.visit_mut(&crate::nn::join(prefix, "visibility_decoder"), f);
    }
}

/// Splits an `H x W x 3` image into non-overlapping `p x p` patches. Row
/// `py * (W/p) + px` holds patch `(px, py)`; within a row the entry for pixel
/// offset `(dx, dy)` and channel `ch` sits at `(dy * p + dx) * 3 + ch`.
pub fn patchify<T: Scalar>(values: &[[T; 3]], width: usize, height: usize, p: usize) -> Result<Mat<T>> {
    if values.len() != width * height {
        return Err(shape_err(format!("{} values for a {width}x{height} image", values.len())));
    }
    if p == 0 || !width.is_multiple_of(p) || !height.is_multiple_of(p) {
        return Err(shape_err(format!("image {width}x{height} is not divisible by patch size {p}")));
    }
    let (w, h) = (width / p, height / p);
    let k = 3 * p * p;
    let mut out = Mat::zeros(w * h, k);
    for py in 0..h {
        for px in 0..w {
            let row = out.row_mut(py * w + px);
            for dy in 0..p {
                for dx in 0..p {
                    let src = values[(py * p + dy) * width + px * p + dx];
                    let base = (dy * p + dx) * 3;
                    row[base..base + 3].copy_from_slice(&src);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Mat<T>, width: usize, height: usize, p: usize) -> Result<Vec<[T; 3]>> {
    let (w, h) = (width / p, height / p);
    if patches.rows != w * h || patches.cols != 3 * p * p || !width.is_multiple_of(p) || !height.is_multiple_of(p) {
        return Err(shape_err(format!(
            "{}x{} patch matrix does not tile a {width}x{height} image with patch {p}",
            patches.rows, patches.cols
        )));
    }
    let mut out = vec![[T::zero(); 3]; width * height];
    for py in 0..h {
        for px in 0..w {
            let row = patches.row(py * w + px);
            for dy in 0..p {
                for dx in 0..p {
                    let base = (dy * p + dx) * 3;
                    out[(py * p + dy) * width + px * p + dx] = [row[base], row[base + 1], row[base + 2]];
                }
            }
        }
    }
    Ok(out)
}

fn encode<T: Scalar>(
    params: &CodecParams<T>,
    encoder: &Linear<T>,
    values: &[[T; 3]],
    width: usize,
    height: usize,
) -> Result<LatentGrid<T>> {
    params.check_image(width, height)?;
    let p = params.patch;
    let patches = patchify(values, width, height, p)?;
    LatentGrid::new(height / p, width / p, encoder.apply(&patches))
}

pub fn encode_rgb<T: Scalar>(params: &CodecParams<T>, frame: &RgbFrame<T>) -> Result<LatentGrid<T>> {
    encode(params, &params.rgb_encoder, &frame.pixels, frame.width, frame.height)
}

/// Expects a pointmap that is already normalized.
pub fn encode_pointmap<T: Scalar>(params: &CodecParams<T>, pointmap: &Pointmap<T>) -> Result<LatentGrid<T>> {
    encode(params, &params.pm_encoder, &pointmap.points, pointmap.width, pointmap.height)
}

/// Channel-wise concatenation `[z_rgb; z_pm]`.
pub fn make_geometry_latent<T: Scalar>(z_rgb: &LatentGrid<T>, z_pm: &LatentGrid<T>) -> Result<LatentGrid<T>> {
    if (z_rgb.h, z_rgb.w) != (z_pm.h, z_pm.w) {
        return Err(shape_err("rgb and pointmap latents differ in grid size"));
    }
    let (a, b) = (z_rgb.channels(), z_pm.channels());
    let values = Mat::from_fn(z_rgb.values.rows, a + b, |r, c| {
        if c < a {
            z_rgb.values.at(r, c)
        } else {
            z_pm.values.at(r, c - a)
        }
    });
    LatentGrid::new(z_rgb.h, z_rgb.w, values)
}

fn decode_patches<T: Scalar>(
    params: &CodecParams<T>,
    decoder: &Linear<T>,
    latent: &LatentGrid<T>,
    width: usize,
    height: usize,
) -> Result<Vec<[T; 3]>> {
    params.check_image(width, height)?;
    let p = params.patch;
    if (latent.h, latent.w) != (height / p, width / p) || latent.channels() != params.channels {
        return Err(shape_err(format!(
            "latent {}x{}x{} does not decode to {width}x{height} with patch {p} and {} channels",
            latent.h,
            latent.w,
            latent.channels(),
            params.channels
        )));
    }
    unpatchify(&decoder.apply(&latent.values), width, height, p)
}

/// Residual map in normalized pointmap units.
pub fn decode_track<T: Scalar>(
    params: &CodecParams<T>,
    latent: &LatentGrid<T>,
    width: usize,
    height: usize,
) -> Result<ResidualMap<T>> {
    let values = decode_patches(params, &params.track_decoder, latent, width, height)?;
    Ok(ResidualMap { width, height, values })
}

/// Per-pixel visibility logits: the three decoded channels averaged.
pub fn decode_visibility_logits<T: Scalar>(
    params: &CodecParams<T>,
    latent: &LatentGrid<T>,
    width: usize,
    height: usize,
) -> Result<Vec<T>> {
    let third = T::of(1.0 / 3.0);
    let values = decode_patches(params, &params.visibility_decoder, latent, width, height)?;
    Ok(values.iter().map(|v| (v[0] + v[1] + v[2]) * third).collect())
}

pub fn decode_visibility<T: Scalar>(
    params: &CodecParams<T>,
    latent: &LatentGrid<T>,
    width: usize,
    height: usize,
) -> Result<VisibilityMap<T>> {
    let logits = decode_visibility_logits(params, latent, width, height)?;
    VisibilityMap::new(width, height, logits.into_iter().map(sigmoid).collect())
}
