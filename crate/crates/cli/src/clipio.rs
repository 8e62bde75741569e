//! Clip and prediction files: a `TCR3` container plus a JSON manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use reftrack_core::geometry::{CameraModel, DepthMap, Pointmap, VisibilityMap};
use reftrack_core::inference::Prediction;
use reftrack_core::scalar::Scalar;
use reftrack_core::synthscene::{RgbFrame, SceneSpec, TrackClip, Units};
use serde::{Deserialize, Serialize};

use crate::container::{Entry, TensorContainer};
use crate::error::{CliError, Result};

/// Camera entry layout: `fx fy cx cy`, row-major rotation, translation.
pub const CAMERA_VALUES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    /// Container file name, relative to the manifest.
    pub container: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub stride: usize,
    pub units: Units,
    /// Scene the clip was rendered from, if synthetic.
    pub scene: Option<SceneSpec>,
    /// Entry name to declared dims.
    pub entries: BTreeMap<String, Vec<usize>>,
}

impl ClipManifest {
    /// Checks every referenced entry exists with its declared shape.
    pub fn validate(&self, container: &TensorContainer) -> Result<()> {
        let (l, h, w) = (self.frames, self.height, self.width);
        let expected: [(&str, Vec<usize>); 6] = [
            ("frames", vec![l, h, w, 3]),
            ("depths", vec![l, h, w]),
            ("cameras", vec![l, CAMERA_VALUES]),
            ("recon_pointmaps", vec![l, h, w, 3]),
            ("gt_track_pointmaps", vec![l, h, w, 3]),
            ("gt_visibility", vec![l, h, w]),
        ];
        for (name, dims) in expected {
            match self.entries.get(name) {
                Some(d) if *d == dims => {}
                Some(d) => return Err(CliError::Format(format!("manifest declares {name} as {d:?}, expected {dims:?}"))),
                None => return Err(CliError::Format(format!("manifest lacks entry {name}"))),
            }
        }
        for (name, dims) in &self.entries {
            let e = container.require(name)?;
            if e.dims_usize() != *dims {
                return Err(CliError::Format(format!("entry {name} has dims {:?}, manifest declares {dims:?}", e.dims)));
            }
        }
        Ok(())
    }
}

fn flat3<T: Copy>(maps: impl Iterator<Item = Vec<[T; 3]>>) -> Vec<T> {
    maps.flat_map(|m| m.into_iter().flatten()).collect()
}

fn camera_values(c: &CameraModel) -> [f64; CAMERA_VALUES] {
    let mut v = [0.0; CAMERA_VALUES];
    v[..4].copy_from_slice(&[c.fx, c.fy, c.cx, c.cy]);
    for r in 0..3 {
        v[4 + 3 * r..7 + 3 * r].copy_from_slice(&c.rotation[r]);
    }
    v[13..].copy_from_slice(&c.translation);
    v
}

fn camera_from(v: &[f64]) -> CameraModel {
    let rotation = [[v[4], v[5], v[6]], [v[7], v[8], v[9]], [v[10], v[11], v[12]]];
    CameraModel::pinhole(v[0], v[1], v[2], v[3]).with_pose(rotation, [v[13], v[14], v[15]])
}

/// Writes `<stem>.tcr3` and `<stem>.json` into `dir`; returns the manifest
/// path.
pub fn write_clip<T: Scalar>(dir: &Path, stem: &str, clip: &TrackClip<T>, scene: Option<&SceneSpec>) -> Result<PathBuf> {
    let (l, h, w) = (clip.len(), clip.height, clip.width);
    let mut c = TensorContainer::new();
    let mut entries = BTreeMap::new();
    let mut add = |c: &mut TensorContainer, e: Entry| -> Result<()> {
        entries.insert(e.name.clone(), e.dims_usize());
        c.push(e)
    };
    add(&mut c, Entry::from_scalars("frames", &[l, h, w, 3], &flat3(clip.frames.iter().map(|f| f.pixels.clone())))?)?;
    let depths: Vec<T> = clip.depths.iter().flat_map(|d| d.values.iter().copied()).collect();
    add(&mut c, Entry::from_scalars("depths", &[l, h, w], &depths)?)?;
    let cams: Vec<f64> = clip.cameras.iter().flat_map(camera_values).collect();
    add(&mut c, Entry::from_scalars("cameras", &[l, CAMERA_VALUES], &cams)?)?;
    let recon = flat3(clip.recon_pointmaps.iter().map(|p| p.points.clone()));
    add(&mut c, Entry::from_scalars("recon_pointmaps", &[l, h, w, 3], &recon)?)?;
    let tracks = flat3(clip.gt_track_pointmaps.iter().map(|p| p.points.clone()));
    add(&mut c, Entry::from_scalars("gt_track_pointmaps", &[l, h, w, 3], &tracks)?)?;
    let vis: Vec<T> = clip.gt_visibility.iter().flat_map(|v| v.values.iter().copied()).collect();
    add(&mut c, Entry::from_scalars("gt_visibility", &[l, h, w], &vis)?)?;
    let container_name = format!("{stem}.tcr3");
    let manifest = ClipManifest {
        container: container_name.clone(),
        width: w,
        height: h,
        frames: l,
        stride: clip.stride,
        units: clip.units,
        scene: scene.cloned(),
        entries,
    };
    c.save(&dir.join(&container_name))?;
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn split3<T: Copy>(values: &[T], frames: usize, w: usize, h: usize) -> Vec<Vec<[T; 3]>> {
    values
        .chunks_exact(w * h * 3)
        .take(frames)
        .map(|f| f.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<ClipManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads and validates a clip from its manifest.
pub fn read_clip<T: Scalar>(manifest_path: &Path) -> Result<(TrackClip<T>, ClipManifest)> {
    let m = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let c = TensorContainer::load(&dir.join(&m.container))?;
    m.validate(&c)?;
    let (l, h, w) = (m.frames, m.height, m.width);
    let get = |name: &str| c.require(name).and_then(|e| e.to_scalars::<T>());
    let frames = split3(&get("frames")?, l, w, h)
        .into_iter()
        .map(|pixels| RgbFrame { width: w, height: h, pixels })
        .collect();
    let depths = get("depths")?
        .chunks_exact(w * h)
        .map(|d| DepthMap::new(w, h, d.to_vec()))
        .collect::<reftrack_core::error::Result<Vec<_>>>()?;
    let cameras = c.require("cameras")?.to_scalars::<f64>()?.chunks_exact(CAMERA_VALUES).map(camera_from).collect();
    let pointmaps = |name: &str| -> Result<Vec<Pointmap<T>>> {
        split3(&get(name)?, l, w, h)
            .into_iter()
            .enumerate()
            .map(|(j, pts)| Ok(Pointmap::new(w, h, pts)?.with_indices(if name == "recon_pointmaps" { j } else { 0 }, j)))
            .collect()
    };
    let gt_visibility = get("gt_visibility")?
        .chunks_exact(w * h)
        .map(|v| VisibilityMap::new(w, h, v.to_vec()))
        .collect::<reftrack_core::error::Result<Vec<_>>>()?;
    let clip = TrackClip {
        width: w,
        height: h,
        frames,
        depths,
        cameras,
        recon_pointmaps: pointmaps("recon_pointmaps")?,
        gt_track_pointmaps: pointmaps("gt_track_pointmaps")?,
        gt_visibility,
        stride: m.stride,
        units: m.units,
    };
    Ok((clip, m))
}

/// Prediction container: `tracks`, `visibility`, `decoded_anchor` and
/// `stats` (mean then scale).
pub fn prediction_container<T: Scalar>(pred: &Prediction<T>) -> Result<TensorContainer> {
    let l = pred.tracks.len();
    let (w, h) = (pred.decoded_anchor.width, pred.decoded_anchor.height);
    let mut c = TensorContainer::new();
    c.push(Entry::from_scalars("tracks", &[l, h, w, 3], &flat3(pred.tracks.iter().map(|p| p.points.clone())))?)?;
    let vis: Vec<T> = pred.visibility.iter().flat_map(|v| v.values.iter().copied()).collect();
    c.push(Entry::from_scalars("visibility", &[l, h, w], &vis)?)?;
    c.push(Entry::from_scalars("decoded_anchor", &[h, w, 3], &flat3(std::iter::once(pred.decoded_anchor.points.clone())))?)?;
    let s = &pred.stats;
    c.push(Entry::from_scalars("stats", &[4], &[s.mean[0], s.mean[1], s.mean[2], s.scale])?)?;
    Ok(c)
}

/// Reads predicted tracks and visibility back from a prediction container.
pub fn read_prediction<T: Scalar>(c: &TensorContainer) -> Result<(Vec<Pointmap<T>>, Vec<VisibilityMap<T>>)> {
    let tracks = c.require("tracks")?;
    let dims = tracks.dims_usize();
    if dims.len() != 4 || dims[3] != 3 {
        return Err(CliError::Format(format!("tracks entry has dims {dims:?}")));
    }
    let (l, h, w) = (dims[0], dims[1], dims[2]);
    let vis = c.require("visibility")?;
    if vis.dims_usize() != [l, h, w] {
        return Err(CliError::Format("visibility dims do not match tracks".into()));
    }
    let pts = split3(&tracks.to_scalars::<T>()?, l, w, h)
        .into_iter()
        .enumerate()
        .map(|(j, p)| Ok(Pointmap::new(w, h, p)?.with_indices(0, j)))
        .collect::<Result<Vec<_>>>()?;
    let v = vis
        .to_scalars::<T>()?
        .chunks_exact(w * h)
        .map(|v| VisibilityMap::new(w, h, v.to_vec()))
        .collect::<reftrack_core::error::Result<Vec<_>>>()?;
    Ok((pts, v))
}
