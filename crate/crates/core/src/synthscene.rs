//! Deterministic synthetic dynamic scenes with analytic dense trajectories.
//!
//! Frames are rendered by casting one ray per pixel against spheres,
//! axis-aligned boxes and a background plane at world `z = background_depth`.
//! Every first-frame pixel belongs to exactly one rigidly translating surface,
//! so its world position at any later time is known in closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    axis_angle, mat3_identity, mat3_mul, unproject_to_world, visibility_from_projection, CameraModel, DepthMap,
    Pointmap, VisibilityMap,
};
use crate::scalar::Scalar;

/// Default tolerance for ground-truth visibility against exact rendered depth.
pub const GT_VISIBILITY_TOLERANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Units {
    Metric,
    #[default]
    SceneScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

/// Translation path of a primitive; offsets are relative to time 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    ConstantVelocity {
        velocity: [f64; 3],
    },
    /// Center moves on a circle spanned by `axis_u` / `axis_v`.
    CircularOrbit {
        radius: f64,
        angular_speed: f64,
        phase: f64,
        #[serde(default = "unit_x")]
        axis_u: [f64; 3],
        #[serde(default = "unit_y")]
        axis_v: [f64; 3],
    },
    SinusoidalOscillation {
        amplitude: [f64; 3],
        angular_frequency: f64,
        phase: f64,
    },
}

fn unit_x() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

fn unit_y() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub color: [f64; 3],
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraPath {
    Static,
    /// Camera center moves with constant velocity, orientation fixed.
    LinearTranslation { velocity: [f64; 3] },
    /// Camera circles about the vertical axis through `target`, keeping its
    /// heading locked to the orbit angle.
    Orbit { target: [f64; 3], angular_speed: f64 },
}

/// Full description of a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Number of frames `1 + F`.
    pub frames: usize,
    pub intrinsics: Intrinsics,
    pub camera: CameraPath,
    pub primitives: Vec<Primitive>,
    pub background_depth: f64,
    pub background_color: [f64; 3],
    pub seed: u64,
    #[serde(default = "default_gt_tol")]
    pub visibility_tolerance: f64,
    #[serde(default)]
    pub units: Units,
}

fn default_gt_tol() -> f64 {
    GT_VISIBILITY_TOLERANCE
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbFrame<T> {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[T; 3]>,
}

/// One training / evaluation sample.
///
/// `depths`, `cameras` and `recon_pointmaps` are the model's input geometry
/// and always agree with each other; `gt_track_pointmaps` and
/// `gt_visibility` are the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackClip<T> {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<RgbFrame<T>>,
    pub depths: Vec<DepthMap<T>>,
    pub cameras: Vec<CameraModel>,
    pub recon_pointmaps: Vec<Pointmap<T>>,
    pub gt_track_pointmaps: Vec<Pointmap<T>>,
    pub gt_visibility: Vec<VisibilityMap<T>>,
    pub stride: usize,
    pub units: Units,
}

impl<T: Scalar> TrackClip<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Sub-clip made of the listed frame indices, in order.
    pub fn select_frames(&self, indices: &[usize]) -> TrackClip<T> {
        TrackClip {
            width: self.width,
            height: self.height,
            frames: indices.iter().map(|&j| self.frames[j].clone()).collect(),
            depths: indices.iter().map(|&j| self.depths[j].clone()).collect(),
            cameras: indices.iter().map(|&j| self.cameras[j]).collect(),
            recon_pointmaps: indices.iter().map(|&j| self.recon_pointmaps[j].clone()).collect(),
            gt_track_pointmaps: indices.iter().map(|&j| self.gt_track_pointmaps[j].clone()).collect(),
            gt_visibility: indices.iter().map(|&j| self.gt_visibility[j].clone()).collect(),
            stride: self.stride,
            units: self.units,
        }
    }

    pub fn cast<U: Scalar>(&self) -> TrackClip<U> {
        TrackClip {
            width: self.width,
            height: self.height,
            frames: self
                .frames
                .iter()
                .map(|f| RgbFrame {
                    width: f.width,
                    height: f.height,
                    pixels: f.pixels.iter().map(|p| p.map(|v| U::of(v.as_f64()))).collect(),
                })
                .collect(),
            depths: self
                .depths
                .iter()
                .map(|d| DepthMap {
                    width: d.width,
                    height: d.height,
                    values: crate::scalar::cast_slice(&d.values),
                })
                .collect(),
            cameras: self.cameras.clone(),
            recon_pointmaps: self.recon_pointmaps.iter().map(|p| p.cast()).collect(),
            gt_track_pointmaps: self.gt_track_pointmaps.iter().map(|p| p.cast()).collect(),
            gt_visibility: self
                .gt_visibility
                .iter()
                .map(|v| VisibilityMap {
                    width: v.width,
                    height: v.height,
                    values: crate::scalar::cast_slice(&v.values),
                })
                .collect(),
            stride: self.stride,
            units: self.units,
        }
    }

    /// Checks the internal consistency of the clip. `exact_ground_truth`
    /// additionally requires the unperturbed relations between input
    /// geometry and ground truth.
    pub fn check_invariants(&self, exact_ground_truth: bool) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::Scene("clip has no frames".into()));
        }
        let counts = [
            self.depths.len(),
            self.cameras.len(),
            self.recon_pointmaps.len(),
            self.gt_track_pointmaps.len(),
            self.gt_visibility.len(),
        ];
        if counts.iter().any(|&c| c != n) {
            return Err(Error::Scene(format!("per-frame array lengths differ: {n} vs {counts:?}")));
        }
        for j in 0..n {
            let recon = unproject_to_world(&self.depths[j], &self.cameras[j])?;
            if recon.points != self.recon_pointmaps[j].points {
                return Err(Error::Scene(format!("recon pointmap {j} does not match depth and camera")));
            }
            if !self.gt_track_pointmaps[j].all_finite() {
                return Err(Error::Scene(format!("non-finite ground-truth track at frame {j}")));
            }
            if self.gt_visibility[j].values.iter().any(|v| *v != T::zero() && *v != T::one()) {
                return Err(Error::Scene(format!("ground-truth visibility {j} is not binary")));
            }
        }
        if exact_ground_truth {
            if self.gt_track_pointmaps[0].points != self.recon_pointmaps[0].points {
                return Err(Error::Scene("gt track at frame 0 differs from recon pointmap".into()));
            }
            if self.gt_visibility[0].values.iter().any(|v| *v != T::one()) {
                return Err(Error::Scene("reference frame is not fully visible".into()));
            }
        }
        Ok(())
    }
}

impl Motion {
    /// Displacement of the primitive at scene time `tau` relative to time 0.
    pub fn offset(&self, tau: f64) -> [f64; 3] {
        match self {
            Motion::Static => [0.0; 3],
            Motion::ConstantVelocity { velocity } => velocity.map(|v| v * tau),
            Motion::CircularOrbit {
                radius,
                angular_speed,
                phase,
                axis_u,
                axis_v,
            } => {
                let a = angular_speed * tau + phase;
                let cu = radius * (a.cos() - phase.cos());
                let cv = radius * (a.sin() - phase.sin());
                [0, 1, 2].map(|k| cu * axis_u[k] + cv * axis_v[k])
            }
            Motion::SinusoidalOscillation {
                amplitude,
                angular_frequency,
                phase,
            } => {
                let s = (angular_frequency * tau + phase).sin() - phase.sin();
                amplitude.map(|a| a * s)
            }
        }
    }
}

impl SceneSpec {
    pub fn camera_at(&self, tau: f64) -> CameraModel {
        let k = &self.intrinsics;
        let base = CameraModel::pinhole(k.fx, k.fy, k.cx, k.cy);
        match &self.camera {
            CameraPath::Static => base,
            CameraPath::LinearTranslation { velocity } => base.with_pose(mat3_identity(), velocity.map(|v| v * tau)),
            CameraPath::Orbit { target, angular_speed } => {
                let theta = angular_speed * tau;
                let rot = axis_angle([0.0, 1.0, 0.0], theta);
                // Start at the origin; rotate the offset from the target.
                let off = [-target[0], -target[1], -target[2]];
                let r_off = crate::geometry::mat3_mul_vec(&rot, off);
                let center = [target[0] + r_off[0], target[1] + r_off[1], target[2] + r_off[2]];
                base.with_pose(mat3_mul(&rot, &mat3_identity()), center)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Scene("a clip needs at least two frames (F >= 1)".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Scene("image size must be positive".into()));
        }
        if !(self.background_depth > 0.0) {
            return Err(Error::Scene("background depth must be positive".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let ok = match &p.shape {
                Shape::Sphere { radius } => *radius > 0.0,
                Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            };
            if !ok {
                return Err(Error::Scene(format!("primitive {i} has non-positive size")));
            }
        }
        self.camera_at(0.0).validate()
    }
}

/// Surface hit by a pixel ray.
#[derive(Clone, Copy, Debug)]
struct Hit {
    depth: f64,
    owner: Option<usize>,
    point: [f64; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Ray parameter of the nearest positive intersection. The ray direction
/// has unit camera-frame z, so the parameter equals camera depth.
fn intersect(shape: &Shape, center: [f64; 3], origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    match shape {
        Shape::Sphere { radius } => {
            let oc = sub(origin, center);
            let a = dot(dir, dir);
            let b = 2.0 * dot(dir, oc);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            (t > 0.0).then_some(t)
        }
        Shape::Box { half_extents } => {
            let mut t_min = f64::NEG_INFINITY;
            let mut t_max = f64::INFINITY;
            for k in 0..3 {
                let lo = center[k] - half_extents[k];
                let hi = center[k] + half_extents[k];
                if dir[k] == 0.0 {
                    if origin[k] < lo || origin[k] > hi {
                        return None;
                    }
                    continue;
                }
                let t1 = (lo - origin[k]) / dir[k];
                let t2 = (hi - origin[k]) / dir[k];
                t_min = t_min.max(t1.min(t2));
                t_max = t_max.min(t1.max(t2));
            }
            (t_max >= t_min && t_min > 0.0).then_some(t_min)
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, i: i64, j: i64, k: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((i as u64).wrapping_mul(73_856_093) ^ splitmix((j as u64).wrapping_mul(19_349_663) ^ (k as u64).wrapping_mul(83_492_791))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated 3D value noise in `[0, 1]`.
pub fn value_noise(seed: u64, p: [f64; 3]) -> f64 {
    let fl = p.map(f64::floor);
    let fr = [p[0] - fl[0], p[1] - fl[1], p[2] - fl[2]].map(|t| t * t * (3.0 - 2.0 * t));
    let (i, j, k) = (fl[0] as i64, fl[1] as i64, fl[2] as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { fr[0] } else { 1.0 - fr[0] })
                    * (if dy == 1 { fr[1] } else { 1.0 - fr[1] })
                    * (if dz == 1 { fr[2] } else { 1.0 - fr[2] });
                acc += w * lattice(seed, i + dx, j + dy, k + dz);
            }
        }
    }
    acc
}

const TEXTURE_FREQUENCY: f64 = 3.0;

fn shade(base: [f64; 3], seed: u64, local: [f64; 3]) -> [f64; 3] {
    let n = value_noise(seed, local.map(|v| v * TEXTURE_FREQUENCY));
    base.map(|c| (c * (0.55 + 0.45 * n)).clamp(0.0, 1.0))
}

struct FrameRender {
    depth: Vec<f64>,
    owner: Vec<Option<usize>>,
    color: Vec<[f64; 3]>,
}

fn render_frame(spec: &SceneSpec, tau: f64, camera: &CameraModel) -> Result<FrameRender> {
    let (w, h) = (spec.width, spec.height);
    let origin = camera.center();
    let centers: Vec<[f64; 3]> = spec
        .primitives
        .iter()
        .map(|p| add(p.center, p.motion.offset(tau)))
        .collect();
    let mut out = FrameRender {
        depth: Vec::with_capacity(w * h),
        owner: Vec::with_capacity(w * h),
        color: Vec::with_capacity(w * h),
    };
    for v in 0..h {
        for u in 0..w {
            let dir = camera.ray_direction(u as f64, v as f64);
            let mut best: Option<Hit> = None;
            if dir[2] > 0.0 {
                let t = (spec.background_depth - origin[2]) / dir[2];
                if t > 0.0 {
                    best = Some(Hit {
                        depth: t,
                        owner: None,
                        point: add(origin, dir.map(|d| d * t)),
                    });
                }
            }
            for (i, prim) in spec.primitives.iter().enumerate() {
                if let Some(t) = intersect(&prim.shape, centers[i], origin, dir) {
                    if best.is_none_or(|b| t < b.depth) {
                        best = Some(Hit {
                            depth: t,
                            owner: Some(i),
                            point: add(origin, dir.map(|d| d * t)),
                        });
                    }
                }
            }
            let hit = best.ok_or_else(|| {
                Error::Scene(format!("pixel ({u}, {v}) at time {tau} sees no surface"))
            })?;
            let color = match hit.owner {
                Some(i) => shade(
                    spec.primitives[i].color,
                    splitmix(spec.seed ^ (i as u64 + 1)),
                    sub(hit.point, centers[i]),
                ),
                None => shade(spec.background_color, splitmix(spec.seed), hit.point),
            };
            out.depth.push(hit.depth);
            out.owner.push(hit.owner);
            out.color.push(color);
        }
    }
    Ok(out)
}

/// Renders a clip sampled at scene times `0, 1, 2, ...`.
pub fn generate_clip<T: Scalar>(spec: &SceneSpec) -> Result<TrackClip<T>> {
    generate_clip_strided(spec, 1)
}

/// Renders `spec.frames` frames taken every `stride` scene time steps.
pub fn generate_clip_strided<T: Scalar>(spec: &SceneSpec, stride: usize) -> Result<TrackClip<T>> {
    spec.validate()?;
    if stride == 0 {
        return Err(Error::Scene("stride must be at least 1".into()));
    }
    let (w, h) = (spec.width, spec.height);
    let mut clip = TrackClip {
        width: w,
        height: h,
        frames: Vec::new(),
        depths: Vec::new(),
        cameras: Vec::new(),
        recon_pointmaps: Vec::new(),
        gt_track_pointmaps: Vec::new(),
        gt_visibility: Vec::new(),
        stride,
        units: spec.units,
    };
    let mut owners0 = Vec::new();
    for j in 0..spec.frames {
        let tau = (j * stride) as f64;
        let camera = spec.camera_at(tau);
        let render = render_frame(spec, tau, &camera)?;
        if j == 0 {
            for (i, _) in spec.primitives.iter().enumerate() {
                if !render.owner.contains(&Some(i)) {
                    return Err(Error::Scene(format!("primitive {i} is not visible in the first frame")));
                }
            }
            owners0 = render.owner.clone();
        }
        let depth = DepthMap::new(w, h, render.depth.iter().map(|d| T::of(*d)).collect())?;
        let recon = unproject_to_world(&depth, &camera)?.with_indices(j, j);
        clip.frames.push(RgbFrame {
            width: w,
            height: h,
            pixels: render.color.iter().map(|c| c.map(T::of)).collect(),
        });
        clip.depths.push(depth);
        clip.cameras.push(camera);
        clip.recon_pointmaps.push(recon);
    }

    let reference = clip.recon_pointmaps[0].clone();
    for j in 0..spec.frames {
        let tau = (j * stride) as f64;
        let track = if j == 0 {
            reference.clone()
        } else {
            let points = reference
                .points
                .iter()
                .zip(&owners0)
                .map(|(p, owner)| match owner {
                    Some(i) => {
                        let off = spec.primitives[*i].motion.offset(tau);
                        [
                            T::of(p[0].as_f64() + off[0]),
                            T::of(p[1].as_f64() + off[1]),
                            T::of(p[2].as_f64() + off[2]),
                        ]
                    }
                    None => *p,
                })
                .collect();
            Pointmap::new(w, h, points)?.with_indices(0, j)
        };
        let vis = visibility_from_projection(&track, &clip.depths[j], &clip.cameras[j], spec.visibility_tolerance)?;
        clip.gt_track_pointmaps.push(track);
        clip.gt_visibility.push(vis);
    }
    Ok(clip)
}

/// Returns a copy whose input geometry is recomputed from multiplicatively
/// noised depths and perturbed camera poses. The first camera stays fixed
/// because it defines the world frame. Ground truth is left untouched.
pub fn perturb_geometry<T: Scalar>(
    clip: &TrackClip<T>,
    depth_noise_rel: f64,
    pose_noise: (f64, f64),
    seed: u64,
) -> Result<TrackClip<T>> {
    let mut out = clip.clone();
    if depth_noise_rel == 0.0 && pose_noise == (0.0, 0.0) {
        return Ok(out);
    }
    if !(depth_noise_rel >= 0.0) || !(pose_noise.0 >= 0.0) || !(pose_noise.1 >= 0.0) {
        return Err(Error::InvalidInput("noise levels must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for j in 0..out.len() {
        for d in out.depths[j].values.iter_mut() {
            let z: f64 = std_normal.sample(&mut rng);
            let factor = 1.0 + depth_noise_rel * z.clamp(-3.0, 3.0);
            *d = T::of(d.as_f64() * factor);
        }
        if j > 0 {
            let axis = [std_normal.sample(&mut rng), std_normal.sample(&mut rng), std_normal.sample(&mut rng)];
            let angle = pose_noise.0 * std_normal.sample(&mut rng);
            let cam = &mut out.cameras[j];
            cam.rotation = mat3_mul(&cam.rotation, &axis_angle(axis, angle));
            for k in 0..3 {
                cam.translation[k] += pose_noise.1 * std_normal.sample(&mut rng);
            }
        }
        out.recon_pointmaps[j] = unproject_to_world(&out.depths[j], &out.cameras[j])?.with_indices(j, j);
    }
    Ok(out)
}

/// Indices `(scene, stride)` drawn uniformly for one training sample.
pub fn sample_choice(library_len: usize, strides_len: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.random_range(0..library_len), rng.random_range(0..strides_len))
}

/// Picks a scene and a temporal stride uniformly and renders the clip.
pub fn sample_training_clip<T: Scalar>(library: &[SceneSpec], strides: &[usize], seed: u64) -> Result<TrackClip<T>> {
    if library.is_empty() || strides.is_empty() {
        return Err(Error::InvalidInput("scene library and stride list must be non-empty".into()));
    }
    let (si, ki) = sample_choice(library.len(), strides.len(), seed);
    generate_clip_strided(&library[si], strides[ki])
}

/// Parameters of the random scene family used for training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDistribution {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    #[serde(default = "default_min_prims")]
    pub min_primitives: usize,
    #[serde(default = "default_max_prims")]
    pub max_primitives: usize,
    /// Largest per-step speed of a primitive, in meters.
    #[serde(default = "default_max_speed")]
    pub max_speed: f64,
    /// Probability that the camera moves.
    #[serde(default = "default_camera_motion")]
    pub camera_motion_probability: f64,
}

fn default_min_prims() -> usize {
    1
}

fn default_max_prims() -> usize {
    3
}

fn default_max_speed() -> f64 {
    0.2
}

fn default_camera_motion() -> f64 {
    0.5
}

impl SceneDistribution {
    pub fn new(width: usize, height: usize, frames: usize) -> Self {
        Self {
            width,
            height,
            frames,
            min_primitives: default_min_prims(),
            max_primitives: default_max_prims(),
            max_speed: default_max_speed(),
            camera_motion_probability: default_camera_motion(),
        }
    }

    /// Draws a scene; retries until the first frame sees every primitive.
    /// Images too small for that fall back to one static centered sphere.
    pub fn sample(&self, seed: u64) -> SceneSpec {
        const MAX_ATTEMPTS: u64 = 256;
        for attempt in 0..MAX_ATTEMPTS {
            let spec = self.sample_once(splitmix(seed.wrapping_add(attempt.wrapping_mul(0x5851_F42D))));
            let spec = SceneSpec { seed, ..spec };
            if spec.validate().is_ok() && first_frame_sees_all(&spec) {
                return spec;
            }
        }
        let mut spec = SceneSpec {
            seed,
            ..self.sample_once(splitmix(seed))
        };
        spec.camera = CameraPath::Static;
        spec.primitives = vec![Primitive {
            shape: Shape::Sphere { radius: 0.5 },
            center: [0.0, 0.0, 2.5],
            color: spec.primitives[0].color,
            motion: Motion::Static,
        }];
        spec
    }

    fn sample_once(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (self.width as f64, self.height as f64);
        let intrinsics = Intrinsics {
            fx: w,
            fy: w,
            cx: (w - 1.0) / 2.0,
            cy: (h - 1.0) / 2.0,
        };
        let background_depth = rng.random_range(3.5..4.5);
        let hue = |rng: &mut ChaCha8Rng| -> [f64; 3] {
            let k = rng.random_range(0..6);
            let hi = rng.random_range(0.8..1.0);
            let lo = rng.random_range(0.05..0.3);
            match k {
                0 => [hi, lo, lo],
                1 => [lo, hi, lo],
                2 => [lo, lo, hi],
                3 => [hi, hi, lo],
                4 => [hi, lo, hi],
                _ => [lo, hi, hi],
            }
        };
        let count = rng.random_range(self.min_primitives..=self.max_primitives.max(self.min_primitives));
        let mut primitives = Vec::with_capacity(count);
        for _ in 0..count {
            let z = rng.random_range(1.8..3.0);
            let reach = 0.3 * z;
            let center = [rng.random_range(-reach..reach), rng.random_range(-reach..reach), z];
            let shape = if rng.random_bool(0.6) {
                Shape::Sphere {
                    radius: rng.random_range(0.3..0.55),
                }
            } else {
                Shape::Box {
                    half_extents: [
                        rng.random_range(0.2..0.45),
                        rng.random_range(0.2..0.45),
                        rng.random_range(0.2..0.45),
                    ],
                }
            };
            let speed = rng.random_range(0.3..1.0) * self.max_speed;
            let motion = match rng.random_range(0..4) {
                0 => Motion::Static,
                1 | 2 => {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let vz = rng.random_range(-0.3..0.3);
                    Motion::ConstantVelocity {
                        velocity: [speed * a.cos(), speed * a.sin(), speed * vz],
                    }
                }
                _ => {
                    let radius = rng.random_range(0.3..0.6);
                    Motion::CircularOrbit {
                        radius,
                        angular_speed: speed / radius,
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                        axis_u: unit_x(),
                        axis_v: unit_y(),
                    }
                }
            };
            primitives.push(Primitive {
                shape,
                center,
                color: hue(&mut rng),
                motion,
            });
        }
        let camera = if rng.random_bool(self.camera_motion_probability) {
            if rng.random_bool(0.5) {
                CameraPath::LinearTranslation {
                    velocity: [rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06), rng.random_range(-0.03..0.03)],
                }
            } else {
                CameraPath::Orbit {
                    target: [0.0, 0.0, rng.random_range(2.0..3.0)],
                    angular_speed: rng.random_range(-0.03..0.03),
                }
            }
        } else {
            CameraPath::Static
        };
        let g = rng.random_range(0.35..0.6);
        SceneSpec {
            width: self.width,
            height: self.height,
            frames: self.frames,
            intrinsics,
            camera,
            primitives,
            background_depth,
            background_color: [g, g * rng.random_range(0.8..1.0), g * rng.random_range(0.8..1.0)],
            seed,
            visibility_tolerance: GT_VISIBILITY_TOLERANCE,
            units: Units::SceneScale,
        }
    }
}

fn first_frame_sees_all(spec: &SceneSpec) -> bool {
    let camera = spec.camera_at(0.0);
    match render_frame(spec, 0.0, &camera) {
        Ok(r) => (0..spec.primitives.len()).all(|i| r.owner.contains(&Some(i))),
        Err(_) => false,
    }
}
