//! Pointmap algebra: unprojection, normalization, residual tracks, Sim(3)
//! alignment and projection-based visibility.
//!
//! Pixel `(u, v)` addresses column `u` and row `v`; pixel coordinates are
//! used directly as pinhole image coordinates (no half-pixel offset).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Error, Result};
use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Smallest admissible normalization scale.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Lower / upper depth percentiles used to select normalization inliers.
pub const INLIER_PERCENTILES: (f64, f64) = (0.02, 0.98);
/// Depth tolerance of the projection visibility heuristic used for evaluation.
pub const EVAL_VISIBILITY_TOLERANCE: f64 = 0.10;

/// H x W grid of world-space points. `frame_index` names the frame whose
/// content is stored, `timestamp_index` the time at which it is observed.
#[derive(Clone, Debug, PartialEq)]
pub struct Pointmap<T> {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3<T>>,
    pub frame_index: usize,
    pub timestamp_index: usize,
}

/// Per-pixel depth (camera-frame z) in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
}

/// Per-pixel visibility probability in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
}

/// Per-pixel displacement field `P_0(t_j) - P_0(t_0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<Vec3<T>>,
}

/// Pinhole intrinsics plus a world-from-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

/// Result of projecting a world point. `depth <= 0` means the point is
/// behind the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }

    /// Nearest pixel if it falls inside a `width x height` image.
    pub fn nearest_pixel(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        if !self.in_front() || !self.u.is_finite() || !self.v.is_finite() {
            return None;
        }
        let iu = self.u.round();
        let iv = self.v.round();
        if iu < 0.0 || iv < 0.0 || iu >= width as f64 || iv >= height as f64 {
            return None;
        }
        Some((iu as usize, iv as usize))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats<T> {
    pub mean: Vec3<T>,
    pub scale: T,
}

/// `x -> scale * R * x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

pub(crate) fn mat3_mul_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn mat3_t_mul_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

pub(crate) fn mat3_identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation about a unit `axis` by `angle` radians (Rodrigues).
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if n == 0.0 || angle == 0.0 {
        return mat3_identity();
    }
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn orthonormality_error(r: &Mat3) -> f64 {
    let rtr = mat3_mul(&transpose3(r), r);
    let mut err: f64 = 0.0;
    for (i, row) in rtr.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((v - target).abs());
        }
    }
    err
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub(crate) fn transpose3(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in m.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            out[c][r] = *v;
        }
    }
    out
}

fn to_f64_3<T: Scalar>(p: Vec3<T>) -> [f64; 3] {
    [p[0].as_f64(), p[1].as_f64(), p[2].as_f64()]
}

fn from_f64_3<T: Scalar>(p: [f64; 3]) -> Vec3<T> {
    [T::of(p[0]), T::of(p[1]), T::of(p[2])]
}

impl CameraModel {
    /// Camera at the world origin looking down +z.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation: mat3_identity(),
            translation: [0.0; 3],
        }
    }

    pub fn with_pose(mut self, rotation: Mat3, translation: [f64; 3]) -> Self {
        self.rotation = rotation;
        self.translation = translation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(self.rotation.iter().flatten())
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(input_err("camera parameters must be finite"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(input_err("focal lengths must be positive"));
        }
        let err = orthonormality_error(&self.rotation);
        if err > 1e-9 || det3(&self.rotation) <= 0.0 {
            return Err(input_err(format!(
                "rotation is not a proper orthonormal matrix (error {err:e})"
            )));
        }
        Ok(())
    }

    pub fn camera_to_world(&self, pc: [f64; 3]) -> [f64; 3] {
        let r = mat3_mul_vec(&self.rotation, pc);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn world_to_camera(&self, pw: [f64; 3]) -> [f64; 3] {
        let d = [
            pw[0] - self.translation[0],
            pw[1] - self.translation[1],
            pw[2] - self.translation[2],
        ];
        mat3_t_mul_vec(&self.rotation, d)
    }

    /// Back-projects pixel `(u, v)` at camera-frame depth `d` into the world.
    pub fn unproject_pixel(&self, u: f64, v: f64, d: f64) -> [f64; 3] {
        let pc = [(u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d];
        self.camera_to_world(pc)
    }

    /// World-space direction of the ray through pixel `(u, v)` (unnormalized,
    /// unit camera-frame z).
    pub fn ray_direction(&self, u: f64, v: f64) -> [f64; 3] {
        mat3_mul_vec(
            &self.rotation,
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0],
        )
    }

    pub fn center(&self) -> [f64; 3] {
        self.translation
    }
}

impl<T: Scalar> Pointmap<T> {
    pub fn new(width: usize, height: usize, points: Vec<Vec3<T>>) -> Result<Self> {
        if points.len() != width * height {
            return Err(shape_err(format!(
                "pointmap has {} points, expected {}x{}",
                points.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            points,
            frame_index: 0,
            timestamp_index: 0,
        })
    }

    pub fn with_indices(mut self, frame_index: usize, timestamp_index: usize) -> Self {
        self.frame_index = frame_index;
        self.timestamp_index = timestamp_index;
        self
    }

    pub fn at(&self, u: usize, v: usize) -> Vec3<T> {
        self.points[v * self.width + u]
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Pointmap<U> {
        Pointmap {
            width: self.width,
            height: self.height,
            points: self.points.iter().map(|p| from_f64_3(to_f64_3(*p))).collect(),
            frame_index: self.frame_index,
            timestamp_index: self.timestamp_index,
        }
    }
}

impl<T: Scalar> DepthMap<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != width * height {
            return Err(shape_err(format!(
                "depth map has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn at(&self, u: usize, v: usize) -> T {
        self.values[v * self.width + u]
    }
}

impl<T: Scalar> VisibilityMap<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != width * height {
            return Err(shape_err("visibility map size mismatch"));
        }
        if values.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(input_err("visibility values must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn at(&self, u: usize, v: usize) -> T {
        self.values[v * self.width + u]
    }

    /// Thresholds at 0.5.
    pub fn binarized(&self) -> Vec<bool> {
        self.values.iter().map(|v| *v > T::of(0.5)).collect()
    }
}

/// Lifts a depth map into world space through `camera`.
pub fn unproject_to_world<T: Scalar>(depth: &DepthMap<T>, camera: &CameraModel) -> Result<Pointmap<T>> {
    camera.validate()?;
    let mut points = Vec::with_capacity(depth.values.len());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.at(u, v).as_f64();
            if !d.is_finite() {
                return Err(input_err(format!("non-finite depth at pixel ({u}, {v})")));
            }
            points.push(from_f64_3(camera.unproject_pixel(u as f64, v as f64, d)));
        }
    }
    Pointmap::new(depth.width, depth.height, points)
}

/// Pinhole projection of a world point.
pub fn project_to_image<T: Scalar>(point: Vec3<T>, camera: &CameraModel) -> Projection {
    let pc = camera.world_to_camera(to_f64_3(point));
    let z = pc[2];
    if z <= 0.0 {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth: z,
        };
    }
    Projection {
        u: camera.fx * pc[0] / z + camera.cx,
        v: camera.fy * pc[1] / z + camera.cy,
        depth: z,
    }
}

/// Linear-interpolated percentile of already sorted values, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Mean and max-distance scale over the pixels whose depth lies inside the
/// 2%-98% percentile band of all frames. Inputs too small for the band to
/// contain any pixel use every pixel.
pub fn compute_normalization<T: Scalar>(
    pointmaps: &[Pointmap<T>],
    depths: &[DepthMap<T>],
) -> Result<NormalizationStats<T>> {
    if pointmaps.is_empty() {
        return Err(input_err("normalization needs at least one pointmap"));
    }
    if pointmaps.len() != depths.len() {
        return Err(shape_err("pointmap and depth counts differ"));
    }
    let mut all = Vec::new();
    for (pm, d) in pointmaps.iter().zip(depths) {
        if pm.points.len() != d.values.len() {
            return Err(shape_err("pointmap and depth map sizes differ"));
        }
        for &v in &d.values {
            let v = v.as_f64();
            if !v.is_finite() {
                return Err(input_err("non-finite depth in normalization input"));
            }
            all.push(v);
        }
    }
    if all.is_empty() {
        return Err(input_err("normalization input has no pixels"));
    }
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, INLIER_PERCENTILES.0);
    let hi = percentile_sorted(&sorted, INLIER_PERCENTILES.1);

    let points = || pointmaps.iter().flat_map(|pm| pm.points.iter()).zip(&all);
    let mut inliers: Vec<[f64; 3]> = points().filter(|(_, d)| **d >= lo && **d <= hi).map(|(p, _)| to_f64_3(*p)).collect();
    if inliers.is_empty() {
        inliers = points().map(|(p, _)| to_f64_3(*p)).collect();
    }
    let n = inliers.len() as f64;
    let mut mean = [0.0; 3];
    for p in &inliers {
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let max_dist = inliers
        .iter()
        .map(|p| {
            ((p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2) + (p[2] - mean[2]).powi(2)).sqrt()
        })
        .fold(0.0f64, f64::max);
    Ok(NormalizationStats {
        mean: from_f64_3(mean),
        scale: T::of(max_dist.max(SCALE_FLOOR)),
    })
}

impl<T: Scalar> NormalizationStats<T> {
    pub fn normalize_point(&self, p: Vec3<T>) -> Vec3<T> {
        [
            (p[0] - self.mean[0]) / self.scale,
            (p[1] - self.mean[1]) / self.scale,
            (p[2] - self.mean[2]) / self.scale,
        ]
    }

    pub fn denormalize_point(&self, p: Vec3<T>) -> Vec3<T> {
        [
            p[0] * self.scale + self.mean[0],
            p[1] * self.scale + self.mean[1],
            p[2] * self.scale + self.mean[2],
        ]
    }

    pub fn cast<U: Scalar>(&self) -> NormalizationStats<U> {
        NormalizationStats {
            mean: from_f64_3(to_f64_3(self.mean)),
            scale: U::of(self.scale.as_f64()),
        }
    }
}

pub fn normalize<T: Scalar>(pm: &Pointmap<T>, stats: &NormalizationStats<T>) -> Pointmap<T> {
    Pointmap {
        points: pm.points.iter().map(|p| stats.normalize_point(*p)).collect(),
        ..pm.clone()
    }
}

pub fn denormalize<T: Scalar>(pm: &Pointmap<T>, stats: &NormalizationStats<T>) -> Pointmap<T> {
    Pointmap {
        points: pm.points.iter().map(|p| stats.denormalize_point(*p)).collect(),
        ..pm.clone()
    }
}

/// `track - reference`, elementwise.
pub fn residual_from_tracks<T: Scalar>(track: &Pointmap<T>, reference: &Pointmap<T>) -> Result<ResidualMap<T>> {
    if (track.width, track.height) != (reference.width, reference.height) {
        return Err(shape_err(format!(
            "track {}x{} vs reference {}x{}",
            track.width, track.height, reference.width, reference.height
        )));
    }
    let values = track
        .points
        .iter()
        .zip(&reference.points)
        .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
        .collect();
    Ok(ResidualMap {
        width: track.width,
        height: track.height,
        values,
    })
}

/// `reference + residual`, elementwise.
pub fn recover_tracks<T: Scalar>(reference: &Pointmap<T>, residual: &ResidualMap<T>) -> Result<Pointmap<T>> {
    if (residual.width, residual.height) != (reference.width, reference.height) {
        return Err(shape_err("residual and reference sizes differ"));
    }
    let points = reference
        .points
        .iter()
        .zip(&residual.values)
        .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
        .collect();
    Ok(Pointmap {
        points,
        ..reference.clone()
    })
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: mat3_identity(),
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat3_mul_vec(&self.rotation, p);
        [
            self.scale * r[0] + self.translation[0],
            self.scale * r[1] + self.translation[1],
            self.scale * r[2] + self.translation[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(input_err("Sim(3) scale must be positive"));
        }
        if orthonormality_error(&self.rotation) > 1e-9 || det3(&self.rotation) <= 0.0 {
            return Err(input_err("Sim(3) rotation is not proper orthonormal"));
        }
        Ok(())
    }
}

/// Weighted least-squares similarity transform mapping `pred` onto `gt`
/// (Umeyama's closed form with reflection correction).
pub fn umeyama_sim3(pred: &[[f64; 3]], gt: &[[f64; 3]], weights: Option<&[f64]>) -> Result<Sim3Transform> {
    if pred.len() != gt.len() {
        return Err(shape_err("pred and gt point counts differ"));
    }
    if let Some(w) = weights {
        if w.len() != pred.len() {
            return Err(shape_err("weight count differs from point count"));
        }
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(input_err("weights must be finite and non-negative"));
        }
    }
    if pred.len() < 3 {
        return Err(Error::Degenerate(format!(
            "Sim(3) fit needs at least 3 points, got {}",
            pred.len()
        )));
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..pred.len()).map(weight).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("total weight is zero".into()));
    }

    let mut mu_p = Vector3::zeros();
    let mut mu_g = Vector3::zeros();
    for i in 0..pred.len() {
        mu_p += Vector3::from(pred[i]) * weight(i);
        mu_g += Vector3::from(gt[i]) * weight(i);
    }
    mu_p /= total;
    mu_g /= total;

    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for i in 0..pred.len() {
        let dp = Vector3::from(pred[i]) - mu_p;
        let dg = Vector3::from(gt[i]) - mu_g;
        cov += dg * dp.transpose() * weight(i);
        var_p += dp.norm_squared() * weight(i);
    }
    cov /= total;
    var_p /= total;
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(input_err("non-finite point in Sim(3) fit"));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    if var_p <= 0.0 || sv[0].1 <= 0.0 || sv[1].1 <= 1e-12 * sv[0].1 {
        return Err(Error::Degenerate(format!(
            "rank-deficient covariance (singular values {:.3e}, {:.3e}, {:.3e}; source variance {:.3e}); points are collinear or coincident",
            sv[0].1, sv[1].1, sv[2].1, var_p
        )));
    }

    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        // Flip the axis of the smallest singular value.
        let smallest = sv[2].0;
        s[(smallest, smallest)] = -1.0;
    }
    let r = u * s * v_t;
    let trace_ds: f64 = (0..3).map(|k| svd.singular_values[k] * s[(k, k)]).sum();
    let scale = trace_ds / var_p;
    let t = mu_g - r * mu_p * scale;

    let mut rotation = [[0.0; 3]; 3];
    for (i, row) in rotation.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = r[(i, j)];
        }
    }
    Ok(Sim3Transform {
        scale,
        rotation,
        translation: [t[0], t[1], t[2]],
    })
}

/// Binary visibility of tracked points: the nearest projected pixel lies in
/// the image and the projected depth is within `tol * depth` of the depth
/// buffer there.
pub fn visibility_from_projection<T: Scalar>(
    track: &Pointmap<T>,
    depth: &DepthMap<T>,
    camera: &CameraModel,
    tol: f64,
) -> Result<VisibilityMap<T>> {
    let values = track
        .points
        .iter()
        .map(|p| {
            let proj = project_to_image(*p, camera);
            let visible = match proj.nearest_pixel(depth.width, depth.height) {
                Some((iu, iv)) => {
                    let buffer = depth.at(iu, iv).as_f64();
                    (proj.depth - buffer).abs() <= tol * buffer
                }
                None => false,
            };
            if visible {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(VisibilityMap {
        width: track.width,
        height: track.height,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        let axis = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
        axis_angle(axis, rng.random_range(-3.0..3.0))
    }

    #[test]
    fn principal_ray_and_principal_point() {
        let cam = CameraModel::pinhole(1.0, 1.0, 0.0, 0.0);
        let d = DepthMap::new(1, 1, vec![1.0f64]).unwrap();
        assert_eq!(unproject_to_world(&d, &cam).unwrap().points[0], [0.0, 0.0, 1.0]);

        let cam = CameraModel::pinhole(80.0, 90.0, 2.0, 1.0);
        let d = DepthMap::new(3, 2, vec![2.5f64; 6]).unwrap();
        let pm = unproject_to_world(&d, &cam).unwrap();
        assert_eq!(pm.at(2, 1), [0.0, 0.0, 2.5]);
        let proj = project_to_image([0.0, 0.0, 2.5f64], &cam);
        assert_eq!((proj.u, proj.v, proj.depth), (2.0, 1.0, 2.5));
    }

    #[test]
    fn translated_camera_matches_hand_projection() {
        // Camera frame point: ((64-32)*2/100, 0, 2) = (0.64, 0, 2); shifted by (1,0,0).
        let cam = CameraModel::pinhole(100.0, 100.0, 32.0, 32.0).with_pose(mat3_identity(), [1.0, 0.0, 0.0]);
        let p = cam.unproject_pixel(64.0, 32.0, 2.0);
        assert!((p[0] - 1.64).abs() < 1e-12 && p[1].abs() < 1e-12 && (p[2] - 2.0).abs() < 1e-12);
        // Independent forward projection: u = fx * (x - tx) / z + cx.
        let u = 100.0 * (p[0] - 1.0) / p[2] + 32.0;
        let v = 100.0 * p[1] / p[2] + 32.0;
        assert!((u - 64.0).abs() < 1e-12 && (v - 32.0).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_composed_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let t = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let cam = CameraModel::pinhole(rng.random_range(20.0..200.0), rng.random_range(20.0..200.0), 15.5, 9.0)
                .with_pose(r, t);
            let p = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            // K * [R^T | -R^T t] as an explicit 3x4 matrix.
            let k = [[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]];
            let rt = transpose3(&r);
            let minus_rt_t = mat3_mul_vec(&rt, t).map(|x| -x);
            let mut p34 = [[0.0; 4]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    p34[i][j] = (0..3).map(|m| k[i][m] * rt[m][j]).sum();
                }
                p34[i][3] = (0..3).map(|m| k[i][m] * minus_rt_t[m]).sum();
            }
            let h: Vec<f64> = (0..3)
                .map(|i| p34[i][0] * p[0] + p34[i][1] * p[1] + p34[i][2] * p[2] + p34[i][3])
                .collect();
            let proj = project_to_image(p, &cam);
            if h[2] <= 0.0 {
                assert!(!proj.in_front());
                continue;
            }
            assert!((proj.u - h[0] / h[2]).abs() < 1e-9 * (1.0 + proj.u.abs()));
            assert!((proj.v - h[1] / h[2]).abs() < 1e-9 * (1.0 + proj.v.abs()));
            assert!((proj.depth - h[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn behind_camera_is_flagged() {
        let cam = CameraModel::pinhole(10.0, 10.0, 5.0, 5.0);
        let proj = project_to_image([0.0, 0.0, -1.0f64], &cam);
        assert!(!proj.in_front());
        assert_eq!(proj.nearest_pixel(10, 10), None);
    }

    #[test]
    fn non_finite_depth_is_rejected() {
        let cam = CameraModel::pinhole(1.0, 1.0, 0.0, 0.0);
        let d = DepthMap::new(2, 1, vec![1.0f64, f64::NAN]).unwrap();
        assert!(matches!(unproject_to_world(&d, &cam), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bad_cameras_are_rejected() {
        assert!(CameraModel::pinhole(0.0, 1.0, 0.0, 0.0).validate().is_err());
        let mut cam = CameraModel::pinhole(1.0, 1.0, 0.0, 0.0);
        cam.rotation[0][0] = 1.0 + 1e-6;
        assert!(cam.validate().is_err());
        let reflect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(CameraModel::pinhole(1.0, 1.0, 0.0, 0.0).with_pose(reflect, [0.0; 3]).validate().is_err());
    }

    #[test]
    fn symmetric_pair_normalization() {
        let pm = Pointmap::new(2, 1, vec![[0.0, 0.0, 1.0f64], [0.0, 0.0, 3.0]]).unwrap();
        let d = DepthMap::new(2, 1, vec![1.0, 3.0]).unwrap();
        let stats = compute_normalization(&[pm], &[d]).unwrap();
        assert_eq!(stats.mean, [0.0, 0.0, 2.0]);
        assert_eq!(stats.scale, 1.0);
        let many: Vec<_> = (0..50).flat_map(|_| [[0.0, 0.0, 1.0f64], [0.0, 0.0, 3.0]]).collect();
        let dm: Vec<_> = many.iter().map(|p| p[2]).collect();
        let stats = compute_normalization(
            &[Pointmap::new(100, 1, many).unwrap()],
            &[DepthMap::new(100, 1, dm).unwrap()],
        )
        .unwrap();
        assert_eq!(stats.mean, [0.0, 0.0, 2.0]);
        assert_eq!(stats.scale, 1.0);
    }

    #[test]
    fn degenerate_cloud_uses_floor() {
        let pm = Pointmap::new(4, 1, vec![[1.0, 2.0, 3.0f64]; 4]).unwrap();
        let d = DepthMap::new(4, 1, vec![3.0; 4]).unwrap();
        let stats = compute_normalization(std::slice::from_ref(&pm), &[d]).unwrap();
        assert_eq!(stats.scale, SCALE_FLOOR);
        assert!(normalize(&pm, &stats).points.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_normalization_input_errors() {
        assert!(compute_normalization::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn outlier_is_excluded_like_sort_based_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let mut points = Vec::new();
        let mut depths = Vec::new();
        for i in 0..n {
            let z = if i == 57 { 500.0 } else { rng.random_range(1.0..4.0) };
            points.push([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), z]);
            depths.push(z);
        }
        let stats = compute_normalization(
            &[Pointmap::new(n, 1, points.clone()).unwrap()],
            &[DepthMap::new(n, 1, depths.clone()).unwrap()],
        )
        .unwrap();

        // Oracle: numpy-style linear percentile written out by hand.
        let mut s = depths.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pct = |q: f64| {
            let pos = q * (n as f64 - 1.0);
            let i = pos as usize;
            s[i] + (pos - i as f64) * (s[i + 1] - s[i])
        };
        let (lo, hi) = (pct(0.02), pct(0.98));
        let inl: Vec<[f64; 3]> = points.iter().zip(&depths).filter(|(_, d)| **d >= lo && **d <= hi).map(|(p, _)| *p).collect();
        assert!(inl.iter().all(|p| p[2] < 100.0));
        let m = inl.len() as f64;
        let mean = [0, 1, 2].map(|k| inl.iter().map(|p| p[k]).sum::<f64>() / m);
        let scale = inl
            .iter()
            .map(|p| ((p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2) + (p[2] - mean[2]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        for k in 0..3 {
            assert!((stats.mean[k] - mean[k]).abs() < 1e-12);
        }
        assert!((stats.scale - scale).abs() < 1e-12);
    }

    #[test]
    fn normalized_inliers_lie_in_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f32; 3]> = (0..300)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-1.0..2.0), rng.random_range(1.0..6.0)])
            .collect();
        let d: Vec<f32> = pts.iter().map(|p| p[2]).collect();
        let pm = Pointmap::new(300, 1, pts).unwrap();
        let dm = DepthMap::new(300, 1, d.clone()).unwrap();
        let stats = compute_normalization(std::slice::from_ref(&pm), &[dm]).unwrap();
        let mut s: Vec<f64> = d.iter().map(|v| *v as f64).collect();
        s.sort_by(f64::total_cmp);
        let (lo, hi) = (percentile_sorted(&s, 0.02), percentile_sorted(&s, 0.98));
        let n = normalize(&pm, &stats);
        for (p, z) in n.points.iter().zip(&d) {
            if (*z as f64) >= lo && (*z as f64) <= hi {
                assert!(p.iter().all(|v| v.abs() <= 1.0 + 1e-6));
            }
        }
        // Spot check against scalar arithmetic.
        let p0 = pm.points[7];
        let want = (p0[1] - stats.mean[1]) / stats.scale;
        assert_eq!(n.points[7][1], want);
    }

    #[test]
    fn residual_pair_and_errors() {
        let reference = Pointmap::new(2, 1, vec![[1.0, 2.0, 3.0f64], [0.0, 0.0, 1.0]]).unwrap();
        let track = Pointmap::new(2, 1, vec![[1.5, 2.0, 2.0f64], [0.0, 0.25, 1.0]]).unwrap();
        let r = residual_from_tracks(&track, &reference).unwrap();
        assert_eq!(r.values, vec![[0.5, 0.0, -1.0], [0.0, 0.25, 0.0]]);
        assert_eq!(recover_tracks(&reference, &r).unwrap().points, track.points);
        let zero = ResidualMap { width: 2, height: 1, values: vec![[0.0; 3]; 2] };
        assert_eq!(recover_tracks(&reference, &zero).unwrap(), reference);
        assert_eq!(residual_from_tracks(&reference, &reference).unwrap(), zero);
        let small = Pointmap::new(1, 1, vec![[0.0; 3]]).unwrap();
        assert!(residual_from_tracks(&small, &reference).is_err());
    }

    #[test]
    fn umeyama_analytic_cases() {
        let pred = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let t = umeyama_sim3(&pred, &pred, None).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!(t.translation.iter().all(|v| v.abs() < 1e-12));
        assert!(orthonormality_error(&t.rotation) < 1e-12 && (t.rotation[0][0] - 1.0).abs() < 1e-12);

        let gt: Vec<[f64; 3]> = pred.iter().map(|p| [2.0 * p[0] + 1.0, 2.0 * p[1], 2.0 * p[2]]).collect();
        let t = umeyama_sim3(&pred, &gt, None).unwrap();
        assert!((t.scale - 2.0).abs() < 1e-12);
        assert!((t.translation[0] - 1.0).abs() < 1e-12 && t.translation[1].abs() < 1e-12);
    }

    #[test]
    fn umeyama_recovers_random_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let truth = Sim3Transform {
                scale: rng.random_range(0.2..5.0),
                rotation: random_rotation(&mut rng),
                translation: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            };
            let pred: Vec<[f64; 3]> = (0..20)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let gt: Vec<[f64; 3]> = pred.iter().map(|p| truth.apply(*p)).collect();
            let fit = umeyama_sim3(&pred, &gt, None).unwrap();
            fit.validate().unwrap();
            let rmse = (pred
                .iter()
                .zip(&gt)
                .map(|(p, g)| {
                    let q = fit.apply(*p);
                    (0..3).map(|k| (q[k] - g[k]).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                / pred.len() as f64)
                .sqrt();
            assert!(rmse < 1e-9, "rmse {rmse}");
        }
    }

    #[test]
    fn umeyama_handles_planar_points_without_reflection() {
        let pred = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        let rot = axis_angle([1.0, 2.0, 0.5], 2.0);
        let truth = Sim3Transform { scale: 1.5, rotation: rot, translation: [0.1, 0.2, 0.3] };
        let gt: Vec<_> = pred.iter().map(|p| truth.apply(*p)).collect();
        let fit = umeyama_sim3(&pred, &gt, None).unwrap();
        assert!(det3(&fit.rotation) > 0.0);
        for (p, g) in pred.iter().zip(&gt) {
            let q = fit.apply(*p);
            assert!((0..3).all(|k| (q[k] - g[k]).abs() < 1e-9));
        }
    }

    #[test]
    fn umeyama_rejects_collinear_points() {
        let pred = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let err = umeyama_sim3(&pred, &pred, None).unwrap_err();
        assert!(matches!(err, Error::Degenerate(msg) if msg.contains("collinear")));
    }

    #[test]
    fn visibility_heuristic_cases() {
        let cam = CameraModel::pinhole(10.0, 10.0, 2.0, 2.0);
        let depth = DepthMap::new(5, 5, vec![2.5f64; 25]).unwrap();
        let on_surface = cam.unproject_pixel(1.0, 3.0, 2.5);
        let deeper = cam.unproject_pixel(1.0, 3.0, 3.75);
        let at_tol = cam.unproject_pixel(4.0, 4.0, 2.75);
        let past_tol = cam.unproject_pixel(4.0, 4.0, 2.75 + 1e-9);
        let outside = cam.unproject_pixel(5.0, 2.0, 2.5);
        let pm = Pointmap::new(5, 1, vec![on_surface, deeper, at_tol, past_tol, outside]).unwrap();
        let vis = visibility_from_projection(&pm, &depth, &cam, EVAL_VISIBILITY_TOLERANCE).unwrap();
        // Scalar oracle: |z - D| <= tol * D on the boundary pixel (4, 4).
        let oracle = |z: f64| (z - 2.5f64).abs() <= 0.1 * 2.5;
        assert!(oracle(2.75) && !oracle(2.75 + 1e-9));
        assert_eq!(vis.values, vec![1.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
