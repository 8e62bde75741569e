//! Sim(3)-aligned 3D trajectory metrics: APD, occlusion accuracy and
//! average Jaccard.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Error, Result};
use crate::geometry::{compute_normalization, umeyama_sim3, Pointmap, Sim3Transform, VisibilityMap};
use crate::scalar::Scalar;
use crate::synthscene::{TrackClip, Units};

/// Thresholds for metric scenes, in the scene's length unit.
pub const BASE_THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.5, 1.0];

/// Point trajectories over `frames` frames, stored point-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub points: usize,
    pub frames: usize,
    pub positions: Vec<[f64; 3]>,
    pub visible: Vec<bool>,
    /// Entries with `false` are excluded from every metric.
    pub valid: Vec<bool>,
}

impl TrajectorySet {
    pub fn new(points: usize, frames: usize, positions: Vec<[f64; 3]>, visible: Vec<bool>) -> Result<Self> {
        let n = points * frames;
        if positions.len() != n || visible.len() != n {
            return Err(shape_err(format!(
                "{points} trajectories over {frames} frames need {n} entries, got {} positions and {} flags",
                positions.len(),
                visible.len()
            )));
        }
        Ok(Self {
            points,
            frames,
            positions,
            visible,
            valid: vec![true; n],
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn index(&self, point: usize, frame: usize) -> usize {
        point * self.frames + frame
    }

    /// Samples per-frame pointmaps and visibility maps at the query pixels.
    pub fn from_maps<T: Scalar>(
        tracks: &[Pointmap<T>],
        visibility: &[VisibilityMap<T>],
        queries: &[(usize, usize)],
    ) -> Result<Self> {
        if tracks.len() != visibility.len() {
            return Err(shape_err("track and visibility frame counts differ"));
        }
        let frames = tracks.len();
        let mut positions = Vec::with_capacity(queries.len() * frames);
        let mut visible = Vec::with_capacity(queries.len() * frames);
        for &(x, y) in queries {
            for (t, v) in tracks.iter().zip(visibility) {
                if x >= t.width || y >= t.height || (v.width, v.height) != (t.width, t.height) {
                    return Err(shape_err(format!("query ({x}, {y}) outside a {}x{} map", t.width, t.height)));
                }
                let p = t.at(x, y);
                positions.push([p[0].as_f64(), p[1].as_f64(), p[2].as_f64()]);
                visible.push(v.at(x, y).as_f64() > 0.5);
            }
        }
        let mut set = Self::new(queries.len(), frames, positions, visible)?;
        for (valid, p) in set.valid.iter_mut().zip(&set.positions) {
            *valid = p.iter().all(|v| v.is_finite());
        }
        Ok(set)
    }

    fn check_pair(&self, gt: &Self) -> Result<()> {
        if (self.points, self.frames) != (gt.points, gt.frames) {
            return Err(shape_err(format!(
                "prediction has {}x{} entries, ground truth {}x{}",
                self.points, self.frames, gt.points, gt.frames
            )));
        }
        Ok(())
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Fits the Sim(3) taking the prediction onto the ground truth over the
/// entries that are valid in both and visible in the ground truth, and
/// returns the transformed prediction. Degenerate fits return an error.
pub fn align_pred(pred: &TrajectorySet, gt: &TrajectorySet) -> Result<(TrajectorySet, Sim3Transform)> {
    pred.check_pair(gt)?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..pred.len() {
        if pred.valid[i] && gt.valid[i] && gt.visible[i] {
            a.push(pred.positions[i]);
            b.push(gt.positions[i]);
        }
    }
    let sim = umeyama_sim3(&a, &b, None)?;
    let mut aligned = pred.clone();
    for p in aligned.positions.iter_mut() {
        *p = sim.apply(*p);
    }
    Ok((aligned, sim))
}

/// Fraction of evaluated entries whose error is below each threshold, and
/// the mean over thresholds. Only ground-truth-visible entries count unless
/// `include_occluded` is set.
pub fn apd3d(pred: &TrajectorySet, gt: &TrajectorySet, thresholds: &[f64], include_occluded: bool) -> Result<(f64, Vec<f64>)> {
    pred.check_pair(gt)?;
    if thresholds.is_empty() {
        return Err(input_err("at least one threshold is required"));
    }
    let errors: Vec<f64> = (0..pred.len())
        .filter(|&i| pred.valid[i] && gt.valid[i] && (include_occluded || gt.visible[i]))
        .map(|i| distance(pred.positions[i], gt.positions[i]))
        .collect();
    let per: Vec<f64> = thresholds
        .iter()
        .map(|&d| ratio(errors.iter().filter(|e| **e < d).count(), errors.len()))
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

/// Fraction of valid entries whose predicted visibility flag matches.
pub fn occlusion_accuracy(pred: &TrajectorySet, gt: &TrajectorySet) -> Result<f64> {
    pred.check_pair(gt)?;
    let mut total = 0;
    let mut correct = 0;
    for i in 0..pred.len() {
        if pred.valid[i] && gt.valid[i] {
            total += 1;
            correct += usize::from(pred.visible[i] == gt.visible[i]);
        }
    }
    Ok(ratio(correct, total))
}

/// Jaccard `TP / (TP + FP + FN)` per threshold: a true positive is visible
/// in both and within the threshold; a false positive is predicted visible
/// but occluded or too far; a false negative is visible in the ground truth
/// but predicted occluded or too far.
pub fn average_jaccard(pred: &TrajectorySet, gt: &TrajectorySet, thresholds: &[f64]) -> Result<(f64, Vec<f64>)> {
    pred.check_pair(gt)?;
    if thresholds.is_empty() {
        return Err(input_err("at least one threshold is required"));
    }
    let per: Vec<f64> = thresholds
        .iter()
        .map(|&d| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for i in 0..pred.len() {
                if !(pred.valid[i] && gt.valid[i]) {
                    continue;
                }
                let close = distance(pred.positions[i], gt.positions[i]) < d;
                match (pred.visible[i], gt.visible[i]) {
                    (true, true) if close => tp += 1,
                    (true, true) => {
                        fp += 1;
                        fn_ += 1;
                    }
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            ratio(tp, tp + fp + fn_)
        })
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Thresholds before rescaling by the scene scale.
    pub thresholds: Vec<f64>,
    /// Count ground-truth-occluded entries in APD.
    pub include_occluded: bool,
    pub queries: QuerySpec,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            thresholds: BASE_THRESHOLDS.to_vec(),
            include_occluded: false,
            queries: QuerySpec::All,
        }
    }
}

/// Which frame-0 pixels become query points.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySpec {
    All,
    Grid { step: usize },
    Random { count: usize, seed: u64 },
}

impl QuerySpec {
    pub fn pixels(&self, width: usize, height: usize) -> Result<Vec<(usize, usize)>> {
        let all = || (0..height).flat_map(|y| (0..width).map(move |x| (x, y)));
        match *self {
            QuerySpec::All => Ok(all().collect()),
            QuerySpec::Grid { step } => {
                if step == 0 {
                    return Err(input_err("query grid step must be positive"));
                }
                Ok(all().filter(|(x, y)| x % step == 0 && y % step == 0).collect())
            }
            QuerySpec::Random { count, seed } => {
                let n = width * height;
                if count == 0 || count > n {
                    return Err(input_err(format!("cannot sample {count} queries from {n} pixels")));
                }
                let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, count).into_vec();
                idx.sort_unstable();
                Ok(idx.into_iter().map(|i| (i % width, i / width)).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub apd: f64,
    pub average_jaccard: f64,
    pub occlusion_accuracy: f64,
    /// Absolute thresholds after unit rescaling.
    pub thresholds: Vec<f64>,
    pub apd_per_threshold: Vec<f64>,
    pub jaccard_per_threshold: Vec<f64>,
    pub alignment: Sim3Transform,
    /// `false` when the Sim(3) fit was degenerate and identity was used.
    pub aligned: bool,
    pub evaluated_points: usize,
}

/// Thresholds in scene units: metric scenes keep the base values, others
/// are multiplied by the scene scale.
pub fn scene_thresholds(base: &[f64], units: Units, scale: f64) -> Vec<f64> {
    match units {
        Units::Metric => base.to_vec(),
        Units::SceneScale => base.iter().map(|t| t * scale).collect(),
    }
}

/// Aligns then scores a prediction. A degenerate alignment falls back to
/// the identity and is flagged in the result.
pub fn evaluate_trajectories(pred: &TrajectorySet, gt: &TrajectorySet, thresholds: &[f64], include_occluded: bool) -> Result<EvalResult> {
    let (aligned_pred, alignment, aligned) = match align_pred(pred, gt) {
        Ok((p, s)) => (p, s, true),
        Err(Error::Degenerate(_)) => (pred.clone(), Sim3Transform::identity(), false),
        Err(e) => return Err(e),
    };
    let (apd, apd_per_threshold) = apd3d(&aligned_pred, gt, thresholds, include_occluded)?;
    let (average_jaccard, jaccard_per_threshold) = average_jaccard(&aligned_pred, gt, thresholds)?;
    Ok(EvalResult {
        apd,
        average_jaccard,
        occlusion_accuracy: occlusion_accuracy(&aligned_pred, gt)?,
        thresholds: thresholds.to_vec(),
        apd_per_threshold,
        jaccard_per_threshold,
        alignment,
        aligned,
        evaluated_points: pred.points,
    })
}

/// Scores predicted maps against a clip's ground truth.
pub fn evaluate<T: Scalar>(
    tracks: &[Pointmap<T>],
    visibility: &[VisibilityMap<T>],
    gt: &TrackClip<T>,
    options: &MetricOptions,
) -> Result<EvalResult> {
    if tracks.len() != gt.len() {
        return Err(shape_err(format!("{} predicted frames for a {}-frame clip", tracks.len(), gt.len())));
    }
    let queries = options.queries.pixels(gt.width, gt.height)?;
    let pred = TrajectorySet::from_maps(tracks, visibility, &queries)?;
    let truth = TrajectorySet::from_maps(&gt.gt_track_pointmaps, &gt.gt_visibility, &queries)?;
    let scale = compute_normalization(&gt.recon_pointmaps, &gt.depths)?.scale.as_f64();
    let thresholds = scene_thresholds(&options.thresholds, gt.units, scale);
    evaluate_trajectories(&pred, &truth, &thresholds, options.include_occluded)
}

/// Unweighted mean of per-clip scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub clips: usize,
    pub apd: f64,
    pub average_jaccard: f64,
    pub occlusion_accuracy: f64,
}

impl MetricSummary {
    pub fn from_results(results: &[EvalResult]) -> Self {
        let n = results.len();
        let mean = |f: fn(&EvalResult) -> f64| ratio_f(results.iter().map(f).sum(), n);
        Self {
            clips: n,
            apd: mean(|r| r.apd),
            average_jaccard: mean(|r| r.average_jaccard),
            occlusion_accuracy: mean(|r| r.occlusion_accuracy),
        }
    }
}

fn ratio_f(num: f64, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

/// Which sweep axis a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Stride,
    Length,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub summary: MetricSummary,
}

pub const SWEEP_HEADER: &str = "axis,value,clips,apd,average_jaccard,occlusion_accuracy";

/// CSV table with a header line.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let axis = match r.axis {
            SweepAxis::Stride => "stride",
            SweepAxis::Length => "length",
        };
        out.push_str(&format!(
            "{axis},{},{},{:.6},{:.6},{:.6}\n",
            r.value, r.summary.clips, r.summary.apd, r.summary.average_jaccard, r.summary.occlusion_accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: Vec<[f64; 3]>, visible: Vec<bool>) -> TrajectorySet {
        TrajectorySet::new(points.len(), 1, points, visible).unwrap()
    }

    #[test]
    fn apd_counts_strictly_below_threshold() {
        let gt = set(vec![[0.0; 3]; 4], vec![true; 4]);
        let pred = set(vec![[0.05, 0.0, 0.0], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![true; 4]);
        let (mean, per) = apd3d(&pred, &gt, &[0.1, 0.3], false).unwrap();
        assert_eq!(per, vec![0.25, 0.75]);
        assert_eq!(mean, 0.5);
    }

    #[test]
    fn occluded_ground_truth_is_skipped_by_default() {
        let gt = set(vec![[0.0; 3]; 2], vec![true, false]);
        let pred = set(vec![[0.0; 3], [5.0, 0.0, 0.0]], vec![true, true]);
        assert_eq!(apd3d(&pred, &gt, &[0.1], false).unwrap().0, 1.0);
        assert_eq!(apd3d(&pred, &gt, &[0.1], true).unwrap().0, 0.5);
        assert_eq!(occlusion_accuracy(&pred, &gt).unwrap(), 0.5);
    }

    #[test]
    fn jaccard_classifies_each_case() {
        let gt = set(vec![[0.0; 3]; 4], vec![true, true, false, true]);
        let pred = set(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0; 3], [0.0; 3]], vec![true, true, true, false]);
        let (aj, _) = average_jaccard(&pred, &gt, &[0.5]).unwrap();
        assert!((aj - 1.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn queries_are_deterministic_and_in_range() {
        let q = QuerySpec::Random { count: 10, seed: 4 };
        let a = q.pixels(8, 6).unwrap();
        assert_eq!(a, q.pixels(8, 6).unwrap());
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|&(x, y)| x < 8 && y < 6));
        assert_eq!(QuerySpec::Grid { step: 2 }.pixels(4, 4).unwrap().len(), 4);
        assert!(QuerySpec::Random { count: 50, seed: 0 }.pixels(4, 4).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = vec![SweepRow {
            axis: SweepAxis::Length,
            value: 24,
            summary: MetricSummary::default(),
        }];
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("length,24,0,"));
    }
}
