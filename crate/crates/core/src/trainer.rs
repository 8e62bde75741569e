//! Regression training: residual MSE plus weighted visibility BCE, AdamW,
//! and finite-difference gradient verification.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Error, Result};
use crate::geometry::{compute_normalization, ResidualMap, VisibilityMap};
use crate::model::{backward_pipeline, patch_scalars, patch_targets, run_pipeline, PatchInputs, Tracker};
use crate::nn::{sigmoid, Parameters};
use crate::scalar::Scalar;
use crate::synthscene::TrackClip;
use crate::tensor::Mat;

pub const VISIBILITY_LOSS_WEIGHT: f64 = 0.1;
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Trainable {
    /// Every transformer parameter.
    All,
    /// LoRA adapters plus the input/output projections and time bias; the
    /// base transformer stays frozen.
    #[default]
    AdaptersAndProjections,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub visibility_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub trainable: Trainable,
    pub freeze_codec: bool,
    /// Restrict the residual MSE to ground-truth visible pixels.
    pub masked_mse: bool,
    /// Temporal strides sampled when building training clips.
    pub strides: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 1,
            steps: 2000,
            visibility_weight: VISIBILITY_LOSS_WEIGHT,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            trainable: Trainable::AdaptersAndProjections,
            freeze_codec: false,
            masked_mse: false,
            strides: vec![1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(input_err("learning rate must be finite and non-negative"));
        }
        if !(self.visibility_weight >= 0.0) {
            return Err(input_err("visibility loss weight must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(input_err("batch size must be positive"));
        }
        if self.strides.is_empty() || self.strides.contains(&0) {
            return Err(input_err("strides must be a non-empty list of positive integers"));
        }
        Ok(())
    }

    /// Whether the named parameter is updated by the optimizer.
    pub fn trains(&self, name: &str) -> bool {
        if name.starts_with("codec.") {
            return !self.freeze_codec;
        }
        match self.trainable {
            Trainable::All => true,
            Trainable::AdaptersAndProjections => {
                name.contains(".lora_")
                    || name.starts_with("dit.embed.")
                    || name.starts_with("dit.head.")
                    || name == "dit.time_bias"
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub mse: f64,
    pub bce: f64,
}

fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Residual MSE over all components plus `visibility_weight` times the mean
/// binary cross-entropy of the visibility probabilities.
pub fn loss<T: Scalar>(
    pred_residual: &[ResidualMap<T>],
    gt_residual: &[ResidualMap<T>],
    pred_vis: &[VisibilityMap<T>],
    gt_vis: &[VisibilityMap<T>],
    visibility_weight: f64,
) -> Result<LossRecord> {
    if pred_residual.len() != gt_residual.len() || pred_vis.len() != gt_vis.len() {
        return Err(shape_err("prediction and target frame counts differ"));
    }
    let (mut se, mut n) = (0.0, 0usize);
    for (p, g) in pred_residual.iter().zip(gt_residual) {
        if p.values.len() != g.values.len() {
            return Err(shape_err("residual map sizes differ"));
        }
        for (a, b) in p.values.iter().zip(&g.values) {
            for k in 0..3 {
                se += (a[k] - b[k]).as_f64().powi(2);
            }
            n += 3;
        }
    }
    let (mut ce, mut m) = (0.0, 0usize);
    for (p, g) in pred_vis.iter().zip(gt_vis) {
        if p.values.len() != g.values.len() {
            return Err(shape_err("visibility map sizes differ"));
        }
        for (a, b) in p.values.iter().zip(&g.values) {
            ce += bce_term(a.as_f64(), b.as_f64());
            m += 1;
        }
    }
    let mse = if n == 0 { 0.0 } else { se / n as f64 };
    let bce = if m == 0 { 0.0 } else { ce / m as f64 };
    Ok(LossRecord {
        total: mse + visibility_weight * bce,
        mse,
        bce,
    })
}

/// Loss on flat patch-space buffers together with its gradients with
/// respect to the predictions and the visibility logits.
pub fn loss_with_grad<T: Scalar>(
    pred: &[T],
    target: &[T],
    logits: &[T],
    labels: &[T],
    visibility_weight: f64,
    masked_mse: bool,
) -> (LossRecord, Vec<T>, Vec<T>) {
    assert_eq!(pred.len(), target.len());
    assert_eq!(logits.len(), labels.len());
    assert_eq!(pred.len(), 3 * labels.len());
    let weight = |i: usize| if masked_mse { labels[i / 3].as_f64() } else { 1.0 };
    let count: f64 = (0..pred.len()).map(weight).sum();
    let mut d_pred = vec![T::zero(); pred.len()];
    let mut se = 0.0;
    if count > 0.0 {
        for i in 0..pred.len() {
            let w = weight(i);
            let e = pred[i] - target[i];
            se += w * e.as_f64() * e.as_f64();
            d_pred[i] = T::of(2.0 * w / count) * e;
        }
    }
    let mse = if count > 0.0 { se / count } else { 0.0 };

    let n = logits.len() as f64;
    let mut ce = 0.0;
    let mut d_logits = vec![T::zero(); logits.len()];
    for i in 0..logits.len() {
        let p = sigmoid(logits[i]).as_f64();
        let y = labels[i].as_f64();
        ce += bce_term(p, y);
        if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
            d_logits[i] = T::of(visibility_weight * (p - y) / n);
        }
    }
    let bce = if logits.is_empty() { 0.0 } else { ce / n };
    (
        LossRecord {
            total: mse + visibility_weight * bce,
            mse,
            bce,
        },
        d_pred,
        d_logits,
    )
}

/// A clip prepared for training: model inputs and patch-space targets.
#[derive(Clone, Debug)]
pub struct TrainingExample<T> {
    pub id: String,
    pub inputs: PatchInputs<T>,
    /// Normalized residual tracks, or normalized absolute tracks when the
    /// residual head is disabled.
    pub targets: Mat<T>,
    /// Ground-truth visibility in patch pixel order.
    pub labels: Vec<T>,
}

impl<T: Scalar> TrainingExample<T> {
    pub fn from_clip(model: &Tracker<T>, clip: &TrackClip<T>, id: impl Into<String>) -> Result<Self> {
        let cfg = &model.config;
        let stats = compute_normalization(&clip.recon_pointmaps, &clip.depths)?;
        let inputs = PatchInputs::new(cfg, &clip.frames, &clip.recon_pointmaps, &stats)?;
        let reference = &clip.gt_track_pointmaps[0];
        let tracks: Vec<Vec<[T; 3]>> = clip
            .gt_track_pointmaps
            .iter()
            .map(|tr| {
                tr.points
                    .iter()
                    .zip(&reference.points)
                    .map(|(p, r)| {
                        if cfg.residual_head {
                            [(p[0] - r[0]) / stats.scale, (p[1] - r[1]) / stats.scale, (p[2] - r[2]) / stats.scale]
                        } else {
                            stats.normalize_point(*p)
                        }
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&[[T; 3]]> = tracks.iter().map(|t| t.as_slice()).collect();
        let vis: Vec<&[T]> = clip.gt_visibility.iter().map(|v| v.values.as_slice()).collect();
        Ok(Self {
            id: id.into(),
            inputs,
            targets: patch_targets(cfg, &refs)?,
            labels: patch_scalars(cfg, &vis)?,
        })
    }
}

/// Loss and parameter gradients for one example.
pub fn example_loss_and_grad<T: Scalar>(
    model: &Tracker<T>,
    example: &TrainingExample<T>,
    config: &TrainConfig,
) -> Result<(LossRecord, Tracker<T>)> {
    let out = run_pipeline(model, &example.inputs, None)?;
    let logits = out.outputs.logits();
    let (record, d_pred, d_logits) = loss_with_grad(
        &out.outputs.tracks.data,
        &example.targets.data,
        &logits,
        &example.labels,
        config.visibility_weight,
        config.masked_mse,
    );
    if !record.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {:?} on clip `{}` (inputs finite: {}, targets finite: {})",
            record,
            example.id,
            example.inputs.rgb.all_finite() && example.inputs.pointmaps.all_finite(),
            example.targets.all_finite()
        )));
    }
    let d_tracks = Mat::from_vec(out.outputs.tracks.rows, out.outputs.tracks.cols, d_pred);
    let third = T::of(1.0 / 3.0);
    let d_vis = Mat::from_vec(
        out.outputs.visibility.rows,
        out.outputs.visibility.cols,
        d_logits.iter().flat_map(|d| [*d * third; 3]).collect(),
    );
    let mut grad = model.zeros_like();
    backward_pipeline(model, &example.inputs, &out.cache, &d_tracks, &d_vis, &mut grad);
    Ok((record, grad))
}

/// Loss only, without the backward pass.
pub fn example_loss<T: Scalar>(model: &Tracker<T>, example: &TrainingExample<T>, config: &TrainConfig) -> Result<LossRecord> {
    let out = run_pipeline(model, &example.inputs, None)?;
    Ok(loss_with_grad(
        &out.outputs.tracks.data,
        &example.targets.data,
        &out.outputs.logits(),
        &example.labels,
        config.visibility_weight,
        config.masked_mse,
    )
    .0)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub m: Tracker<T>,
    pub v: Tracker<T>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &Tracker<T>) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Tracker<T>, grad: &Tracker<T>, config: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 / (1.0 - b1.powi(self.t as i32));
        let c2 = 1.0 / (1.0 - b2.powi(self.t as i32));
        let (lr, wd, eps) = (T::of(config.learning_rate), T::of(config.weight_decay), T::of(config.epsilon));
        let (tb1, tb2, tc1, tc2) = (T::of(b1), T::of(b2), T::of(c1), T::of(c2));
        let grads = grad.named();
        let mut ms = self.m.named_mut();
        let mut vs = self.v.named_mut();
        for (i, (name, p)) in model.named_mut().into_iter().enumerate() {
            if !config.trains(&name) {
                continue;
            }
            let g = grads[i].1;
            let (m, v) = (&mut *ms[i].1, &mut *vs[i].1);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = tb1 * m.data[k] + (T::one() - tb1) * gk;
                v.data[k] = tb2 * v.data[k] + (T::one() - tb2) * gk * gk;
                let update = (m.data[k] * tc1) / ((v.data[k] * tc2).sqrt() + eps) + wd * p.data[k];
                p.data[k] -= lr * update;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossRecord,
    pub wall_ms: f64,
}

/// Averages the per-example gradients of `batch` in order and applies one
/// optimizer update.
pub fn train_step<T: Scalar>(
    model: &mut Tracker<T>,
    optimizer: &mut AdamW<T>,
    batch: &[&TrainingExample<T>],
    config: &TrainConfig,
) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(input_err("empty training batch"));
    }
    let inv = T::of(1.0 / batch.len() as f64);
    let mut total: Option<Tracker<T>> = None;
    let mut record = LossRecord::default();
    for ex in batch {
        let (r, g) = example_loss_and_grad(model, ex, config)?;
        record.total += r.total / batch.len() as f64;
        record.mse += r.mse / batch.len() as f64;
        record.bce += r.bce / batch.len() as f64;
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => {
                let gs = g.named();
                for (i, (_, m)) in acc.named_mut().into_iter().enumerate() {
                    m.add_assign(gs[i].1);
                }
            }
        }
    }
    let mut grad = total.expect("non-empty batch");
    grad.visit_mut("", &mut |_, m| m.scale(inv));
    optimizer.step(model, &grad, config);
    Ok(record)
}

/// Trains for `config.steps` steps, drawing each batch uniformly with
/// replacement from `examples`; `on_step` sees every record.
pub fn train<T: Scalar>(
    model: &mut Tracker<T>,
    examples: &[TrainingExample<T>],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if examples.is_empty() {
        return Err(input_err("no training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = AdamW::new(model);
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<&TrainingExample<T>> = (0..config.batch_size)
            .map(|_| &examples[rng.random_range(0..examples.len())])
            .collect();
        let loss = train_step(model, &mut optimizer, &batch, config)?;
        let rec = StepRecord {
            step,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Sampled entry count per parameter block.
    pub fn per_block(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for e in &self.entries {
            let b = parameter_block(&e.name);
            match out.iter_mut().find(|(n, _)| *n == b) {
                Some((_, c)) => *c += 1,
                None => out.push((b, 1)),
            }
        }
        out
    }
}

/// Block a parameter belongs to: a codec head, a transformer layer, or one
/// of the transformer's input/output stages.
pub fn parameter_block(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["dit", "blocks", i, ..] => format!("dit.blocks.{i}"),
        [a, b, ..] => format!("{a}.{b}"),
        _ => name.to_string(),
    }
}

/// Symmetric relative error with a small absolute floor.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Compares analytic gradients against central differences of the total
/// loss for `per_block` random scalars in every parameter block.
pub fn grad_check(
    model: &Tracker<f64>,
    example: &TrainingExample<f64>,
    config: &TrainConfig,
    per_block: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grad) = example_loss_and_grad(model, example, config)?;
    let grads: Vec<(String, Mat<f64>)> = grad.named().into_iter().map(|(n, m)| (n, m.clone())).collect();
    let mut blocks: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    for (ti, (name, m)) in grads.iter().enumerate() {
        let b = parameter_block(name);
        let slot = match blocks.iter().position(|(n, _)| *n == b) {
            Some(i) => i,
            None => {
                blocks.push((b, Vec::new()));
                blocks.len() - 1
            }
        };
        blocks[slot].1.extend((0..m.len()).map(|k| (ti, k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut entries = Vec::new();
    for (_, candidates) in &blocks {
        for _ in 0..per_block {
            let (ti, k) = candidates[rng.random_range(0..candidates.len())];
            let set = |probe: &mut Tracker<f64>, value: f64| {
                let mut ms = probe.named_mut();
                ms[ti].1.data[k] = value;
            };
            let orig = model.named()[ti].1.data[k];
            set(&mut probe, orig + epsilon);
            let up = example_loss(&probe, example, config)?.total;
            set(&mut probe, orig - epsilon);
            let down = example_loss(&probe, example, config)?.total;
            set(&mut probe, orig);
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = grads[ti].1.data[k];
            entries.push(GradCheckEntry {
                name: grads[ti].0.clone(),
                index: k,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, entries })
}
