//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reftrack_cli::checkpoint::{checkpoint_container, load_checkpoint, save_checkpoint};
use reftrack_cli::clipio::{read_prediction, write_clip};
use reftrack_cli::commands::{attention_report, cmd_attn, AttnArgs};
use reftrack_cli::container::{DType, Entry, TensorContainer};
use reftrack_core::dit::{forward_tokens, rope_rotate, DitParams, ModelConfig, Segment, TokenSequence};
use reftrack_core::geometry::*;
use reftrack_core::inference::{plan_windows, predict_clip, InferenceOptions};
use reftrack_core::metrics::*;
use reftrack_core::model::Tracker;
use reftrack_core::nn::Parameters;
use reftrack_core::synthscene::{generate_clip, SceneDistribution, TrackClip};
use reftrack_core::tensor::Mat;
use reftrack_core::trainer::{example_loss, example_loss_and_grad, grad_check, train, TrainConfig, TrainingExample};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Scoreboard {
    failures: usize,
}

impl Scoreboard {
    fn run(&mut self, id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > budget => Err(format!("{d}; over the {:.0}s budget", budget.as_secs_f64())),
            o => o,
        };
        let (verdict, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        self.failures += usize::from(outcome.is_err());
        println!("criterion {id:>2} {verdict} [{:.1}s] {name}: {detail}", elapsed.as_secs_f64());
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rope_relative_positions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let part = [8, 4, 4];
    let mut worst: f64 = 0.0;
    let pos = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(-256i64..256));
    for _ in 0..1000 {
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (pi, pj, d) = (pos(&mut rng), pos(&mut rng), pos(&mut rng));
        let shift = |p: [i64; 3]| [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
        let score = |a, b| -> Result<f64, String> {
            let qa = rope_rotate(&q, a, part, 1e4).map_err(|e| e.to_string())?;
            let kb = rope_rotate(&k, b, part, 1e4).map_err(|e| e.to_string())?;
            Ok(dot(&qa, &kb))
        };
        worst = worst.max((score(pi, pj)? - score(shift(pi), shift(pj))?).abs());
    }
    ensure(worst < 1e-9, || format!("max gap {worst:e}"))?;
    Ok(format!("max gap {worst:.2e} over 1000 tuples"))
}

fn inverse_pairs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..9), rng.random_range(1..9));
        let mut cloud = || -> Vec<[f32; 3]> {
            (0..w * h).map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(0.1..30.0)]).collect()
        };
        let (a, b) = (cloud(), cloud());
        let pm = Pointmap::new(w, h, a.clone()).map_err(|e| e.to_string())?;
        let reference = Pointmap::new(w, h, b).map_err(|e| e.to_string())?;
        let depth = DepthMap::new(w, h, a.iter().map(|p| p[2]).collect()).map_err(|e| e.to_string())?;
        let stats = compute_normalization(std::slice::from_ref(&pm), &[depth]).map_err(|e| e.to_string())?;
        let back = denormalize(&normalize(&pm, &stats), &stats);
        let res = residual_from_tracks(&pm, &reference).map_err(|e| e.to_string())?;
        let rec = recover_tracks(&reference, &res).map_err(|e| e.to_string())?;
        let tol = a.iter().chain(&reference.points).flatten().fold(1.0f32, |m, v| m.max(v.abs())) as f64;
        for ((x, y), z) in back.points.iter().zip(&rec.points).zip(&pm.points) {
            for k in 0..3 {
                worst = worst.max((x[k] - z[k]).abs() as f64 / tol).max((y[k] - z[k]).abs() as f64 / tol);
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max scaled error {worst:e}"))?;
    let flat = Pointmap::new(3, 2, vec![[1.5f32, -2.0, 4.0]; 6]).unwrap();
    let stats = compute_normalization(std::slice::from_ref(&flat), &[DepthMap::new(3, 2, vec![4.0f32; 6]).unwrap()]).map_err(|e| e.to_string())?;
    ensure(normalize(&flat, &stats).points.iter().all(|p| *p == [0.0; 3]), || "scale floor case is not all zeros".into())?;
    Ok(format!("max error {worst:.2e} of the largest coordinate over 1000 maps, scale floor gives zeros"))
}

fn sim3_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(4..40);
        let cloud: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-2.0..2.0))).collect();
        let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
        let sim = Sim3Transform {
            scale: rng.random_range(0.1..10.0),
            rotation: axis_angle(axis, rng.random_range(-3.0..3.0)),
            translation: [0; 3].map(|_| rng.random_range(-5.0..5.0)),
        };
        let gt: Vec<[f64; 3]> = cloud.iter().map(|p| sim.apply(*p)).collect();
        let fit = umeyama_sim3(&cloud, &gt, None).map_err(|e| e.to_string())?;
        let sq: f64 = cloud.iter().zip(&gt).map(|(p, g)| {
            let q = fit.apply(*p);
            (0..3).map(|k| (q[k] - g[k]).powi(2)).sum::<f64>()
        }).sum();
        worst = worst.max((sq / n as f64).sqrt());
    }
    ensure(worst < 1e-9, || format!("max RMSE {worst:e}"))?;
    Ok(format!("max RMSE {worst:.2e} over 1000 trials"))
}

fn brute_force(pred: &TrajectorySet, gt: &TrajectorySet, thresholds: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let dist = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let pairs: Vec<usize> = (0..gt.len()).filter(|&i| pred.valid[i] && gt.valid[i]).collect();
    let mut apd = Vec::new();
    let mut aj = Vec::new();
    for &d in thresholds {
        let (mut within, mut visible, mut tp, mut fp, mut fneg) = (0, 0, 0, 0, 0);
        for &i in &pairs {
            let close = dist(pred.positions[i], gt.positions[i]) < d;
            let (pv, gv) = (pred.visible[i], gt.visible[i]);
            visible += usize::from(gv);
            within += usize::from(gv && close);
            tp += usize::from(pv && gv && close);
            fp += usize::from(pv && !(gv && close));
            fneg += usize::from(gv && !(pv && close));
        }
        apd.push(ratio(within, visible));
        aj.push(ratio(tp, tp + fp + fneg));
    }
    let agree = pairs.iter().filter(|&&i| pred.visible[i] == gt.visible[i]).count();
    (apd, aj, ratio(agree, pairs.len()))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..500 {
        let (p, t) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let n = p * t;
        let gt_pos: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
        let pred_pos: Vec<[f64; 3]> = gt_pos.iter().map(|g| g.map(|v| v + rng.random_range(-0.5..0.5))).collect();
        let mut gt = TrajectorySet::new(p, t, gt_pos, (0..n).map(|_| rng.random_bool(0.7)).collect()).map_err(|e| e.to_string())?;
        let mut pred = TrajectorySet::new(p, t, pred_pos, (0..n).map(|_| rng.random_bool(0.7)).collect()).map_err(|e| e.to_string())?;
        for i in 0..n {
            gt.valid[i] = rng.random_bool(0.9);
            pred.valid[i] = rng.random_bool(0.95);
        }
        let (apd, aj, oa) = brute_force(&pred, &gt, &BASE_THRESHOLDS);
        let got_apd = apd3d(&pred, &gt, &BASE_THRESHOLDS, false).map_err(|e| e.to_string())?.1;
        let got_aj = average_jaccard(&pred, &gt, &BASE_THRESHOLDS).map_err(|e| e.to_string())?.1;
        let got_oa = occlusion_accuracy(&pred, &gt).map_err(|e| e.to_string())?;
        ensure(got_apd == apd && got_aj == aj && got_oa == oa, || format!("instance {case} differs from the brute-force count"))?;
    }
    let gt = TrajectorySet::new(8, 1, vec![[0.0; 3]; 8], vec![true; 8]).unwrap();
    let pred = TrajectorySet::new(8, 1, vec![[0.2, 0.0, 0.0]; 8], vec![true; 8]).unwrap();
    let hand = apd3d(&pred, &gt, &BASE_THRESHOLDS, false).map_err(|e| e.to_string())?.0;
    ensure(hand == 0.75, || format!("hand case gives {hand}"))?;
    Ok("500 instances exact, hand case 0.75".into())
}

fn window_sweep() -> Outcome {
    for length in 2..=512 {
        for capacity in 1..=32 {
            let plan = plan_windows(length, capacity).map_err(|e| e.to_string())?;
            let mut seen = vec![0u8; length];
            for g in &plan.groups {
                ensure(!g.is_empty() && g.len() <= capacity, || format!("L={length} F={capacity}: group size {}", g.len()))?;
                g.iter().for_each(|&i| seen[i] += 1);
            }
            ensure(seen[0] == 0 && seen[1..].iter().all(|&c| c == 1), || format!("L={length} F={capacity}: not a partition"))?;
            ensure(plan.stride == (length - 1).div_ceil(capacity), || format!("L={length} F={capacity}: stride {}", plan.stride))?;
        }
    }
    let plan = plan_windows(13, 12).map_err(|e| e.to_string())?;
    ensure(plan.groups == vec![(1..=12).collect::<Vec<_>>()], || format!("L=13 F=12 gives {:?}", plan.groups))?;
    Ok("all 16,352 plans partition frames 1..L-1".into())
}

fn check_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        dim: 16,
        heads: 2,
        latent_channels: 12,
        patch: 2,
        grid_h: 8,
        grid_w: 8,
        frames: 2,
        lora_rank: 2,
        ..ModelConfig::default()
    }
}

fn check_example(model: &Tracker<f64>, seed: u64) -> TrainingExample<f64> {
    let cfg = &model.config;
    let spec = SceneDistribution::new(cfg.image_width(), cfg.image_height(), cfg.frames).sample(seed);
    TrainingExample::from_clip(model, &generate_clip::<f64>(&spec).unwrap(), "check").unwrap()
}

fn gradient_check() -> Outcome {
    let mut model: Tracker<f64> = Tracker::new(&check_config(), 1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    model.visit_mut("", &mut |_, m| m.data.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05)));
    let ex = check_example(&model, 3);
    let report = grad_check(&model, &ex, &TrainConfig::default(), 64, 1e-4, 4).map_err(|e| e.to_string())?;
    let blocks = report.per_block();
    ensure(blocks.iter().all(|(_, n)| *n >= 64), || format!("{blocks:?}"))?;
    ensure(report.max_rel_error < 1e-3, || format!("max relative error {:e}", report.max_rel_error))?;
    Ok(format!("max relative error {:.2e} over {} blocks x 64 entries", report.max_rel_error, blocks.len()))
}

fn lora_neutrality() -> Outcome {
    let cfg = check_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params: DitParams<f64> = DitParams::new(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let n = 2 * cfg.frames * cfg.tokens_per_frame();
    let seq = TokenSequence {
        tokens: Mat::from_fn(n, 2 * cfg.latent_channels, |_, _| rng.random_range(-1.0..1.0)),
        positions: (0..n).map(|i| [(i % 8) as i64, ((i / 8) % 8) as i64, ((i / 64) % 2) as i64]).collect(),
        segments: (0..n).map(|i| if i < n / 2 { Segment::Geometry } else { Segment::Track }).collect(),
    };
    let with = forward_tokens(&cfg, &params, &seq, None).map_err(|e| e.to_string())?.outputs;
    let without = forward_tokens(&cfg, &params.without_lora(), &seq, None).map_err(|e| e.to_string())?.outputs;
    let gap = with.data.iter().zip(&without.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(gap < 1e-12, || format!("output gap {gap:e}"))?;
    let model: Tracker<f64> = Tracker::new(&cfg, 6).map_err(|e| e.to_string())?;
    let ex = check_example(&model, 7);
    let (_, grad) = example_loss_and_grad(&model, &ex, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let mut a_entries = 0;
    for (name, g) in grad.named() {
        if name.ends_with("lora_a") {
            a_entries += g.len();
            ensure(g.data.iter().all(|v| *v == 0.0), || format!("{name} has a nonzero gradient"))?;
        }
    }
    ensure(a_entries > 0, || "no adapters found".into())?;
    Ok(format!("output gap {gap:.1e}, {a_entries} A-gradient entries all zero"))
}

struct Smoke {
    clips: Vec<TrackClip<f32>>,
}

struct Trained {
    model: Tracker<f32>,
    initial_loss: f64,
    final_loss: f64,
    apd: f64,
}

impl Smoke {
    fn new() -> Self {
        let dist = SceneDistribution::new(32, 32, 4);
        Smoke {
            clips: (0..64).map(|i| generate_clip::<f32>(&dist.sample(1000 + i)).unwrap()).collect(),
        }
    }

    fn train(&self, anchoring: bool, alignment: bool, residual: bool) -> Result<Trained, String> {
        let cfg = ModelConfig {
            first_frame_anchoring: anchoring,
            temporal_rope_alignment: alignment,
            residual_head: residual,
            ..ModelConfig::default()
        };
        let mut model: Tracker<f32> = Tracker::new(&cfg, 7).map_err(|e| e.to_string())?;
        let examples: Vec<_> = self
            .clips
            .iter()
            .enumerate()
            .map(|(i, c)| TrainingExample::from_clip(&model, c, format!("clip-{i}")))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let config = TrainConfig {
            steps: 2000,
            ..TrainConfig::default()
        };
        let mean_loss = |m: &Tracker<f32>| -> Result<f64, String> {
            let mut total = 0.0;
            for e in &examples {
                total += example_loss(m, e, &config).map_err(|e| e.to_string())?.total;
            }
            Ok(total / examples.len() as f64)
        };
        let initial_loss = mean_loss(&model)?;
        train(&mut model, &examples, &config, |_| {}).map_err(|e| e.to_string())?;
        let final_loss = mean_loss(&model)?;
        let apd = self.apd(&model)?;
        Ok(Trained { model, initial_loss, final_loss, apd })
    }

    fn apd(&self, model: &Tracker<f32>) -> Result<f64, String> {
        let options = MetricOptions {
            thresholds: vec![0.1],
            ..MetricOptions::default()
        };
        let mut results = Vec::new();
        for clip in &self.clips {
            let pred = predict_clip(model, clip.into(), &InferenceOptions::default()).map_err(|e| e.to_string())?;
            results.push(evaluate(&pred.tracks, &pred.visibility, clip, &options).map_err(|e| e.to_string())?);
        }
        Ok(MetricSummary::from_results(&results).apd)
    }
}

fn trainability(smoke: &Smoke, full: &mut Option<Trained>) -> Outcome {
    let t = smoke.train(true, true, true)?;
    let ratio = t.initial_loss / t.final_loss;
    let detail = format!("loss {:.4} -> {:.5} ({ratio:.1}x), train APD {:.4} at 0.1x scale", t.initial_loss, t.final_loss, t.apd);
    let ok = ratio >= 10.0 && t.apd >= 0.8;
    *full = Some(t);
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

fn ablations(smoke: &Smoke, full: Option<&Trained>) -> Outcome {
    let full = full.ok_or("full model unavailable")?;
    let a = smoke.train(false, true, true)?.apd;
    let b = smoke.train(true, false, true)?.apd;
    let c = smoke.train(true, true, false)?.apd;
    let detail = format!("full {:.4}, (a) no anchoring {a:.4}, (b) no alignment {b:.4}, (c) no residual {c:.4}", full.apd);
    ensure(a < full.apd && b < full.apd && c <= full.apd, || detail.clone())?;
    Ok(detail)
}

/// Track tokens whose reference point is visible at the target frame and
/// moves by more than 2% of the scene scale.
fn moving_queries(clip: &TrackClip<f32>, cfg: &ModelConfig) -> Vec<(usize, usize, usize)> {
    let scale = compute_normalization(&clip.recon_pointmaps, &clip.depths).unwrap().scale as f64;
    let mut out = Vec::new();
    for j in 1..clip.len() {
        for cy in 0..cfg.grid_h {
            for cx in 0..cfg.grid_w {
                let (x, y) = (cx * cfg.patch + cfg.patch / 2, cy * cfg.patch + cfg.patch / 2);
                let (a, b) = (clip.gt_track_pointmaps[0].at(x, y), clip.gt_track_pointmaps[j].at(x, y));
                let moved = (0..3).map(|k| ((a[k] - b[k]) as f64).powi(2)).sum::<f64>().sqrt();
                if moved > 0.02 * scale && clip.gt_visibility[j].at(x, y) > 0.5 {
                    out.push((x, y, j));
                }
            }
        }
    }
    out
}

fn attention_alignment(smoke: &Smoke, full: Option<&Trained>, dir: &Path) -> Outcome {
    let model = &full.ok_or("full model unavailable")?.model;
    let (mut hits, mut total) = (0usize, 0usize);
    for clip in smoke.clips.iter().take(32) {
        for (x, y, j) in moving_queries(clip, &model.config) {
            let (report, _) = attention_report(model, clip, x, y, j).map_err(|e| e.to_string())?;
            hits += usize::from(report.argmax_frame == j);
            total += 1;
        }
    }
    let ckpt = dir.join("smoke.tcr3");
    save_checkpoint(&ckpt, model, None, 2000).map_err(|e| e.to_string())?;
    let clip = &smoke.clips[0];
    let manifest = write_clip(dir, "attn", clip, None).map_err(|e| e.to_string())?;
    let (x, y, j) = moving_queries(clip, &model.config)[0];
    let args = AttnArgs {
        checkpoint: ckpt,
        clip: manifest,
        x,
        y,
        frame: j,
        out: dir.join("attn"),
    };
    let from_cli = cmd_attn(&args).map_err(|e| e.to_string())?;
    ensure(from_cli == attention_report(model, clip, x, y, j).map_err(|e| e.to_string())?.0, || "cmd_attn disagrees with the library".into())?;
    let share = hits as f64 / total.max(1) as f64;
    let detail = format!("aligned frame is the argmax for {hits}/{total} moving track tokens ({:.1}%)", 100.0 * share);
    ensure(total > 0 && share >= 0.7, || detail.clone())?;
    Ok(detail)
}

fn serialization(smoke: &Smoke, full: Option<&Trained>, dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for round in 0..50 {
        let mut c = TensorContainer::new();
        for i in 0..rng.random_range(0..6) {
            let dtype = [DType::F32, DType::F64, DType::U8][rng.random_range(0..3)];
            let dims: Vec<u64> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..5)).collect();
            let bytes = dims.iter().product::<u64>() as usize * dtype.size();
            let payload = (0..bytes).map(|_| rng.random()).collect();
            c.push(Entry { name: format!("entry-{i}"), dtype, dims, payload }).map_err(|e| e.to_string())?;
        }
        let path = dir.join("round.tcr3");
        c.save(&path).map_err(|e| e.to_string())?;
        let back = TensorContainer::load(&path).map_err(|e| e.to_string())?;
        ensure(back == c && back.to_bytes().unwrap() == std::fs::read(&path).unwrap(), || format!("container round {round} differs"))?;
    }
    let model = &full.ok_or("full model unavailable")?.model;
    let ckpt = dir.join("model.tcr3");
    save_checkpoint(&ckpt, model, Some(&TrainConfig::default()), 2000).map_err(|e| e.to_string())?;
    let (loaded, _) = load_checkpoint::<f32>(&ckpt).map_err(|e| e.to_string())?;
    ensure(loaded == *model, || "checkpoint reload differs".into())?;
    let rewritten = checkpoint_container(&loaded, Some(&TrainConfig::default()), 2000).and_then(|c| c.to_bytes()).map_err(|e| e.to_string())?;
    ensure(rewritten == std::fs::read(&ckpt).unwrap(), || "checkpoint bytes differ after a round-trip".into())?;
    let clip = &smoke.clips[5];
    let manifest = write_clip(dir, "infer", clip, None).map_err(|e| e.to_string())?;
    let out = dir.join("pred.tcr3");
    let status = Command::new(env!("CARGO_BIN_EXE_reftrack"))
        .args(["infer", "--checkpoint"])
        .arg(&ckpt)
        .arg("--clip")
        .arg(&manifest)
        .arg("--out")
        .arg(&out)
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("reftrack infer exited with {status}"))?;
    let (tracks, vis) = read_prediction::<f32>(&TensorContainer::load(&out).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let lib = predict_clip(model, clip.into(), &InferenceOptions::default()).map_err(|e| e.to_string())?;
    let same_tracks = tracks.iter().zip(&lib.tracks).all(|(a, b)| a.points.iter().flatten().zip(b.points.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let same_vis = vis.iter().zip(&lib.visibility).all(|(a, b)| a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(tracks.len() == lib.tracks.len() && same_tracks && same_vis, || "CLI prediction differs from the library".into())?;
    Ok("50 containers, trained checkpoint and CLI inference all bit-identical".into())
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut board = Scoreboard { failures: 0 };
    let secs = Duration::from_secs;
    board.run(1, "RoPE relative positions", secs(5), rope_relative_positions);
    board.run(2, "inverse pairs", secs(5), inverse_pairs);
    board.run(3, "Sim(3) recovery", secs(10), sim3_recovery);
    board.run(4, "metric oracle", secs(10), metric_oracle);
    board.run(5, "window plans", secs(5), window_sweep);
    board.run(6, "gradient check", secs(120), gradient_check);
    board.run(7, "LoRA neutrality", secs(10), lora_neutrality);
    let smoke = Smoke::new();
    let mut full = None;
    board.run(8, "trainability", secs(1800), || trainability(&smoke, &mut full));
    board.run(9, "ablation directions", secs(3 * 1800), || ablations(&smoke, full.as_ref()));
    board.run(10, "attention alignment", secs(600), || attention_alignment(&smoke, full.as_ref(), dir.path()));
    board.run(11, "serialization", secs(120), || serialization(&smoke, full.as_ref(), dir.path()));
    println!("acceptance: {} of 11 criteria failed", board.failures);
    if board.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
