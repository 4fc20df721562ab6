// Scratch harness for sizing the acceptance experiments. Not part of the
// deliverable surface; run with `cargo run --release -p mltpn --example calibrate -- <mode>`.

use std::time::Instant;

use mltpn::anchors::generate_anchors;
use mltpn::data::{generate_synthetic, window, SyntheticSpec, Window, DEFAULT_KEEP_FRACTION};
use mltpn::detector::{decode_predictions, nms_per_video_class, Detection};
use mltpn::interval::Interval;
use mltpn::metrics::{map_suite, GroundTruth};
use mltpn::model::{Model, ModelConfig};
use mltpn::tensor::InterpMode;
use mltpn::trainer::{evaluate_loss, fit, train_epoch, Optimizer, OptimizerKind, TrainConfig, scheduled_lr};

fn windows_of(
    spec: &SyntheticSpec,
    length: usize,
    stride: usize,
) -> (Vec<Window>, Vec<GroundTruth>) {
    let (seqs, anns) = generate_synthetic(spec).unwrap();
    let mut windows = Vec::new();
    let mut gts = Vec::new();
    for (s, a) in seqs.iter().zip(&anns) {
        windows.extend(window(s, a, length, stride, DEFAULT_KEEP_FRACTION));
        for (iv, c) in &a.instances {
            gts.push(GroundTruth {
                video_id: a.video_id.clone(),
                interval: *iv,
                class_id: *c,
            });
        }
    }
    (windows, gts)
}

fn detect_all(model: &Model, windows: &[Window], score_floor: f64) -> Vec<Detection> {
    let anchors = generate_anchors(&model.anchor_layout());
    let mut all = Vec::new();
    for w in windows {
        let out = model.forward(&w.features, w.rows, w.dim).unwrap();
        let values = out.values(model.config.num_classes);
        let dets = decode_predictions(
            &values,
            &anchors,
            &w.video_id,
            model.config.base_length as f64,
            score_floor,
        )
        .unwrap();
        let off = w.offset as f64;
        all.extend(dets.into_iter().map(|d| Detection {
            interval: Interval::new(d.interval.start() + off, d.interval.end() + off).unwrap(),
            ..d
        }));
    }
    nms_per_video_class(&all, 0.2)
}

fn map_at_05(model: &Model, windows: &[Window], gts: &[GroundTruth]) -> f64 {
    let dets = detect_all(model, windows, 0.001);
    let report = map_suite(&dets, gts, &[0.5]);
    report.map[0]
}

fn timing() {
    let config = ModelConfig::default();
    let model = Model::new(config.clone(), 1).unwrap();
    let features = vec![0.1f32; 128 * 16];
    let t0 = Instant::now();
    let out = model.forward(&features, 128, 16).unwrap();
    println!("forward: {:?}", t0.elapsed());
    let t1 = Instant::now();
    let loss = out.cls_logits.mean_all();
    loss.backward().unwrap();
    println!("forward+backward total: {:?}", t0.elapsed());
    let _ = t1;
}

fn overfit(epochs: usize) {
    let spec = SyntheticSpec {
        num_videos: 8,
        rows: 64,
        dim: 8,
        num_classes: 3,
        duration_range: (6.0, 24.0),
        instances_per_video: (1, 2),
        noise_sigma: 0.1,
        seed: 1234,
    };
    let config = ModelConfig {
        feature_dim: 8,
        base_length: 64,
        k1: 16,
        k2: 16,
        num_thm: 2,
        pyramid_levels: 2,
        thm_channels: 32,
        head_anchors: 3,
        num_classes: 3,
        interp_mode: InterpMode::Nearest,
        anchor_ratios: vec![0.75, 1.5, 3.0],
    };
    let (windows, gts) = windows_of(&spec, config.base_length, config.base_length / 2);
    println!("{} windows, {} gts", windows.len(), gts.len());
    let model = Model::new(config, 42).unwrap();
    let anchors = generate_anchors(&model.anchor_layout());
    let tc = TrainConfig {
        optimizer: OptimizerKind::Adam,
        lr: 0.001,
        weight_decay: 0.0,
        batch_size: 8,
        seed: 7,
        ..TrainConfig::sgd_defaults()
    };
    let mut opt = Optimizer::new(&tc);
    let t0 = Instant::now();
    let mut first_total = 0.0;
    for epoch in 1..=epochs {
        let stats = train_epoch(&model, &windows, &anchors, &tc, &mut opt, epoch).unwrap();
        if epoch == 1 {
            first_total = stats.total;
        }
        if epoch % 20 == 0 || epoch == 1 {
            let map = map_at_05(&model, &windows, &gts);
            println!(
                "epoch {:3}  loss {:.4} (cls {:.4} conf {:.4} reg {:.4})  drop {:.1}%  mAP@0.5 {:.3}  elapsed {:?}",
                epoch,
                stats.total,
                stats.cls,
                stats.conf,
                stats.reg,
                100.0 * (1.0 - stats.total / first_total),
                map,
                t0.elapsed()
            );
        }
    }
}

fn generalize(max_epochs: usize) {
    let spec = SyntheticSpec {
        num_videos: 50,
        rows: 128,
        dim: 16,
        num_classes: 3,
        duration_range: (16.0, 40.0),
        instances_per_video: (2, 3),
        noise_sigma: 0.03,
        seed: 2024,
    };
    let config = ModelConfig::default();
    let (seqs, anns) = generate_synthetic(&spec).unwrap();
    let mut train_w = Vec::new();
    let mut val_w = Vec::new();
    let mut val_gts = Vec::new();
    for (i, (s, a)) in seqs.iter().zip(&anns).enumerate() {
        let ws = window(s, a, 128, 64, DEFAULT_KEEP_FRACTION);
        if i < 40 {
            train_w.extend(ws);
        } else {
            val_w.extend(ws);
            for (iv, c) in &a.instances {
                val_gts.push(GroundTruth {
                    video_id: a.video_id.clone(),
                    interval: *iv,
                    class_id: *c,
                });
            }
        }
    }
    println!("train {} windows, val {} windows, {} val gts", train_w.len(), val_w.len(), val_gts.len());
    let model = Model::new(config, 42).unwrap();
    let anchors = generate_anchors(&model.anchor_layout());
    let optimizer = std::env::args().nth(3).unwrap_or_else(|| "sgd".into());
    let mut tc = match optimizer.as_str() {
        "adam" => TrainConfig::adam_defaults(),
        _ => TrainConfig::sgd_defaults(),
    };
    if let Some(lr) = std::env::args().nth(4).and_then(|s| s.parse().ok()) {
        tc.lr = lr;
    }
    if tc.optimizer == OptimizerKind::Adam {
        tc.weight_decay = 0.0;
        tc.lr_decay_epoch = 24;
    }
    tc.max_epochs = max_epochs;
    tc.seed = 7;
    let mut opt = Optimizer::new(&tc);
    let t0 = Instant::now();
    for epoch in 1..=tc.max_epochs {
        opt.set_lr(scheduled_lr(&tc, epoch));
        let stats = train_epoch(&model, &train_w, &anchors, &tc, &mut opt, epoch).unwrap();
        let val = evaluate_loss(&model, &val_w, &anchors, &tc).unwrap();
        let map = map_at_05(&model, &val_w, &val_gts);
        println!(
            "epoch {:2}  train {:.4}  val {:.4}  val mAP@0.5 {:.3}  elapsed {:?}",
            epoch, stats.total, val.total, map, t0.elapsed()
        );
    }
    let _ = fit;
}

fn diagnose(max_epochs: usize) {
    let spec = SyntheticSpec {
        num_videos: 50,
        rows: 128,
        dim: 16,
        num_classes: 3,
        duration_range: (16.0, 40.0),
        instances_per_video: (2, 3),
        noise_sigma: 0.03,
        seed: 2024,
    };
    let config = ModelConfig::default();
    let (seqs, anns) = generate_synthetic(&spec).unwrap();
    let mut train_w = Vec::new();
    let mut val_w = Vec::new();
    let mut val_anns = Vec::new();
    for (i, (s, a)) in seqs.iter().zip(&anns).enumerate() {
        let ws = window(s, a, 128, 64, DEFAULT_KEEP_FRACTION);
        if i < 40 {
            train_w.extend(ws);
        } else {
            val_w.extend(ws);
            val_anns.push(a.clone());
        }
    }
    let model = Model::new(config, 42).unwrap();
    let anchors = generate_anchors(&model.anchor_layout());
    let mut tc = TrainConfig {
        optimizer: OptimizerKind::Adam,
        lr: 0.001,
        weight_decay: 0.0,
        lr_decay_epoch: 24,
        seed: 7,
        ..TrainConfig::sgd_defaults()
    };
    tc.max_epochs = max_epochs;
    let mut opt = Optimizer::new(&tc);
    for epoch in 1..=tc.max_epochs {
        opt.set_lr(scheduled_lr(&tc, epoch));
        train_epoch(&model, &train_w, &anchors, &tc, &mut opt, epoch).unwrap();
    }
    // raw (pre-NMS) and kept detections per val video
    let dets = detect_all(&model, &val_w, 0.001);
    for ann in &val_anns {
        println!("video {}", ann.video_id);
        for (iv, class) in &ann.instances {
            // best kept detection by IoU, and best of the right class
            let mut best_any = (0.0f64, 0usize, 0.0f64);
            let mut best_cls = (0.0f64, 0.0f64);
            let mut rank_cls: i64 = -1;
            let mut by_score: Vec<&Detection> =
                dets.iter().filter(|d| d.video_id == ann.video_id).collect();
            by_score.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            for (rank, d) in by_score.iter().enumerate() {
                let overlap = d.interval.iou(iv);
                if overlap > best_any.0 {
                    best_any = (overlap, d.class_id, d.score);
                }
                if d.class_id == *class && overlap > best_cls.0 {
                    best_cls = (overlap, d.score);
                    rank_cls = rank as i64;
                }
            }
            println!(
                "  gt [{:6.2},{:6.2}) c{}  best_iou {:.3} (c{} s {:.4})  best_same_class_iou {:.3} (s {:.4}, rank {})",
                iv.start(), iv.end(), class,
                best_any.0, best_any.1, best_any.2,
                best_cls.0, best_cls.1, rank_cls
            );
        }
        let kept: Vec<String> = dets
            .iter()
            .filter(|d| d.video_id == ann.video_id)
            .take(6)
            .map(|d| {
                format!(
                    "[{:6.2},{:6.2}) c{} s{:.4}",
                    d.interval.start(),
                    d.interval.end(),
                    d.class_id,
                    d.score
                )
            })
            .collect();
        println!("  top kept: {}", kept.join(" | "));
    }
    let gts: Vec<GroundTruth> = val_anns
        .iter()
        .flat_map(|a| {
            a.instances.iter().map(|(iv, c)| GroundTruth {
                video_id: a.video_id.clone(),
                interval: *iv,
                class_id: *c,
            })
        })
        .collect();
    for thr in [0.3, 0.5, 0.7] {
        let report = map_suite(&dets, &gts, &[thr]);
        println!("mAP@{:.1} = {:.3}  per-class {:?}", thr, report.map[0], report.ap[0]);
    }
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "timing".into());
    match mode.as_str() {
        "timing" => timing(),
        "overfit" => overfit(
            std::env::args()
                .nth(2)
                .and_then(|s| s.parse().ok())
                .unwrap_or(100),
        ),
        "generalize" => generalize(
            std::env::args()
                .nth(2)
                .and_then(|s| s.parse().ok())
                .unwrap_or(10),
        ),
        "diagnose" => diagnose(
            std::env::args()
                .nth(2)
                .and_then(|s| s.parse().ok())
                .unwrap_or(24),
        ),
        other => eprintln!("unknown mode {other}"),
    }
}
