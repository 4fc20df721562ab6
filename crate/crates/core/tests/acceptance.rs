//! Acceptance suite. Every test prints one `ACCEPTANCE <name>: pass` line
//! with its measured numbers; run with `cargo test --test acceptance --
//! --nocapture` to see them.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mltpn::anchors::{generate_anchors, match_anchors, sample_for_loss, Anchor, POSITIVE_IOU};
use mltpn::check;
use mltpn::data::{generate_synthetic, window, SyntheticSpec, Window, DEFAULT_KEEP_FRACTION};
use mltpn::detector::{decode_predictions, nms, nms_per_video_class, write_detections, Detection};
use mltpn::interval::{
    classification_loss, confidence_loss, giou_loss_terms, joint_loss, Interval, LossWeights,
};
use mltpn::metrics::{average_precision, map_suite, GroundTruth};
use mltpn::model::{Model, ModelConfig};
use mltpn::tensor::{InterpMode, Tensor};
use mltpn::trainer::{fit, train_epoch, Optimizer, OptimizerKind, TrainConfig};

fn iv(s: f64, e: f64) -> Interval {
    Interval::new(s, e).unwrap()
}

// ---------------------------------------------------------------------------
// gradient suite
// ---------------------------------------------------------------------------

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        base_length: 32,
        k1: 16,
        k2: 16,
        num_thm: 2,
        pyramid_levels: 2,
        thm_channels: 32,
        head_anchors: 2,
        num_classes: 3,
        interp_mode: InterpMode::Linear,
        anchor_ratios: vec![1.0, 2.0],
    }
}

/// Joint loss on a frozen sampling of one window, as a pure function of the
/// model parameters; the independent finite-difference oracle perturbs
/// parameter elements one at a time.
struct FrozenLoss {
    model: Model,
    features: Vec<f32>,
    cls_idx: Vec<usize>,
    labels: Vec<usize>,
    conf_targets: Vec<f64>,
    reg_idx: Vec<usize>,
    reg_targets: Vec<Interval>,
    anchor_centers: Vec<f64>,
    anchor_widths: Vec<f64>,
    weights: LossWeights,
}

impl FrozenLoss {
    fn build(seed: u64) -> Self {
        let config = tiny_model_config();
        let model = Model::new(config.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let features: Vec<f32> = (0..config.base_length * config.feature_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let instances = vec![(iv(4.0, 12.0), 1), (iv(18.0, 30.0), 3)];
        let anchors = generate_anchors(&config.anchor_layout());
        let matches = match_anchors(&anchors, &instances, POSITIVE_IOU);
        let out = model
            .forward(&features, config.base_length, config.feature_dim)
            .unwrap();
        let logits = out.cls_logits.value();
        let m = anchors.len();
        let classes = config.num_classes + 1;
        let background_loss: Vec<f64> = (0..m)
            .map(|i| {
                let col: Vec<f64> = (0..classes).map(|c| logits[c * m + i]).collect();
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - col[0]
            })
            .collect();
        let sampled = sample_for_loss(&matches, &background_loss, 3);
        FrozenLoss {
            features,
            cls_idx: sampled.cls.clone(),
            labels: sampled.cls.iter().map(|&i| matches[i].label).collect(),
            conf_targets: sampled.conf.iter().map(|&i| matches[i].target_iou).collect(),
            reg_targets: sampled
                .reg
                .iter()
                .map(|&i| matches[i].matched_gt.unwrap())
                .collect(),
            anchor_centers: sampled
                .reg
                .iter()
                .map(|&i| anchors[i].interval.center())
                .collect(),
            anchor_widths: sampled
                .reg
                .iter()
                .map(|&i| anchors[i].interval.length())
                .collect(),
            reg_idx: sampled.reg,
            weights: LossWeights::default(),
            model,
        }
    }

    fn loss(&self) -> Tensor {
        let config = &self.model.config;
        let out = self
            .model
            .forward(&self.features, config.base_length, config.feature_dim)
            .unwrap();
        let cls = out
            .cls_logits
            .index_select(1, &self.cls_idx)
            .unwrap()
            .cross_entropy_sum(&self.labels)
            .unwrap();
        let conf = out
            .conf
            .index_select(0, &self.cls_idx)
            .unwrap()
            .smooth_l1_sum(&self.conf_targets)
            .unwrap();
        let k = self.reg_idx.len();
        assert!(k > 0, "frozen sample must contain positives");
        let centers = Tensor::from_vec(vec![k], self.anchor_centers.clone());
        let widths = Tensor::from_vec(vec![k], self.anchor_widths.clone());
        let dc = out.loc_dc.index_select(0, &self.reg_idx).unwrap();
        let dw = out.loc_dw.index_select(0, &self.reg_idx).unwrap();
        let center = dc.mul(&widths).unwrap().add(&centers).unwrap();
        let width = dw.exp().mul(&widths).unwrap().clamp_min(1e-3);
        let start = center.sub(&width.scale(0.5)).unwrap();
        let end = center.add(&width.scale(0.5)).unwrap();
        let reg = giou_loss_terms(&start, &end, &self.reg_targets)
            .unwrap()
            .sum_all();
        joint_loss(
            &[cls],
            &[conf],
            &[reg],
            &self.weights,
            self.cls_idx.len(),
            self.cls_idx.len(),
            k,
        )
        .unwrap()
    }
}

#[test]
fn acceptance_gradient_suite() {
    let started = Instant::now();
    const PER_OP_TOL: f64 = 1e-4;

    // every operation of the tensor engine against central differences
    let per_op: Vec<(&str, f64)> = vec![
        ("add", check::projected_gradcheck(&[vec![3, 4], vec![3, 4]], |t| t[0].add(&t[1]).unwrap(), 1).max_rel_err),
        ("sub", check::projected_gradcheck(&[vec![3, 4], vec![3, 4]], |t| t[0].sub(&t[1]).unwrap(), 2).max_rel_err),
        ("mul", check::projected_gradcheck(&[vec![3, 4], vec![3, 4]], |t| t[0].mul(&t[1]).unwrap(), 3).max_rel_err),
        ("div", check::projected_gradcheck(&[vec![7], vec![7]], |t| {
            let denom = t[1].mul(&t[1]).unwrap().clamp_min(0.25);
            t[0].div(&denom).unwrap()
        }, 4).max_rel_err),
        ("max_elem", check::projected_gradcheck(&[vec![9], vec![9]], |t| t[0].max_elem(&t[1]).unwrap(), 5).max_rel_err),
        ("min_elem", check::projected_gradcheck(&[vec![9], vec![9]], |t| t[0].min_elem(&t[1]).unwrap(), 6).max_rel_err),
        ("clamp_min", check::projected_gradcheck(&[vec![9]], |t| t[0].scale(3.0).clamp_min(0.4), 7).max_rel_err),
        ("scale", check::projected_gradcheck(&[vec![9]], |t| t[0].scale(-1.3), 8).max_rel_err),
        ("exp", check::projected_gradcheck(&[vec![9]], |t| t[0].exp(), 9).max_rel_err),
        ("relu", check::projected_gradcheck(&[vec![9]], |t| t[0].scale(2.0).exp().relu(), 10).max_rel_err),
        ("sigmoid", check::projected_gradcheck(&[vec![9]], |t| t[0].sigmoid(), 11).max_rel_err),
        ("softmax0", check::projected_gradcheck(&[vec![4, 5]], |t| t[0].softmax(0).unwrap(), 12).max_rel_err),
        ("softmax1", check::projected_gradcheck(&[vec![4, 5]], |t| t[0].softmax(1).unwrap(), 13).max_rel_err),
        ("scale_channels", check::projected_gradcheck(&[vec![3, 4, 2], vec![3]], |t| t[0].scale_channels(&t[1]).unwrap(), 14).max_rel_err),
        ("reshape", check::projected_gradcheck(&[vec![3, 4]], |t| t[0].reshape(vec![12]).unwrap(), 15).max_rel_err),
        ("permute", check::projected_gradcheck(&[vec![2, 3, 4]], |t| t[0].permute(&[2, 0, 1]).unwrap(), 16).max_rel_err),
        ("concat", check::projected_gradcheck(&[vec![2, 3], vec![2, 3]], |t| Tensor::concat(1, t).unwrap(), 17).max_rel_err),
        ("index_select", check::projected_gradcheck(&[vec![3, 5]], |t| t[0].index_select(1, &[4, 0, 0, 2]).unwrap(), 18).max_rel_err),
        ("sum_axes", check::projected_gradcheck(&[vec![2, 3, 4]], |t| t[0].sum_axes(&[1]).unwrap(), 19).max_rel_err),
        ("mean_axes", check::projected_gradcheck(&[vec![2, 3, 4]], |t| t[0].mean_axes(&[0, 2]).unwrap(), 20).max_rel_err),
        ("conv2d_3x1", check::projected_gradcheck(&[vec![2, 6, 3], vec![3, 2, 3, 1], vec![3]], |t| t[0].conv2d(&t[1], Some(&t[2]), (1, 1), (1, 0)).unwrap(), 21).max_rel_err),
        ("conv2d_strided", check::projected_gradcheck(&[vec![2, 6, 3], vec![3, 2, 3, 1], vec![3]], |t| t[0].conv2d(&t[1], Some(&t[2]), (2, 1), (1, 0)).unwrap(), 22).max_rel_err),
        ("conv2d_1x1", check::projected_gradcheck(&[vec![3, 4, 5], vec![2, 3, 1, 1], vec![2]], |t| t[0].conv2d(&t[1], Some(&t[2]), (1, 1), (0, 0)).unwrap(), 23).max_rel_err),
        ("conv2d_full", check::projected_gradcheck(&[vec![2, 5, 4], vec![3, 2, 3, 3], vec![3]], |t| t[0].conv2d(&t[1], Some(&t[2]), (2, 2), (1, 1)).unwrap(), 24).max_rel_err),
        ("conv1d", check::projected_gradcheck(&[vec![3, 10], vec![2, 3, 3], vec![2]], |t| t[0].conv1d(&t[1], Some(&t[2]), 2, 1).unwrap(), 25).max_rel_err),
        ("upsample_nearest", check::projected_gradcheck(&[vec![2, 4, 3]], |t| t[0].upsample_temporal(2, InterpMode::Nearest).unwrap(), 26).max_rel_err),
        ("upsample_linear", check::projected_gradcheck(&[vec![2, 4, 3]], |t| t[0].upsample_temporal(3, InterpMode::Linear).unwrap(), 27).max_rel_err),
        ("cross_entropy", check::projected_gradcheck(&[vec![4, 6]], |t| t[0].cross_entropy_sum(&[0, 3, 1, 2, 0, 1]).unwrap(), 28).max_rel_err),
        ("smooth_l1", check::projected_gradcheck(&[vec![6]], |t| {
            t[0].scale(0.3).smooth_l1_sum(&[2.0, -2.0, 0.1, 0.4, -0.2, 3.0]).unwrap()
        }, 29).max_rel_err),
        ("giou_terms", check::projected_gradcheck(&[vec![3], vec![3]], |t| {
            let targets = [iv(0.2, 0.8), iv(-0.5, 0.1), iv(0.0, 1.5)];
            let start = t[0].clone();
            let offset = Tensor::from_vec(vec![3], vec![2.0; 3]);
            let end = t[1].clamp_min(0.0).add(&start).unwrap().add(&offset).unwrap();
            giou_loss_terms(&start, &end, &targets).unwrap()
        }, 30).max_rel_err),
        ("classification_loss", check::projected_gradcheck(&[vec![4, 5]], |t| {
            classification_loss(&t[0], &[0, 2, 1, 3, 0]).unwrap()
        }, 31).max_rel_err),
        ("confidence_loss", check::projected_gradcheck(&[vec![5]], |t| {
            confidence_loss(&t[0].sigmoid(), &[0.1, 0.9, 0.5, 0.0, 1.0]).unwrap()
        }, 32).max_rel_err),
    ];
    let mut worst_op = ("", 0.0f64);
    for (name, err) in &per_op {
        assert!(
            *err <= PER_OP_TOL,
            "{} gradient error {} exceeds {}",
            name,
            err,
            PER_OP_TOL
        );
        if *err > worst_op.1 {
            worst_op = (name, *err);
        }
    }

    // full joint loss (weights 1, 10, 0.3) end to end at the tiny config:
    // finite differences on 20 randomly chosen parameter elements
    const END_TO_END_TOL: f64 = 1e-3;
    let frozen = FrozenLoss::build(2024);
    let loss = frozen.loss();
    for p in frozen.model.params() {
        p.tensor.zero_grad();
    }
    loss.backward().unwrap();
    let base_params = frozen.model.params().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_e2e = 0.0f64;
    for _ in 0..20 {
        let pi = rng.random_range(0..base_params.len());
        let param = &base_params[pi];
        let j = rng.random_range(0..param.tensor.len());
        let analytic = param.tensor.grad().map_or(0.0, |g| g[j]);
        // the composed network has relu kinks and real curvature; a smaller
        // step keeps the central-difference truncation error well below the
        // 1e-3 acceptance tolerance while f64 still has ~9 digits of headroom
        let eps = 3e-5;
        let original = param.tensor.data()[j];
        param.tensor.data_mut()[j] = original + eps;
        let plus = frozen.loss().item();
        param.tensor.data_mut()[j] = original - eps;
        let minus = frozen.loss().item();
        param.tensor.data_mut()[j] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
        assert!(
            rel <= END_TO_END_TOL,
            "{}[{}]: analytic {} vs numeric {} (rel {})",
            param.name,
            j,
            analytic,
            numeric,
            rel
        );
        worst_e2e = worst_e2e.max(rel);
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "gradient suite took {:?}, budget 60 s",
        elapsed
    );
    println!(
        "ACCEPTANCE gradient-suite: pass ({} ops, worst {} {:.2e}; end-to-end worst {:.2e}; {:?})",
        per_op.len(),
        worst_op.0,
        worst_op.1,
        worst_e2e,
        elapsed
    );
}

// ---------------------------------------------------------------------------
// GIoU properties
// ---------------------------------------------------------------------------

#[test]
fn acceptance_giou_properties() {
    let hand = [
        (iv(0.0, 10.0), iv(5.0, 15.0), 1.0 / 3.0),
        (iv(0.0, 2.0), iv(8.0, 10.0), -0.6),
    ];
    for (p, g, want) in hand {
        assert!(
            (p.giou(&g) - want).abs() <= 1e-12,
            "giou({:?}, {:?}) = {}, want {}",
            p,
            g,
            p.giou(&g),
            want
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    for _ in 0..10_000 {
        let s1 = rng.random_range(-100.0..100.0);
        let p = iv(s1, s1 + rng.random_range(0.01..50.0));
        let s2 = rng.random_range(-100.0..100.0);
        let g = iv(s2, s2 + rng.random_range(0.01..50.0));
        let iou = p.iou(&g);
        let giou = p.giou(&g);
        assert!(giou <= iou + 1e-12, "giou {} > iou {}", giou, iou);
        assert!(-1.0 < giou && giou <= 1.0 + 1e-12, "giou {} out of range", giou);
        let contiguous = p.intersection_length(&g) > 0.0;
        if contiguous {
            assert!((giou - iou).abs() <= 1e-12, "touching pair: giou != iou");
        }

        let shift = rng.random_range(-40.0..40.0);
        let scale = rng.random_range(0.05..8.0);
        let map = |x: &Interval| iv(scale * x.start() + shift, scale * x.end() + shift);
        assert!(
            (map(&p).giou(&map(&g)) - giou).abs() <= 1e-12,
            "translation/scale changed giou by more than 1e-12"
        );
    }

    // separation monotonicity: disjoint intervals of fixed lengths
    let base = iv(0.0, 4.0);
    let mut prev = 1.0;
    for k in 1..200 {
        let gap = k as f64;
        let other = iv(4.0 + gap, 8.0 + gap);
        let giou = base.giou(&other);
        assert!(giou < prev, "giou not strictly decreasing with separation");
        assert!(giou > -1.0);
        prev = giou;
    }

    println!("ACCEPTANCE giou-properties: pass (10000 random pairs, hand values exact)");
}

// ---------------------------------------------------------------------------
// oracle equivalence
// ---------------------------------------------------------------------------

#[test]
fn acceptance_oracle_equivalence() {
    // NMS vs exhaustive checker, 1000 instances of up to 8 detections
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    for case in 0..1000 {
        let n = rng.random_range(0..=8);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let s = rng.random_range(0.0..40.0);
                Detection {
                    video_id: "v".into(),
                    interval: iv(s, s + rng.random_range(0.5..15.0)),
                    class_id: 1,
                    score: rng.random_range(0.0..1.0),
                }
            })
            .collect();
        let kept = nms(&dets, 0.2);
        check::verify_nms(&dets, &kept, 0.2)
            .unwrap_or_else(|e| panic!("nms case {}: {}", case, e));
    }

    // AP vs brute-force matcher, 500 instances (<=6 detections, <=4 gts)
    let videos = ["a", "b", "c", "d"];
    for case in 0..500 {
        let gts: Vec<GroundTruth> = (0..rng.random_range(1..=4))
            .map(|_| {
                let s = rng.random_range(0.0..30.0);
                GroundTruth {
                    video_id: videos[rng.random_range(0..videos.len())].into(),
                    interval: iv(s, s + rng.random_range(1.0..10.0)),
                    class_id: 1,
                }
            })
            .collect();
        let dets: Vec<Detection> = (0..rng.random_range(0..=6))
            .map(|_| {
                let s = rng.random_range(0.0..30.0);
                Detection {
                    video_id: videos[rng.random_range(0..videos.len())].into(),
                    interval: iv(s, s + rng.random_range(1.0..10.0)),
                    class_id: 1,
                    score: rng.random_range(0.0..1.0),
                }
            })
            .collect();
        let thr = rng.random_range(0.1..0.9);
        let got = average_precision(&dets, &gts, thr).unwrap();
        let expect = check::naive_average_precision(
            &dets
                .iter()
                .map(|d| (d.video_id.clone(), d.interval, d.score))
                .collect::<Vec<_>>(),
            &gts.iter()
                .map(|g| (g.video_id.clone(), g.interval))
                .collect::<Vec<_>>(),
            thr,
        );
        assert!(
            (got - expect).abs() < 1e-12,
            "AP case {}: {} vs oracle {}",
            case,
            got,
            expect
        );
    }

    // anchor matching vs argmax oracle, 1000 instances
    for case in 0..1000 {
        let anchors: Vec<Anchor> = (0..rng.random_range(1..=10))
            .map(|i| {
                let s = rng.random_range(0.0..40.0);
                Anchor {
                    level: 0,
                    position: i,
                    interval: iv(s, s + rng.random_range(0.5..15.0)),
                }
            })
            .collect();
        let gts: Vec<(Interval, usize)> = (0..rng.random_range(0..=3))
            .map(|_| {
                let s = rng.random_range(0.0..40.0);
                (iv(s, s + rng.random_range(0.5..15.0)), rng.random_range(1..=3))
            })
            .collect();
        let intervals: Vec<Interval> = anchors.iter().map(|a| a.interval).collect();
        let expect = check::naive_match_labels(&intervals, &gts, POSITIVE_IOU);
        let got: Vec<usize> = match_anchors(&anchors, &gts, POSITIVE_IOU)
            .iter()
            .map(|m| m.label)
            .collect();
        assert_eq!(got, expect, "matching case {} disagrees with oracle", case);
    }

    println!(
        "ACCEPTANCE oracle-equivalence: pass (1000 NMS, 500 AP, 1000 matching instances, all exact)"
    );
}

// ---------------------------------------------------------------------------
// shape ledger
// ---------------------------------------------------------------------------

#[test]
fn acceptance_shape_ledger() {
    let config = ModelConfig::default();
    assert_eq!(
        (config.base_length, config.feature_dim, config.k1, config.k2),
        (128, 16, 64, 64)
    );
    assert_eq!(
        (config.num_thm, config.pyramid_levels, config.head_anchors, config.num_classes),
        (6, 3, 7, 3)
    );
    let model = Model::new(config.clone(), 7).unwrap();

    let x = Tensor::zeros(vec![16, 128]);
    let base = model.base_convs(&x).unwrap();
    assert_eq!(base.shape(), &[16, 32], "base temporal length");

    let transformed = model.transform(&base).unwrap();
    assert_eq!(transformed.shape(), &[128, 32, 16], "transform output");

    let levels = model.thm_forward(0, &transformed).unwrap();
    let extents: Vec<usize> = levels.iter().map(|l| l.shape()[1]).collect();
    assert_eq!(extents, vec![16, 8, 4], "pyramid levels");

    // the fusion concat sees l * 128 = 768 channels per level
    let reduce = model
        .params()
        .iter()
        .find(|p| p.name == "mfm.reduce.weight")
        .unwrap();
    assert_eq!(reduce.tensor.shape(), &[256, 768, 1, 1], "fusion channels");

    let anchors = generate_anchors(&model.anchor_layout());
    assert_eq!(anchors.len(), 196, "anchor count");

    // full forward + backward fits the single-core budget
    let features = vec![0.25f32; 128 * 16];
    let started = Instant::now();
    let out = model.forward(&features, 128, 16).unwrap();
    assert_eq!(out.cls_logits.shape(), &[4, 196]);
    assert_eq!(out.conf.shape(), &[196]);
    let probe = out.cls_logits.mean_all();
    probe.backward().unwrap();
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 30,
        "default-config forward+backward took {:?}, budget 30 s",
        elapsed
    );

    println!(
        "ACCEPTANCE shape-ledger: pass (transform 128x32x16, levels 16/8/4, concat 768, 196 anchors, fwd+bwd {:?})",
        elapsed
    );
}

// ---------------------------------------------------------------------------
// training experiments
// ---------------------------------------------------------------------------

fn cut_all(
    spec: &SyntheticSpec,
    length: usize,
    stride: usize,
) -> (Vec<Window>, Vec<GroundTruth>) {
    let (seqs, anns) = generate_synthetic(spec).unwrap();
    let mut windows = Vec::new();
    let mut gts = Vec::new();
    for (s, a) in seqs.iter().zip(&anns) {
        windows.extend(window(s, a, length, stride, DEFAULT_KEEP_FRACTION));
        for (interval, class) in &a.instances {
            gts.push(GroundTruth {
                video_id: a.video_id.clone(),
                interval: *interval,
                class_id: *class,
            });
        }
    }
    (windows, gts)
}

fn detect_windows(model: &Model, windows: &[Window], score_floor: f64) -> Vec<Detection> {
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
        let offset = w.offset as f64;
        all.extend(dets.into_iter().map(|d| Detection {
            interval: iv(d.interval.start() + offset, d.interval.end() + offset),
            ..d
        }));
    }
    nms_per_video_class(&all, 0.2)
}

fn overfit_model_config() -> ModelConfig {
    ModelConfig {
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
    }
}

#[test]
fn acceptance_overfit_check() {
    let started = Instant::now();
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
    let config = overfit_model_config();
    let (windows, gts) = cut_all(&spec, config.base_length, config.base_length / 2);
    let model = Model::new(config, 42).unwrap();
    let anchors = generate_anchors(&model.anchor_layout());
    let train_config = TrainConfig {
        optimizer: OptimizerKind::Adam,
        lr: 0.001,
        weight_decay: 0.0,
        batch_size: 8,
        seed: 7,
        ..TrainConfig::sgd_defaults()
    };
    let mut optimizer = Optimizer::new(&train_config);
    let mut first_epoch_loss = 0.0;
    let mut last_loss = 0.0;
    for epoch in 1..=300 {
        let stats = train_epoch(&model, &windows, &anchors, &train_config, &mut optimizer, epoch)
            .unwrap();
        if epoch == 1 {
            first_epoch_loss = stats.total;
        }
        last_loss = stats.total;
    }
    let drop = 1.0 - last_loss / first_epoch_loss;
    let detections = detect_windows(&model, &windows, 0.01);
    let report = map_suite(&detections, &gts, &[0.5]);
    let train_map = report.map[0];
    let elapsed = started.elapsed();

    assert!(
        drop >= 0.90,
        "loss dropped {:.1}% (epoch 1: {:.4}, epoch 300: {:.4}); need >= 90%",
        100.0 * drop,
        first_epoch_loss,
        last_loss
    );
    assert!(
        train_map >= 0.90,
        "training-set mAP@0.5 = {:.3}; need >= 0.90",
        train_map
    );
    assert!(
        elapsed.as_secs() < 900,
        "overfit run took {:?}, budget 15 min",
        elapsed
    );
    println!(
        "ACCEPTANCE overfit-check: pass (300 epochs, loss {:.4} -> {:.4} = {:.1}% drop, train mAP@0.5 {:.3}, {:?})",
        first_epoch_loss,
        last_loss,
        100.0 * drop,
        train_map,
        elapsed
    );
}

// ---------------------------------------------------------------------------
// determinism
// ---------------------------------------------------------------------------

#[test]
fn acceptance_determinism() {
    let run = |dir: &std::path::Path| {
        let spec = SyntheticSpec {
            num_videos: 6,
            rows: 64,
            dim: 8,
            num_classes: 3,
            duration_range: (6.0, 20.0),
            instances_per_video: (1, 2),
            noise_sigma: 0.05,
            seed: 99,
        };
        let config = overfit_model_config();
        let (windows, gts) = cut_all(&spec, config.base_length, config.base_length / 2);
        let (train_w, val_w) = windows.split_at(4);
        let model = Model::new(config, 5).unwrap();
        let train_config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 0.002,
            weight_decay: 0.0,
            batch_size: 4,
            max_epochs: 3,
            seed: 11,
            ..TrainConfig::sgd_defaults()
        };
        fit(&model, train_w, val_w, &train_config, dir, 0).unwrap();
        let detections = detect_windows(&model, &windows, 0.001);
        write_detections(&dir.join("detections.tsv"), &detections).unwrap();
        let report = map_suite(&detections, &gts, &[0.3, 0.5, 0.7]);
        report
            .write_files(&dir.join("report.txt"), &dir.join("report.kv"))
            .unwrap();
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run(dir_a.path());
    run(dir_b.path());
    for file in ["curves.txt", "best.ckpt", "detections.tsv", "report.txt", "report.kv"] {
        let a = std::fs::read(dir_a.path().join(file)).unwrap();
        let b = std::fs::read(dir_b.path().join(file)).unwrap();
        assert_eq!(a, b, "{} differs between identical runs", file);
    }
    println!(
        "ACCEPTANCE determinism: pass (curves, checkpoint, detections and reports byte-identical)"
    );
}

// ---------------------------------------------------------------------------
// ablation direction check
// ---------------------------------------------------------------------------

#[test]
fn acceptance_ablation_thm_count() {
    let started = Instant::now();
    let spec = SyntheticSpec {
        num_videos: 10,
        rows: 64,
        dim: 8,
        num_classes: 3,
        duration_range: (6.0, 24.0),
        instances_per_video: (1, 2),
        noise_sigma: 0.1,
        seed: 555,
    };
    let mut maps = Vec::new();
    for num_thm in [1usize, 6] {
        let config = ModelConfig {
            num_thm,
            ..overfit_model_config()
        };
        let (windows, gts) = cut_all(&spec, config.base_length, config.base_length / 2);
        let model = Model::new(config, 42).unwrap();
        let anchors = generate_anchors(&model.anchor_layout());
        let train_config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            weight_decay: 0.0,
            batch_size: 8,
            seed: 7,
            ..TrainConfig::sgd_defaults()
        };
        let mut optimizer = Optimizer::new(&train_config);
        for epoch in 1..=120 {
            train_epoch(&model, &windows, &anchors, &train_config, &mut optimizer, epoch).unwrap();
        }
        let detections = detect_windows(&model, &windows, 0.01);
        let report = map_suite(&detections, &gts, &[0.5]);
        maps.push((num_thm, report.map[0]));
    }
    // write the two-row ablation report; no ordering is asserted
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ablation.txt");
    let mut text = String::from("num_thm\tmap@0.50\n");
    for (l, m) in &maps {
        text.push_str(&format!("{}\t{:.6}\n", l, m));
    }
    std::fs::write(&path, &text).unwrap();
    assert!(path.exists());
    assert_eq!(maps.len(), 2);
    println!(
        "ACCEPTANCE ablation-thm-count: pass (l=1 mAP@0.5 {:.3}, l=6 mAP@0.5 {:.3}, {:?})",
        maps[0].1,
        maps[1].1,
        started.elapsed()
    );
}
