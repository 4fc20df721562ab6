//! Fast built-in verification: gradient checks, GIoU properties, and the
//! NMS / AP / anchor-matching oracles at tiny scale. Backs the `selfcheck`
//! command.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::check;
use crate::detector::{nms, Detection};
use crate::interval::Interval;
use crate::metrics::{average_precision, GroundTruth};
use crate::tensor::{load_checkpoint, save_checkpoint, CheckpointError, Parameter, Tensor};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelfCheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

fn record(outcomes: &mut Vec<CheckOutcome>, name: &str, result: Result<String, String>) {
    match result {
        Ok(detail) => outcomes.push(CheckOutcome {
            name: name.to_string(),
            passed: true,
            detail,
        }),
        Err(detail) => outcomes.push(CheckOutcome {
            name: name.to_string(),
            passed: false,
            detail,
        }),
    }
}

fn gradient_checks() -> Result<String, String> {
    const TOL: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    let checks: Vec<(&str, check::GradCheck)> = vec![
        (
            "mul",
            check::projected_gradcheck(&[vec![8], vec![8]], |t| t[0].mul(&t[1]).unwrap(), 101),
        ),
        (
            "softmax",
            check::projected_gradcheck(&[vec![4, 5]], |t| t[0].softmax(0).unwrap(), 102),
        ),
        (
            "sigmoid",
            check::projected_gradcheck(&[vec![9]], |t| t[0].sigmoid(), 103),
        ),
        (
            "conv2d",
            check::projected_gradcheck(
                &[vec![2, 6, 3], vec![3, 2, 3, 1], vec![3]],
                |t| t[0].conv2d(&t[1], Some(&t[2]), (2, 1), (1, 0)).unwrap(),
                104,
            ),
        ),
        (
            "upsample-linear",
            check::projected_gradcheck(
                &[vec![2, 4, 3]],
                |t| t[0].upsample_temporal(2, crate::tensor::InterpMode::Linear).unwrap(),
                105,
            ),
        ),
        (
            "cross-entropy",
            check::projected_gradcheck(
                &[vec![4, 6]],
                |t| t[0].cross_entropy_sum(&[0, 3, 1, 2, 0, 1]).unwrap(),
                106,
            ),
        ),
        (
            "giou",
            check::projected_gradcheck(
                &[vec![3], vec![3]],
                |t| {
                    let targets = [
                        Interval::new(0.2, 0.8).unwrap(),
                        Interval::new(-0.5, 0.1).unwrap(),
                        Interval::new(0.0, 1.5).unwrap(),
                    ];
                    let start = t[0].scale(1.0);
                    let end = t[1].clamp_min(0.0).add(&start).unwrap();
                    let end = end.add(&Tensor::from_vec(vec![3], vec![2.0; 3])).unwrap();
                    crate::interval::giou_loss_terms(&start, &end, &targets).unwrap()
                },
                107,
            ),
        ),
    ];
    for (name, outcome) in checks {
        if outcome.max_rel_err > TOL {
            return Err(format!(
                "{} gradient off by {:.2e} (analytic {:.6e}, numeric {:.6e})",
                name, outcome.max_rel_err, outcome.analytic, outcome.numeric
            ));
        }
        worst = worst.max(outcome.max_rel_err);
    }
    Ok(format!("worst relative error {:.2e}", worst))
}

fn giou_properties() -> Result<String, String> {
    let a = Interval::new(0.0, 10.0).unwrap();
    let b = Interval::new(5.0, 15.0).unwrap();
    if (a.giou(&b) - 1.0 / 3.0).abs() > 1e-12 {
        return Err(format!("giou([0,10],[5,15]) = {}, want 1/3", a.giou(&b)));
    }
    let c = Interval::new(0.0, 2.0).unwrap();
    let d = Interval::new(8.0, 10.0).unwrap();
    if (c.giou(&d) + 0.6).abs() > 1e-12 {
        return Err(format!("giou([0,2],[8,10]) = {}, want -0.6", c.giou(&d)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2000 {
        let s1 = rng.random_range(-50.0..50.0);
        let p = Interval::new(s1, s1 + rng.random_range(0.1..30.0)).unwrap();
        let s2 = rng.random_range(-50.0..50.0);
        let g = Interval::new(s2, s2 + rng.random_range(0.1..30.0)).unwrap();
        let giou = p.giou(&g);
        if giou > p.iou(&g) + 1e-12 {
            return Err(format!("giou {} exceeds iou {}", giou, p.iou(&g)));
        }
        if !(-1.0 < giou && giou <= 1.0 + 1e-12) {
            return Err(format!("giou {} out of (-1, 1]", giou));
        }
        let shift = rng.random_range(-20.0..20.0);
        let scale = rng.random_range(0.1..5.0);
        let map = |iv: &Interval| {
            Interval::new(scale * iv.start() + shift, scale * iv.end() + shift).unwrap()
        };
        if (map(&p).giou(&map(&g)) - giou).abs() > 1e-12 {
            return Err("giou is not translation/scale invariant".into());
        }
    }
    Ok("2000 random pairs satisfy every property".into())
}

fn nms_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..300 {
        let n = rng.random_range(0..=8);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let s = rng.random_range(0.0..40.0);
                Detection {
                    video_id: "v".into(),
                    interval: Interval::new(s, s + rng.random_range(0.5..15.0)).unwrap(),
                    class_id: 1,
                    score: rng.random_range(0.0..1.0),
                }
            })
            .collect();
        let kept = nms(&dets, 0.2);
        check::verify_nms(&dets, &kept, 0.2).map_err(|e| format!("case {}: {}", case, e))?;
    }
    Ok("300 random instances verified".into())
}

fn ap_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let videos = ["a", "b", "c"];
    for case in 0..200 {
        let gts: Vec<GroundTruth> = (0..rng.random_range(1..=4))
            .map(|_| {
                let s = rng.random_range(0.0..30.0);
                GroundTruth {
                    video_id: videos[rng.random_range(0..3)].into(),
                    interval: Interval::new(s, s + rng.random_range(1.0..10.0)).unwrap(),
                    class_id: 1,
                }
            })
            .collect();
        let dets: Vec<Detection> = (0..rng.random_range(0..=6))
            .map(|_| {
                let s = rng.random_range(0.0..30.0);
                Detection {
                    video_id: videos[rng.random_range(0..3)].into(),
                    interval: Interval::new(s, s + rng.random_range(1.0..10.0)).unwrap(),
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
        if (got - expect).abs() > 1e-12 {
            return Err(format!("case {}: AP {} vs oracle {}", case, got, expect));
        }
    }
    Ok("200 random instances match the oracle".into())
}

fn matching_oracle() -> Result<String, String> {
    use crate::anchors::{match_anchors, Anchor, POSITIVE_IOU};
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for case in 0..300 {
        let anchors: Vec<Anchor> = (0..rng.random_range(1..=10))
            .map(|i| {
                let s = rng.random_range(0.0..40.0);
                Anchor {
                    level: 0,
                    position: i,
                    interval: Interval::new(s, s + rng.random_range(0.5..15.0)).unwrap(),
                }
            })
            .collect();
        let gts: Vec<(Interval, usize)> = (0..rng.random_range(0..=3))
            .map(|_| {
                let s = rng.random_range(0.0..40.0);
                (
                    Interval::new(s, s + rng.random_range(0.5..15.0)).unwrap(),
                    rng.random_range(1..=3),
                )
            })
            .collect();
        let intervals: Vec<Interval> = anchors.iter().map(|a| a.interval).collect();
        let expect = check::naive_match_labels(&intervals, &gts, POSITIVE_IOU);
        let got: Vec<usize> = match_anchors(&anchors, &gts, POSITIVE_IOU)
            .iter()
            .map(|m| m.label)
            .collect();
        if got != expect {
            return Err(format!("case {}: labels {:?} vs oracle {:?}", case, got, expect));
        }
    }
    Ok("300 random instances match the oracle".into())
}

fn checkpoint_diagnostics() -> Result<String, String> {
    let dir = std::env::temp_dir().join(format!("mltpn-selfcheck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("probe.ckpt");
    let params = vec![Parameter::new("probe", vec![3], vec![1.0, 2.0, 3.0])];
    save_checkpoint(&path, &params).map_err(|e| e.to_string())?;
    load_checkpoint(&path).map_err(|e| e.to_string())?;
    let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    let outcome = match load_checkpoint(&path) {
        Err(CheckpointError::BadMagic) => Ok("corrupt magic detected and reported".into()),
        other => Err(format!(
            "corrupt checkpoint not flagged: {:?}",
            other.map(|_| ())
        )),
    };
    let _ = std::fs::remove_dir_all(&dir);
    outcome
}

/// Run every built-in check; each outcome carries a one-line detail.
pub fn run_selfcheck() -> SelfCheckReport {
    let mut outcomes = Vec::new();
    record(&mut outcomes, "gradient-checks", gradient_checks());
    record(&mut outcomes, "giou-properties", giou_properties());
    record(&mut outcomes, "nms-oracle", nms_oracle());
    record(&mut outcomes, "ap-oracle", ap_oracle());
    record(&mut outcomes, "anchor-matching-oracle", matching_oracle());
    record(&mut outcomes, "checkpoint-diagnostics", checkpoint_diagnostics());
    SelfCheckReport { outcomes }
}
