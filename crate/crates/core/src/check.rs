//! Independent verification tools: finite-difference gradient checks and
//! brute-force oracles. These deliberately avoid the code paths they verify;
//! both the self-check command and the test suite run them.

use crate::detector::Detection;
use crate::interval::Interval;
use crate::tensor::Tensor;

/// Worst deviation between analytic and central finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_leaf: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

/// Compare analytic gradients of `scalar_of(leaves)` against central finite
/// differences with step `eps`, for every element of every leaf.
/// `scalar_of` must be a pure function of the leaf values.
pub fn check_gradients(
    scalar_of: &dyn Fn(&[Tensor]) -> Tensor,
    leaves: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
) -> GradCheck {
    let tensors: Vec<Tensor> = leaves
        .iter()
        .map(|(shape, data)| Tensor::leaf(shape.clone(), data.clone()))
        .collect();
    let loss = scalar_of(&tensors);
    assert_eq!(loss.len(), 1, "gradient check needs a scalar");
    loss.backward().expect("backward on scalar");
    let analytic: Vec<Vec<f64>> = tensors
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |values: &[Vec<f64>]| -> f64 {
        let ts: Vec<Tensor> = leaves
            .iter()
            .zip(values)
            .map(|((shape, _), v)| Tensor::from_vec(shape.clone(), v.clone()))
            .collect();
        scalar_of(&ts).item()
    };

    let mut values: Vec<Vec<f64>> = leaves.iter().map(|(_, d)| d.clone()).collect();
    let mut check = GradCheck {
        max_rel_err: 0.0,
        worst_leaf: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for li in 0..leaves.len() {
        for j in 0..values[li].len() {
            let orig = values[li][j];
            values[li][j] = orig + eps;
            let plus = eval(&values);
            values[li][j] = orig - eps;
            let minus = eval(&values);
            values[li][j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[li][j];
            let e = rel_err(a, numeric);
            if e > check.max_rel_err {
                check = GradCheck {
                    max_rel_err: e,
                    worst_leaf: li,
                    worst_index: j,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    check
}

/// Gradient-check an op of arbitrary output shape: random leaves in [-1, 1],
/// loss = projection of the output onto a fixed random direction. Returns the
/// worst relative error across all leaf elements.
pub fn projected_gradcheck(
    shapes: &[Vec<usize>],
    op: impl Fn(&[Tensor]) -> Tensor + 'static,
    seed: u64,
) -> GradCheck {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let leaves: Vec<(Vec<usize>, Vec<f64>)> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            (s.clone(), data)
        })
        .collect();
    let constants: Vec<Tensor> = leaves
        .iter()
        .map(|(s, d)| Tensor::from_vec(s.clone(), d.clone()))
        .collect();
    let out_len = op(&constants).len();
    let projection: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let build = move |ts: &[Tensor]| {
        let out = op(ts);
        let n = out.len();
        let proj = Tensor::from_vec(vec![n], projection.clone());
        out.reshape(vec![n]).unwrap().mul(&proj).unwrap().sum_all()
    };
    check_gradients(&build, &leaves, 1e-3)
}

/// Verify an NMS result exhaustively: kept detections are a score-ordered
/// subsequence, no kept pair overlaps at or above the threshold, and every
/// dropped detection conflicts with some kept one.
pub fn verify_nms(
    input: &[Detection],
    kept: &[Detection],
    threshold: f64,
) -> Result<(), String> {
    for pair in kept.windows(2) {
        if pair[0].score < pair[1].score {
            return Err(format!(
                "kept scores not descending: {} before {}",
                pair[0].score, pair[1].score
            ));
        }
    }
    for (i, a) in kept.iter().enumerate() {
        for b in kept.iter().skip(i + 1) {
            let iou = a.interval.iou(&b.interval);
            if iou >= threshold {
                return Err(format!(
                    "kept pair {:?} and {:?} overlap with IoU {}",
                    a.interval, b.interval, iou
                ));
            }
        }
    }
    for d in input {
        let is_kept = kept.iter().any(|k| {
            k.class_id == d.class_id
                && k.score == d.score
                && k.interval.start() == d.interval.start()
                && k.interval.end() == d.interval.end()
        });
        if is_kept {
            continue;
        }
        let conflicts = kept
            .iter()
            .any(|k| k.score >= d.score && k.interval.iou(&d.interval) >= threshold);
        if !conflicts {
            return Err(format!(
                "dropped detection {:?} (score {}) conflicts with no kept detection",
                d.interval, d.score
            ));
        }
    }
    Ok(())
}

/// Straight-line re-implementation of the detection matching protocol for
/// small instances: walk detections in score order, re-scanning the full
/// ground-truth list each time, and integrate the PR curve directly.
pub fn naive_average_precision(
    detections: &[(String, Interval, f64)],
    ground_truths: &[(String, Interval)],
    iou_threshold: f64,
) -> f64 {
    if ground_truths.is_empty() {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let da = &detections[a];
        let db = &detections[b];
        db.2.partial_cmp(&da.2)
            .unwrap()
            .then_with(|| da.0.cmp(&db.0))
            .then_with(|| da.1.start().partial_cmp(&db.1.start()).unwrap())
    });
    let mut consumed = vec![false; ground_truths.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    for &di in &order {
        let (video, interval, _) = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gv, gint)) in ground_truths.iter().enumerate() {
            if consumed[gi] || gv != video {
                continue;
            }
            let iou = interval.iou(gint);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                consumed[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    let total_gt = ground_truths.len() as f64;
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for flag in tp_flags {
        if flag {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        precisions.push(tp / (tp + fp));
        recalls.push(tp / total_gt);
    }
    // envelope from the right, then sum precision over recall increments
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..precisions.len() {
        let max_prec_from_here = precisions[i..]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        ap += (recalls[i] - prev_recall) * max_prec_from_here;
        prev_recall = recalls[i];
    }
    ap
}

/// Argmax-IoU anchor matching oracle: per-anchor best ground truth plus the
/// forced best anchor per ground truth, written as plain nested scans.
pub fn naive_match_labels(
    anchors: &[Interval],
    ground_truths: &[(Interval, usize)],
    positive_threshold: f64,
) -> Vec<usize> {
    let mut labels = vec![0usize; anchors.len()];
    if ground_truths.is_empty() {
        return labels;
    }
    let mut best_gt = vec![usize::MAX; anchors.len()];
    let mut best_iou = vec![0.0f64; anchors.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        for (gi, (gint, _)) in ground_truths.iter().enumerate() {
            let iou = anchor.iou(gint);
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = gi;
            }
        }
    }
    let mut claimed_iou = vec![0.0f64; anchors.len()];
    for ai in 0..anchors.len() {
        if best_gt[ai] != usize::MAX && best_iou[ai] >= positive_threshold {
            labels[ai] = ground_truths[best_gt[ai]].1;
            claimed_iou[ai] = best_iou[ai];
        }
    }
    // force the single best anchor per ground truth (earliest index on
    // ties) unless a stronger claim already holds the anchor
    for (gint, class) in ground_truths.iter() {
        let mut winner = None;
        let mut winner_iou = 0.0;
        for (ai, anchor) in anchors.iter().enumerate() {
            let iou = anchor.iou(gint);
            if iou > winner_iou {
                winner_iou = iou;
                winner = Some(ai);
            }
        }
        if let Some(ai) = winner {
            if winner_iou > claimed_iou[ai] || (labels[ai] == 0 && winner_iou > 0.0) {
                labels[ai] = *class;
                claimed_iou[ai] = winner_iou;
            }
        }
    }
    labels
}
