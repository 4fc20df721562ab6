//! Temporal intervals, IoU/GIoU, and the three training losses, available
//! both as plain functions and as differentiable graph operations.

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum IntervalError {
    #[error("interval must have start < end, got [{start}, {end})")]
    Degenerate { start: f64, end: f64 },
    #[error("loss weights must be nonnegative, got ({0}, {1}, {2})")]
    NegativeWeight(f64, f64, f64),
}

/// Closed-open temporal segment `[start, end)` in snippet units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    start: f64,
    end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self, IntervalError> {
        if !(start < end) {
            return Err(IntervalError::Degenerate { start, end });
        }
        Ok(Interval { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    /// Clip to `[lo, hi]`; `None` when nothing of positive length remains.
    pub fn clip(&self, lo: f64, hi: f64) -> Option<Interval> {
        let s = self.start.max(lo);
        let e = self.end.min(hi);
        if s < e {
            Some(Interval { start: s, end: e })
        } else {
            None
        }
    }

    pub fn intersection_length(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Temporal intersection over union, in [0, 1].
    pub fn iou(&self, other: &Interval) -> f64 {
        let inter = self.intersection_length(other);
        let union = self.length() + other.length() - inter;
        inter / union
    }

    /// Generalized IoU: IoU minus the fraction of the enclosing interval not
    /// covered by the union. In (-1, 1]; equals IoU when the union is
    /// contiguous.
    pub fn giou(&self, other: &Interval) -> f64 {
        let inter = self.intersection_length(other);
        let union = self.length() + other.length() - inter;
        let hull = self.end.max(other.end) - self.start.min(other.start);
        inter / union - (hull - union) / hull
    }

    /// Regression loss 1 - GIoU, in [0, 2); zero iff the intervals coincide.
    pub fn giou_loss(&self, other: &Interval) -> f64 {
        1.0 - self.giou(other)
    }
}

/// Weights of the joint loss; the classification, IoU-confidence and
/// regression terms default to 1, 10 and 0.3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 1.0,
            alpha2: 10.0,
            alpha3: 0.3,
        }
    }
}

impl LossWeights {
    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64) -> Result<Self, IntervalError> {
        if alpha1 < 0.0 || alpha2 < 0.0 || alpha3 < 0.0 {
            return Err(IntervalError::NegativeWeight(alpha1, alpha2, alpha3));
        }
        Ok(LossWeights {
            alpha1,
            alpha2,
            alpha3,
        })
    }
}

/// Mean cross-entropy of `[(C+1), n]` logits against class indices
/// (0 is background).
pub fn classification_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor, TensorError> {
    if labels.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "classification_loss",
            message: "no samples".into(),
        });
    }
    Ok(logits
        .cross_entropy_sum(labels)?
        .scale(1.0 / labels.len() as f64))
}

/// Mean smooth-L1 between predicted IoU values (already sigmoid-squashed)
/// and ground-truth IoU targets.
pub fn confidence_loss(predicted_iou: &Tensor, target_iou: &[f64]) -> Result<Tensor, TensorError> {
    if target_iou.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "confidence_loss",
            message: "no samples".into(),
        });
    }
    Ok(predicted_iou
        .smooth_l1_sum(target_iou)?
        .scale(1.0 / target_iou.len() as f64))
}

/// Elementwise differentiable 1 - GIoU of predicted endpoints against fixed
/// target intervals; returns a `[K]` vector of per-pair losses.
pub fn giou_loss_terms(
    pred_start: &Tensor,
    pred_end: &Tensor,
    targets: &[Interval],
) -> Result<Tensor, TensorError> {
    let k = targets.len();
    if pred_start.len() != k || pred_end.len() != k {
        return Err(TensorError::ShapeMismatch {
            op: "giou_loss_terms",
            left: pred_start.shape().to_vec(),
            right: vec![k],
        });
    }
    let gs = Tensor::from_vec(vec![k], targets.iter().map(|g| g.start()).collect());
    let ge = Tensor::from_vec(vec![k], targets.iter().map(|g| g.end()).collect());
    let g_len = Tensor::from_vec(vec![k], targets.iter().map(|g| g.length()).collect());

    let inter = pred_end
        .min_elem(&ge)?
        .sub(&pred_start.max_elem(&gs)?)?
        .clamp_min(0.0);
    let p_len = pred_end.sub(pred_start)?;
    let union = p_len.add(&g_len)?.sub(&inter)?;
    let hull = pred_end.max_elem(&ge)?.sub(&pred_start.min_elem(&gs)?)?;
    let giou = inter.div(&union)?.sub(&hull.sub(&union)?.div(&hull)?)?;
    let ones = Tensor::from_vec(vec![k], vec![1.0; k]);
    ones.sub(&giou)
}

/// Joint loss of Eq-style weighted terms: each group of scalar terms is
/// summed, normalized by its own sample count, and weighted. A group with
/// zero weight is skipped entirely; a nonzero weight with a zero count is an
/// error the caller must prevent.
pub fn joint_loss(
    cls_terms: &[Tensor],
    conf_terms: &[Tensor],
    reg_terms: &[Tensor],
    weights: &LossWeights,
    n_cls: usize,
    n_conf: usize,
    n_reg: usize,
) -> Result<Tensor, TensorError> {
    let mut total = Tensor::scalar(0.0);
    for (terms, weight, count, what) in [
        (cls_terms, weights.alpha1, n_cls, "classification"),
        (conf_terms, weights.alpha2, n_conf, "confidence"),
        (reg_terms, weights.alpha3, n_reg, "regression"),
    ] {
        if weight == 0.0 {
            continue;
        }
        if count == 0 {
            return Err(TensorError::InvalidArgument {
                op: "joint_loss",
                message: format!("{} term has weight {} but zero samples", what, weight),
            });
        }
        let mut sum = Tensor::scalar(0.0);
        for t in terms {
            sum = sum.add(t)?;
        }
        total = total.add(&sum.scale(weight / count as f64))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: f64, e: f64) -> Interval {
        Interval::new(s, e).unwrap()
    }

    #[test]
    fn iou_identity_partial_disjoint() {
        assert_eq!(iv(0.0, 10.0).iou(&iv(0.0, 10.0)), 1.0);
        assert!((iv(0.0, 10.0).iou(&iv(5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iv(0.0, 2.0).iou(&iv(8.0, 10.0)), 0.0);
    }

    #[test]
    fn giou_matches_hand_values() {
        assert_eq!(iv(0.0, 10.0).giou(&iv(0.0, 10.0)), 1.0);
        assert!((iv(0.0, 10.0).giou(&iv(5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert!((iv(0.0, 2.0).giou(&iv(8.0, 10.0)) - (-0.6)).abs() < 1e-15);
    }

    #[test]
    fn giou_loss_values() {
        assert_eq!(iv(0.0, 10.0).giou_loss(&iv(0.0, 10.0)), 0.0);
        assert!((iv(0.0, 10.0).giou_loss(&iv(5.0, 15.0)) - 2.0 / 3.0).abs() < 1e-15);
        assert!((iv(0.0, 2.0).giou_loss(&iv(8.0, 10.0)) - 1.6).abs() < 1e-15);
    }

    #[test]
    fn interval_rejects_zero_length() {
        assert!(Interval::new(3.0, 3.0).is_err());
        assert!(Interval::new(5.0, 4.0).is_err());
    }

    #[test]
    fn classification_loss_uniform_logits() {
        // 21 equal logits -> -ln(1/21)
        let logits = Tensor::from_vec(vec![21, 1], vec![0.25; 21]);
        let loss = classification_loss(&logits, &[7]).unwrap();
        assert!((loss.item() - (21f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_loss_mean_invariance() {
        let col = vec![0.3, -0.2, 1.4, 0.0];
        let single = Tensor::from_vec(vec![4, 1], col.clone());
        let mut two_cols = vec![0.0; 8];
        for c in 0..4 {
            two_cols[c * 2] = col[c];
            two_cols[c * 2 + 1] = col[c];
        }
        let double = Tensor::from_vec(vec![4, 2], two_cols);
        let a = classification_loss(&single, &[2]).unwrap().item();
        let b = classification_loss(&double, &[2, 2]).unwrap().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn classification_loss_shrinks_with_true_logit() {
        let mut prev = f64::INFINITY;
        for mag in [0.0, 1.0, 4.0, 16.0] {
            let logits = Tensor::from_vec(vec![3, 1], vec![0.0, mag, 0.0]);
            let loss = classification_loss(&logits, &[1]).unwrap().item();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn classification_loss_rejects_bad_label() {
        let logits = Tensor::from_vec(vec![4, 2], vec![0.0; 8]);
        assert!(classification_loss(&logits, &[1, 4]).is_err());
    }

    #[test]
    fn confidence_loss_hand_values() {
        let exact = confidence_loss(&Tensor::from_vec(vec![1], vec![0.5]), &[0.5])
            .unwrap()
            .item();
        assert_eq!(exact, 0.0);
        let near = confidence_loss(&Tensor::from_vec(vec![1], vec![0.3]), &[0.5])
            .unwrap()
            .item();
        assert!((near - 0.02).abs() < 1e-15);
        let boundary = confidence_loss(&Tensor::from_vec(vec![1], vec![0.0]), &[1.0])
            .unwrap()
            .item();
        assert!((boundary - 0.5).abs() < 1e-15);
    }

    #[test]
    fn confidence_loss_length_mismatch() {
        let p = Tensor::from_vec(vec![2], vec![0.5, 0.5]);
        assert!(confidence_loss(&p, &[0.5]).is_err());
    }

    #[test]
    fn joint_loss_weighted_sum() {
        let weights = LossWeights::default();
        let loss = joint_loss(
            &[Tensor::scalar(3.0)],
            &[Tensor::scalar(0.02)],
            &[Tensor::scalar(0.6)],
            &weights,
            1,
            1,
            1,
        )
        .unwrap();
        assert!((loss.item() - 3.38).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_zero_components() {
        let weights = LossWeights::default();
        let loss = joint_loss(
            &[Tensor::scalar(0.0)],
            &[Tensor::scalar(0.0)],
            &[Tensor::scalar(0.0)],
            &weights,
            4,
            4,
            2,
        )
        .unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn joint_loss_degenerate_weights_reduce_to_cls() {
        let weights = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        let loss = joint_loss(
            &[Tensor::scalar(2.0), Tensor::scalar(4.0)],
            &[],
            &[],
            &weights,
            2,
            0,
            0,
        )
        .unwrap();
        assert!((loss.item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_zero_count_errors() {
        let weights = LossWeights::default();
        let err = joint_loss(&[], &[], &[], &weights, 0, 1, 1);
        assert!(err.is_err());
    }

    #[test]
    fn giou_terms_match_plain_function() {
        let preds = [iv(0.0, 10.0), iv(0.0, 2.0), iv(3.0, 9.0)];
        let gts = [iv(5.0, 15.0), iv(8.0, 10.0), iv(3.0, 9.0)];
        let ps = Tensor::from_vec(vec![3], preds.iter().map(|p| p.start()).collect());
        let pe = Tensor::from_vec(vec![3], preds.iter().map(|p| p.end()).collect());
        let terms = giou_loss_terms(&ps, &pe, &gts).unwrap();
        let values = terms.value();
        for i in 0..3 {
            assert!((values[i] - preds[i].giou_loss(&gts[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        // all four endpoints, at a non-degenerate overlapping configuration
        let target = [iv(2.0, 9.0)];
        let check = crate::check::check_gradients(
            &|ts: &[Tensor]| {
                giou_loss_terms(&ts[0], &ts[1], &target).unwrap().sum_all()
            },
            &[(vec![1], vec![1.0]), (vec![1], vec![6.5])],
            1e-4,
        );
        assert!(check.max_rel_err < 1e-4, "{:?}", check);
    }

    proptest::proptest! {
        #[test]
        fn giou_never_exceeds_iou(
            s1 in -50.0f64..50.0, l1 in 0.1f64..30.0,
            s2 in -50.0f64..50.0, l2 in 0.1f64..30.0,
        ) {
            let p = iv(s1, s1 + l1);
            let g = iv(s2, s2 + l2);
            let giou = p.giou(&g);
            proptest::prop_assert!(giou <= p.iou(&g) + 1e-12);
            proptest::prop_assert!(-1.0 < giou && giou <= 1.0 + 1e-12);
            // equality exactly when the union is contiguous
            if p.intersection_length(&g) > 0.0 {
                proptest::prop_assert!((giou - p.iou(&g)).abs() <= 1e-12);
            }
        }

        #[test]
        fn giou_translation_and_scale_invariant(
            s1 in -50.0f64..50.0, l1 in 0.1f64..30.0,
            s2 in -50.0f64..50.0, l2 in 0.1f64..30.0,
            shift in -20.0f64..20.0, scale in 0.1f64..5.0,
        ) {
            let p = iv(s1, s1 + l1);
            let g = iv(s2, s2 + l2);
            let map = |x: &Interval| iv(scale * x.start() + shift, scale * x.end() + shift);
            proptest::prop_assert!((map(&p).giou(&map(&g)) - p.giou(&g)).abs() <= 1e-12);
        }

        #[test]
        fn classification_loss_nonnegative_and_order_free(
            logits in proptest::collection::vec(-5.0f64..5.0, 8),
        ) {
            let t = Tensor::from_vec(vec![4, 2], logits.clone());
            let loss = classification_loss(&t, &[1, 3]).unwrap().item();
            proptest::prop_assert!(loss >= 0.0);
            // swapping the two anchor columns leaves the mean unchanged
            let mut swapped = vec![0.0; 8];
            for c in 0..4 {
                swapped[c * 2] = logits[c * 2 + 1];
                swapped[c * 2 + 1] = logits[c * 2];
            }
            let s = Tensor::from_vec(vec![4, 2], swapped);
            let loss_swapped = classification_loss(&s, &[3, 1]).unwrap().item();
            proptest::prop_assert!((loss - loss_swapped).abs() < 1e-12);
        }
    }
}
