//! Anchor generation, ground-truth matching, loss sampling and offset
//! decoding.
//!
//! Anchors are laid out level-major, cell-second, ratio-minor; every module
//! that produces or consumes per-anchor data follows this order.

use thiserror::Error;

use crate::interval::{Interval, IntervalError};

/// Width multipliers giving the default of seven anchors per cell.
pub const DEFAULT_RATIOS: [f64; 7] = [0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0];

/// IoU at or above which an anchor counts as positive.
pub const POSITIVE_IOU: f64 = 0.5;

/// Negatives sampled when a window has no positive anchor at all.
pub const FALLBACK_NEGATIVES: usize = 16;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("level length {level} does not divide sequence length {sequence}")]
    UnevenLevel { level: usize, sequence: usize },
    #[error("anchor layout needs at least one ratio")]
    NoRatios,
    #[error(transparent)]
    Interval(#[from] IntervalError),
}

/// Per-level cell counts plus the anchor width multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLayout {
    pub level_lengths: Vec<usize>,
    pub ratios: Vec<f64>,
    pub sequence_length: usize,
}

impl AnchorLayout {
    pub fn new(
        level_lengths: Vec<usize>,
        ratios: Vec<f64>,
        sequence_length: usize,
    ) -> Result<Self, AnchorError> {
        if ratios.is_empty() {
            return Err(AnchorError::NoRatios);
        }
        for &t in &level_lengths {
            if t == 0 || sequence_length % t != 0 {
                return Err(AnchorError::UnevenLevel {
                    level: t,
                    sequence: sequence_length,
                });
            }
        }
        Ok(AnchorLayout {
            level_lengths,
            ratios,
            sequence_length,
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.ratios.len() * self.level_lengths.iter().sum::<usize>()
    }
}

/// A default interval attached to one pyramid cell.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub level: usize,
    pub position: usize,
    pub interval: Interval,
}

/// Cell `i` of a level with `t'` cells has center `(i + 0.5) * T / t'`;
/// widths are `ratio * T / t'`. Intervals may extend beyond `[0, T]` and are
/// kept unclipped for matching.
pub fn generate_anchors(layout: &AnchorLayout) -> Vec<Anchor> {
    let mut anchors = Vec::with_capacity(layout.num_anchors());
    for (level, &cells) in layout.level_lengths.iter().enumerate() {
        let cell_width = layout.sequence_length as f64 / cells as f64;
        for position in 0..cells {
            let center = (position as f64 + 0.5) * cell_width;
            for &ratio in &layout.ratios {
                let half = 0.5 * ratio * cell_width;
                let interval = Interval::new(center - half, center + half)
                    .expect("positive ratio gives positive width");
                anchors.push(Anchor {
                    level,
                    position,
                    interval,
                });
            }
        }
    }
    anchors
}

/// Match outcome for one anchor.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// 0 is background, 1..=C an action class.
    pub label: usize,
    pub matched_gt: Option<Interval>,
    /// IoU against the matched ground truth, or the best IoU over all ground
    /// truths for background anchors.
    pub target_iou: f64,
    pub is_positive: bool,
}

/// Assign each anchor its highest-IoU ground truth (positive at IoU >=
/// `positive_threshold`), then force the single best anchor of every ground
/// truth positive. Ties break toward the earlier index.
pub fn match_anchors(
    anchors: &[Anchor],
    ground_truths: &[(Interval, usize)],
    positive_threshold: f64,
) -> Vec<MatchResult> {
    let mut results: Vec<MatchResult> = anchors
        .iter()
        .map(|_| MatchResult {
            label: 0,
            matched_gt: None,
            target_iou: 0.0,
            is_positive: false,
        })
        .collect();
    if ground_truths.is_empty() {
        return results;
    }
    for (ai, anchor) in anchors.iter().enumerate() {
        let mut best_iou = 0.0;
        let mut best: Option<&(Interval, usize)> = None;
        for gt in ground_truths {
            let iou = anchor.interval.iou(&gt.0);
            if iou > best_iou {
                best_iou = iou;
                best = Some(gt);
            }
        }
        if let Some((gt_interval, class)) = best {
            results[ai].target_iou = best_iou;
            if best_iou >= positive_threshold {
                results[ai].label = *class;
                results[ai].matched_gt = Some(*gt_interval);
                results[ai].is_positive = true;
            }
        }
    }
    // force the best anchor of each ground truth positive; an anchor already
    // claimed at a higher IoU (by threshold or an earlier forced match) is
    // not stolen
    for (gt_interval, class) in ground_truths {
        let mut winner = None;
        let mut winner_iou = 0.0;
        for (ai, anchor) in anchors.iter().enumerate() {
            let iou = anchor.interval.iou(gt_interval);
            if iou > winner_iou {
                winner_iou = iou;
                winner = Some(ai);
            }
        }
        if let Some(ai) = winner {
            if results[ai].is_positive && results[ai].target_iou >= winner_iou {
                continue;
            }
            results[ai].label = *class;
            results[ai].matched_gt = Some(*gt_interval);
            results[ai].target_iou = winner_iou;
            results[ai].is_positive = true;
        }
    }
    results
}

/// Anchor indices selected for each loss term.
#[derive(Debug, Clone, Default)]
pub struct SampledIndices {
    pub cls: Vec<usize>,
    pub conf: Vec<usize>,
    pub reg: Vec<usize>,
}

/// Hard-negative mining: regression uses positives only; classification and
/// confidence use positives plus the highest-loss negatives, at most
/// `negative_ratio` per positive. With no positives at all, the
/// `FALLBACK_NEGATIVES` hardest negatives keep the classifier learning.
pub fn sample_for_loss(
    matches: &[MatchResult],
    background_loss: &[f64],
    negative_ratio: usize,
) -> SampledIndices {
    debug_assert_eq!(matches.len(), background_loss.len());
    let positives: Vec<usize> = matches
        .iter()
        .enumerate()
        .filter(|(_, m)| m.is_positive)
        .map(|(i, _)| i)
        .collect();
    let mut negatives: Vec<usize> = matches
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_positive)
        .map(|(i, _)| i)
        .collect();
    negatives.sort_by(|&a, &b| {
        background_loss[b]
            .partial_cmp(&background_loss[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let keep = if positives.is_empty() {
        FALLBACK_NEGATIVES
    } else {
        negative_ratio * positives.len()
    };
    negatives.truncate(keep);

    let mut cls = positives.clone();
    cls.extend_from_slice(&negatives);
    SampledIndices {
        conf: cls.clone(),
        reg: positives,
        cls,
    }
}

/// Apply (dc, dw) offsets: the center moves by `dc` anchor widths, the width
/// scales by `exp(dw)`. The result is unclipped; inference clips to the
/// sequence afterwards. Width is floored at 1e-3 so degenerate outputs stay
/// valid intervals.
pub fn decode(anchor: &Interval, dc: f64, dw: f64) -> Interval {
    let width = (anchor.length() * dw.exp()).max(1e-3);
    let center = anchor.center() + dc * anchor.length();
    Interval::new(center - 0.5 * width, center + 0.5 * width).expect("floored width is positive")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn iv(s: f64, e: f64) -> Interval {
        Interval::new(s, e).unwrap()
    }

    #[test]
    fn layout_rejects_uneven_levels() {
        assert!(AnchorLayout::new(vec![7], vec![1.0], 64).is_err());
        assert!(AnchorLayout::new(vec![8], vec![], 64).is_err());
        assert!(AnchorLayout::new(vec![8], vec![1.0], 64).is_ok());
    }

    #[test]
    fn generate_hand_values() {
        let layout = AnchorLayout::new(vec![8], vec![1.0], 64).unwrap();
        let anchors = generate_anchors(&layout);
        assert_eq!(anchors[0].interval, iv(0.0, 8.0));

        let layout = AnchorLayout::new(vec![8], vec![0.5], 64).unwrap();
        let anchors = generate_anchors(&layout);
        assert_eq!(anchors[0].interval, iv(2.0, 6.0));
    }

    #[test]
    fn generate_count() {
        let layout =
            AnchorLayout::new(vec![16, 8, 4], DEFAULT_RATIOS.to_vec(), 128).unwrap();
        assert_eq!(generate_anchors(&layout).len(), 196);
        assert_eq!(layout.num_anchors(), 196);
    }

    #[test]
    fn generate_order_is_level_cell_ratio() {
        let layout = AnchorLayout::new(vec![2, 1], vec![1.0, 2.0], 8).unwrap();
        let anchors = generate_anchors(&layout);
        let tags: Vec<(usize, usize)> = anchors.iter().map(|a| (a.level, a.position)).collect();
        assert_eq!(tags, vec![(0, 0), (0, 0), (0, 1), (0, 1), (1, 0), (1, 0)]);
    }

    fn single_anchor(interval: Interval) -> Vec<Anchor> {
        vec![Anchor {
            level: 0,
            position: 0,
            interval,
        }]
    }

    #[test]
    fn match_exact() {
        let anchors = single_anchor(iv(0.0, 10.0));
        let matches = match_anchors(&anchors, &[(iv(0.0, 10.0), 3)], POSITIVE_IOU);
        assert!(matches[0].is_positive);
        assert_eq!(matches[0].label, 3);
        assert_eq!(matches[0].target_iou, 1.0);
    }

    #[test]
    fn match_empty_ground_truth() {
        let anchors = single_anchor(iv(0.0, 10.0));
        let matches = match_anchors(&anchors, &[], POSITIVE_IOU);
        assert!(!matches[0].is_positive);
        assert_eq!(matches[0].label, 0);
        assert_eq!(matches[0].target_iou, 0.0);
    }

    #[test]
    fn match_prefers_higher_iou() {
        let anchors = single_anchor(iv(0.0, 10.0));
        let gts = [(iv(5.0, 15.0), 1), (iv(9.0, 30.0), 2)];
        let matches = match_anchors(&anchors, &gts, POSITIVE_IOU);
        // IoU 1/3 vs 1/21: matched (and forced positive) to class 1
        assert_eq!(matches[0].label, 1);
        assert!((matches[0].target_iou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn every_overlapping_gt_gets_a_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let anchors: Vec<Anchor> = (0..6)
                .map(|i| {
                    let s = rng.random_range(0.0..50.0);
                    Anchor {
                        level: 0,
                        position: i,
                        interval: iv(s, s + rng.random_range(1.0..20.0)),
                    }
                })
                .collect();
            let gts: Vec<(Interval, usize)> = (0..3)
                .map(|k| {
                    let s = rng.random_range(0.0..50.0);
                    (iv(s, s + rng.random_range(1.0..20.0)), k + 1)
                })
                .collect();
            let matches = match_anchors(&anchors, &gts, POSITIVE_IOU);
            for (gt, _) in &gts {
                let overlaps = anchors.iter().any(|a| a.interval.iou(gt) > 0.0);
                if overlaps {
                    // some anchor is positive with exactly this interval,
                    // unless a later ground truth stole the only candidate
                    let captured = matches
                        .iter()
                        .any(|m| m.is_positive && m.matched_gt.map_or(false, |g| g == *gt));
                    let stolen = gts.iter().filter(|(g, _)| g != gt).any(|(other, _)| {
                        // another gt can steal only a shared best anchor
                        anchors
                            .iter()
                            .any(|a| a.interval.iou(gt) > 0.0 && a.interval.iou(other) > 0.0)
                    });
                    assert!(captured || stolen);
                }
            }
        }
    }

    #[test]
    fn sampling_ratios() {
        let mk = |positives: usize, negatives: usize| -> (Vec<MatchResult>, Vec<f64>) {
            let mut matches = Vec::new();
            let mut losses = Vec::new();
            for i in 0..positives + negatives {
                let is_positive = i < positives;
                matches.push(MatchResult {
                    label: if is_positive { 1 } else { 0 },
                    matched_gt: is_positive.then(|| iv(0.0, 1.0)),
                    target_iou: if is_positive { 1.0 } else { 0.0 },
                    is_positive,
                });
                losses.push(i as f64 * 0.01);
            }
            (matches, losses)
        };

        let (m, l) = mk(4, 100);
        let s = sample_for_loss(&m, &l, 3);
        assert_eq!(s.reg.len(), 4);
        assert_eq!(s.cls.len(), 16);
        assert_eq!(s.conf, s.cls);

        let (m, l) = mk(0, 100);
        let s = sample_for_loss(&m, &l, 3);
        assert_eq!(s.reg.len(), 0);
        assert_eq!(s.cls.len(), 16);

        let (m, l) = mk(10, 5);
        let s = sample_for_loss(&m, &l, 3);
        assert_eq!(s.reg.len(), 10);
        assert_eq!(s.cls.len(), 15);
    }

    #[test]
    fn sampling_takes_hardest_negatives() {
        let matches: Vec<MatchResult> = (0..5)
            .map(|_| MatchResult {
                label: 0,
                matched_gt: None,
                target_iou: 0.0,
                is_positive: false,
            })
            .collect();
        let losses = vec![0.1, 0.9, 0.5, 0.9, 0.2];
        let s = sample_for_loss(&matches, &losses, 3);
        // all five fit under the 16-negative fallback; order is by loss
        // descending with index breaking the 0.9 tie
        assert_eq!(s.cls, vec![1, 3, 2, 4, 0]);
    }

    #[test]
    fn decode_identity_and_hand_values() {
        let anchor = iv(0.0, 8.0);
        assert_eq!(decode(&anchor, 0.0, 0.0), anchor);
        assert_eq!(decode(&anchor, 0.5, 0.0), iv(4.0, 12.0));
        let wide = decode(&anchor, 0.0, (2.0f64).ln());
        assert!((wide.start() - (-4.0)).abs() < 1e-12);
        assert!((wide.end() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn decode_monotone_in_dw() {
        let anchor = iv(10.0, 20.0);
        let mut prev = 0.0;
        for k in 0..10 {
            let dw = -2.0 + k as f64 * 0.5;
            let width = decode(&anchor, 0.3, dw).length();
            assert!(width > prev);
            prev = width;
        }
    }

    proptest::proptest! {
        #[test]
        fn decode_identity_and_width_monotonicity(
            start in 0.0f64..50.0, len in 0.5f64..20.0,
            dc in -1.0f64..1.0, dw in -2.0f64..2.0,
        ) {
            let anchor = iv(start, start + len);
            let same = decode(&anchor, 0.0, 0.0);
            proptest::prop_assert!((same.start() - anchor.start()).abs() < 1e-12);
            proptest::prop_assert!((same.end() - anchor.end()).abs() < 1e-12);
            let narrow = decode(&anchor, dc, dw);
            let wide = decode(&anchor, dc, dw + 0.1);
            proptest::prop_assert!(wide.length() > narrow.length());
        }

        #[test]
        fn match_invariant_under_gt_permutation(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let anchors: Vec<Anchor> = (0..5)
                .map(|i| {
                    let s = rng.random_range(0.0..40.0);
                    Anchor { level: 0, position: i, interval: iv(s, s + rng.random_range(1.0..15.0)) }
                })
                .collect();
            let gts: Vec<(Interval, usize)> = (0..3)
                .map(|k| {
                    let s = rng.random_range(0.0..40.0);
                    (iv(s, s + rng.random_range(1.0..15.0)), k + 1)
                })
                .collect();
            // random continuous intervals have distinct IoUs, so the
            // documented tie-break never fires and order cannot matter
            let forward: Vec<usize> = match_anchors(&anchors, &gts, POSITIVE_IOU)
                .iter().map(|m| m.label).collect();
            let mut reversed_gts = gts.clone();
            reversed_gts.reverse();
            let backward: Vec<usize> = match_anchors(&anchors, &reversed_gts, POSITIVE_IOU)
                .iter().map(|m| m.label).collect();
            proptest::prop_assert_eq!(forward, backward);
        }
    }

    #[test]
    fn match_agrees_with_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
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
                    (
                        iv(s, s + rng.random_range(0.5..15.0)),
                        rng.random_range(1..=3),
                    )
                })
                .collect();
            let intervals: Vec<Interval> = anchors.iter().map(|a| a.interval).collect();
            let expected = crate::check::naive_match_labels(&intervals, &gts, POSITIVE_IOU);
            let got: Vec<usize> = match_anchors(&anchors, &gts, POSITIVE_IOU)
                .iter()
                .map(|m| m.label)
                .collect();
            assert_eq!(got, expected);
        }
    }
}
