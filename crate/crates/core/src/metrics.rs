//! Detection evaluation: IoU-thresholded greedy matching, per-class average
//! precision with all-point interpolation, and mAP over threshold sets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::detector::Detection;
use crate::interval::Interval;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("threshold range {0:?} is not start:stop:step with start <= stop and step > 0")]
    BadThresholdRange(String),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
}

/// One labelled ground-truth instance.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub video_id: String,
    pub interval: Interval,
    pub class_id: usize,
}

/// AP per (class, threshold) plus mAP per threshold and their average.
/// Classes without any ground truth are excluded from mAP and carry no AP.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Classes with at least one ground-truth instance, ascending.
    pub classes: Vec<usize>,
    /// `ap[t][k]` is the AP of `classes[k]` at `thresholds[t]`.
    pub ap: Vec<Vec<f64>>,
    pub map: Vec<f64>,
    pub average_map: f64,
}

/// AP of one class: walk detections in score order (ties: video id, then
/// start), greedily match each to the highest-IoU unmatched ground truth of
/// its video at or above the threshold, then integrate the enveloped PR
/// curve over all points.
pub fn average_precision(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    iou_threshold: f64,
) -> Option<f64> {
    if ground_truths.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let da = &detections[a];
        let db = &detections[b];
        db.score
            .partial_cmp(&da.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| da.video_id.cmp(&db.video_id))
            .then_with(|| {
                da.interval
                    .start()
                    .partial_cmp(&db.interval.start())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    let mut matched = vec![false; ground_truths.len()];
    let mut true_positive = Vec::with_capacity(order.len());
    for &di in &order {
        let d = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truths.iter().enumerate() {
            if matched[gi] || gt.video_id != d.video_id {
                continue;
            }
            let iou = d.interval.iou(&gt.interval);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                true_positive.push(true);
            }
            None => true_positive.push(false),
        }
    }
    let total = ground_truths.len() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut precision = Vec::with_capacity(true_positive.len());
    let mut recall = Vec::with_capacity(true_positive.len());
    for flag in true_positive {
        if flag {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        precision.push(tp / (tp + fp));
        recall.push(tp / total);
    }
    // monotone precision envelope from the right, then sum over recall steps
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..envelope.len() {
        ap += (recall[i] - prev) * envelope[i];
        prev = recall[i];
    }
    Some(ap)
}

/// Evaluate every class at every threshold.
pub fn map_suite(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    thresholds: &[f64],
) -> EvalReport {
    let mut classes: Vec<usize> = ground_truths.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut ap = Vec::with_capacity(thresholds.len());
    let mut map = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut row = Vec::with_capacity(classes.len());
        for &class in &classes {
            let dets: Vec<Detection> = detections
                .iter()
                .filter(|d| d.class_id == class)
                .cloned()
                .collect();
            let gts: Vec<GroundTruth> = ground_truths
                .iter()
                .filter(|g| g.class_id == class)
                .cloned()
                .collect();
            row.push(average_precision(&dets, &gts, thr).expect("class has ground truth"));
        }
        let m = if row.is_empty() {
            0.0
        } else {
            row.iter().sum::<f64>() / row.len() as f64
        };
        ap.push(row);
        map.push(m);
    }
    let average_map = if map.is_empty() {
        0.0
    } else {
        map.iter().sum::<f64>() / map.len() as f64
    };
    EvalReport {
        thresholds: thresholds.to_vec(),
        classes,
        ap,
        map,
        average_map,
    }
}

/// Parse `start:stop:step` with inclusive stop, e.g. `0.3:0.7:0.1`.
pub fn parse_threshold_range(text: &str) -> Result<Vec<f64>, MetricsError> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || MetricsError::BadThresholdRange(text.to_string());
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].parse().map_err(|_| bad())?;
    let stop: f64 = parts[1].parse().map_err(|_| bad())?;
    let step: f64 = parts[2].parse().map_err(|_| bad())?;
    if !(step > 0.0) || stop < start {
        return Err(bad());
    }
    let count = ((stop - start) / step + 0.5).floor() as usize;
    let mut out = Vec::with_capacity(count + 1);
    for i in 0..=count {
        let v = start + i as f64 * step;
        if v <= stop + 1e-9 {
            out.push((v * 1e9).round() / 1e9);
        }
    }
    Ok(out)
}

impl EvalReport {
    /// Aligned text table: one row per class, one column per threshold, plus
    /// the mAP row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10}", "class"));
        for t in &self.thresholds {
            out.push_str(&format!("{:>10}", format!("AP@{:.2}", t)));
        }
        out.push('\n');
        for (k, class) in self.classes.iter().enumerate() {
            out.push_str(&format!("{:<10}", class));
            for t in 0..self.thresholds.len() {
                out.push_str(&format!("{:>10.4}", self.ap[t][k]));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<10}", "mAP"));
        for m in &self.map {
            out.push_str(&format!("{:>10.4}", m));
        }
        out.push('\n');
        out.push_str(&format!("average_mAP {:.6}\n", self.average_map));
        out
    }

    /// Machine-readable key-value lines.
    pub fn to_key_values(&self) -> String {
        let mut lines: BTreeMap<String, f64> = BTreeMap::new();
        for (t, &thr) in self.thresholds.iter().enumerate() {
            lines.insert(format!("map@{:.2}", thr), self.map[t]);
            for (k, &class) in self.classes.iter().enumerate() {
                lines.insert(format!("ap@{:.2}.class{}", thr, class), self.ap[t][k]);
            }
        }
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{} {:.6}\n", k, v));
        }
        out.push_str(&format!("average_map {:.6}\n", self.average_map));
        out
    }

    pub fn write_files(&self, table_path: &Path, kv_path: &Path) -> Result<(), MetricsError> {
        fs::write(table_path, self.to_table())?;
        fs::write(kv_path, self.to_key_values())?;
        Ok(())
    }

    /// mAP at the threshold closest to `thr`.
    pub fn map_at(&self, thr: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - thr).abs() < 1e-9)
            .map(|i| self.map[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::naive_average_precision;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(video: &str, s: f64, e: f64, class: usize, score: f64) -> Detection {
        Detection {
            video_id: video.into(),
            interval: Interval::new(s, e).unwrap(),
            class_id: class,
            score,
        }
    }

    fn gt(video: &str, s: f64, e: f64, class: usize) -> GroundTruth {
        GroundTruth {
            video_id: video.into(),
            interval: Interval::new(s, e).unwrap(),
            class_id: class,
        }
    }

    #[test]
    fn perfect_detections_ap_one() {
        let gts = vec![gt("a", 0.0, 10.0, 1), gt("a", 20.0, 25.0, 1), gt("b", 5.0, 9.0, 1)];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| det(&g.video_id, g.interval.start(), g.interval.end(), 1, 0.9))
            .collect();
        for thr in [0.3, 0.5, 0.7, 0.95] {
            assert_eq!(average_precision(&dets, &gts, thr), Some(1.0));
        }
    }

    #[test]
    fn no_detections_ap_zero() {
        let gts = vec![gt("a", 0.0, 10.0, 1)];
        assert_eq!(average_precision(&[], &gts, 0.5), Some(0.0));
    }

    #[test]
    fn zero_ground_truth_is_undefined() {
        let dets = vec![det("a", 0.0, 10.0, 1, 0.9)];
        assert_eq!(average_precision(&dets, &[], 0.5), None);
    }

    #[test]
    fn duplicate_detection_is_fp_but_ap_stays_one() {
        let gts = vec![gt("a", 0.0, 10.0, 1)];
        let dets = vec![det("a", 0.0, 10.0, 1, 0.9), det("a", 0.0, 10.0, 1, 0.8)];
        // precision points (1, 0.5) at recalls (1, 1): envelope gives AP 1
        assert_eq!(average_precision(&dets, &gts, 0.5), Some(1.0));
    }

    #[test]
    fn ap_non_increasing_in_threshold() {
        let gts = vec![gt("a", 0.0, 10.0, 1), gt("a", 30.0, 45.0, 1)];
        let dets = vec![det("a", 1.0, 10.0, 1, 0.8), det("a", 31.0, 40.0, 1, 0.7)];
        let mut prev = 1.0;
        for thr in [0.3, 0.5, 0.7, 0.9] {
            let ap = average_precision(&dets, &gts, thr).unwrap();
            assert!(ap <= prev + 1e-12);
            prev = ap;
        }
    }

    #[test]
    fn ap_invariant_under_monotone_score_transform() {
        let gts = vec![gt("a", 0.0, 10.0, 1), gt("a", 30.0, 45.0, 1)];
        let dets = vec![
            det("a", 1.0, 10.0, 1, 0.8),
            det("a", 31.0, 40.0, 1, 0.55),
            det("a", 12.0, 20.0, 1, 0.3),
        ];
        let base = average_precision(&dets, &gts, 0.5).unwrap();
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| det(&d.video_id, d.interval.start(), d.interval.end(), 1, d.score.powi(3)))
            .collect();
        let transformed = average_precision(&squashed, &gts, 0.5).unwrap();
        assert!((base - transformed).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_naive_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let videos = ["a", "b", "c", "d"];
            let n_gt = rng.random_range(1..=4);
            let gts: Vec<GroundTruth> = (0..n_gt)
                .map(|_| {
                    let v = videos[rng.random_range(0..videos.len())];
                    let s = rng.random_range(0.0..30.0);
                    gt(v, s, s + rng.random_range(1.0..10.0), 1)
                })
                .collect();
            let n_det = rng.random_range(0..=6);
            let dets: Vec<Detection> = (0..n_det)
                .map(|_| {
                    let v = videos[rng.random_range(0..videos.len())];
                    let s = rng.random_range(0.0..30.0);
                    det(v, s, s + rng.random_range(1.0..10.0), 1, rng.random_range(0.0..1.0))
                })
                .collect();
            let thr = rng.random_range(0.1..0.9);
            let got = average_precision(&dets, &gts, thr).unwrap();
            let naive_dets: Vec<(String, Interval, f64)> = dets
                .iter()
                .map(|d| (d.video_id.clone(), d.interval, d.score))
                .collect();
            let naive_gts: Vec<(String, Interval)> = gts
                .iter()
                .map(|g| (g.video_id.clone(), g.interval))
                .collect();
            let expect = naive_average_precision(&naive_dets, &naive_gts, thr);
            assert!(
                (got - expect).abs() < 1e-12,
                "got {} expected {}",
                got,
                expect
            );
        }
    }

    #[test]
    fn map_suite_perfect_detector() {
        let gts = vec![gt("a", 0.0, 10.0, 1), gt("a", 20.0, 30.0, 2)];
        let dets = vec![det("a", 0.0, 10.0, 1, 0.9), det("a", 20.0, 30.0, 2, 0.9)];
        let thresholds = parse_threshold_range("0.3:0.7:0.1").unwrap();
        let report = map_suite(&dets, &gts, &thresholds);
        assert_eq!(report.map.len(), 5);
        for m in &report.map {
            assert_eq!(*m, 1.0);
        }
        assert_eq!(report.average_map, 1.0);
    }

    #[test]
    fn threshold_range_expansion() {
        let thumos = parse_threshold_range("0.3:0.7:0.1").unwrap();
        assert_eq!(thumos, vec![0.3, 0.4, 0.5, 0.6, 0.7]);
        let anet = parse_threshold_range("0.5:0.95:0.05").unwrap();
        assert_eq!(anet.len(), 10);
        assert!((anet[0] - 0.5).abs() < 1e-12);
        assert!((anet[9] - 0.95).abs() < 1e-12);
        assert!(parse_threshold_range("0.7:0.3:0.1").is_err());
        assert!(parse_threshold_range("nope").is_err());
    }

    #[test]
    fn report_files_written(){
        let gts = vec![gt("a", 0.0, 10.0, 1)];
        let dets = vec![det("a", 0.0, 10.0, 1, 0.9)];
        let report = map_suite(&dets, &gts, &[0.5]);
        let dir = tempfile::tempdir().unwrap();
        let table = dir.path().join("report.txt");
        let kv = dir.path().join("report.kv");
        report.write_files(&table, &kv).unwrap();
        let kv_text = std::fs::read_to_string(&kv).unwrap();
        assert!(kv_text.contains("map@0.50 1.000000"));
        assert!(kv_text.contains("average_map 1.000000"));
    }
}
