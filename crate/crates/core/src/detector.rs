//! Decode raw head outputs into scored detections and suppress overlaps.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::anchors::{decode, Anchor};
use crate::interval::Interval;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("prediction arrays cover {predictions} anchors but {anchors} were generated")]
    MisalignedLengths { predictions: usize, anchors: usize },
    #[error("detection file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("detection file line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One scored action proposal, clipped to its video.
#[derive(Debug, Clone)]
pub struct Detection {
    pub video_id: String,
    pub interval: Interval,
    pub class_id: usize,
    pub score: f64,
}

/// Per-anchor head outputs as plain values, aligned with the anchor order.
#[derive(Debug, Clone)]
pub struct PredictionValues {
    /// Row-major `[(C+1), M]` class probabilities (softmaxed).
    pub cls_probs: Vec<f64>,
    /// `[M]` predicted IoU in (0, 1).
    pub conf: Vec<f64>,
    /// `[M]` center offsets.
    pub dc: Vec<f64>,
    /// `[M]` log-width offsets.
    pub dw: Vec<f64>,
    pub num_classes: usize,
    pub num_anchors: usize,
}

/// Fuse class probability with predicted IoU, decode offsets, clip to
/// `[0, sequence_length]`, and keep scores at or above `score_floor`.
/// Output order: anchor-major, class-minor, so it is deterministic.
pub fn decode_predictions(
    values: &PredictionValues,
    anchors: &[Anchor],
    video_id: &str,
    sequence_length: f64,
    score_floor: f64,
) -> Result<Vec<Detection>, DetectorError> {
    let m = values.num_anchors;
    if anchors.len() != m
        || values.conf.len() != m
        || values.dc.len() != m
        || values.dw.len() != m
        || values.cls_probs.len() != (values.num_classes + 1) * m
    {
        return Err(DetectorError::MisalignedLengths {
            predictions: values.conf.len(),
            anchors: anchors.len(),
        });
    }
    let mut detections = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        let conf = values.conf[i];
        for class in 1..=values.num_classes {
            let score = values.cls_probs[class * m + i] * conf;
            if score < score_floor {
                continue;
            }
            let raw = decode(&anchor.interval, values.dc[i], values.dw[i]);
            let Some(clipped) = raw.clip(0.0, sequence_length) else {
                continue;
            };
            detections.push(Detection {
                video_id: video_id.to_string(),
                interval: clipped,
                class_id: class,
                score,
            });
        }
    }
    Ok(detections)
}

/// Greedy NMS over detections of a single class in a single video: sort by
/// score (ties: earlier start, then earlier input position), keep a
/// detection iff its IoU with everything already kept is below `threshold`.
pub fn nms(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                detections[a]
                    .interval
                    .start()
                    .partial_cmp(&detections[b].interval.start())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let candidate = &detections[idx];
        let overlaps = kept
            .iter()
            .any(|k| k.interval.iou(&candidate.interval) >= threshold);
        if !overlaps {
            kept.push(candidate.clone());
        }
    }
    kept
}

/// Per-class, per-video NMS over a mixed detection list. Output is sorted by
/// video id, then score descending (ties by start, then class).
pub fn nms_per_video_class(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut keys: Vec<(String, usize)> = detections
        .iter()
        .map(|d| (d.video_id.clone(), d.class_id))
        .collect();
    keys.sort();
    keys.dedup();
    let mut out = Vec::new();
    for (video, class) in keys {
        let group: Vec<Detection> = detections
            .iter()
            .filter(|d| d.video_id == video && d.class_id == class)
            .cloned()
            .collect();
        out.extend(nms(&group, threshold));
    }
    sort_detections(&mut out);
    out
}

/// Canonical detection file order: video id, then score descending.
pub fn sort_detections(detections: &mut [Detection]) {
    detections.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then_with(|| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| {
                a.interval
                    .start()
                    .partial_cmp(&b.interval.start())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(a.class_id.cmp(&b.class_id))
    });
}

/// Tab-separated, one record per line: video id, start and end (3 decimals),
/// class id, score (6 decimals).
pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<(), DetectorError> {
    let mut sorted = detections.to_vec();
    sort_detections(&mut sorted);
    let mut out = String::new();
    out.push_str("# video_id\tstart\tend\tclass_id\tscore\n");
    for d in &sorted {
        out.push_str(&format!(
            "{}\t{:.3}\t{:.3}\t{}\t{:.6}\n",
            d.video_id,
            d.interval.start(),
            d.interval.end(),
            d.class_id,
            d.score
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>, DetectorError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(DetectorError::Parse {
                line: lineno + 1,
                message: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_f64 = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| DetectorError::Parse {
                line: lineno + 1,
                message: format!("bad {}: {:?}", what, s),
            })
        };
        let start = parse_f64(fields[1], "start")?;
        let end = parse_f64(fields[2], "end")?;
        let class_id = fields[3].parse::<usize>().map_err(|_| DetectorError::Parse {
            line: lineno + 1,
            message: format!("bad class id: {:?}", fields[3]),
        })?;
        let score = parse_f64(fields[4], "score")?;
        let interval = Interval::new(start, end).map_err(|e| DetectorError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        out.push(Detection {
            video_id: fields[0].to_string(),
            interval,
            class_id,
            score,
        });
    }
    Ok(out)
}
