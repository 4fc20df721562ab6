//! Python bindings: interval geometry, anchors, NMS, evaluation, synthetic
//! data and the model itself (forward, detect, fit, checkpoints).

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mltpn::anchors::{
    decode as decode_anchor, generate_anchors, match_anchors, Anchor, AnchorLayout, POSITIVE_IOU,
};
use mltpn::data::{generate_synthetic, SyntheticSpec, Window};
use mltpn::detector::{decode_predictions, nms as nms_rs, Detection};
use mltpn::interval::Interval;
use mltpn::metrics::{average_precision as ap_rs, map_suite, GroundTruth};
use mltpn::model::{Model, ModelConfig};
use mltpn::tensor::{restore_checkpoint, save_checkpoint};
use mltpn::trainer::{fit, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn interval(start: f64, end: f64) -> PyResult<Interval> {
    Interval::new(start, end).map_err(value_err)
}

/// Temporal intersection over union of [s1, e1) and [s2, e2).
#[pyfunction]
fn iou(s1: f64, e1: f64, s2: f64, e2: f64) -> PyResult<f64> {
    Ok(interval(s1, e1)?.iou(&interval(s2, e2)?))
}

/// Generalized IoU; penalizes the uncovered span of the enclosing interval.
#[pyfunction]
fn giou(s1: f64, e1: f64, s2: f64, e2: f64) -> PyResult<f64> {
    Ok(interval(s1, e1)?.giou(&interval(s2, e2)?))
}

/// Regression loss 1 - GIoU.
#[pyfunction]
fn giou_loss(s1: f64, e1: f64, s2: f64, e2: f64) -> PyResult<f64> {
    Ok(interval(s1, e1)?.giou_loss(&interval(s2, e2)?))
}

/// Greedy NMS over (start, end, score) triples of one class; returns the
/// kept triples in score order.
#[pyfunction]
fn nms(detections: Vec<(f64, f64, f64)>, threshold: f64) -> PyResult<Vec<(f64, f64, f64)>> {
    let dets: Vec<Detection> = detections
        .iter()
        .map(|&(s, e, score)| {
            Ok(Detection {
                video_id: String::new(),
                interval: interval(s, e)?,
                class_id: 1,
                score,
            })
        })
        .collect::<PyResult<_>>()?;
    Ok(nms_rs(&dets, threshold)
        .into_iter()
        .map(|d| (d.interval.start(), d.interval.end(), d.score))
        .collect())
}

/// Average precision of one class: detections are (video, start, end, score),
/// ground truths (video, start, end).
#[pyfunction]
fn average_precision(
    detections: Vec<(String, f64, f64, f64)>,
    ground_truths: Vec<(String, f64, f64)>,
    iou_threshold: f64,
) -> PyResult<f64> {
    let dets: Vec<Detection> = detections
        .iter()
        .map(|(v, s, e, score)| {
            Ok(Detection {
                video_id: v.clone(),
                interval: interval(*s, *e)?,
                class_id: 1,
                score: *score,
            })
        })
        .collect::<PyResult<_>>()?;
    let gts: Vec<GroundTruth> = ground_truths
        .iter()
        .map(|(v, s, e)| {
            Ok(GroundTruth {
                video_id: v.clone(),
                interval: interval(*s, *e)?,
                class_id: 1,
            })
        })
        .collect::<PyResult<_>>()?;
    ap_rs(&dets, &gts, iou_threshold)
        .ok_or_else(|| PyValueError::new_err("no ground truth; AP is undefined"))
}

/// Per-threshold mAP over (video, start, end, class, score) detections and
/// (video, start, end, class) ground truths. Returns {"map@X": value, ...,
/// "average_map": value}.
#[pyfunction]
fn evaluate(
    detections: Vec<(String, f64, f64, usize, f64)>,
    ground_truths: Vec<(String, f64, f64, usize)>,
    thresholds: Vec<f64>,
) -> PyResult<HashMap<String, f64>> {
    let dets: Vec<Detection> = detections
        .iter()
        .map(|(v, s, e, c, score)| {
            Ok(Detection {
                video_id: v.clone(),
                interval: interval(*s, *e)?,
                class_id: *c,
                score: *score,
            })
        })
        .collect::<PyResult<_>>()?;
    let gts: Vec<GroundTruth> = ground_truths
        .iter()
        .map(|(v, s, e, c)| {
            Ok(GroundTruth {
                video_id: v.clone(),
                interval: interval(*s, *e)?,
                class_id: *c,
            })
        })
        .collect::<PyResult<_>>()?;
    let report = map_suite(&dets, &gts, &thresholds);
    let mut out = HashMap::new();
    for (i, thr) in report.thresholds.iter().enumerate() {
        out.insert(format!("map@{:.2}", thr), report.map[i]);
    }
    out.insert("average_map".into(), report.average_map);
    Ok(out)
}

/// Per-cell default intervals as (level, position, start, end).
#[pyfunction]
fn anchors(
    level_lengths: Vec<usize>,
    ratios: Vec<f64>,
    sequence_length: usize,
) -> PyResult<Vec<(usize, usize, f64, f64)>> {
    let layout = AnchorLayout::new(level_lengths, ratios, sequence_length).map_err(value_err)?;
    Ok(generate_anchors(&layout)
        .into_iter()
        .map(|a| (a.level, a.position, a.interval.start(), a.interval.end()))
        .collect())
}

/// Anchor labels (0 = background) after matching (start, end) anchors
/// against (start, end, class) ground truths.
#[pyfunction]
fn match_labels(
    anchor_intervals: Vec<(f64, f64)>,
    ground_truths: Vec<(f64, f64, usize)>,
) -> PyResult<Vec<usize>> {
    let anchors: Vec<Anchor> = anchor_intervals
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| {
            Ok(Anchor {
                level: 0,
                position: i,
                interval: interval(s, e)?,
            })
        })
        .collect::<PyResult<_>>()?;
    let gts: Vec<(Interval, usize)> = ground_truths
        .iter()
        .map(|&(s, e, c)| Ok((interval(s, e)?, c)))
        .collect::<PyResult<_>>()?;
    Ok(match_anchors(&anchors, &gts, POSITIVE_IOU)
        .into_iter()
        .map(|m| m.label)
        .collect())
}

/// Apply (dc, dw) offsets to an anchor interval.
#[pyfunction]
fn decode_offsets(start: f64, end: f64, dc: f64, dw: f64) -> PyResult<(f64, f64)> {
    let decoded = decode_anchor(&interval(start, end)?, dc, dw);
    Ok((decoded.start(), decoded.end()))
}

/// Generate the synthetic benchmark. Returns (videos, annotations) where a
/// video is (video_id, rows, dim, flat features) and an annotation is
/// (video_id, [(start, end, class)]).
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (num_videos, t_raw, dim, num_classes, duration_min, duration_max, instances_min, instances_max, noise_sigma, seed))]
fn synthesize(
    num_videos: usize,
    t_raw: usize,
    dim: usize,
    num_classes: usize,
    duration_min: f64,
    duration_max: f64,
    instances_min: usize,
    instances_max: usize,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<(
    Vec<(String, usize, usize, Vec<f32>)>,
    Vec<(String, Vec<(f64, f64, usize)>)>,
)> {
    let spec = SyntheticSpec {
        num_videos,
        rows: t_raw,
        dim,
        num_classes,
        duration_range: (duration_min, duration_max),
        instances_per_video: (instances_min, instances_max),
        noise_sigma,
        seed,
    };
    let (sequences, annotations) = generate_synthetic(&spec).map_err(value_err)?;
    Ok((
        sequences
            .into_iter()
            .map(|s| (s.video_id, s.rows, s.dim, s.features))
            .collect(),
        annotations
            .into_iter()
            .map(|a| {
                (
                    a.video_id,
                    a.instances
                        .iter()
                        .map(|(iv, c)| (iv.start(), iv.end(), *c))
                        .collect(),
                )
            })
            .collect(),
    ))
}

type PyWindow = (Vec<f32>, usize, usize, Vec<(f64, f64, usize)>);

fn to_window(w: &PyWindow, index: usize) -> PyResult<Window> {
    let (features, rows, dim, instances) = w;
    if features.len() != rows * dim {
        return Err(PyValueError::new_err(format!(
            "window {}: {} features != rows {} x dim {}",
            index,
            features.len(),
            rows,
            dim
        )));
    }
    Ok(Window {
        video_id: format!("w{index}"),
        offset: 0,
        rows: *rows,
        dim: *dim,
        features: features.clone(),
        instances: instances
            .iter()
            .map(|&(s, e, c)| Ok((interval(s, e)?, c)))
            .collect::<PyResult<_>>()?,
    })
}

/// The detection model. Non-Send by design; use it from one thread.
#[pyclass(unsendable, name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Build from a key-value config string (None for defaults) and a seed.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let config = match config {
            None => ModelConfig::default(),
            Some(text) => ModelConfig::from_config_str(text).map_err(value_err)?,
        };
        Ok(PyModel {
            inner: Model::new(config, seed).map_err(value_err)?,
        })
    }

    fn config(&self) -> String {
        self.inner.config.to_config_string()
    }

    fn num_anchors(&self) -> usize {
        self.inner.config.num_anchors()
    }

    fn num_parameters(&self) -> usize {
        self.inner.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// Raw per-anchor outputs for one window of `rows x dim` features:
    /// (class_probs flattened [(C+1) * M], conf [M], dc [M], dw [M]).
    fn forward(
        &self,
        features: Vec<f32>,
        rows: usize,
        dim: usize,
    ) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let out = self.inner.forward(&features, rows, dim).map_err(value_err)?;
        let values = out.values(self.inner.config.num_classes);
        Ok((values.cls_probs, values.conf, values.dc, values.dw))
    }

    /// Detections for one window: [(start, end, class, score)], after score
    /// fusion, decoding, clipping and per-class NMS.
    #[pyo3(signature = (features, rows, dim, score_floor=0.01, nms_threshold=0.2))]
    fn detect(
        &self,
        features: Vec<f32>,
        rows: usize,
        dim: usize,
        score_floor: f64,
        nms_threshold: f64,
    ) -> PyResult<Vec<(f64, f64, usize, f64)>> {
        let out = self.inner.forward(&features, rows, dim).map_err(value_err)?;
        let values = out.values(self.inner.config.num_classes);
        let anchors = generate_anchors(&self.inner.anchor_layout());
        let raw = decode_predictions(
            &values,
            &anchors,
            "window",
            self.inner.config.base_length as f64,
            score_floor,
        )
        .map_err(value_err)?;
        let kept = mltpn::detector::nms_per_video_class(&raw, nms_threshold);
        Ok(kept
            .into_iter()
            .map(|d| (d.interval.start(), d.interval.end(), d.class_id, d.score))
            .collect())
    }

    /// Train on in-memory windows (features, rows, dim, [(start, end,
    /// class)]). Returns per-epoch rows (epoch, train_total, val_total).
    /// Curve files and the best checkpoint are written under `out_dir`.
    #[pyo3(signature = (train_windows, val_windows, out_dir, train_config=None))]
    fn fit(
        &self,
        train_windows: Vec<PyWindow>,
        val_windows: Vec<PyWindow>,
        out_dir: PathBuf,
        train_config: Option<&str>,
    ) -> PyResult<Vec<(usize, f64, f64)>> {
        let config = match train_config {
            None => TrainConfig::sgd_defaults(),
            Some(text) => TrainConfig::from_config_str(text).map_err(value_err)?,
        };
        let train: Vec<Window> = train_windows
            .iter()
            .enumerate()
            .map(|(i, w)| to_window(w, i))
            .collect::<PyResult<_>>()?;
        let val: Vec<Window> = val_windows
            .iter()
            .enumerate()
            .map(|(i, w)| to_window(w, i))
            .collect::<PyResult<_>>()?;
        let result = fit(&self.inner, &train, &val, &config, &out_dir, 0).map_err(value_err)?;
        Ok(result
            .rows
            .iter()
            .map(|r| (r.epoch, r.train.total, r.val_total))
            .collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, self.inner.params()).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn load(&self, path: PathBuf) -> PyResult<()> {
        restore_checkpoint(&path, self.inner.params())
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }
}

#[pymodule]
fn mltpn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(giou_loss, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(anchors, m)?)?;
    m.add_function(wrap_pyfunction!(match_labels, m)?)?;
    m.add_function(wrap_pyfunction!(decode_offsets, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
