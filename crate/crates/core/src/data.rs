//! Feature and annotation files, fixed-length windowing, and the synthetic
//! benchmark generator.
//!
//! Feature file layout: magic `MLFT1`, u32 video-id length, the id bytes,
//! u32 row count, u32 feature dimension, then `rows * dim` little-endian f32
//! values row major. Annotations are tab-separated text, one instance per
//! line (`video_id  start  end  class_id`), `#` for comments.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::interval::{Interval, IntervalError};

pub const FEATURE_MAGIC: &[u8; 5] = b"MLFT1";

/// Fraction of an instance that must survive window clipping for the clipped
/// copy to be kept as a training target.
pub const DEFAULT_KEEP_FRACTION: f64 = 0.75;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is not a feature file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: truncated at byte {offset}")]
    Truncated { path: String, offset: usize },
    #[error("{path}: non-finite feature value at row {row}, column {col}")]
    NonFinite {
        path: String,
        row: usize,
        col: usize,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("synthetic spec invalid: {0}")]
    InvalidSpec(String),
    #[error(
        "cannot place {instances} instances totalling {needed:.1} snippets (with gaps) in {available} snippets (video {video})"
    )]
    Infeasible {
        video: usize,
        instances: usize,
        needed: f64,
        available: usize,
    },
    #[error(transparent)]
    Interval(#[from] IntervalError),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One untrimmed video as a row-major `(rows x dim)` snippet-feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub rows: usize,
    pub dim: usize,
    pub features: Vec<f32>,
    /// Snippets per second; metadata only, not serialized.
    pub fps_equivalent: f64,
}

impl FeatureSequence {
    pub fn new(video_id: String, rows: usize, dim: usize, features: Vec<f32>) -> Self {
        assert_eq!(rows * dim, features.len());
        FeatureSequence {
            video_id,
            rows,
            dim,
            features,
            fps_equivalent: 1.0,
        }
    }
}

/// Ground-truth action instances of one video, in snippet units.
#[derive(Debug, Clone)]
pub struct Annotation {
    pub video_id: String,
    pub instances: Vec<(Interval, usize)>,
}

/// Parameters of the synthetic benchmark. Generation is a pure function of
/// the seed.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub rows: usize,
    pub dim: usize,
    pub num_classes: usize,
    /// Instance durations, log-uniform between these bounds (snippets).
    pub duration_range: (f64, f64),
    pub instances_per_video: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_videos: 20,
            rows: 128,
            dim: 16,
            num_classes: 3,
            duration_range: (8.0, 48.0),
            instances_per_video: (1, 3),
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn to_config_string(&self) -> String {
        format!(
            "num_videos {}\nt_raw {}\ndim {}\nnum_classes {}\nduration_min {}\nduration_max {}\n\
             instances_min {}\ninstances_max {}\nnoise_sigma {}\nseed {}\n",
            self.num_videos,
            self.rows,
            self.dim,
            self.num_classes,
            self.duration_range.0,
            self.duration_range.1,
            self.instances_per_video.0,
            self.instances_per_video.1,
            self.noise_sigma,
            self.seed
        )
    }

    /// Parse a key-value spec file; missing keys keep their defaults.
    pub fn from_config_str(text: &str) -> Result<Self, DataError> {
        let mut spec = SyntheticSpec::default();
        let pairs = crate::kvfile::parse_kv(text)
            .map_err(|(line, msg)| DataError::InvalidSpec(format!("line {}: {}", line, msg)))?;
        for (key, value, line) in pairs {
            let bad = |what: &str| {
                DataError::InvalidSpec(format!("line {}: bad {} value {:?}", line, what, value))
            };
            match key.as_str() {
                "num_videos" => spec.num_videos = value.parse().map_err(|_| bad("num_videos"))?,
                "t_raw" => spec.rows = value.parse().map_err(|_| bad("t_raw"))?,
                "dim" => spec.dim = value.parse().map_err(|_| bad("dim"))?,
                "num_classes" => spec.num_classes = value.parse().map_err(|_| bad("num_classes"))?,
                "duration_min" => {
                    spec.duration_range.0 = value.parse().map_err(|_| bad("duration_min"))?
                }
                "duration_max" => {
                    spec.duration_range.1 = value.parse().map_err(|_| bad("duration_max"))?
                }
                "instances_min" => {
                    spec.instances_per_video.0 = value.parse().map_err(|_| bad("instances_min"))?
                }
                "instances_max" => {
                    spec.instances_per_video.1 = value.parse().map_err(|_| bad("instances_max"))?
                }
                "noise_sigma" => spec.noise_sigma = value.parse().map_err(|_| bad("noise_sigma"))?,
                "seed" => spec.seed = value.parse().map_err(|_| bad("seed"))?,
                other => {
                    return Err(DataError::InvalidSpec(format!(
                        "line {}: unknown key {:?}",
                        line, other
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.dim == 0 || self.rows == 0 {
            return Err(DataError::InvalidSpec("rows and dim must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(DataError::InvalidSpec("need at least one class".into()));
        }
        if self.duration_range.0 < 2.0 || self.duration_range.1 < self.duration_range.0 {
            return Err(DataError::InvalidSpec(format!(
                "durations must satisfy 2 <= min <= max, got {:?}",
                self.duration_range
            )));
        }
        if self.instances_per_video.1 < self.instances_per_video.0 {
            return Err(DataError::InvalidSpec(format!(
                "instance count range {:?} is reversed",
                self.instances_per_video
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::InvalidSpec("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Background is Gaussian noise; each class contributes a fixed unit template
/// direction modulated by a half-sine envelope over the instance. Instances
/// within a video never overlap and keep at least a two-snippet gap.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(Vec<FeatureSequence>, Vec<Annotation>), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // per-class unit template directions
    let mut templates = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let mut u: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in u.iter_mut() {
            *x /= norm;
        }
        templates.push(u);
    }

    let mut sequences = Vec::with_capacity(spec.num_videos);
    let mut annotations = Vec::with_capacity(spec.num_videos);
    for v in 0..spec.num_videos {
        let video_id = format!("vid{:04}", v);
        let count = rng.random_range(spec.instances_per_video.0..=spec.instances_per_video.1);
        let (lo, hi) = spec.duration_range;
        let durations: Vec<f64> = (0..count)
            .map(|_| (rng.random_range(lo.ln()..=hi.ln())).exp())
            .collect();
        let gaps_needed = 2.0 * count.saturating_sub(1) as f64;
        let needed: f64 = durations.iter().sum::<f64>() + gaps_needed;
        let slack = spec.rows as f64 - needed;
        if slack < 0.0 {
            return Err(DataError::Infeasible {
                video: v,
                instances: count,
                needed,
                available: spec.rows,
            });
        }
        // distribute the slack over the count+1 gaps via sorted uniform cuts
        let mut cuts: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..=slack)).collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut placements: Vec<(f64, f64)> = Vec::with_capacity(count);
        let mut cursor = 0.0;
        for (i, dur) in durations.iter().enumerate() {
            let extra = if i == 0 { cuts[0] } else { cuts[i] - cuts[i - 1] };
            cursor += extra + if i > 0 { 2.0 } else { 0.0 };
            placements.push((cursor, cursor + dur));
            cursor += dur;
        }
        let classes: Vec<usize> = (0..count)
            .map(|_| rng.random_range(1..=spec.num_classes))
            .collect();

        let mut features = vec![0.0f64; spec.rows * spec.dim];
        if spec.noise_sigma > 0.0 {
            for x in features.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *x = spec.noise_sigma * n;
            }
        }
        let mut instances = Vec::with_capacity(count);
        for (&(start, end), &class) in placements.iter().zip(&classes) {
            let duration = end - start;
            for row in 0..spec.rows {
                let center = row as f64 + 0.5;
                if center < start || center >= end {
                    continue;
                }
                let envelope = (std::f64::consts::PI * (center - start) / duration).sin();
                let template = &templates[class - 1];
                for d in 0..spec.dim {
                    features[row * spec.dim + d] += envelope * template[d];
                }
            }
            instances.push((Interval::new(start, end)?, class));
        }
        sequences.push(FeatureSequence::new(
            video_id.clone(),
            spec.rows,
            spec.dim,
            features.into_iter().map(|x| x as f32).collect(),
        ));
        annotations.push(Annotation {
            video_id,
            instances,
        });
    }
    Ok((sequences, annotations))
}

/// One fixed-length training window cut from a video.
#[derive(Debug, Clone)]
pub struct Window {
    pub video_id: String,
    /// Offset of the window in the source video, snippet units.
    pub offset: usize,
    /// Number of valid rows (may be below the model length for short videos).
    pub rows: usize,
    pub dim: usize,
    pub features: Vec<f32>,
    /// Window-local ground truth.
    pub instances: Vec<(Interval, usize)>,
}

/// Slide windows of `length` by `stride`; the final window is right-aligned
/// so the union always covers the whole video. A stride above the window
/// length would leave gaps and is clamped down to it. Instances survive into
/// a window iff the clipped part keeps at least `keep_fraction` of the
/// original length; coordinates are re-based to the window.
pub fn window(
    seq: &FeatureSequence,
    ann: &Annotation,
    length: usize,
    stride: usize,
    keep_fraction: f64,
) -> Vec<Window> {
    assert!(stride >= 1, "stride must be >= 1");
    let stride = stride.min(length);
    let mut starts: Vec<usize> = Vec::new();
    if seq.rows <= length {
        starts.push(0);
    } else {
        let mut s = 0;
        while s + length <= seq.rows {
            starts.push(s);
            s += stride;
        }
        let last_end = starts.last().unwrap() + length;
        if last_end < seq.rows {
            starts.push(seq.rows - length);
        }
    }
    starts
        .into_iter()
        .map(|offset| {
            let rows = length.min(seq.rows - offset);
            let mut features = Vec::with_capacity(rows * seq.dim);
            features
                .extend_from_slice(&seq.features[offset * seq.dim..(offset + rows) * seq.dim]);
            let lo = offset as f64;
            let hi = (offset + rows) as f64;
            let instances = ann
                .instances
                .iter()
                .filter_map(|(interval, class)| {
                    let clipped = interval.clip(lo, hi)?;
                    if clipped.length() < keep_fraction * interval.length() {
                        return None;
                    }
                    let local =
                        Interval::new(clipped.start() - lo, clipped.end() - lo).expect("clipped");
                    Some((local, *class))
                })
                .collect();
            Window {
                video_id: seq.video_id.clone(),
                offset,
                rows,
                dim: seq.dim,
                features,
                instances,
            }
        })
        .collect()
}

/// Guard the windowing contract: with `stride <= length - max_duration`
/// every instance that fits a window survives into at least one. Violations
/// are config errors; instances longer than the window itself can only ever
/// survive clipped, so they do not constrain the stride.
pub fn validate_stride(
    length: usize,
    stride: usize,
    annotations: &[Annotation],
) -> Result<(), DataError> {
    let max_duration = annotations
        .iter()
        .flat_map(|a| a.instances.iter().map(|(iv, _)| iv.length()))
        .fold(0.0f64, f64::max);
    if max_duration <= length as f64 && stride as f64 > length as f64 - max_duration {
        return Err(DataError::InvalidSpec(format!(
            "window stride {} exceeds window length {} minus the longest instance {:.1}; \
             some instances could fall through",
            stride, length, max_duration
        )));
    }
    Ok(())
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(17 + seq.video_id.len() + seq.features.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(seq.video_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(seq.video_id.as_bytes());
    buf.extend_from_slice(&(seq.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim as u32).to_le_bytes());
    for &v in &seq.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let name = path.display().to_string();
    let mut offset = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DataError> {
        if offset + n > bytes.len() {
            return Err(DataError::Truncated {
                path: name.clone(),
                offset,
            });
        }
        let s = &bytes[offset..offset + n];
        offset += n;
        Ok(s)
    };
    if take(5)? != FEATURE_MAGIC {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let id_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let video_id = String::from_utf8_lossy(take(id_len)?).into_owned();
    let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let raw = take(rows * dim * 4)?;
    let features: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    for (i, v) in features.iter().enumerate() {
        if !v.is_finite() {
            return Err(DataError::NonFinite {
                path: path.display().to_string(),
                row: i / dim,
                col: i % dim,
            });
        }
    }
    Ok(FeatureSequence::new(video_id, rows, dim, features))
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<(), DataError> {
    let mut out = String::from("# video_id\tstart\tend\tclass_id\n");
    for ann in annotations {
        for (interval, class) in &ann.instances {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                ann.video_id,
                interval.start(),
                interval.end(),
                class
            ));
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read annotations grouped by video in first-seen order. Videos without
/// instances simply do not appear.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>, DataError> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::HashMap<String, Vec<(Interval, usize)>> =
        std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DataError::Parse {
                path: name,
                line: lineno + 1,
                message: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64, DataError> {
            s.parse::<f64>().map_err(|_| DataError::Parse {
                path: name.clone(),
                line: lineno + 1,
                message: format!("bad {}: {:?}", what, s),
            })
        };
        let start = parse(fields[1], "start")?;
        let end = parse(fields[2], "end")?;
        let class: usize = fields[3].parse().map_err(|_| DataError::Parse {
            path: name.clone(),
            line: lineno + 1,
            message: format!("bad class id: {:?}", fields[3]),
        })?;
        let interval = Interval::new(start, end).map_err(|e| DataError::Parse {
            path: name.clone(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if !grouped.contains_key(fields[0]) {
            order.push(fields[0].to_string());
        }
        grouped
            .entry(fields[0].to_string())
            .or_default()
            .push((interval, class));
    }
    Ok(order
        .into_iter()
        .map(|video_id| {
            let instances = grouped.remove(&video_id).unwrap();
            Annotation {
                video_id,
                instances,
            }
        })
        .collect())
}
