//! Training loop: shuffled batches, pooled hard-negative sampling, the
//! weighted joint loss, momentum-SGD or Adam, step learning-rate decay and
//! early stopping on validation loss.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::anchors::{generate_anchors, match_anchors, sample_for_loss, Anchor};
use crate::data::Window;
use crate::interval::{giou_loss_terms, joint_loss, Interval, LossWeights};
use crate::kvfile::parse_kv;
use crate::model::{Model, ModelError};
use crate::tensor::optim::{zero_grads, Adam, Sgd};
use crate::tensor::{save_checkpoint, CheckpointError, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("train config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("curve file io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizerKind::Sgd => write!(f, "sgd"),
            OptimizerKind::Adam => write!(f, "adam"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub negative_ratio: usize,
    pub positive_threshold: f64,
}

impl TrainConfig {
    pub fn sgd_defaults() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            batch_size: 16,
            lr_decay_factor: 0.1,
            lr_decay_epoch: 15,
            max_epochs: 60,
            early_stop_patience: 8,
            seed: 0,
            weights: LossWeights::default(),
            negative_ratio: 3,
            positive_threshold: 0.5,
        }
    }

    pub fn adam_defaults() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 0.0001,
            weight_decay: 0.0,
            ..TrainConfig::sgd_defaults()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if self.lr <= 0.0 || self.lr_decay_factor <= 0.0 {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if self.positive_threshold <= 0.0 || self.positive_threshold > 1.0 {
            return Err(TrainError::Config(format!(
                "positive_threshold must be in (0, 1], got {}",
                self.positive_threshold
            )));
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "optimizer {}\nlr {}\nmomentum {}\nweight_decay {}\nbatch_size {}\n\
             lr_decay_factor {}\nlr_decay_epoch {}\nmax_epochs {}\nearly_stop_patience {}\n\
             seed {}\nalpha1 {}\nalpha2 {}\nalpha3 {}\nnegative_ratio {}\npositive_threshold {}\n",
            self.optimizer,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.batch_size,
            self.lr_decay_factor,
            self.lr_decay_epoch,
            self.max_epochs,
            self.early_stop_patience,
            self.seed,
            self.weights.alpha1,
            self.weights.alpha2,
            self.weights.alpha3,
            self.negative_ratio,
            self.positive_threshold
        )
    }

    /// Parse a key-value config. The optimizer choice decides which defaults
    /// fill unspecified keys (SGD: lr 0.001 with weight decay; Adam: lr 1e-4).
    pub fn from_config_str(text: &str) -> Result<Self, TrainError> {
        let pairs = parse_kv(text)
            .map_err(|(line, msg)| TrainError::Config(format!("line {}: {}", line, msg)))?;
        let mut config = match pairs.iter().find(|(k, _, _)| k == "optimizer") {
            Some((_, v, line)) => match v.as_str() {
                "sgd" => TrainConfig::sgd_defaults(),
                "adam" => TrainConfig::adam_defaults(),
                other => {
                    return Err(TrainError::Config(format!(
                        "line {}: unknown optimizer {:?}",
                        line, other
                    )))
                }
            },
            None => TrainConfig::sgd_defaults(),
        };
        for (key, value, line) in pairs {
            let bad =
                |what: &str| TrainError::Config(format!("line {}: bad {} value {:?}", line, what, value));
            match key.as_str() {
                "optimizer" => {}
                "lr" => config.lr = value.parse().map_err(|_| bad("lr"))?,
                "momentum" => config.momentum = value.parse().map_err(|_| bad("momentum"))?,
                "weight_decay" => {
                    config.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?
                }
                "batch_size" => config.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "lr_decay_factor" => {
                    config.lr_decay_factor = value.parse().map_err(|_| bad("lr_decay_factor"))?
                }
                "lr_decay_epoch" => {
                    config.lr_decay_epoch = value.parse().map_err(|_| bad("lr_decay_epoch"))?
                }
                "max_epochs" => config.max_epochs = value.parse().map_err(|_| bad("max_epochs"))?,
                "early_stop_patience" => {
                    config.early_stop_patience =
                        value.parse().map_err(|_| bad("early_stop_patience"))?
                }
                "seed" => config.seed = value.parse().map_err(|_| bad("seed"))?,
                "alpha1" => config.weights.alpha1 = value.parse().map_err(|_| bad("alpha1"))?,
                "alpha2" => config.weights.alpha2 = value.parse().map_err(|_| bad("alpha2"))?,
                "alpha3" => config.weights.alpha3 = value.parse().map_err(|_| bad("alpha3"))?,
                "negative_ratio" => {
                    config.negative_ratio = value.parse().map_err(|_| bad("negative_ratio"))?
                }
                "positive_threshold" => {
                    config.positive_threshold =
                        value.parse().map_err(|_| bad("positive_threshold"))?
                }
                other => {
                    return Err(TrainError::Config(format!(
                        "line {}: unknown key {:?}",
                        line, other
                    )))
                }
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// Learning rate for a 1-based epoch: reduced once after `lr_decay_epoch`.
pub fn scheduled_lr(config: &TrainConfig, epoch: usize) -> f64 {
    if epoch > config.lr_decay_epoch {
        config.lr * config.lr_decay_factor
    } else {
        config.lr
    }
}

pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(config: &TrainConfig) -> Self {
        match config.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(
                config.lr,
                config.momentum,
                config.weight_decay,
            )),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(
                config.lr,
                0.9,
                0.999,
                1e-8,
                config.weight_decay,
            )),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }

    pub fn step(&mut self, params: &[crate::tensor::Parameter]) -> Result<(), TensorError> {
        match self {
            Optimizer::Sgd(o) => o.step(params),
            Optimizer::Adam(o) => o.step(params),
        }
    }
}

/// Loss components of one batch or epoch; `total` is always the weighted sum
/// of the three parts.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub conf: f64,
    pub reg: f64,
}

/// Pooled joint loss over a batch of windows. Sampling counts are pooled
/// across the batch before normalization. When the whole batch has no
/// positive anchor the regression term is dropped for that batch.
pub fn batch_loss(
    model: &Model,
    windows: &[&Window],
    anchors: &[Anchor],
    config: &TrainConfig,
) -> Result<(Tensor, LossParts), TrainError> {
    let mut cls_sums = Vec::new();
    let mut conf_sums = Vec::new();
    let mut reg_sums = Vec::new();
    let (mut n_cls, mut n_conf, mut n_reg) = (0usize, 0usize, 0usize);
    let m = anchors.len();
    for w in windows {
        let out = model.forward(&w.features, w.rows, w.dim)?;
        let matches = match_anchors(anchors, &w.instances, config.positive_threshold);
        // per-anchor background cross-entropy drives hard-negative mining
        let logits = out.cls_logits.value();
        let classes = out.cls_logits.shape()[0];
        let mut background_loss = vec![0.0f64; m];
        for i in 0..m {
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(logits[c * m + i]);
            }
            let mut sum = 0.0;
            for c in 0..classes {
                sum += (logits[c * m + i] - max).exp();
            }
            background_loss[i] = max + sum.ln() - logits[i];
        }
        let sampled = sample_for_loss(&matches, &background_loss, config.negative_ratio);

        if !sampled.cls.is_empty() {
            let labels: Vec<usize> = sampled.cls.iter().map(|&i| matches[i].label).collect();
            let selected = out.cls_logits.index_select(1, &sampled.cls)?;
            cls_sums.push(selected.cross_entropy_sum(&labels)?);
            n_cls += sampled.cls.len();
        }
        if !sampled.conf.is_empty() {
            let targets: Vec<f64> = sampled.conf.iter().map(|&i| matches[i].target_iou).collect();
            let selected = out.conf.index_select(0, &sampled.conf)?;
            conf_sums.push(selected.smooth_l1_sum(&targets)?);
            n_conf += sampled.conf.len();
        }
        if !sampled.reg.is_empty() {
            let centers: Vec<f64> = sampled
                .reg
                .iter()
                .map(|&i| anchors[i].interval.center())
                .collect();
            let widths: Vec<f64> = sampled
                .reg
                .iter()
                .map(|&i| anchors[i].interval.length())
                .collect();
            let targets: Vec<Interval> = sampled
                .reg
                .iter()
                .map(|&i| matches[i].matched_gt.expect("positive anchors are matched"))
                .collect();
            let k = sampled.reg.len();
            let anchor_centers = Tensor::from_vec(vec![k], centers);
            let anchor_widths = Tensor::from_vec(vec![k], widths);
            let dc = out.loc_dc.index_select(0, &sampled.reg)?;
            let dw = out.loc_dw.index_select(0, &sampled.reg)?;
            let center = dc.mul(&anchor_widths)?.add(&anchor_centers)?;
            let width = dw.exp().mul(&anchor_widths)?.clamp_min(1e-3);
            let start = center.sub(&width.scale(0.5))?;
            let end = center.add(&width.scale(0.5))?;
            reg_sums.push(giou_loss_terms(&start, &end, &targets)?.sum_all());
            n_reg += k;
        }
    }
    let weights = if n_reg == 0 {
        LossWeights {
            alpha3: 0.0,
            ..config.weights
        }
    } else {
        config.weights
    };
    let loss = joint_loss(&cls_sums, &conf_sums, &reg_sums, &weights, n_cls, n_conf, n_reg)?;

    let sum_items = |v: &[Tensor]| v.iter().map(|t| t.item()).sum::<f64>();
    let cls = if n_cls > 0 { sum_items(&cls_sums) / n_cls as f64 } else { 0.0 };
    let conf = if n_conf > 0 { sum_items(&conf_sums) / n_conf as f64 } else { 0.0 };
    let reg = if n_reg > 0 { sum_items(&reg_sums) / n_reg as f64 } else { 0.0 };
    let parts = LossParts {
        total: loss.item(),
        cls,
        conf,
        reg,
    };
    Ok((loss, parts))
}

fn shuffled_indices(count: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// One pass over the training windows. Returns window-weighted mean losses.
pub fn train_epoch(
    model: &Model,
    windows: &[Window],
    anchors: &[Anchor],
    config: &TrainConfig,
    optimizer: &mut Optimizer,
    epoch: usize,
) -> Result<LossParts, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let order = shuffled_indices(windows.len(), config.seed, epoch);
    let mut acc = LossParts::default();
    let mut seen = 0usize;
    for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
        let batch: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
        let (loss, parts) = batch_loss(model, &batch, anchors, config)?;
        if !parts.total.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                batch: batch_index,
            });
        }
        zero_grads(model.params());
        loss.backward()?;
        // parameters the loss never touched still get a (zero) gradient so
        // weight decay applies uniformly
        for p in model.params() {
            p.tensor.with_grad_buf(|_| {});
        }
        optimizer.step(model.params())?;
        let w = batch.len() as f64;
        acc.total += parts.total * w;
        acc.cls += parts.cls * w;
        acc.conf += parts.conf * w;
        acc.reg += parts.reg * w;
        seen += batch.len();
    }
    let n = seen as f64;
    Ok(LossParts {
        total: acc.total / n,
        cls: acc.cls / n,
        conf: acc.conf / n,
        reg: acc.reg / n,
    })
}

/// Forward-only loss over a window set, batched in fixed order.
pub fn evaluate_loss(
    model: &Model,
    windows: &[Window],
    anchors: &[Anchor],
    config: &TrainConfig,
) -> Result<LossParts, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut acc = LossParts::default();
    let refs: Vec<&Window> = windows.iter().collect();
    for chunk in refs.chunks(config.batch_size) {
        let (_, parts) = batch_loss(model, chunk, anchors, config)?;
        let w = chunk.len() as f64;
        acc.total += parts.total * w;
        acc.cls += parts.cls * w;
        acc.conf += parts.conf * w;
        acc.reg += parts.reg * w;
    }
    let n = windows.len() as f64;
    Ok(LossParts {
        total: acc.total / n,
        cls: acc.cls / n,
        conf: acc.conf / n,
        reg: acc.reg / n,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRow {
    pub epoch: usize,
    pub train: LossParts,
    pub val_total: f64,
}

#[derive(Debug)]
pub struct FitResult {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint_path: std::path::PathBuf,
    pub curves_path: std::path::PathBuf,
}

/// Full training run: epoch loop with the step learning-rate schedule, early
/// stopping when validation loss stops improving, best-epoch checkpointing.
/// The model is left restored to its best epoch. Loss curves are appended to
/// `curves.txt` under `out_dir` (one line per epoch), the best checkpoint is
/// written to `best.ckpt`. `epoch_offset` continues numbering across resumed
/// runs.
pub fn fit(
    model: &Model,
    train: &[Window],
    val: &[Window],
    config: &TrainConfig,
    out_dir: &Path,
    epoch_offset: usize,
) -> Result<FitResult, TrainError> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    fs::create_dir_all(out_dir)?;
    let curves_path = out_dir.join("curves.txt");
    let checkpoint_path = out_dir.join("best.ckpt");
    let mut curves = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&curves_path)?;

    let anchors = generate_anchors(&model.anchor_layout());
    let mut optimizer = Optimizer::new(config);
    let mut rows = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = model.snapshot();
    let mut stall = 0usize;
    for local in 1..=config.max_epochs {
        let epoch = epoch_offset + local;
        optimizer.set_lr(scheduled_lr(config, epoch));
        let train_parts = train_epoch(model, train, &anchors, config, &mut optimizer, epoch)?;
        let val_parts = evaluate_loss(model, val, &anchors, config)?;
        writeln!(
            curves,
            "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
            epoch, train_parts.total, train_parts.cls, train_parts.conf, train_parts.reg, val_parts.total
        )?;
        rows.push(EpochRow {
            epoch,
            train: train_parts,
            val_total: val_parts.total,
        });
        if val_parts.total < best_val {
            best_val = val_parts.total;
            best_epoch = epoch;
            best_snapshot = model.snapshot();
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.early_stop_patience {
                break;
            }
        }
    }
    model.restore(&best_snapshot);
    save_checkpoint(&checkpoint_path, model.params())?;
    Ok(FitResult {
        rows,
        best_epoch,
        best_val_loss: best_val,
        checkpoint_path,
        curves_path,
    })
}
