//! The detection network: two temporal base convolutions, a two-branch
//! transform, a cascade of H-shaped pyramid modules joined by 1x1 reduction
//! convs, a shared per-level fusion module with channel attention, and three
//! shared prediction heads.
//!
//! Feature maps are `[channels, temporal, feature_dim]`; every kernel is
//! `(k, 1)` so the feature axis is never mixed.

mod config;

pub use config::ModelConfig;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::anchors::AnchorLayout;
use crate::detector::PredictionValues;
use crate::tensor::{Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("input has {rows} snippets but the model window is {max}; window the video first")]
    InputTooLong { rows: usize, max: usize },
    #[error("input feature dimension {got} does not match the model's {expected}")]
    WrongFeatureDim { got: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone)]
struct Conv {
    weight: Parameter,
    bias: Parameter,
}

impl Conv {
    fn apply2d(&self, x: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Result<Tensor, TensorError> {
        x.conv2d(&self.weight.tensor, Some(&self.bias.tensor), stride, pad)
    }

    fn apply1d(&self, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor, TensorError> {
        x.conv1d(&self.weight.tensor, Some(&self.bias.tensor), stride, pad)
    }
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
}

impl Builder {
    /// Uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
    fn conv(&mut self, name: &str, shape: Vec<usize>) -> Conv {
        let (c_out, per_out): (usize, usize) = (shape[0], shape[1..].iter().product());
        let fan_in = per_out;
        let fan_out = c_out * shape[2..].iter().product::<usize>();
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let weight = Parameter::new(format!("{name}.weight"), shape, data);
        let bias = Parameter::new(format!("{name}.bias"), vec![c_out], vec![0.0; c_out]);
        self.params.push(weight.clone());
        self.params.push(bias.clone());
        Conv { weight, bias }
    }
}

struct ThmParams {
    encoder: Vec<Conv>,
    lateral: Vec<Conv>,
}

/// Per-anchor predictions, aligned with the anchor order (level-major,
/// cell-second, anchor-minor).
pub struct ForwardOutput {
    /// `[(C+1), M]` raw class logits.
    pub cls_logits: Tensor,
    /// `[M]` predicted IoU after the sigmoid.
    pub conf: Tensor,
    /// `[M]` center offsets.
    pub loc_dc: Tensor,
    /// `[M]` log-width offsets.
    pub loc_dw: Tensor,
}

impl ForwardOutput {
    /// Detached plain values for decoding and sampling.
    pub fn values(&self, num_classes: usize) -> PredictionValues {
        let probs = self
            .cls_logits
            .detach()
            .softmax(0)
            .expect("axis 0 exists")
            .value();
        PredictionValues {
            num_anchors: self.conf.len(),
            num_classes,
            cls_probs: probs,
            conf: self.conf.value(),
            dc: self.loc_dc.value(),
            dw: self.loc_dw.value(),
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    params: Vec<Parameter>,
    base: [Conv; 2],
    transform_a: Conv,
    transform_b: Conv,
    inter: Vec<(Conv, Conv)>,
    thms: Vec<ThmParams>,
    mfm_reduce: Conv,
    mfm_res: [Conv; 2],
    mfm_att: [Conv; 2],
    head_cls: Conv,
    head_conf: Conv,
    head_loc: Conv,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
        };
        let c = config.feature_dim;
        let ch = config.thm_channels;
        let half = ch / 2;
        let fused = config.fused_channels();

        let base = [
            b.conv("base.0", vec![c, c, 3]),
            b.conv("base.1", vec![c, c, 3]),
        ];
        let transform_a = b.conv("transform.conv1", vec![config.k1, 1, 3, 1]);
        let transform_b = b.conv("transform.conv2", vec![config.k2, 1, 3, 1]);
        let inter = (1..config.num_thm)
            .map(|s| {
                (
                    b.conv(&format!("inter.{s}.base"), vec![half, ch, 1, 1]),
                    b.conv(&format!("inter.{s}.top"), vec![half, ch, 1, 1]),
                )
            })
            .collect();
        let thms = (0..config.num_thm)
            .map(|i| ThmParams {
                encoder: (0..config.pyramid_levels)
                    .map(|j| b.conv(&format!("thm.{i}.enc.{j}"), vec![ch, ch, 3, 1]))
                    .collect(),
                lateral: (0..config.pyramid_levels.saturating_sub(1))
                    .map(|j| b.conv(&format!("thm.{i}.lat.{j}"), vec![ch, ch, 1, 1]))
                    .collect(),
            })
            .collect();
        let mfm_reduce = b.conv("mfm.reduce", vec![fused, config.num_thm * ch, 1, 1]);
        let mfm_res = [
            b.conv("mfm.res.0", vec![fused, fused, 3, 1]),
            b.conv("mfm.res.1", vec![fused, fused, 3, 1]),
        ];
        let attention_mid = (fused / 16).max(1);
        let mfm_att = [
            b.conv("mfm.att.0", vec![attention_mid, fused, 1, 1]),
            b.conv("mfm.att.1", vec![fused, attention_mid, 1, 1]),
        ];
        let classes = config.num_classes + 1;
        let n = config.head_anchors;
        let head_cls = b.conv("head.cls", vec![classes * n, fused, 3]);
        let head_conf = b.conv("head.conf", vec![n, fused, 3]);
        let head_loc = b.conv("head.loc", vec![2 * n, fused, 3]);

        // background prior ~0.99: raise the background-class channels so the
        // initial softmax is dominated by class 0
        {
            let prior = (99.0 * config.num_classes as f64).ln();
            let mut bias = head_cls.bias.tensor.data_mut();
            for slot in bias.iter_mut().take(n) {
                *slot = prior;
            }
        }

        Ok(Model {
            config,
            params: b.params,
            base,
            transform_a,
            transform_b,
            inter,
            thms,
            mfm_reduce,
            mfm_res,
            mfm_att,
            head_cls,
            head_conf,
            head_loc,
        })
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn anchor_layout(&self) -> AnchorLayout {
        self.config.anchor_layout()
    }

    /// Copy of every parameter's values, for best-epoch tracking.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.value()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, values) in self.params.iter().zip(snapshot) {
            p.tensor.data_mut().copy_from_slice(values);
        }
    }

    /// Build the `[c, T]` input, zero-padding videos shorter than the window.
    pub fn input_tensor(&self, features: &[f32], rows: usize, dim: usize) -> Result<Tensor, ModelError> {
        let t = self.config.base_length;
        if dim != self.config.feature_dim {
            return Err(ModelError::WrongFeatureDim {
                got: dim,
                expected: self.config.feature_dim,
            });
        }
        if rows > t {
            return Err(ModelError::InputTooLong { rows, max: t });
        }
        debug_assert_eq!(features.len(), rows * dim);
        let mut data = vec![0.0f64; dim * t];
        for r in 0..rows {
            for d in 0..dim {
                data[d * t + r] = features[r * dim + d] as f64;
            }
        }
        Ok(Tensor::from_vec(vec![dim, t], data))
    }

    /// Two stride-2 temporal convolutions with relu; `[c, T] -> [c, T/4]`.
    pub fn base_convs(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let h1 = self.base[0].apply1d(x, 2, 1)?.relu();
        Ok(self.base[1].apply1d(&h1, 2, 1)?.relu())
    }

    /// Lift `[c, t]` to `[1, t, c]`, run the stride-1 and stride-2 branches,
    /// upsample the latter back, and concatenate to `[k1+k2, t, c]`.
    pub fn transform(&self, base: &Tensor) -> Result<Tensor, ModelError> {
        let shape = base.shape().to_vec();
        debug_assert_eq!(shape.len(), 2);
        let t = shape[1];
        if t % 2 != 0 {
            return Err(ModelError::Config(format!(
                "transform needs an even temporal length, got {}",
                t
            )));
        }
        let lifted = base.permute(&[1, 0])?.reshape(vec![1, t, shape[0]])?;
        let a = self.transform_a.apply2d(&lifted, (1, 1), (1, 0))?;
        let b = self.transform_b.apply2d(&lifted, (2, 1), (1, 0))?;
        let b_up = b.upsample_temporal(2, self.config.interp_mode)?;
        Ok(Tensor::concat(0, &[a, b_up])?)
    }

    /// Encoder-decoder pyramid: P stride-2 convolutions down, then lateral
    /// 1x1 fusion with upsampled deeper levels on the way back up. Returns
    /// the decoder outputs shallowest-first (`t/2 .. t/2^P`).
    pub fn thm_forward(&self, index: usize, input: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        let thm = &self.thms[index];
        let p = self.config.pyramid_levels;
        let mut encoded = Vec::with_capacity(p);
        let mut cur = input.clone();
        for conv in &thm.encoder {
            cur = conv.apply2d(&cur, (2, 1), (1, 0))?.relu();
            encoded.push(cur.clone());
        }
        let mut decoded = vec![encoded[p - 1].clone()];
        for j in (0..p - 1).rev() {
            let lateral = thm.lateral[j].apply2d(&encoded[j], (1, 1), (0, 0))?;
            let up = decoded
                .last()
                .unwrap()
                .upsample_temporal(2, self.config.interp_mode)?;
            decoded.push(lateral.add(&up)?.relu());
        }
        decoded.reverse();
        Ok(decoded)
    }

    /// Join two adjacent pyramid modules: reduce the transform output and the
    /// upsampled top level of the previous module to half width each, then
    /// concatenate. `stage` 0 joins modules 0 and 1.
    pub fn inter_thm(&self, stage: usize, base: &Tensor, prev_top: &Tensor) -> Result<Tensor, ModelError> {
        let (reduce_base, reduce_top) = &self.inter[stage];
        let a = reduce_base.apply2d(base, (1, 1), (0, 0))?;
        let up = prev_top.upsample_temporal(2, self.config.interp_mode)?;
        let b = reduce_top.apply2d(&up, (1, 1), (0, 0))?;
        Ok(Tensor::concat(0, &[a, b])?)
    }

    /// Fuse same-scale features of all modules: concat, 1x1 reduce, residual
    /// block, channel attention. All fusion parameters are shared across
    /// levels.
    pub fn mfm(&self, per_thm_levels: &[Vec<Tensor>]) -> Result<Vec<Tensor>, ModelError> {
        let p = self.config.pyramid_levels;
        let mut fused = Vec::with_capacity(p);
        for j in 0..p {
            let same_scale: Vec<Tensor> = per_thm_levels
                .iter()
                .map(|levels| levels[j].clone())
                .collect();
            let stacked = Tensor::concat(0, &same_scale)?;
            let x = self.mfm_reduce.apply2d(&stacked, (1, 1), (0, 0))?;
            let y = self.mfm_res[0].apply2d(&x, (1, 1), (1, 0))?.relu();
            let y = self.mfm_res[1].apply2d(&y, (1, 1), (1, 0))?;
            let res = x.add(&y)?.relu();
            // squeeze over (t', c), excite per channel
            let pooled = res.mean_axes(&[1, 2])?;
            let c = pooled.len();
            let squeezed = pooled.reshape(vec![c, 1, 1])?;
            let mid = self.mfm_att[0].apply2d(&squeezed, (1, 1), (0, 0))?.relu();
            let scales = self.mfm_att[1]
                .apply2d(&mid, (1, 1), (0, 0))?
                .sigmoid()
                .reshape(vec![c])?;
            fused.push(res.scale_channels(&scales)?);
        }
        Ok(fused)
    }

    /// Collapse the feature axis by mean, run the three shared head branches
    /// on every level, and flatten to per-anchor vectors in anchor order.
    pub fn heads(&self, fused: &[Tensor]) -> Result<ForwardOutput, ModelError> {
        let classes = self.config.num_classes + 1;
        let n = self.config.head_anchors;
        let mut cls_parts = Vec::with_capacity(fused.len());
        let mut conf_parts = Vec::with_capacity(fused.len());
        let mut loc_parts = Vec::with_capacity(fused.len());
        for level in fused {
            let collapsed = level.mean_axes(&[2])?;
            let cells = collapsed.shape()[1];
            let cls = self.head_cls.apply1d(&collapsed, 1, 1)?;
            let conf = self.head_conf.apply1d(&collapsed, 1, 1)?.sigmoid();
            let loc = self.head_loc.apply1d(&collapsed, 1, 1)?;
            // channel layout: class-major (cls), offset-major (loc); spread
            // cells ahead of anchors to honor the flat ordering contract
            cls_parts.push(
                cls.reshape(vec![classes, n, cells])?
                    .permute(&[0, 2, 1])?
                    .reshape(vec![classes, cells * n])?,
            );
            conf_parts.push(
                conf.permute(&[1, 0])?.reshape(vec![1, cells * n])?,
            );
            loc_parts.push(
                loc.reshape(vec![2, n, cells])?
                    .permute(&[0, 2, 1])?
                    .reshape(vec![2, cells * n])?,
            );
        }
        let cls_logits = Tensor::concat(1, &cls_parts)?;
        let total = cls_logits.shape()[1];
        let conf = Tensor::concat(1, &conf_parts)?.reshape(vec![total])?;
        let loc = Tensor::concat(1, &loc_parts)?;
        let loc_dc = loc.index_select(0, &[0])?.reshape(vec![total])?;
        let loc_dw = loc.index_select(0, &[1])?.reshape(vec![total])?;
        Ok(ForwardOutput {
            cls_logits,
            conf,
            loc_dc,
            loc_dw,
        })
    }

    /// Deterministic composition of the whole network.
    pub fn forward(&self, features: &[f32], rows: usize, dim: usize) -> Result<ForwardOutput, ModelError> {
        let x = self.input_tensor(features, rows, dim)?;
        let base = self.base_convs(&x)?;
        self.forward_from_base(&base)
    }

    /// Pyramid, fusion and heads on a `[c, t]` base feature map. From here on
    /// the feature axis is never mixed: all kernels are `(k, 1)`.
    pub fn forward_from_base(&self, base: &Tensor) -> Result<ForwardOutput, ModelError> {
        let transformed = self.transform(base)?;
        let mut per_thm_levels = Vec::with_capacity(self.config.num_thm);
        let mut prev_top: Option<Tensor> = None;
        for i in 0..self.config.num_thm {
            let input = match &prev_top {
                None => transformed.clone(),
                Some(top) => self.inter_thm(i - 1, &transformed, top)?,
            };
            let levels = self.thm_forward(i, &input)?;
            prev_top = Some(levels[0].clone());
            per_thm_levels.push(levels);
        }
        let fused = self.mfm(&per_thm_levels)?;
        debug_assert_eq!(
            fused.iter().map(|f| f.shape()[1]).collect::<Vec<_>>(),
            self.config.level_lengths()
        );
        self.heads(&fused)
    }
}
