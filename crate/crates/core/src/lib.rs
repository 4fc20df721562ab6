//! One-stage temporal action detection on snippet-feature sequences: a
//! multi-level temporal pyramid network with IoU-confidence and GIoU
//! regression losses, anchor matching and decoding, NMS, and mAP evaluation,
//! all on a small reverse-mode tensor engine.

pub mod anchors;
pub mod check;
pub mod data;
pub mod detector;
pub mod interval;
mod kvfile;
pub mod metrics;
pub mod model;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use anchors::{generate_anchors, AnchorLayout};
pub use data::{generate_synthetic, FeatureSequence, SyntheticSpec};
pub use detector::Detection;
pub use interval::{Interval, LossWeights};
pub use metrics::{map_suite, EvalReport};
pub use model::{Model, ModelConfig};
pub use tensor::{Parameter, Tensor};
pub use trainer::{fit, TrainConfig};
