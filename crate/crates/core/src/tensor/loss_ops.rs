//! Fused loss kernels with analytic gradients.

use super::{Tensor, TensorError};

impl Tensor {
    /// Summed cross-entropy of `[num_classes, n]` logits against per-column
    /// class indices, computed through a numerically stable log-softmax.
    pub fn cross_entropy_sum(&self, labels: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadRank {
                op: "cross_entropy_sum",
                expected: 2,
                shape,
            });
        }
        let (classes, n) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_sum",
                left: shape,
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy_sum",
                message: format!("label {} out of range for {} classes", bad, classes),
            });
        }
        let src = self.data();
        let mut total = 0.0;
        for (col, &label) in labels.iter().enumerate() {
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(src[c * n + col]);
            }
            let mut sum = 0.0;
            for c in 0..classes {
                sum += (src[c * n + col] - max).exp();
            }
            total += max + sum.ln() - src[label * n + col];
        }
        drop(src);
        let labels_owned = labels.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _out, inputs| {
                let g0 = g[0];
                let src = inputs[0].data();
                inputs[0].with_grad_buf(|buf| {
                    for (col, &label) in labels_owned.iter().enumerate() {
                        let mut max = f64::NEG_INFINITY;
                        for c in 0..classes {
                            max = max.max(src[c * n + col]);
                        }
                        let mut sum = 0.0;
                        for c in 0..classes {
                            sum += (src[c * n + col] - max).exp();
                        }
                        for c in 0..classes {
                            let p = (src[c * n + col] - max).exp() / sum;
                            let target = if c == label { 1.0 } else { 0.0 };
                            buf[c * n + col] += g0 * (p - target);
                        }
                    }
                });
            }),
        ))
    }

    /// Summed smooth-L1 (Huber, transition at 1) of a vector against fixed
    /// targets: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
    pub fn smooth_l1_sum(&self, targets: &[f64]) -> Result<Tensor, TensorError> {
        if self.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1_sum",
                left: self.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let src = self.data();
        let mut total = 0.0;
        for (p, t) in src.iter().zip(targets) {
            let d = p - t;
            total += if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            };
        }
        drop(src);
        let targets_owned = targets.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _out, inputs| {
                let g0 = g[0];
                let src = inputs[0].data();
                inputs[0].with_grad_buf(|buf| {
                    for i in 0..targets_owned.len() {
                        let d = src[i] - targets_owned[i];
                        buf[i] += g0 * d.clamp(-1.0, 1.0);
                    }
                });
            }),
        ))
    }
}
