//! Elementwise and activation operations. All binary ops require identical
//! shapes; broadcasting is deliberately unsupported.

use super::{Tensor, TensorError};

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        Tensor::check_same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, inputs| {
                inputs[0].accumulate_grad(g);
                inputs[1].accumulate_grad(g);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        Tensor::check_same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, inputs| {
                inputs[0].accumulate_grad(g);
                inputs[1].with_grad_buf(|buf| {
                    for (b, gi) in buf.iter_mut().zip(g) {
                        *b -= gi;
                    }
                });
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        Tensor::check_same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, inputs| {
                {
                    let b_data = inputs[1].data();
                    inputs[0].with_grad_buf(|buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * b_data[i];
                        }
                    });
                }
                let a_data = inputs[0].data();
                inputs[1].with_grad_buf(|buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * a_data[i];
                    }
                });
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        Tensor::check_same_shape("div", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a / b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, inputs| {
                {
                    let b_data = inputs[1].data();
                    inputs[0].with_grad_buf(|buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] / b_data[i];
                        }
                    });
                }
                let a_data = inputs[0].data();
                let b_data = inputs[1].data();
                inputs[1].with_grad_buf(|buf| {
                    for i in 0..g.len() {
                        buf[i] -= g[i] * a_data[i] / (b_data[i] * b_data[i]);
                    }
                });
            }),
        ))
    }

    /// Elementwise maximum. At ties the gradient goes to the first operand.
    pub fn max_elem(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        Tensor::check_same_shape("max_elem", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a.max(*b))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, inputs| {
                let a_data = inputs[0].data();
                let b_data = inputs[1].data();
                inputs[0].with_grad_buf(|buf| {
                    for i in 0..g.len() {
                        if a_data[i] >= b_data[i] {
                            buf[i] += g[i];
                        }
                    }
                });
                inputs[1].with_grad_buf(|buf| {
                    for i in 0..g.len() {
                        if a_data[i] < b_data[i] {
                            buf[i] += g[i];
                        }
                    }
                });
            }),
        ))
    }

    /// Elementwise minimum. At ties the gradient goes to the first operand.
    pub fn min_elem(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        Tensor::check_same_shape("min_elem", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a.min(*b))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, inputs| {
                let a_data = inputs[0].data();
                let b_data = inputs[1].data();
                inputs[0].with_grad_buf(|buf| {
                    for i in 0..g.len() {
                        if a_data[i] <= b_data[i] {
                            buf[i] += g[i];
                        }
                    }
                });
                inputs[1].with_grad_buf(|buf| {
                    for i in 0..g.len() {
                        if a_data[i] > b_data[i] {
                            buf[i] += g[i];
                        }
                    }
                });
            }),
        ))
    }

    /// max(x, c) with a constant floor; gradient is blocked where x < c.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        let data = self.data().iter().map(|x| x.max(floor)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _out, inputs| {
                let x = inputs[0].data();
                inputs[0].with_grad_buf(|buf| {
                    for i in 0..g.len() {
                        if x[i] >= floor {
                            buf[i] += g[i];
                        }
                    }
                });
            }),
        )
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _out, inputs| {
                inputs[0].with_grad_buf(|buf| {
                    for (b, gi) in buf.iter_mut().zip(g) {
                        *b += gi * factor;
                    }
                });
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.exp()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, out, inputs| {
                inputs[0].with_grad_buf(|buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * out[i];
                    }
                });
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _out, inputs| {
                let x = inputs[0].data();
                inputs[0].with_grad_buf(|buf| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, out, inputs| {
                inputs[0].with_grad_buf(|buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }),
        )
    }

    /// Softmax along `axis`; every slice along the axis sums to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let strides = Tensor::strides(&shape);
        let axis_len = shape[axis];
        let axis_stride = strides[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..axis_len {
                    max = max.max(src[base + k * axis_stride]);
                }
                let mut sum = 0.0;
                for k in 0..axis_len {
                    let e = (src[base + k * axis_stride] - max).exp();
                    data[base + k * axis_stride] = e;
                    sum += e;
                }
                for k in 0..axis_len {
                    data[base + k * axis_stride] /= sum;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, out, inputs| {
                inputs[0].with_grad_buf(|buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * axis_len * inner + i;
                            let mut dot = 0.0;
                            for k in 0..axis_len {
                                let idx = base + k * axis_stride;
                                dot += g[idx] * out[idx];
                            }
                            for k in 0..axis_len {
                                let idx = base + k * axis_stride;
                                buf[idx] += out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Per-channel scaling of a `[C, ...]` tensor by a `[C]` vector.
    pub fn scale_channels(&self, scales: &Tensor) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        if shape.is_empty() || scales.shape() != [shape[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_channels",
                left: shape,
                right: scales.shape().to_vec(),
            });
        }
        let channels = shape[0];
        let per_channel = self.len() / channels;
        let src = self.data();
        let s = scales.data();
        let mut data = vec![0.0; src.len()];
        for c in 0..channels {
            let sc = s[c];
            for i in 0..per_channel {
                data[c * per_channel + i] = src[c * per_channel + i] * sc;
            }
        }
        drop(src);
        drop(s);
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), scales.clone()],
            Box::new(move |g, _out, inputs| {
                {
                    let s = inputs[1].data();
                    inputs[0].with_grad_buf(|buf| {
                        for c in 0..channels {
                            let sc = s[c];
                            for i in 0..per_channel {
                                buf[c * per_channel + i] += g[c * per_channel + i] * sc;
                            }
                        }
                    });
                }
                let x = inputs[0].data();
                inputs[1].with_grad_buf(|buf| {
                    for c in 0..channels {
                        let mut acc = 0.0;
                        for i in 0..per_channel {
                            acc += g[c * per_channel + i] * x[c * per_channel + i];
                        }
                        buf[c] += acc;
                    }
                });
            }),
        ))
    }
}
