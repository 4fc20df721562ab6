//! Shape manipulation and reductions.

use super::{Tensor, TensorError};

impl Tensor {
    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor, TensorError> {
        if new_shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape().to_vec(),
                right: new_shape,
            });
        }
        Ok(Tensor::from_op(
            new_shape,
            self.value(),
            vec![self.clone()],
            Box::new(|g, _out, inputs| {
                inputs[0].accumulate_grad(g);
            }),
        ))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                message: format!("permutation {:?} invalid for rank {}", perm, rank),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = Tensor::strides(&shape);
        let out_strides = Tensor::strides(&out_shape);
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        let mut index = vec![0usize; rank];
        for (out_pos, slot) in data.iter_mut().enumerate() {
            let mut rem = out_pos;
            for (axis, stride) in out_strides.iter().enumerate() {
                index[axis] = rem / stride;
                rem %= stride;
            }
            let mut in_pos = 0;
            for (axis, &p) in perm.iter().enumerate() {
                in_pos += index[axis] * in_strides[p];
            }
            *slot = src[in_pos];
        }
        drop(src);
        let perm_owned = perm.to_vec();
        Ok(Tensor::from_op(
            out_shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, _out, inputs| {
                let in_strides = Tensor::strides(inputs[0].shape());
                let out_strides = Tensor::strides(&out_shape);
                let rank = perm_owned.len();
                inputs[0].with_grad_buf(|buf| {
                    let mut index = vec![0usize; rank];
                    for (out_pos, &gv) in g.iter().enumerate() {
                        let mut rem = out_pos;
                        for (axis, stride) in out_strides.iter().enumerate() {
                            index[axis] = rem / stride;
                            rem %= stride;
                        }
                        let mut in_pos = 0;
                        for (axis, &p) in perm_owned.iter().enumerate() {
                            in_pos += index[axis] * in_strides[p];
                        }
                        buf[in_pos] += gv;
                    }
                });
            }),
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(axis: usize, parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                message: "no tensors given".into(),
            });
        }
        let first = parts[0].shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: first });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for p in parts {
            let extent = p.shape()[axis];
            let src = p.data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * extent * inner;
                data[dst_base..dst_base + extent * inner]
                    .copy_from_slice(&src[src_base..src_base + extent * inner]);
            }
            offset += extent;
        }
        Ok(Tensor::from_op(
            out_shape,
            data,
            parts.to_vec(),
            Box::new(move |g, _out, inputs| {
                let mut offset = 0;
                for p in inputs {
                    let extent = p.shape()[axis];
                    p.with_grad_buf(|buf| {
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            let dst_base = o * extent * inner;
                            for i in 0..extent * inner {
                                buf[dst_base + i] += g[src_base + i];
                            }
                        }
                    });
                    offset += extent;
                }
            }),
        ))
    }

    /// Gather slices along `axis` at the given indices (duplicates allowed).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let extent = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(TensorError::InvalidArgument {
                op: "index_select",
                message: format!("index {} out of range for axis extent {}", bad, extent),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let src = self.data();
        let mut data = vec![0.0; outer * indices.len() * inner];
        for o in 0..outer {
            for (k, &idx) in indices.iter().enumerate() {
                let dst = (o * indices.len() + k) * inner;
                let s = (o * extent + idx) * inner;
                data[dst..dst + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        drop(src);
        let idx_owned = indices.to_vec();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _out, inputs| {
                inputs[0].with_grad_buf(|buf| {
                    for o in 0..outer {
                        for (k, &idx) in idx_owned.iter().enumerate() {
                            let src = (o * idx_owned.len() + k) * inner;
                            let dst = (o * extent + idx) * inner;
                            for i in 0..inner {
                                buf[dst + i] += g[src + i];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Sum over the given axes (deduplicated); reduced axes are removed.
    /// Reducing every axis yields a `[1]` scalar.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let mut reduce = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(TensorError::AxisOutOfRange { axis: a, shape });
            }
            reduce[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !reduce[*i])
            .map(|(_, &e)| e)
            .collect();
        let out_shape = if out_shape.is_empty() {
            vec![1]
        } else {
            out_shape
        };
        let in_strides = Tensor::strides(&shape);
        // Map each input position to its output position once.
        let kept: Vec<usize> = (0..rank).filter(|&i| !reduce[i]).collect();
        let out_strides = Tensor::strides(&out_shape);
        let src = self.data();
        let mut data = vec![0.0; out_shape.iter().product()];
        for (pos, &v) in src.iter().enumerate() {
            let mut out_pos = 0;
            for (slot, &axis) in kept.iter().enumerate() {
                let coord = (pos / in_strides[axis]) % shape[axis];
                out_pos += coord * out_strides[slot];
            }
            data[out_pos] += v;
        }
        drop(src);
        let reduce_owned = reduce;
        Ok(Tensor::from_op(
            out_shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, _out, inputs| {
                let shape = inputs[0].shape().to_vec();
                let in_strides = Tensor::strides(&shape);
                let kept: Vec<usize> = (0..shape.len()).filter(|&i| !reduce_owned[i]).collect();
                let out_strides = Tensor::strides(&out_shape);
                inputs[0].with_grad_buf(|buf| {
                    for (pos, slot) in buf.iter_mut().enumerate() {
                        let mut out_pos = 0;
                        for (k, &axis) in kept.iter().enumerate() {
                            let coord = (pos / in_strides[axis]) % shape[axis];
                            out_pos += coord * out_strides[k];
                        }
                        *slot += g[out_pos];
                    }
                });
            }),
        ))
    }

    /// Mean over the given axes; reduced axes are removed.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        let mut count = 1usize;
        let mut seen = vec![false; shape.len()];
        for &a in axes {
            if a < shape.len() && !seen[a] {
                seen[a] = true;
                count *= shape[a];
            }
        }
        Ok(self.sum_axes(axes)?.scale(1.0 / count as f64))
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes).expect("axes in range")
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.len() as f64)
    }
}
