//! 2-D/1-D convolution and temporal upsampling.
//!
//! Layout: `[C, H, W]` activations, `[C_out, C_in, kH, kW]` weights, row
//! major. The network only ever convolves with kW = 1 or kH = 1 kernels, but
//! the implementation is general. Stride-1 rows and 1x1 kernels take fused
//! contiguous paths; those carry the bulk of the arithmetic.

use std::str::FromStr;

use super::{Tensor, TensorError};

/// Interpolation used by `upsample_temporal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    Nearest,
    Linear,
}

impl FromStr for InterpMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(InterpMode::Nearest),
            "linear" => Ok(InterpMode::Linear),
            other => Err(format!("unknown interpolation mode {:?}", other)),
        }
    }
}

impl std::fmt::Display for InterpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InterpMode::Nearest => write!(f, "nearest"),
            InterpMode::Linear => write!(f, "linear"),
        }
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Valid output range along one axis for a fixed kernel offset, so inner
/// loops run without per-element bounds checks.
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // in_pos = out_pos * stride + k - pad must lie in [0, in_len).
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let max_in = in_len as isize - 1 + pad as isize - k as isize;
    if max_in < 0 {
        return (1, 0); // empty
    }
    let hi = (max_in as usize / stride).min(out_len.saturating_sub(1));
    (lo, hi)
}

fn conv_forward(d: &ConvDims, src: &[f64], wgt: &[f64], out: &mut [f64]) {
    if d.pointwise() {
        let plane = d.h * d.w;
        for co in 0..d.c_out {
            let out_ch = &mut out[co * plane..(co + 1) * plane];
            for ci in 0..d.c_in {
                let wv = wgt[co * d.c_in + ci];
                let in_ch = &src[ci * plane..(ci + 1) * plane];
                for (o, x) in out_ch.iter_mut().zip(in_ch) {
                    *o += wv * x;
                }
            }
        }
        return;
    }
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            let in_ch = &src[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for k_h in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(d.oh, d.h, d.sh, d.ph, k_h);
                if oh_lo > oh_hi {
                    continue;
                }
                for o_h in oh_lo..=oh_hi {
                    let ih = o_h * d.sh + k_h - d.ph;
                    let in_row = &in_ch[ih * d.w..ih * d.w + d.w];
                    let out_row = &mut out[(co * d.oh + o_h) * d.ow..(co * d.oh + o_h + 1) * d.ow];
                    for k_w in 0..d.kw {
                        let wv = wgt[((co * d.c_in + ci) * d.kh + k_h) * d.kw + k_w];
                        let (ow_lo, ow_hi) = valid_range(d.ow, d.w, d.sw, d.pw, k_w);
                        if ow_lo > ow_hi {
                            continue;
                        }
                        if d.sw == 1 {
                            let base = ow_lo + k_w - d.pw;
                            for (o, x) in out_row[ow_lo..=ow_hi]
                                .iter_mut()
                                .zip(&in_row[base..=base + ow_hi - ow_lo])
                            {
                                *o += wv * x;
                            }
                        } else {
                            for o_w in ow_lo..=ow_hi {
                                out_row[o_w] += wv * in_row[o_w * d.sw + k_w - d.pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_input_grad(d: &ConvDims, g: &[f64], wgt: &[f64], buf: &mut [f64]) {
    if d.pointwise() {
        let plane = d.h * d.w;
        for co in 0..d.c_out {
            let g_ch = &g[co * plane..(co + 1) * plane];
            for ci in 0..d.c_in {
                let wv = wgt[co * d.c_in + ci];
                let buf_ch = &mut buf[ci * plane..(ci + 1) * plane];
                for (b, gv) in buf_ch.iter_mut().zip(g_ch) {
                    *b += wv * gv;
                }
            }
        }
        return;
    }
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            let in_base = ci * d.h * d.w;
            for k_h in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(d.oh, d.h, d.sh, d.ph, k_h);
                if oh_lo > oh_hi {
                    continue;
                }
                for o_h in oh_lo..=oh_hi {
                    let ih = o_h * d.sh + k_h - d.ph;
                    let g_row = &g[(co * d.oh + o_h) * d.ow..(co * d.oh + o_h + 1) * d.ow];
                    for k_w in 0..d.kw {
                        let wv = wgt[((co * d.c_in + ci) * d.kh + k_h) * d.kw + k_w];
                        let (ow_lo, ow_hi) = valid_range(d.ow, d.w, d.sw, d.pw, k_w);
                        if ow_lo > ow_hi {
                            continue;
                        }
                        if d.sw == 1 {
                            let base = in_base + ih * d.w + ow_lo + k_w - d.pw;
                            for (b, gv) in buf[base..=base + ow_hi - ow_lo]
                                .iter_mut()
                                .zip(&g_row[ow_lo..=ow_hi])
                            {
                                *b += wv * gv;
                            }
                        } else {
                            for o_w in ow_lo..=ow_hi {
                                buf[in_base + ih * d.w + o_w * d.sw + k_w - d.pw] += wv * g_row[o_w];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_weight_grad(d: &ConvDims, g: &[f64], src: &[f64], buf: &mut [f64]) {
    if d.pointwise() {
        let plane = d.h * d.w;
        for co in 0..d.c_out {
            let g_ch = &g[co * plane..(co + 1) * plane];
            for ci in 0..d.c_in {
                let in_ch = &src[ci * plane..(ci + 1) * plane];
                buf[co * d.c_in + ci] += g_ch
                    .iter()
                    .zip(in_ch)
                    .map(|(gv, xv)| gv * xv)
                    .sum::<f64>();
            }
        }
        return;
    }
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            let in_ch = &src[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for k_h in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(d.oh, d.h, d.sh, d.ph, k_h);
                if oh_lo > oh_hi {
                    continue;
                }
                for k_w in 0..d.kw {
                    let (ow_lo, ow_hi) = valid_range(d.ow, d.w, d.sw, d.pw, k_w);
                    if ow_lo > ow_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for o_h in oh_lo..=oh_hi {
                        let ih = o_h * d.sh + k_h - d.ph;
                        let g_row = &g[(co * d.oh + o_h) * d.ow..(co * d.oh + o_h + 1) * d.ow];
                        let in_row = &in_ch[ih * d.w..ih * d.w + d.w];
                        if d.sw == 1 {
                            let base = ow_lo + k_w - d.pw;
                            acc += g_row[ow_lo..=ow_hi]
                                .iter()
                                .zip(&in_row[base..=base + ow_hi - ow_lo])
                                .map(|(gv, xv)| gv * xv)
                                .sum::<f64>();
                        } else {
                            for o_w in ow_lo..=ow_hi {
                                acc += g_row[o_w] * in_row[o_w * d.sw + k_w - d.pw];
                            }
                        }
                    }
                    buf[((co * d.c_in + ci) * d.kh + k_h) * d.kw + k_w] += acc;
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D convolution of `[C_in, H, W]` with `[C_out, C_in, kH, kW]`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Tensor, TensorError> {
        let in_shape = self.shape().to_vec();
        let w_shape = weight.shape().to_vec();
        if in_shape.len() != 3 {
            return Err(TensorError::BadRank {
                op: "conv2d input",
                expected: 3,
                shape: in_shape,
            });
        }
        if w_shape.len() != 4 {
            return Err(TensorError::BadRank {
                op: "conv2d weight",
                expected: 4,
                shape: w_shape,
            });
        }
        let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (c_out, wc_in, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: in_shape,
                right: w_shape,
            });
        }
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        if sh == 0 || sw == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                message: "stride must be >= 1".into(),
            });
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(TensorError::KernelTooLarge {
                kernel: vec![kh, kw],
                input: vec![h, w],
                padding: vec![ph, pw],
            });
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![c_out],
                    right: b.shape().to_vec(),
                });
            }
        }
        let dims = ConvDims {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            oh: (h + 2 * ph - kh) / sh + 1,
            ow: (w + 2 * pw - kw) / sw + 1,
        };

        let mut out = vec![0.0; c_out * dims.oh * dims.ow];
        if let Some(b) = bias {
            let bd = b.data();
            for co in 0..c_out {
                out[co * dims.oh * dims.ow..(co + 1) * dims.oh * dims.ow].fill(bd[co]);
            }
        }
        conv_forward(&dims, &self.data(), &weight.data(), &mut out);

        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![c_out, dims.oh, dims.ow],
            out,
            inputs,
            Box::new(move |g, _out, inputs| {
                let input = &inputs[0];
                let weight = &inputs[1];
                {
                    let wgt = weight.data();
                    input.with_grad_buf(|buf| conv_input_grad(&dims, g, &wgt, buf));
                }
                {
                    let src = input.data();
                    weight.with_grad_buf(|buf| conv_weight_grad(&dims, g, &src, buf));
                }
                if inputs.len() == 3 {
                    inputs[2].with_grad_buf(|buf| {
                        let plane = dims.oh * dims.ow;
                        for co in 0..dims.c_out {
                            buf[co] += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
                        }
                    });
                }
            }),
        ))
    }

    /// 1-D convolution of `[C_in, L]` with `[C_out, C_in, k]`; runs as a
    /// conv2d over `[C_in, L, 1]`.
    pub fn conv1d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        let in_shape = self.shape().to_vec();
        if in_shape.len() != 2 {
            return Err(TensorError::BadRank {
                op: "conv1d input",
                expected: 2,
                shape: in_shape,
            });
        }
        let w_shape = weight.shape().to_vec();
        if w_shape.len() != 3 {
            return Err(TensorError::BadRank {
                op: "conv1d weight",
                expected: 3,
                shape: w_shape,
            });
        }
        let as_rows = self.reshape(vec![in_shape[0], in_shape[1], 1])?;
        let w4 = weight.reshape(vec![w_shape[0], w_shape[1], w_shape[2], 1])?;
        let out = as_rows.conv2d(&w4, bias, (stride, 1), (padding, 0))?;
        let out_shape = out.shape().to_vec();
        out.reshape(vec![out_shape[0], out_shape[1]])
    }

    /// Upsample `[C, H, W]` along the temporal (H) axis by an integer factor.
    ///
    /// Linear mode aligns cell centers: output row `o` samples input
    /// coordinate `(o + 0.5) / factor - 0.5`, clamped to the valid range.
    pub fn upsample_temporal(&self, factor: usize, mode: InterpMode) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        if shape.len() != 3 {
            return Err(TensorError::BadRank {
                op: "upsample_temporal",
                expected: 3,
                shape,
            });
        }
        if factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_temporal",
                message: "factor must be >= 1".into(),
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let oh = h * factor;
        // (input row, weight) pairs per output row
        let taps: Vec<(usize, usize, f64)> = (0..oh)
            .map(|o| match mode {
                InterpMode::Nearest => (o / factor, o / factor, 0.0),
                InterpMode::Linear => {
                    let x = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                    let i0 = x.floor() as usize;
                    let i1 = (i0 + 1).min(h - 1);
                    (i0, i1, x - i0 as f64)
                }
            })
            .collect();
        let src = self.data();
        let mut out = vec![0.0; c * oh * w];
        for ch in 0..c {
            for (o, &(i0, i1, t)) in taps.iter().enumerate() {
                let dst = (ch * oh + o) * w;
                let r0 = (ch * h + i0) * w;
                let r1 = (ch * h + i1) * w;
                for k in 0..w {
                    out[dst + k] = (1.0 - t) * src[r0 + k] + t * src[r1 + k];
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![c, oh, w],
            out,
            vec![self.clone()],
            Box::new(move |g, _out, inputs| {
                inputs[0].with_grad_buf(|buf| {
                    for ch in 0..c {
                        for (o, &(i0, i1, t)) in taps.iter().enumerate() {
                            let src = (ch * oh + o) * w;
                            let r0 = (ch * h + i0) * w;
                            let r1 = (ch * h + i1) * w;
                            for k in 0..w {
                                buf[r0 + k] += (1.0 - t) * g[src + k];
                                buf[r1 + k] += t * g[src + k];
                            }
                        }
                    }
                });
            }),
        ))
    }
}
