//! Network-layer primitives: convolution, normalization, attention.

use std::sync::Arc;

use super::ops::record;
use super::Tensor;
use crate::{Error, Result};

impl Tensor {
    /// 2-D cross-correlation with zero padding that preserves spatial extents.
    /// Input `[c_in, h, w]`, kernel `[c_out, c_in, k, k]` with k in {1, 3}.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        let (sx, sk) = (self.shape(), kernel.shape());
        if sx.len() != 3 || sk.len() != 4 {
            return Err(Error::shape(format!("conv2d: input {sx:?}, kernel {sk:?}")));
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let (c_out, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv2d: kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape(format!("conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")));
        }
        let pad = (kh - 1) / 2;
        let x = self.data();
        let k = kernel.data();
        let mut out = vec![0.0; c_out * h * w];
        let kisz = kh * kw;
        for o in 0..c_out {
            for i in 0..c_in {
                let kbase = (o * c_in + i) * kisz;
                let xbase = i * h * w;
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for dy in 0..kh {
                            let yy = y + dy;
                            if yy < pad || yy - pad >= h {
                                continue;
                            }
                            for dx in 0..kw {
                                let xc = xx + dx;
                                if xc < pad || xc - pad >= w {
                                    continue;
                                }
                                acc += x[xbase + (yy - pad) * w + (xc - pad)]
                                    * k[kbase + dy * kw + dx];
                            }
                        }
                        out[(o * h + y) * w + xx] += acc;
                    }
                }
            }
        }
        let (xd, kd) = (self.data_arc(), kernel.data_arc());
        let kd2 = kd.clone();
        let xd2 = xd.clone();
        Ok(record(
            &[self, kernel],
            vec![c_out, h, w],
            out,
            vec![
                // d/dx: scatter grad through the kernel
                Box::new(move |g: &[f64]| {
                    let mut gx = vec![0.0; c_in * h * w];
                    for o in 0..c_out {
                        for i in 0..c_in {
                            let kbase = (o * c_in + i) * kisz;
                            for y in 0..h {
                                for xx in 0..w {
                                    let gv = g[(o * h + y) * w + xx];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for dy in 0..kh {
                                        let yy = y + dy;
                                        if yy < pad || yy - pad >= h {
                                            continue;
                                        }
                                        for dx in 0..kw {
                                            let xc = xx + dx;
                                            if xc < pad || xc - pad >= w {
                                                continue;
                                            }
                                            gx[(i * h + (yy - pad)) * w + (xc - pad)] +=
                                                gv * kd2[kbase + dy * kw + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    gx
                }),
                // d/dk: correlate input with grad
                Box::new(move |g: &[f64]| {
                    let mut gk = vec![0.0; c_out * c_in * kisz];
                    for o in 0..c_out {
                        for i in 0..c_in {
                            let kbase = (o * c_in + i) * kisz;
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let mut acc = 0.0;
                                    for y in 0..h {
                                        let yy = y + dy;
                                        if yy < pad || yy - pad >= h {
                                            continue;
                                        }
                                        for xx in 0..w {
                                            let xc = xx + dx;
                                            if xc < pad || xc - pad >= w {
                                                continue;
                                            }
                                            acc += g[(o * h + y) * w + xx]
                                                * xd2[(i * h + (yy - pad)) * w + (xc - pad)];
                                        }
                                    }
                                    gk[kbase + dy * kw + dx] = acc;
                                }
                            }
                        }
                    }
                    gk
                }),
            ],
        ))
    }

    /// Add a per-channel bias to a `[c, h, w]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || bias.shape() != [s[0]] {
            return Err(Error::shape(format!(
                "add_channel_bias: input {s:?}, bias {:?}",
                bias.shape()
            )));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let b = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i / hw])
            .collect();
        Ok(record(
            &[self, bias],
            s.to_vec(),
            data,
            vec![
                Box::new(|g: &[f64]| g.to_vec()),
                Box::new(move |g: &[f64]| {
                    (0..c).map(|ch| g[ch * hw..(ch + 1) * hw].iter().sum()).collect()
                }),
            ],
        ))
    }

    /// Add a length-d bias to every row of an `[n, d]` tensor.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(Error::shape(format!(
                "add_row_bias: input {s:?}, bias {:?}",
                bias.shape()
            )));
        }
        let (n, d) = (s[0], s[1]);
        let b = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        Ok(record(
            &[self, bias],
            s.to_vec(),
            data,
            vec![
                Box::new(|g: &[f64]| g.to_vec()),
                Box::new(move |g: &[f64]| {
                    let mut gb = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                    gb
                }),
            ],
        ))
    }

    /// Multiply every row of an `[n, d]` tensor by a length-d vector.
    pub fn mul_row_vec(&self, v: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || v.shape() != [s[1]] {
            return Err(Error::shape(format!(
                "mul_row_vec: input {s:?}, vector {:?}",
                v.shape()
            )));
        }
        let (n, d) = (s[0], s[1]);
        let vd = v.data_arc();
        let xd = self.data_arc();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vd[i % d])
            .collect();
        let vd2 = vd.clone();
        Ok(record(
            &[self, v],
            s.to_vec(),
            data,
            vec![
                Box::new(move |g: &[f64]| {
                    g.iter().enumerate().map(|(i, g)| g * vd2[i % d]).collect()
                }),
                Box::new(move |g: &[f64]| {
                    let mut gv = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            gv[j] += g[i * d + j] * xd[i * d + j];
                        }
                    }
                    gv
                }),
            ],
        ))
    }

    /// Group normalization over a `[c, h, w]` tensor with per-channel affine.
    pub fn groupnorm(&self, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("groupnorm: expected [c,h,w], got {s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        if c % groups != 0 {
            return Err(Error::shape(format!("groupnorm: {c} channels not divisible by {groups} groups")));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("groupnorm: affine params must have shape [c]".to_string()));
        }
        let gsz = (c / groups) * hw;
        norm_impl(self, gamma, beta, eps, gsz, hw)
    }

    /// Layer normalization over the last axis of an `[n, d]` tensor.
    pub fn layernorm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("layernorm: expected [n,d], got {s:?}")));
        }
        let d = s[1];
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layernorm: affine params must have shape [d]".to_string()));
        }
        norm_impl(self, gamma, beta, eps, d, 1)
    }
}

/// Shared normalize-then-affine kernel. Elements are grouped in contiguous
/// runs of `group_size`; the affine parameter index for element i is
/// `(i / affine_stride) % affine_len`.
fn norm_impl(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    group_size: usize,
    affine_stride: usize,
) -> Result<Tensor> {
    let n = x.len();
    let n_groups = n / group_size;
    let affine_len = gamma.len();
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();

    let mut xhat = vec![0.0; n];
    let mut inv_std = vec![0.0; n_groups];
    for g in 0..n_groups {
        let seg = &xd[g * group_size..(g + 1) * group_size];
        let mu = seg.iter().sum::<f64>() / group_size as f64;
        let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / group_size as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[g] = istd;
        for (j, v) in seg.iter().enumerate() {
            xhat[g * group_size + j] = (v - mu) * istd;
        }
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        let a = (i / affine_stride) % affine_len;
        out[i] = gd[a] * xhat[i] + bd[a];
    }

    let xhat = Arc::new(xhat);
    let inv_std = Arc::new(inv_std);
    let gamma_d = gamma.data_arc();
    let (xh1, is1, gm1) = (xhat.clone(), inv_std.clone(), gamma_d.clone());
    let xh2 = xhat;
    Ok(record(
        &[x, gamma, beta],
        x.shape().to_vec(),
        out,
        vec![
            Box::new(move |g: &[f64]| {
                let mut gx = vec![0.0; n];
                let m = group_size as f64;
                for grp in 0..(n / group_size) {
                    let base = grp * group_size;
                    let mut sum_gh = 0.0;
                    let mut sum_ghx = 0.0;
                    for j in 0..group_size {
                        let i = base + j;
                        let a = (i / affine_stride) % affine_len;
                        let gh = g[i] * gm1[a];
                        sum_gh += gh;
                        sum_ghx += gh * xh1[i];
                    }
                    let istd = is1[grp];
                    for j in 0..group_size {
                        let i = base + j;
                        let a = (i / affine_stride) % affine_len;
                        let gh = g[i] * gm1[a];
                        gx[i] = istd * (gh - sum_gh / m - xh1[i] * sum_ghx / m);
                    }
                }
                gx
            }),
            Box::new(move |g: &[f64]| {
                let mut gg = vec![0.0; affine_len];
                for i in 0..n {
                    gg[(i / affine_stride) % affine_len] += g[i] * xh2[i];
                }
                gg
            }),
            Box::new(move |g: &[f64]| {
                let mut gb = vec![0.0; affine_len];
                for i in 0..n {
                    gb[(i / affine_stride) % affine_len] += g[i];
                }
                gb
            }),
        ],
    ))
}

/// x W + b over token rows.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_row_bias(b)
}

/// Single-head scaled dot-product self-attention over `[n, d]` tokens.
pub fn self_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor) -> Result<Tensor> {
    attention(x, x, wq, wk, wv, wo)
}

/// Single-head cross-attention: queries from `x` `[n, d]`, keys/values from
/// `ctx` `[m, d_ctx]`.
pub fn cross_attention(
    x: &Tensor,
    ctx: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
) -> Result<Tensor> {
    attention(x, ctx, wq, wk, wv, wo)
}

fn attention(x: &Tensor, kv: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor) -> Result<Tensor> {
    let q = x.matmul(wq)?;
    let k = kv.matmul(wk)?;
    let v = kv.matmul(wv)?;
    let d = q.shape()[1] as f64;
    let scores = q.matmul(&k.transpose()?)?.mul_scalar(1.0 / d.sqrt());
    let attn = scores.softmax_rows()?;
    attn.matmul(&v)?.matmul(wo)
}

/// Two-layer feed-forward with GELU.
pub fn mlp(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    linear(&linear(x, w1, b1)?.gelu(), w2, b2)
}
