use serde::{Deserialize, Serialize};

use super::{Layer, Mode};
use crate::error::{Error, Result};
use crate::params::{ParamSet, Role};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LayerKind {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    BatchNorm {
        num_features: usize,
        momentum: f64,
        epsilon: f64,
    },
    ReLU,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
}

#[derive(Debug)]
pub struct BnCache {
    pub(super) xhat: Vec<f64>,
    pub(super) inv_std: Vec<f64>,
    pub(super) batch_mean: Vec<f64>,
    pub(super) batch_var_unbiased: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Debug)]
pub enum LayerCache {
    Conv {
        input_shape: Vec<usize>,
        /// Per-sample im2col matrices, `[C*K*K, OH*OW]` each, concatenated.
        cols: Vec<f64>,
        out_hw: (usize, usize),
    },
    Dense {
        input: Tensor,
    },
    BatchNorm(BnCache),
    Relu {
        input: Tensor,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Reshape {
        input_shape: Vec<usize>,
    },
}

impl LayerKind {
    pub fn conv3x3(in_ch: usize, out_ch: usize) -> Self {
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn batch_norm(num_features: usize) -> Self {
        LayerKind::BatchNorm {
            num_features,
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "Conv2d",
            LayerKind::Dense { .. } => "Dense",
            LayerKind::BatchNorm { .. } => "BatchNorm",
            LayerKind::ReLU => "ReLU",
            LayerKind::MaxPool2d { .. } => "MaxPool2d",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::Flatten => "Flatten",
        }
    }

    /// Parameter (and running-statistic) tensors owned by this layer.
    pub fn param_shapes(&self) -> Vec<(Role, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![
                (Role::ConvW, vec![out_ch, in_ch, kernel, kernel]),
                (Role::ConvB, vec![out_ch]),
            ],
            LayerKind::Dense { in_dim, out_dim } => vec![
                (Role::FcW, vec![out_dim, in_dim]),
                (Role::FcB, vec![out_dim]),
            ],
            LayerKind::BatchNorm { num_features, .. } => vec![
                (Role::BnScale, vec![num_features]),
                (Role::BnShift, vec![num_features]),
                (Role::BnMean, vec![num_features]),
                (Role::BnVar, vec![num_features]),
            ],
            _ => Vec::new(),
        }
    }

    pub(super) fn expected_input(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Conv2d { in_ch, .. } => Some(vec![in_ch]),
            LayerKind::Dense { in_dim, .. } => Some(vec![in_dim]),
            LayerKind::BatchNorm { num_features, .. } => Some(vec![num_features]),
            _ => None,
        }
    }

    /// Per-sample output shape, or a description of why `input` is invalid.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => match *input {
                [c, h, w] if c == in_ch => {
                    let (oh, ow) = conv_out(h, w, kernel, stride, padding)
                        .ok_or_else(|| "kernel larger than padded input".to_string())?;
                    Ok(vec![out_ch, oh, ow])
                }
                _ => Err(format!("expected [{in_ch}, H, W]")),
            },
            LayerKind::Dense { in_dim, out_dim } => match *input {
                [d] if d == in_dim => Ok(vec![out_dim]),
                _ => Err(format!("expected [{in_dim}]")),
            },
            LayerKind::BatchNorm { num_features, .. } => match input.first() {
                Some(&c) if c == num_features && (input.len() == 1 || input.len() == 3) => {
                    Ok(input.to_vec())
                }
                _ => Err(format!("expected [{num_features}] or [{num_features}, H, W]")),
            },
            LayerKind::ReLU => Ok(input.to_vec()),
            LayerKind::MaxPool2d { kernel, stride } => match *input {
                [c, h, w] if h >= kernel && w >= kernel => {
                    Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
                }
                _ => Err("expected [C, H, W] at least kernel-sized".into()),
            },
            LayerKind::GlobalAvgPool => match *input {
                [c, _, _] => Ok(vec![c]),
                _ => Err("expected [C, H, W]".into()),
            },
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn check_input(&self, layer: &Layer, x: &Tensor) -> Result<Vec<usize>> {
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                layer: layer.name(),
                expected: self.expected_input().unwrap_or_default(),
                actual: shape.to_vec(),
            });
        }
        self.output_shape(&shape[1..])
            .map_err(|msg| Error::ShapeMismatch {
                layer: format!("{} {msg}", layer.name()),
                expected: self.expected_input().unwrap_or_default(),
                actual: shape.to_vec(),
            })
    }

    pub(super) fn forward(
        &self,
        layer: &Layer,
        params: &ParamSet,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, LayerCache)> {
        let out_sample = self.check_input(layer, x)?;
        let n = x.shape()[0];
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&out_sample);
        let keep = mode == Mode::Train;
        match *self {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let w = params.require(&layer.id(Role::ConvW))?;
                let b = params.require(&layer.id(Role::ConvB))?;
                let (h, wd) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out_sample[1], out_sample[2]);
                let ckk = in_ch * kernel * kernel;
                let ohw = oh * ow;
                let mut out = vec![0.0; n * out_ch * ohw];
                let mut cols = vec![0.0; if keep { n * ckk * ohw } else { ckk * ohw }];
                let geo = ConvGeom {
                    c: in_ch,
                    h,
                    w: wd,
                    k: kernel,
                    stride,
                    pad: padding,
                    oh,
                    ow,
                };
                for s in 0..n {
                    let col = if keep {
                        &mut cols[s * ckk * ohw..(s + 1) * ckk * ohw]
                    } else {
                        &mut cols[..]
                    };
                    let img = &x.data()[s * in_ch * h * wd..(s + 1) * in_ch * h * wd];
                    im2col(img, &geo, col);
                    let o = &mut out[s * out_ch * ohw..(s + 1) * out_ch * ohw];
                    for (oc, row) in o.chunks_exact_mut(ohw).enumerate() {
                        row.fill(b.data()[oc]);
                    }
                    gemm(w.data(), false, col, false, out_ch, ckk, ohw, o, true);
                }
                let cache = LayerCache::Conv {
                    input_shape: x.shape().to_vec(),
                    cols: if keep { cols } else { Vec::new() },
                    out_hw: (oh, ow),
                };
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerKind::Dense { in_dim, out_dim } => {
                let w = params.require(&layer.id(Role::FcW))?;
                let b = params.require(&layer.id(Role::FcB))?;
                let mut out = Vec::with_capacity(n * out_dim);
                for _ in 0..n {
                    out.extend_from_slice(b.data());
                }
                gemm(x.data(), false, w.data(), true, n, in_dim, out_dim, &mut out, true);
                let cache = LayerCache::Dense {
                    input: if keep { x.clone() } else { Tensor::scalar(0.0) },
                };
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerKind::BatchNorm {
                num_features,
                epsilon,
                ..
            } => {
                let c = num_features;
                let spatial: usize = x.shape()[2..].iter().product();
                let scale = params.require(&layer.id(Role::BnScale))?.data();
                let shift = params.require(&layer.id(Role::BnShift))?.data();
                let (mean, var) = if keep {
                    channel_stats(x.data(), n, c, spatial)
                } else {
                    (
                        params.require(&layer.id(Role::BnMean))?.data().to_vec(),
                        params.require(&layer.id(Role::BnVar))?.data().to_vec(),
                    )
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                let mut xhat = vec![0.0; x.len()];
                let mut out = vec![0.0; x.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        for i in base..base + spatial {
                            let z = (x.data()[i] - mean[ch]) * inv_std[ch];
                            xhat[i] = z;
                            out[i] = scale[ch] * z + shift[ch];
                        }
                    }
                }
                let m = (n * spatial) as f64;
                let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let cache = if keep {
                    LayerCache::BatchNorm(BnCache {
                        xhat,
                        inv_std,
                        batch_var_unbiased: var.iter().map(|v| v * unbiased).collect(),
                        batch_mean: mean,
                        shape: x.shape().to_vec(),
                    })
                } else {
                    LayerCache::Reshape {
                        input_shape: Vec::new(),
                    }
                };
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerKind::ReLU => {
                let y = x.map(|v| v.max(0.0));
                let cache = LayerCache::Relu {
                    input: if keep { x.clone() } else { Tensor::scalar(0.0) },
                };
                Ok((y, cache))
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out_sample[1], out_sample[2]);
                let mut out = vec![0.0; n * c * oh * ow];
                let mut argmax = vec![0usize; if keep { out.len() } else { 0 }];
                let d = x.data();
                for plane in 0..n * c {
                    let src = plane * h * w;
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_at = src;
                            for di in 0..kernel {
                                for dj in 0..kernel {
                                    let at = src + (i * stride + di) * w + j * stride + dj;
                                    if d[at] > best {
                                        best = d[at];
                                        best_at = at;
                                    }
                                }
                            }
                            let o = (plane * oh + i) * ow + j;
                            out[o] = best;
                            if keep {
                                argmax[o] = best_at;
                            }
                        }
                    }
                }
                let cache = LayerCache::MaxPool {
                    input_shape: x.shape().to_vec(),
                    argmax,
                };
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerKind::GlobalAvgPool => {
                let c = x.shape()[1];
                let spatial: usize = x.shape()[2..].iter().product();
                let out: Vec<f64> = x
                    .data()
                    .chunks_exact(spatial)
                    .map(|p| p.iter().sum::<f64>() / spatial as f64)
                    .collect();
                debug_assert_eq!(out.len(), n * c);
                let cache = LayerCache::Reshape {
                    input_shape: x.shape().to_vec(),
                };
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            LayerKind::Flatten => {
                let cache = LayerCache::Reshape {
                    input_shape: x.shape().to_vec(),
                };
                Ok((x.clone().reshape(&out_shape)?, cache))
            }
        }
    }

    pub(super) fn backward(
        &self,
        layer: &Layer,
        params: &ParamSet,
        cache: &LayerCache,
        g: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<Tensor> {
        let mismatch = || Error::CacheMismatch(format!("{} has no matching cache", layer.name()));
        match (self, cache) {
            (
                &LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                },
                LayerCache::Conv {
                    input_shape,
                    cols,
                    out_hw: (oh, ow),
                },
            ) => {
                let n = input_shape[0];
                let (h, wd) = (input_shape[2], input_shape[3]);
                let ohw = oh * ow;
                let ckk = in_ch * kernel * kernel;
                check_grad(layer, g, &[n, out_ch, *oh, *ow])?;
                let w = params.require(&layer.id(Role::ConvW))?;
                let mut gw = vec![0.0; out_ch * ckk];
                let mut gb = vec![0.0; out_ch];
                let mut gx = vec![0.0; n * in_ch * h * wd];
                let mut gcol = vec![0.0; ckk * ohw];
                let geo = ConvGeom {
                    c: in_ch,
                    h,
                    w: wd,
                    k: kernel,
                    stride,
                    pad: padding,
                    oh: *oh,
                    ow: *ow,
                };
                for s in 0..n {
                    let go = &g.data()[s * out_ch * ohw..(s + 1) * out_ch * ohw];
                    let col = &cols[s * ckk * ohw..(s + 1) * ckk * ohw];
                    gemm(go, false, col, true, out_ch, ohw, ckk, &mut gw, true);
                    for (oc, row) in go.chunks_exact(ohw).enumerate() {
                        gb[oc] += row.iter().sum::<f64>();
                    }
                    gemm(w.data(), true, go, false, ckk, out_ch, ohw, &mut gcol, false);
                    let img = &mut gx[s * in_ch * h * wd..(s + 1) * in_ch * h * wd];
                    col2im(&gcol, &geo, img);
                }
                grads.insert(
                    layer.id(Role::ConvW),
                    Tensor::new(vec![out_ch, in_ch, kernel, kernel], gw)?,
                );
                grads.insert(layer.id(Role::ConvB), Tensor::new(vec![out_ch], gb)?);
                Tensor::new(input_shape.clone(), gx)
            }
            (&LayerKind::Dense { in_dim, out_dim }, LayerCache::Dense { input }) => {
                let n = input.shape()[0];
                check_grad(layer, g, &[n, out_dim])?;
                let w = params.require(&layer.id(Role::FcW))?;
                let mut gw = vec![0.0; out_dim * in_dim];
                gemm(g.data(), true, input.data(), false, out_dim, n, in_dim, &mut gw, false);
                let mut gb = vec![0.0; out_dim];
                for row in g.data().chunks_exact(out_dim) {
                    for (a, b) in gb.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                let mut gx = vec![0.0; n * in_dim];
                gemm(g.data(), false, w.data(), false, n, out_dim, in_dim, &mut gx, false);
                grads.insert(layer.id(Role::FcW), Tensor::new(vec![out_dim, in_dim], gw)?);
                grads.insert(layer.id(Role::FcB), Tensor::new(vec![out_dim], gb)?);
                Tensor::new(input.shape().to_vec(), gx)
            }
            (&LayerKind::BatchNorm { num_features, .. }, LayerCache::BatchNorm(bn)) => {
                check_grad(layer, g, &bn.shape)?;
                let c = num_features;
                let n = bn.shape[0];
                let spatial: usize = bn.shape[2..].iter().product();
                let m = (n * spatial) as f64;
                let scale = params.require(&layer.id(Role::BnScale))?.data();
                let mut gscale = vec![0.0; c];
                let mut gshift = vec![0.0; c];
                let gd = g.data();
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        for i in base..base + spatial {
                            gshift[ch] += gd[i];
                            gscale[ch] += gd[i] * bn.xhat[i];
                        }
                    }
                }
                let mut gx = vec![0.0; gd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let k = scale[ch] * bn.inv_std[ch] / m;
                        let base = (s * c + ch) * spatial;
                        for i in base..base + spatial {
                            gx[i] = k * (m * gd[i] - gshift[ch] - bn.xhat[i] * gscale[ch]);
                        }
                    }
                }
                grads.insert(layer.id(Role::BnScale), Tensor::new(vec![c], gscale)?);
                grads.insert(layer.id(Role::BnShift), Tensor::new(vec![c], gshift)?);
                Tensor::new(bn.shape.clone(), gx)
            }
            (LayerKind::ReLU, LayerCache::Relu { input }) => {
                check_grad(layer, g, input.shape())?;
                let data = input
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                    .collect();
                Tensor::new(input.shape().to_vec(), data)
            }
            (LayerKind::MaxPool2d { .. }, LayerCache::MaxPool { input_shape, argmax }) => {
                if g.len() != argmax.len() {
                    return Err(mismatch());
                }
                let mut gx = vec![0.0; input_shape.iter().product()];
                for (&at, &gy) in argmax.iter().zip(g.data()) {
                    gx[at] += gy;
                }
                Tensor::new(input_shape.clone(), gx)
            }
            (LayerKind::GlobalAvgPool, LayerCache::Reshape { input_shape }) if input_shape.len() == 4 => {
                let spatial: usize = input_shape[2..].iter().product();
                check_grad(layer, g, &input_shape[..2])?;
                let mut gx = Vec::with_capacity(input_shape.iter().product());
                for &gy in g.data() {
                    gx.extend(std::iter::repeat_n(gy / spatial as f64, spatial));
                }
                Tensor::new(input_shape.clone(), gx)
            }
            (LayerKind::Flatten, LayerCache::Reshape { input_shape }) if !input_shape.is_empty() => {
                g.clone().reshape(input_shape)
            }
            _ => Err(mismatch()),
        }
    }
}

fn check_grad(layer: &Layer, g: &Tensor, expected: &[usize]) -> Result<()> {
    if g.shape() != expected {
        return Err(Error::ShapeMismatch {
            layer: format!("{} (upstream gradient)", layer.name()),
            expected: expected.to_vec(),
            actual: g.shape().to_vec(),
        });
    }
    Ok(())
}

fn conv_out(h: usize, w: usize, k: usize, s: usize, p: usize) -> Option<(usize, usize)> {
    if h + 2 * p < k || w + 2 * p < k || s == 0 {
        return None;
    }
    Some(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
}

/// Biased per-channel mean and variance over batch and spatial positions.
fn channel_stats(x: &[f64], n: usize, c: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            mean[ch] += x[base..base + spatial].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            var[ch] += x[base..base + spatial]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Unfolds one `[C, H, W]` image into `[C*K*K, OH*OW]`.
fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for i in 0..g.oh {
                    let y = (i * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[i * g.ow..(i + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(ch * g.h + y as usize) * g.w..(ch * g.h + y as usize + 1) * g.w];
                    for (j, v) in line.iter_mut().enumerate() {
                        let x = (j * g.stride + kj) as isize - g.pad as isize;
                        *v = if x < 0 || x >= g.w as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `[C*K*K, OH*OW]` back into `[C, H, W]`.
fn col2im(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let src = &col[row * ohw..(row + 1) * ohw];
                for i in 0..g.oh {
                    let y = (i * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = (ch * g.h + y as usize) * g.w;
                    for j in 0..g.ow {
                        let x = (j * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            img[base + x as usize] += src[i * g.ow + j];
                        }
                    }
                }
            }
        }
    }
}
