//! Layer vocabulary with explicit forward/backward passes.
//!
//! Inputs to convolution and pooling are [channels, height, width]; dense
//! layers take flat vectors. All gradients are exact reverse-mode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// weight [out_c, in_c, kh, kw], bias [out_c]; valid padding.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
    },
    /// weight [out, in], bias [out].
    Dense { weight: Tensor, bias: Tensor },
    Relu,
    MaxPool { size: usize, stride: usize },
    Flatten,
}

impl Layer {
    pub fn conv2d(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Layer {
        // He-uniform for conv layers feeding relu.
        let fan_in = (in_c * k * k) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let n = out_c * in_c * k * k;
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        Layer::Conv2d {
            weight: Tensor::from_vec(&[out_c, in_c, k, k], data).unwrap(),
            bias: Tensor::zeros(&[out_c]),
            stride,
        }
    }

    pub fn dense(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Layer {
        // Xavier-uniform for dense layers.
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Layer::Dense {
            weight: Tensor::from_vec(&[out_dim, in_dim], data).unwrap(),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Flatten => "flatten",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                weight.numel() + bias.numel()
            }
            _ => 0,
        }
    }

    /// A zero-filled copy used as the gradient accumulator.
    pub fn zeros_like(&self) -> Layer {
        match self {
            Layer::Conv2d { weight, bias, stride } => Layer::Conv2d {
                weight: weight.zeros_like(),
                bias: bias.zeros_like(),
                stride: *stride,
            },
            Layer::Dense { weight, bias } => Layer::Dense {
                weight: weight.zeros_like(),
                bias: bias.zeros_like(),
            },
            other => other.clone(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d { weight, stride, .. } => {
                let [oc, ic, kh, kw] = [
                    weight.shape()[0],
                    weight.shape()[1],
                    weight.shape()[2],
                    weight.shape()[3],
                ];
                if input.len() != 3 || input[0] != ic || input[1] < kh || input[2] < kw {
                    return Err(shape_err("conv2d", &format!("[{ic}, >={kh}, >={kw}]"), input));
                }
                Ok(vec![
                    oc,
                    (input[1] - kh) / stride + 1,
                    (input[2] - kw) / stride + 1,
                ])
            }
            Layer::Dense { weight, .. } => {
                let n: usize = input.iter().product();
                if n != weight.shape()[1] {
                    return Err(shape_err(
                        "dense",
                        &format!("{} inputs", weight.shape()[1]),
                        input,
                    ));
                }
                Ok(vec![weight.shape()[0]])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { size, stride } => {
                if input.len() != 3 || input[1] < *size || input[2] < *size {
                    return Err(shape_err("maxpool", "[c, >=size, >=size]", input));
                }
                Ok(vec![
                    input[0],
                    (input[1] - size) / stride + 1,
                    (input[2] - size) / stride + 1,
                ])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn shape_err(layer: &str, expected: &str, got: &[usize]) -> Error {
    Error::Shape {
        layer: layer.to_string(),
        expected: expected.to_string(),
        got: format!("{got:?}"),
    }
}

/// Per-layer forward record needed by the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    /// Saved input for conv/dense/relu.
    Input(Tensor),
    /// Input shape plus the flat argmax index of each pooled output.
    Pool { in_shape: Vec<usize>, argmax: Vec<usize> },
    /// Input shape only (flatten).
    Shape(Vec<usize>),
}

pub fn layer_forward(layer: &Layer, x: &Tensor) -> Result<(Tensor, LayerCache)> {
    match layer {
        Layer::Conv2d { weight, bias, stride } => {
            let out_shape = layer.output_shape(x.shape())?;
            let (oc, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
            let (ic, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
            let mut out = Tensor::zeros(&out_shape);
            let w = weight.data();
            let b = bias.data();
            let xd = x.data();
            let od = out.data_mut();
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for i in 0..ic {
                            let wbase = ((o * ic + i) * kh) * kw;
                            let xbase = i * ih * iw;
                            for ky in 0..kh {
                                let xrow = xbase + (oy * stride + ky) * iw + ox * stride;
                                let wrow = wbase + ky * kw;
                                for kx in 0..kw {
                                    acc += w[wrow + kx] * xd[xrow + kx];
                                }
                            }
                        }
                        od[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            Ok((out, LayerCache::Input(x.clone())))
        }
        Layer::Dense { weight, bias } => {
            layer.output_shape(x.shape())?;
            let (on, inn) = (weight.shape()[0], weight.shape()[1]);
            let mut out = Tensor::zeros(&[on]);
            let w = weight.data();
            let xd = x.data();
            let od = out.data_mut();
            for o in 0..on {
                let row = &w[o * inn..(o + 1) * inn];
                let mut acc = bias.data()[o];
                for (wi, xi) in row.iter().zip(xd) {
                    acc += wi * xi;
                }
                od[o] = acc;
            }
            Ok((out, LayerCache::Input(x.clone())))
        }
        Layer::Relu => {
            let mut out = x.clone();
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok((out, LayerCache::Input(x.clone())))
        }
        Layer::MaxPool { size, stride } => {
            let out_shape = layer.output_shape(x.shape())?;
            let (c, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
            let (ih, iw) = (x.shape()[1], x.shape()[2]);
            let mut out = Tensor::zeros(&out_shape);
            let mut argmax = vec![0usize; c * oh * ow];
            let xd = x.data();
            let od = out.data_mut();
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ky in 0..*size {
                            for kx in 0..*size {
                                let idx =
                                    ch * ih * iw + (oy * stride + ky) * iw + ox * stride + kx;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let oidx = (ch * oh + oy) * ow + ox;
                        od[oidx] = best;
                        argmax[oidx] = best_idx;
                    }
                }
            }
            Ok((
                out,
                LayerCache::Pool {
                    in_shape: x.shape().to_vec(),
                    argmax,
                },
            ))
        }
        Layer::Flatten => {
            let out = Tensor::from_vec(&[x.numel()], x.data().to_vec())?;
            Ok((out, LayerCache::Shape(x.shape().to_vec())))
        }
    }
}

/// Returns (input gradient, parameter gradient layer).
pub fn layer_backward(
    layer: &Layer,
    cache: &LayerCache,
    dy: &Tensor,
) -> Result<(Tensor, Layer)> {
    match (layer, cache) {
        (Layer::Conv2d { weight, stride, .. }, LayerCache::Input(x)) => {
            let (ic, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oc, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
            let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
            let mut dx = x.zeros_like();
            let mut dw = weight.zeros_like();
            let mut db = Tensor::zeros(&[oc]);
            let w = weight.data();
            let xd = x.data();
            let dyd = dy.data();
            {
                let dwd = dw.data_mut();
                let dbd = db.data_mut();
                let dxd = dx.data_mut();
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dyd[(o * oh + oy) * ow + ox];
                            dbd[o] += g;
                            for i in 0..ic {
                                let wbase = ((o * ic + i) * kh) * kw;
                                let xbase = i * ih * iw;
                                for ky in 0..kh {
                                    let xrow = xbase + (oy * stride + ky) * iw + ox * stride;
                                    let wrow = wbase + ky * kw;
                                    for kx in 0..kw {
                                        dwd[wrow + kx] += g * xd[xrow + kx];
                                        dxd[xrow + kx] += g * w[wrow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok((
                dx,
                Layer::Conv2d {
                    weight: dw,
                    bias: db,
                    stride: *stride,
                },
            ))
        }
        (Layer::Dense { weight, .. }, LayerCache::Input(x)) => {
            let (on, inn) = (weight.shape()[0], weight.shape()[1]);
            let mut dx = Tensor::zeros(&[inn]);
            let mut dw = weight.zeros_like();
            let db = Tensor::from_vec(&[on], dy.data().to_vec())?;
            let w = weight.data();
            let xd = x.data();
            let dyd = dy.data();
            {
                let dxd = dx.data_mut();
                let dwd = dw.data_mut();
                for o in 0..on {
                    let g = dyd[o];
                    let wrow = &w[o * inn..(o + 1) * inn];
                    let dwrow = &mut dwd[o * inn..(o + 1) * inn];
                    for i in 0..inn {
                        dwrow[i] += g * xd[i];
                        dxd[i] += g * wrow[i];
                    }
                }
            }
            Ok((dx, Layer::Dense { weight: dw, bias: db }))
        }
        (Layer::Relu, LayerCache::Input(x)) => {
            let mut dx = dy.clone();
            for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
                if *v <= 0.0 {
                    *d = 0.0;
                }
            }
            Ok((dx, Layer::Relu))
        }
        (Layer::MaxPool { size, stride }, LayerCache::Pool { in_shape, argmax }) => {
            let mut dx = Tensor::zeros(in_shape);
            let dxd = dx.data_mut();
            for (oidx, &iidx) in argmax.iter().enumerate() {
                dxd[iidx] += dy.data()[oidx];
            }
            Ok((
                dx,
                Layer::MaxPool {
                    size: *size,
                    stride: *stride,
                },
            ))
        }
        (Layer::Flatten, LayerCache::Shape(shape)) => {
            let dx = Tensor::from_vec(shape, dy.data().to_vec())?;
            Ok((dx, Layer::Flatten))
        }
        _ => Err(Error::Contract(format!(
            "stale activation cache for layer {}",
            layer.name()
        ))),
    }
}

/// A straight-line stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct SeqCache {
    caches: Vec<LayerCache>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Sequential {
        Sequential { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, SeqCache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, cache) = layer_forward(layer, &cur)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, SeqCache { caches }))
    }

    /// Forward without keeping activation records.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, _) = layer_forward(layer, &cur)?;
            cur = next;
        }
        Ok(cur)
    }

    /// Returns (input gradient, per-layer parameter gradients).
    pub fn backward(&self, cache: &SeqCache, dy: &Tensor) -> Result<(Tensor, Sequential)> {
        if cache.caches.len() != self.layers.len() {
            return Err(Error::Contract("cache does not match this stack".into()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut cur = dy.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.caches).rev() {
            let (dx, g) = layer_backward(layer, lc, &cur)?;
            grads.push(g);
            cur = dx;
        }
        grads.reverse();
        Ok((cur, Sequential { layers: grads }))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn zeros_like(&self) -> Sequential {
        Sequential {
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut cur = input.to_vec();
        for layer in &self.layers {
            cur = layer.output_shape(&cur)?;
        }
        Ok(cur)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }
}
