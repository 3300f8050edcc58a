//! Layer descriptors and their forward and backward rules.
//!
//! Spatial tensors use height-width-channel layout. Rank-2 inputs to
//! pooling are treated as single-channel maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
    /// Zero padding keeping the spatial size (odd kernels only).
    Same,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = W x` with `weight` of shape `[out, in]`.
    Dense { weight: Tensor },
    /// Stride-1 convolution, `weight` of shape `[out_c, k, k, in_c]`.
    Conv2d { weight: Tensor, padding: Padding },
    /// Adds `bias` (shape `[channels]`) along the last axis.
    BiasAdd { bias: Tensor },
    Relu,
    Sigmoid,
    /// Softmax along the last axis.
    Softmax,
    /// Elementwise square.
    Square,
    MaxPool2d { size: usize, stride: usize },
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::BiasAdd { .. } => "bias_add",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Softmax => "softmax",
            Layer::Square => "square",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::Flatten => "flatten",
        }
    }

    /// Weight tensors owned by this layer, in serialization order.
    pub fn weights(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight } | Layer::Conv2d { weight, .. } => vec![weight],
            Layer::BiasAdd { bias } => vec![bias],
            _ => Vec::new(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: &[usize]| Error::shape(self.kind(), expected, input);
        match self {
            Layer::Dense { weight } => {
                let ws = weight.shape();
                if ws.len() != 2 {
                    return Err(Error::InvalidArgument("dense weight must be rank 2".into()));
                }
                if input != [ws[1]] {
                    return Err(bad(&[ws[1]]));
                }
                Ok(vec![ws[0]])
            }
            Layer::Conv2d { weight, padding } => {
                let ws = weight.shape();
                if ws.len() != 4 || ws[1] != ws[2] {
                    return Err(Error::InvalidArgument(
                        "conv2d weight must have shape [out_c, k, k, in_c]".into(),
                    ));
                }
                let (k, in_c) = (ws[1], ws[3]);
                if input.len() != 3 || input[2] != in_c {
                    return Err(bad(&[0, 0, in_c]));
                }
                match padding {
                    Padding::Valid => {
                        if input[0] < k || input[1] < k {
                            return Err(bad(&[k, k, in_c]));
                        }
                        Ok(vec![input[0] - k + 1, input[1] - k + 1, ws[0]])
                    }
                    Padding::Same => {
                        if k % 2 == 0 {
                            return Err(Error::InvalidArgument(
                                "same padding needs an odd kernel".into(),
                            ));
                        }
                        Ok(vec![input[0], input[1], ws[0]])
                    }
                }
            }
            Layer::BiasAdd { bias } => {
                if input.last() != Some(&bias.len()) || bias.shape().len() != 1 {
                    return Err(bad(&[bias.len()]));
                }
                Ok(input.to_vec())
            }
            Layer::Relu | Layer::Sigmoid | Layer::Square => Ok(input.to_vec()),
            Layer::Softmax => {
                if input.is_empty() {
                    return Err(bad(&[1]));
                }
                Ok(input.to_vec())
            }
            Layer::MaxPool2d { size, stride } => {
                if *size == 0 || *stride == 0 {
                    return Err(Error::InvalidArgument("maxpool size and stride must be > 0".into()));
                }
                if !(input.len() == 2 || input.len() == 3) || input[0] < *size || input[1] < *size {
                    return Err(bad(&[*size, *size]));
                }
                let mut out = input.to_vec();
                out[0] = (input[0] - size) / stride + 1;
                out[1] = (input[1] - size) / stride + 1;
                Ok(out)
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Forward rule; `out_shape` is the precomputed output shape.
    pub fn forward(&self, x: &Tensor, out_shape: &[usize]) -> Tensor {
        match self {
            Layer::Dense { weight } => {
                let ws = weight.shape();
                let (out, inp) = (ws[0], ws[1]);
                let w = weight.data();
                let xd = x.data();
                let data = (0..out)
                    .map(|o| w[o * inp..(o + 1) * inp].iter().zip(xd).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::new(out_shape.to_vec(), data).expect("dense output shape")
            }
            Layer::Conv2d { weight, padding } => conv_forward(x, weight, *padding, out_shape),
            Layer::BiasAdd { bias } => {
                let c = bias.len();
                let b = bias.data();
                let mut out = x.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v += b[i % c];
                }
                out
            }
            Layer::Relu => x.map(|v| v.max(0.0)),
            Layer::Sigmoid => x.map(sigmoid),
            Layer::Square => x.map(|v| v * v),
            Layer::Softmax => {
                let c = *x.shape().last().expect("softmax rank");
                let mut out = x.clone();
                for chunk in out.data_mut().chunks_mut(c) {
                    let m = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in chunk.iter_mut() {
                        *v = (*v - m).exp();
                        total += *v;
                    }
                    chunk.iter_mut().for_each(|v| *v /= total);
                }
                out
            }
            Layer::MaxPool2d { size, stride } => {
                let (_, w, c) = hwc(x.shape());
                let (oh, ow) = (out_shape[0], out_shape[1]);
                let xd = x.data();
                let mut data = vec![0.0; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let idx = pool_argmax(xd, w, c, oy * stride, ox * stride, *size, ch);
                            data[(oy * ow + ox) * c + ch] = xd[idx];
                        }
                    }
                }
                Tensor::new(out_shape.to_vec(), data).expect("maxpool output shape")
            }
            Layer::Flatten => x.clone().reshape(out_shape).expect("flatten"),
        }
    }

    /// Backward rule: maps the output cotangent to the input cotangent.
    /// `x` is the layer input and `y` its output.
    pub fn backward(&self, x: &Tensor, y: &Tensor, grad_out: &Tensor) -> Tensor {
        match self {
            Layer::Dense { weight } => {
                let ws = weight.shape();
                let (out, inp) = (ws[0], ws[1]);
                let w = weight.data();
                let g = grad_out.data();
                let mut gin = vec![0.0; inp];
                for o in 0..out {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    for (gi, wv) in gin.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                        *gi += go * wv;
                    }
                }
                Tensor::new(x.shape().to_vec(), gin).expect("dense grad shape")
            }
            Layer::Conv2d { weight, padding } => conv_backward(x, weight, *padding, grad_out),
            Layer::BiasAdd { .. } | Layer::Flatten => {
                Tensor::new(x.shape().to_vec(), grad_out.data().to_vec()).expect("same size")
            }
            Layer::Relu => zip_map(x, grad_out, |xv, g| if xv > 0.0 { g } else { 0.0 }),
            Layer::Sigmoid => zip_map(y, grad_out, |s, g| g * s * (1.0 - s)),
            Layer::Square => zip_map(x, grad_out, |xv, g| 2.0 * xv * g),
            Layer::Softmax => {
                let c = *x.shape().last().expect("softmax rank");
                let mut gin = grad_out.data().to_vec();
                for (gchunk, schunk) in gin.chunks_mut(c).zip(y.data().chunks(c)) {
                    let inner: f64 = gchunk.iter().zip(schunk).map(|(g, s)| g * s).sum();
                    for (g, s) in gchunk.iter_mut().zip(schunk) {
                        *g = s * (*g - inner);
                    }
                }
                Tensor::new(x.shape().to_vec(), gin).expect("softmax grad shape")
            }
            Layer::MaxPool2d { size, stride } => {
                let (_, w, c) = hwc(x.shape());
                let os = y.shape();
                let (oh, ow) = (os[0], os[1]);
                let xd = x.data();
                let g = grad_out.data();
                let mut gin = vec![0.0; x.len()];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let idx = pool_argmax(xd, w, c, oy * stride, ox * stride, *size, ch);
                            gin[idx] += g[(oy * ow + ox) * c + ch];
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), gin).expect("maxpool grad shape")
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn hwc(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        _ => panic!("spatial tensor expected, got {shape:?}"),
    }
}

/// Flat index of the window maximum; ties go to the first element in
/// row-major scan order.
pub(crate) fn pool_argmax(
    data: &[f64],
    width: usize,
    channels: usize,
    y0: usize,
    x0: usize,
    size: usize,
    ch: usize,
) -> usize {
    let mut best = (y0 * width + x0) * channels + ch;
    for dy in 0..size {
        for dx in 0..size {
            let idx = ((y0 + dy) * width + x0 + dx) * channels + ch;
            if data[idx] > data[best] {
                best = idx;
            }
        }
    }
    best
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shapes")
}

fn conv_geometry(weight: &Tensor, padding: Padding) -> (usize, usize, usize, isize) {
    let ws = weight.shape();
    let pad = match padding {
        Padding::Valid => 0,
        Padding::Same => (ws[1] / 2) as isize,
    };
    (ws[0], ws[1], ws[3], pad)
}

fn conv_forward(x: &Tensor, weight: &Tensor, padding: Padding, out_shape: &[usize]) -> Tensor {
    let (out_c, k, in_c, pad) = conv_geometry(weight, padding);
    let (h, w, _) = hwc(x.shape());
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0; oh * ow * out_c];
    for oy in 0..oh {
        for ox in 0..ow {
            let o_base = (oy * ow + ox) * out_c;
            for ky in 0..k {
                let iy = oy as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let i_base = (iy as usize * w + ix as usize) * in_c;
                    let xs = &xd[i_base..i_base + in_c];
                    for co in 0..out_c {
                        let w_base = ((co * k + ky) * k + kx) * in_c;
                        let ws = &wd[w_base..w_base + in_c];
                        let mut acc = 0.0;
                        for (a, b) in ws.iter().zip(xs) {
                            acc += a * b;
                        }
                        out[o_base + co] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

fn conv_backward(x: &Tensor, weight: &Tensor, padding: Padding, grad_out: &Tensor) -> Tensor {
    let (out_c, k, in_c, pad) = conv_geometry(weight, padding);
    let (h, w, _) = hwc(x.shape());
    let gs = grad_out.shape();
    let (oh, ow) = (gs[0], gs[1]);
    let g = grad_out.data();
    let wd = weight.data();
    let mut gin = vec![0.0; x.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            let o_base = (oy * ow + ox) * out_c;
            for ky in 0..k {
                let iy = oy as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let i_base = (iy as usize * w + ix as usize) * in_c;
                    for co in 0..out_c {
                        let go = g[o_base + co];
                        if go == 0.0 {
                            continue;
                        }
                        let w_base = ((co * k + ky) * k + kx) * in_c;
                        for ci in 0..in_c {
                            gin[i_base + ci] += go * wd[w_base + ci];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), gin).expect("conv grad shape")
}
