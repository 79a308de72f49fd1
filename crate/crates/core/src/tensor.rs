//! Dense f32 tensors and the forward numeric kernels.
//!
//! Spatial tensors are laid out `[channels, height, width]`, row-major with
//! the channel outermost. Coordinates follow the same convention everywhere
//! in the crate: `x` runs down the height axis (rows), `y` across the width
//! axis (columns). Dot products accumulate in f64 and are stored back as f32.

use crate::error::{Error, Result};

/// Dense n-dimensional float array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Expects a `[C, H, W]` tensor and returns the dimensions.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a 3-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "expected a 2-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Element at `(c, x, y)` of a `[C, H, W]` tensor. Callers guarantee bounds.
    #[inline]
    pub fn at3(&self, c: usize, x: usize, y: usize) -> f32 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        debug_assert!(c < self.shape[0] && x < h && y < w);
        self.data[(c * h + x) * w + y]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, x: usize, y: usize, v: f32) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + x) * w + y] = v;
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.shape[1] + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Parameters of a square, symmetric convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvParams {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
}

impl ConvParams {
    /// Output spatial size: `floor((in + 2*pad - k) / stride) + 1`, which must be >= 1.
    pub fn output_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 || self.out_channels == 0 {
            return Err(Error::Shape(format!(
                "conv params must be positive: kernel={} stride={} out_channels={}",
                self.kernel, self.stride, self.out_channels
            )));
        }
        let span_h = in_h + 2 * self.pad;
        let span_w = in_w + 2 * self.pad;
        if span_h < self.kernel || span_w < self.kernel {
            return Err(Error::Shape(format!(
                "kernel {} exceeds padded input {}x{}",
                self.kernel, span_h, span_w
            )));
        }
        Ok((
            (span_h - self.kernel) / self.stride + 1,
            (span_w - self.kernel) / self.stride + 1,
        ))
    }
}

/// Per-branch channel spans `[start, end)` recorded by [`concat_channels`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelRangeTable {
    ranges: Vec<(usize, usize)>,
}

impl ChannelRangeTable {
    pub fn new(ranges: Vec<(usize, usize)>) -> Self {
        Self { ranges }
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn branch_count(&self) -> usize {
        self.ranges.len()
    }

    /// Maps a concatenated channel to `(branch index, channel within branch)`.
    pub fn locate(&self, ch: usize) -> Result<(usize, usize)> {
        for (b, &(start, end)) in self.ranges.iter().enumerate() {
            if ch >= start && ch < end {
                return Ok((b, ch - start));
            }
        }
        Err(Error::Coordinate(format!(
            "channel {} outside all concat ranges {:?}",
            ch, self.ranges
        )))
    }
}

/// Standard zero-padded 2-d convolution.
///
/// `input` is `[C, H, W]`, `weights` is `[K, C, k, k]`, `bias` has length `K`.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    params: &ConvParams,
) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3()?;
    let ws = weights.shape();
    if ws.len() != 4
        || ws[0] != params.out_channels
        || ws[1] != c_in
        || ws[2] != params.kernel
        || ws[3] != params.kernel
    {
        return Err(Error::Shape(format!(
            "conv weights {:?} do not match input channels {} and params {:?}",
            ws, c_in, params
        )));
    }
    if bias.len() != params.out_channels {
        return Err(Error::Shape(format!(
            "conv bias length {} != out_channels {}",
            bias.len(),
            params.out_channels
        )));
    }
    let (oh, ow) = params.output_size(h, w)?;
    let k = params.kernel;
    let mut out = Tensor::zeros(vec![params.out_channels, oh, ow]);
    for f in 0..params.out_channels {
        for ox in 0..oh {
            for oy in 0..ow {
                let mut acc = bias[f] as f64;
                for c in 0..c_in {
                    for u in 0..k {
                        let ix = (ox * params.stride + u) as isize - params.pad as isize;
                        if ix < 0 || ix >= h as isize {
                            continue;
                        }
                        for v in 0..k {
                            let iy = (oy * params.stride + v) as isize - params.pad as isize;
                            if iy < 0 || iy >= w as isize {
                                continue;
                            }
                            acc += input.at3(c, ix as usize, iy as usize) as f64
                                * weights.data()[((f * c_in + c) * k + u) * k + v] as f64;
                        }
                    }
                }
                out.set3(f, ox, oy, acc as f32);
            }
        }
    }
    Ok(out)
}

/// Per-channel max pooling. Pooling never pads.
pub fn maxpool_forward(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3()?;
    if kernel == 0 || stride == 0 {
        return Err(Error::Shape(
            "pool kernel and stride must be positive".into(),
        ));
    }
    if kernel > h || kernel > w {
        return Err(Error::Shape(format!(
            "pool window {} exceeds input {}x{}",
            kernel, h, w
        )));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Tensor::zeros(vec![c_in, oh, ow]);
    for c in 0..c_in {
        for ox in 0..oh {
            for oy in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for u in 0..kernel {
                    for v in 0..kernel {
                        best = best.max(input.at3(c, ox * stride + u, oy * stride + v));
                    }
                }
                out.set3(c, ox, oy, best);
            }
        }
    }
    Ok(out)
}

/// Fully connected layer: `out[i] = dot(weights[i], input) + bias[i]`.
pub fn fc_forward(input: &[f32], weights: &Tensor, bias: &[f32]) -> Result<Vec<f32>> {
    let (m, n) = weights.dims2()?;
    if input.len() != n {
        return Err(Error::Shape(format!(
            "fc input length {} != weight columns {}",
            input.len(),
            n
        )));
    }
    if bias.len() != m {
        return Err(Error::Shape(format!(
            "fc bias length {} != weight rows {}",
            bias.len(),
            m
        )));
    }
    let mut out = vec![0.0f32; m];
    for i in 0..m {
        let mut acc = bias[i] as f64;
        for j in 0..n {
            acc += weights.at2(i, j) as f64 * input[j] as f64;
        }
        out[i] = acc as f32;
    }
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape.clone(),
        data,
    }
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    (1.0 / (1.0 + (-x as f64).exp())) as f32
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor {
        shape: input.shape.clone(),
        data,
    }
}

pub fn tanh_act(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.tanh()).collect();
    Tensor {
        shape: input.shape.clone(),
        data,
    }
}

/// Numerically stable softmax over a vector.
pub fn softmax(input: &[f32]) -> Vec<f32> {
    let max = input.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = input.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

/// Concatenates `[C_b, H, W]` tensors along channels and records where each
/// branch's channel block landed.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<(Tensor, ChannelRangeTable)> {
    if inputs.is_empty() {
        return Err(Error::Shape("concat needs at least one input".into()));
    }
    let (_, h0, w0) = inputs[0].dims3()?;
    let mut ranges = Vec::with_capacity(inputs.len());
    let mut total_c = 0usize;
    for t in inputs {
        let (c, h, w) = t.dims3()?;
        if h != h0 || w != w0 {
            return Err(Error::Shape(format!(
                "concat spatial mismatch: {}x{} vs {}x{}",
                h, w, h0, w0
            )));
        }
        ranges.push((total_c, total_c + c));
        total_c += c;
    }
    let mut data = Vec::with_capacity(total_c * h0 * w0);
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Ok((
        Tensor::new(vec![total_c, h0, w0], data)?,
        ChannelRangeTable::new(ranges),
    ))
}

pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// The zero-padded `[C, k, k]` window feeding output `(out_x, out_y)` plus a
/// mask marking which window positions lie inside the true input. Padding
/// positions are zero in the patch and false in the mask.
pub fn receptive_patch(
    input: &Tensor,
    out_x: usize,
    out_y: usize,
    params: &ConvParams,
) -> Result<(Tensor, Vec<Vec<bool>>)> {
    let (c_in, h, w) = input.dims3()?;
    let (oh, ow) = params.output_size(h, w)?;
    if out_x >= oh || out_y >= ow {
        return Err(Error::Coordinate(format!(
            "output ({}, {}) outside {}x{} grid",
            out_x, out_y, oh, ow
        )));
    }
    let k = params.kernel;
    let mut patch = Tensor::zeros(vec![c_in, k, k]);
    let mut mask = vec![vec![false; k]; k];
    for u in 0..k {
        let ix = (out_x * params.stride + u) as isize - params.pad as isize;
        if ix < 0 || ix >= h as isize {
            continue;
        }
        for v in 0..k {
            let iy = (out_y * params.stride + v) as isize - params.pad as isize;
            if iy < 0 || iy >= w as isize {
                continue;
            }
            mask[u][v] = true;
            for c in 0..c_in {
                patch.set3(c, u, v, input.at3(c, ix as usize, iy as usize));
            }
        }
    }
    Ok((patch, mask))
}
