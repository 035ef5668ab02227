//! Dense forward kernels (convolution, max pooling, ReLU, fully connected,
//! softmax) and the fully connected backward pass.
//!
//! Storage is `f32`; every dot product accumulates in `f64`.

use crate::error::{Error, Result};

/// Channel-major `channels × height × width` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Config(format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite tensor value at index {i}")));
        }
        Ok(Tensor3 {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Builds a tensor from values already known to be finite.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Tensor3 {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "convolution kernel and stride must be positive (kernel {}, stride {})",
                self.kernel, self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("convolution channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// `floor((n + 2p - k) / s) + 1`, or `None` when the window does not fit.
    pub fn output_side(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// Output side of a max pooling window, `floor((n - k) / s) + 1`.
pub fn pool_output_side(n: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || n < kernel {
        return None;
    }
    Some((n - kernel) / stride + 1)
}

/// Cross-correlation with zero padding. `weights` is laid out
/// `[out][in][ky][kx]`, `bias` has one entry per output channel.
pub fn conv2d_forward(
    input: &Tensor3,
    spec: &ConvSpec,
    weights: &[f32],
    bias: &[f32],
) -> Result<Tensor3> {
    spec.validate()?;
    if input.channels != spec.in_channels {
        return Err(Error::Config(format!(
            "convolution expects {} input channels, got {}",
            spec.in_channels, input.channels
        )));
    }
    if weights.len() != spec.weight_len() || bias.len() != spec.out_channels {
        return Err(Error::Config(format!(
            "convolution parameter sizes {}/{} do not match spec {}/{}",
            weights.len(),
            bias.len(),
            spec.weight_len(),
            spec.out_channels
        )));
    }
    let (oh, ow) = match (spec.output_side(input.height), spec.output_side(input.width)) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::Config(format!(
                "convolution kernel {} (pad {}) does not fit a {}x{} input",
                spec.kernel, spec.pad, input.height, input.width
            )))
        }
    };

    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.pad as isize;
    let (ih, iw) = (input.height as isize, input.width as isize);

    // Valid output column range for each kernel column: ix = ox*s + kx - p in [0, iw).
    let col_range: Vec<(usize, usize)> = (0..k)
        .map(|kx| valid_range(ow, s, kx as isize - p, iw))
        .collect();

    let mut out = vec![0f32; spec.out_channels * oh * ow];
    let mut acc = vec![0f64; oh * ow];
    for oc in 0..spec.out_channels {
        acc.iter_mut().for_each(|a| *a = bias[oc] as f64);
        for ic in 0..spec.in_channels {
            let plane = input.plane(ic);
            for ky in 0..k {
                let row_range = valid_range(oh, s, ky as isize - p, ih);
                for kx in 0..k {
                    let w = weights[((oc * spec.in_channels + ic) * k + ky) * k + kx] as f64;
                    if w == 0.0 {
                        continue;
                    }
                    let (x0, x1) = col_range[kx];
                    for oy in row_range.0..row_range.1 {
                        let iy = (oy * s) as isize + ky as isize - p;
                        let in_row = &plane[iy as usize * input.width..][..input.width];
                        let acc_row = &mut acc[oy * ow..(oy + 1) * ow];
                        let base = kx as isize - p;
                        if s == 1 {
                            let start = (x0 as isize + base) as usize;
                            let src = &in_row[start..start + (x1 - x0)];
                            for (a, &v) in acc_row[x0..x1].iter_mut().zip(src) {
                                *a += w * v as f64;
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = ((ox * s) as isize + base) as usize;
                                acc_row[ox] += w * in_row[ix] as f64;
                            }
                        }
                    }
                }
            }
        }
        for (o, a) in out[oc * oh * ow..(oc + 1) * oh * ow].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(Tensor3::from_raw(spec.out_channels, oh, ow, out))
}

/// Indices `o` in `[0, n_out)` with `o*s + offset` inside `[0, n_in)`.
fn valid_range(n_out: usize, s: usize, offset: isize, n_in: isize) -> (usize, usize) {
    let s = s as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = if n_in - offset <= 0 {
        0
    } else {
        ((n_in - offset + s - 1) / s).min(n_out as isize)
    };
    let lo = lo.min(n_out as isize);
    (lo as usize, hi.max(lo) as usize)
}

pub fn maxpool2d(input: &Tensor3, kernel: usize, stride: usize) -> Result<Tensor3> {
    let (oh, ow) = match (
        pool_output_side(input.height, kernel, stride),
        pool_output_side(input.width, kernel, stride),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::Config(format!(
                "pooling window {kernel}/{stride} does not fit a {}x{} input",
                input.height, input.width
            )))
        }
    };
    let mut out = Vec::with_capacity(input.channels * oh * ow);
    for c in 0..input.channels {
        let plane = input.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    let row = &plane[(oy * stride + ky) * input.width..];
                    for v in &row[ox * stride..ox * stride + kernel] {
                        m = m.max(*v);
                    }
                }
                out.push(m);
            }
        }
    }
    Ok(Tensor3::from_raw(input.channels, oh, ow, out))
}

pub fn relu(input: &Tensor3) -> Tensor3 {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut Tensor3) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

/// Numerically stable softmax (max-shifted). Empty input yields empty output.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Fully connected layer computing `y = Wᵀx + b`. Weights are stored with one
/// row per input: `weights[i * out_dim + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl FcLayer {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Config(format!(
                "fully connected {in_dim}->{out_dim} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite fully connected parameter".into()));
        }
        Ok(FcLayer {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        FcLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.weights[i * self.out_dim..(i + 1) * self.out_dim]
    }

    /// Accumulates `x[i] * W[i, :]` for the given input rows into `acc`,
    /// which must already hold the bias. Zero inputs are skipped.
    #[inline]
    pub(crate) fn accumulate_rows(&self, rows: impl Iterator<Item = (usize, f32)>, acc: &mut [f64]) {
        for (i, xi) in rows {
            if xi == 0.0 {
                continue;
            }
            let xi = xi as f64;
            for (a, &w) in acc.iter_mut().zip(self.row(i)) {
                *a += xi * w as f64;
            }
        }
    }

    pub(crate) fn init_acc(&self, acc: &mut Vec<f64>) {
        acc.clear();
        acc.extend(self.bias.iter().map(|&b| b as f64));
    }

    /// Gradient of `Σ_j grad_out[j] * y[j]` with respect to the parameters,
    /// added into `grads`; input gradient written to `grad_x` when requested.
    pub(crate) fn accumulate_backward(
        &self,
        x: impl Iterator<Item = (usize, f32)>,
        grad_out: &[f64],
        grads: &mut FcGrads,
        grad_x: Option<&mut [f64]>,
    ) {
        for (g, &go) in grads.grad_bias.iter_mut().zip(grad_out) {
            *g += go;
        }
        for (i, xi) in x {
            if xi == 0.0 {
                continue;
            }
            let xi = xi as f64;
            let row = &mut grads.grad_weights[i * self.out_dim..(i + 1) * self.out_dim];
            for (g, &go) in row.iter_mut().zip(grad_out) {
                *g += xi * go;
            }
        }
        if let Some(gx) = grad_x {
            for (i, g) in gx.iter_mut().enumerate() {
                *g = self
                    .row(i)
                    .iter()
                    .zip(grad_out)
                    .map(|(&w, &go)| w as f64 * go)
                    .sum();
            }
        }
    }
}

/// Parameter and input gradients of a fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FcGrads {
    pub grad_x: Vec<f64>,
    pub grad_weights: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl FcGrads {
    pub fn zeros(layer: &FcLayer) -> Self {
        FcGrads {
            grad_x: vec![0.0; layer.in_dim],
            grad_weights: vec![0.0; layer.in_dim * layer.out_dim],
            grad_bias: vec![0.0; layer.out_dim],
        }
    }

    pub fn clear(&mut self) {
        self.grad_x.iter_mut().for_each(|g| *g = 0.0);
        self.grad_weights.iter_mut().for_each(|g| *g = 0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub fn fc_forward(x: &[f32], layer: &FcLayer) -> Result<Vec<f32>> {
    check_fc_input(x.len(), layer)?;
    let mut acc = Vec::with_capacity(layer.out_dim);
    layer.init_acc(&mut acc);
    layer.accumulate_rows(x.iter().copied().enumerate(), &mut acc);
    Ok(acc.into_iter().map(|a| a as f32).collect())
}

/// Exact gradients of `y = Wᵀx + b` given the upstream gradient `dL/dy`.
pub fn fc_backward(x: &[f32], layer: &FcLayer, grad_out: &[f64]) -> Result<FcGrads> {
    check_fc_input(x.len(), layer)?;
    if grad_out.len() != layer.out_dim {
        return Err(Error::Config(format!(
            "upstream gradient has {} entries, layer outputs {}",
            grad_out.len(),
            layer.out_dim
        )));
    }
    let mut grads = FcGrads::zeros(layer);
    let mut gx = vec![0.0; layer.in_dim];
    layer.accumulate_backward(
        x.iter().copied().enumerate(),
        grad_out,
        &mut grads,
        Some(&mut gx),
    );
    grads.grad_x = gx;
    Ok(grads)
}

fn check_fc_input(len: usize, layer: &FcLayer) -> Result<()> {
    if len != layer.in_dim {
        return Err(Error::Config(format!(
            "fully connected layer expects {} inputs, got {len}",
            layer.in_dim
        )));
    }
    Ok(())
}
