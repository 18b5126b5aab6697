//! The decoder network mapping a low-dimensional latent vector to an image
//! or multislice volume, with exact reverse-mode gradients for both the
//! weights and the latent input.
//!
//! The latent vector enters as a `(latent_dim, 1, 1)` tensor. Feature maps
//! are planar `[c][y][x]` buffers. All weights live in one flat parameter
//! vector with per-layer views, so optimizers and penalties see a single
//! array.

use std::ops::Range;

use rand::Rng;

use crate::error::GeneratorError;
use crate::grid::{Field, ImageGrid, VolumeGrid};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRectifier(f64),
    Tanh,
    None,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRectifier(slope) => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::None => z,
        }
    }

    /// Derivative given pre-activation `z` and post-activation `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::LeakyRectifier(slope) => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::None => 1.0,
        }
    }
}

/// Hidden-activation slope used by the shipped presets.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Fully connected from the latent vector to a coarse feature grid.
    /// Only valid as the first layer.
    Dense { out_h: usize, out_w: usize },
    /// Same-size convolution, stride 1, odd kernel.
    Conv { kernel: usize },
    /// Strided transposed convolution; upsamples by `stride` exactly
    /// (needs `kernel >= stride` and `kernel - stride` even).
    TransposedConv { kernel: usize, stride: usize },
    /// Nearest-neighbour 2x upsample followed by a same-size convolution.
    UpsampleConv { kernel: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn describe(&self) -> String {
        match &self.kind {
            LayerKind::Dense { out_h, out_w } => format!(
                "dense {} -> {}x{}x{}",
                self.in_channels, self.out_channels, out_h, out_w
            ),
            LayerKind::Conv { kernel } => format!(
                "conv{kernel} {} -> {}",
                self.in_channels, self.out_channels
            ),
            LayerKind::TransposedConv { kernel, stride } => format!(
                "tconv{kernel}/s{stride} {} -> {}",
                self.in_channels, self.out_channels
            ),
            LayerKind::UpsampleConv { kernel } => format!(
                "up2+conv{kernel} {} -> {}",
                self.in_channels, self.out_channels
            ),
        }
    }

    fn weight_count(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { out_h, out_w } => {
                self.in_channels * self.out_channels * out_h * out_w
            }
            LayerKind::Conv { kernel } | LayerKind::UpsampleConv { kernel } => {
                self.in_channels * self.out_channels * kernel * kernel
            }
            LayerKind::TransposedConv { kernel, .. } => {
                self.in_channels * self.out_channels * kernel * kernel
            }
        }
    }

    fn bias_count(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { out_h, out_w } => self.out_channels * out_h * out_w,
            _ => self.out_channels,
        }
    }

    fn fan_in(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { .. } => self.in_channels,
            LayerKind::Conv { kernel }
            | LayerKind::UpsampleConv { kernel }
            | LayerKind::TransposedConv { kernel, .. } => {
                self.in_channels * kernel * kernel
            }
        }
    }

    fn out_shape(&self, in_shape: (usize, usize, usize)) -> Result<(usize, usize, usize), GeneratorError> {
        let (_, h, w) = in_shape;
        match &self.kind {
            LayerKind::Dense { out_h, out_w } => Ok((self.out_channels, *out_h, *out_w)),
            LayerKind::Conv { kernel } => {
                if kernel % 2 == 0 {
                    return Err(GeneratorError::BadLayer(format!(
                        "conv kernel must be odd, got {kernel}"
                    )));
                }
                Ok((self.out_channels, h, w))
            }
            LayerKind::TransposedConv { kernel, stride } => {
                if *stride == 0 || kernel < stride || (kernel - stride) % 2 != 0 {
                    return Err(GeneratorError::BadLayer(format!(
                        "transposed conv needs kernel >= stride with even difference, got k={kernel} s={stride}"
                    )));
                }
                Ok((self.out_channels, h * stride, w * stride))
            }
            LayerKind::UpsampleConv { kernel } => {
                if kernel % 2 == 0 {
                    return Err(GeneratorError::BadLayer(format!(
                        "upsample conv kernel must be odd, got {kernel}"
                    )));
                }
                Ok((self.out_channels, 2 * h, 2 * w))
            }
        }
    }
}

/// Gradients of `<output, upstream>` with respect to the parameters and the
/// latent input.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub d_theta: Vec<f64>,
    pub d_latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerOffsets {
    weights: Range<usize>,
    bias: Range<usize>,
}

/// Intermediate buffers from a traced forward pass.
pub struct Tape {
    /// inputs[0] is the latent tensor; inputs[i+1] the post-activation of
    /// layer i (also the network output at the end).
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNetwork {
    layers: Vec<LayerSpec>,
    latent_dim: usize,
    n_slice: usize,
    shapes: Vec<(usize, usize, usize)>, // output shape per layer
    offsets: Vec<LayerOffsets>,
    theta: Vec<f64>,
    seed: u64,
}

impl GeneratorNetwork {
    /// Build and randomly initialize a generator. Weights and biases are
    /// drawn uniformly from `(-a, a)` with `a = 1e-2 * sqrt(1/fan_in)`.
    pub fn new(
        layers: Vec<LayerSpec>,
        latent_dim: usize,
        n_slice: usize,
        seed: u64,
    ) -> Result<Self, GeneratorError> {
        if layers.is_empty() {
            return Err(GeneratorError::BadLayer("no layers".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut in_shape = (latent_dim, 1, 1);
        for (idx, layer) in layers.iter().enumerate() {
            if matches!(layer.kind, LayerKind::Dense { .. }) && idx != 0 {
                return Err(GeneratorError::LayerChain {
                    prev_index: idx - 1,
                    prev: layers[idx - 1].describe(),
                    index: idx,
                    layer: layer.describe(),
                    reason: "a dense layer is only valid first".into(),
                });
            }
            if layer.in_channels != in_shape.0 {
                let (prev_index, prev) = if idx == 0 {
                    (0, format!("latent input ({latent_dim})"))
                } else {
                    (idx - 1, layers[idx - 1].describe())
                };
                return Err(GeneratorError::LayerChain {
                    prev_index,
                    prev,
                    index: idx,
                    layer: layer.describe(),
                    reason: format!(
                        "expects {} input channels but receives {}",
                        layer.in_channels, in_shape.0
                    ),
                });
            }
            in_shape = layer.out_shape(in_shape)?;
            shapes.push(in_shape);
        }
        let (out_c, _, _) = *shapes.last().unwrap();
        if n_slice == 0 || out_c % n_slice != 0 || !(1..=2).contains(&(out_c / n_slice)) {
            return Err(GeneratorError::BadLayer(format!(
                "output channels {out_c} do not split into {n_slice} slice group(s) of 1 or 2 channels"
            )));
        }

        let mut offsets = Vec::with_capacity(layers.len());
        let mut cursor = 0usize;
        for layer in &layers {
            let w = cursor..cursor + layer.weight_count();
            cursor = w.end;
            let b = cursor..cursor + layer.bias_count();
            cursor = b.end;
            offsets.push(LayerOffsets { weights: w, bias: b });
        }

        let mut theta = vec![0.0; cursor];
        let mut stream = rng::stream(seed, &[rng::tag::INIT]);
        for (layer, off) in layers.iter().zip(offsets.iter()) {
            let half_width = 1e-2 * (1.0 / layer.fan_in() as f64).sqrt();
            for v in theta[off.weights.start..off.bias.end].iter_mut() {
                *v = stream.gen_range(-half_width..half_width);
            }
        }

        Ok(GeneratorNetwork {
            layers,
            latent_dim,
            n_slice,
            shapes,
            offsets,
            theta,
            seed,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn n_slice(&self) -> usize {
        self.n_slice
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Output shape as (n_slice, height, width, channels per slice).
    pub fn output_shape(&self) -> (usize, usize, usize, usize) {
        let (c, h, w) = *self.shapes.last().unwrap();
        (self.n_slice, h, w, c / self.n_slice)
    }

    pub fn layer_params(&self, index: usize) -> (&[f64], &[f64]) {
        let off = &self.offsets[index];
        (&self.theta[off.weights.clone()], &self.theta[off.bias.clone()])
    }

    fn buffer_to_field(&self, buffer: &[f64]) -> Field {
        let (n_slice, h, w, cps) = self.output_shape();
        if n_slice == 1 {
            Field::Image(
                ImageGrid::from_data(h, w, cps, buffer.to_vec()).expect("shape by construction"),
            )
        } else {
            let plane = cps * h * w;
            let slices = (0..n_slice)
                .map(|z| {
                    ImageGrid::from_data(h, w, cps, buffer[z * plane..(z + 1) * plane].to_vec())
                        .expect("shape by construction")
                })
                .collect();
            Field::Volume(VolumeGrid::new(slices).expect("uniform slices"))
        }
    }

    fn field_to_buffer(&self, field: &Field) -> Result<Vec<f64>, GeneratorError> {
        let (n_slice, h, w, cps) = self.output_shape();
        let expected = format!("{n_slice} slice(s) of {h}x{w}x{cps}");
        match field {
            Field::Image(img) if n_slice == 1 => {
                if img.shape() != (h, w, cps) {
                    return Err(GeneratorError::UpstreamShape {
                        expected,
                        got: field.describe_shape(),
                    });
                }
                Ok(img.data().to_vec())
            }
            Field::Volume(vol) if n_slice > 1 => {
                if vol.n_slice() != n_slice || vol.slice_shape() != (h, w, cps) {
                    return Err(GeneratorError::UpstreamShape {
                        expected,
                        got: field.describe_shape(),
                    });
                }
                Ok(field.flattened())
            }
            _ => Err(GeneratorError::UpstreamShape {
                expected,
                got: field.describe_shape(),
            }),
        }
    }

    /// Forward pass; a pure function of the parameters and the latent input.
    pub fn forward(&self, latent: &[f64]) -> Result<Field, GeneratorError> {
        let (out, _) = self.forward_traced(latent)?;
        Ok(out)
    }

    pub fn forward_traced(&self, latent: &[f64]) -> Result<(Field, Tape), GeneratorError> {
        if latent.len() != self.latent_dim {
            return Err(GeneratorError::LatentLength {
                expected: self.latent_dim,
                got: latent.len(),
            });
        }
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        inputs.push(latent.to_vec());
        let mut in_shape = (self.latent_dim, 1usize, 1usize);
        for (layer, off) in self.layers.iter().zip(self.offsets.iter()) {
            let weights = &self.theta[off.weights.clone()];
            let bias = &self.theta[off.bias.clone()];
            let out_shape = layer.out_shape(in_shape).expect("validated");
            let mut pre = vec![0.0; out_shape.0 * out_shape.1 * out_shape.2];
            layer_forward(layer, weights, bias, inputs.last().unwrap(), in_shape, &mut pre);
            let post: Vec<f64> = pre.iter().map(|&z| layer.activation.apply(z)).collect();
            preacts.push(pre);
            inputs.push(post);
            in_shape = out_shape;
        }
        let out = self.buffer_to_field(inputs.last().unwrap());
        Ok((out, Tape { inputs, preacts }))
    }

    /// Reverse pass over a tape: exact gradients of `<output, upstream>`.
    pub fn backward_traced(&self, tape: &Tape, upstream: &[f64]) -> GradientBundle {
        let last = self.shapes.last().unwrap();
        assert_eq!(upstream.len(), last.0 * last.1 * last.2, "cotangent length");
        let mut d_theta = vec![0.0; self.theta.len()];
        let mut d_out = upstream.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let off = &self.offsets[idx];
            let pre = &tape.preacts[idx];
            let post = &tape.inputs[idx + 1];
            // Through the activation.
            for ((d, &z), &a) in d_out.iter_mut().zip(pre.iter()).zip(post.iter()) {
                *d *= layer.activation.derivative(z, a);
            }
            let in_shape = if idx == 0 {
                (self.latent_dim, 1, 1)
            } else {
                self.shapes[idx - 1]
            };
            let input = &tape.inputs[idx];
            let weights = &self.theta[off.weights.clone()];
            let mut d_in = vec![0.0; input.len()];
            layer_backward(
                layer,
                weights,
                input,
                in_shape,
                &d_out,
                &mut d_in,
                &mut d_theta[off.weights.start..off.bias.end],
            );
            d_out = d_in;
        }
        GradientBundle {
            d_theta,
            d_latent: d_out,
        }
    }

    /// Gradients of `<forward(c), upstream>` with respect to the parameters
    /// and the latent input.
    pub fn backward(&self, latent: &[f64], upstream: &Field) -> Result<GradientBundle, GeneratorError> {
        let up = self.field_to_buffer(upstream)?;
        let (_, tape) = self.forward_traced(latent)?;
        Ok(self.backward_traced(&tape, &up))
    }

    pub(crate) fn upstream_buffer(&self, field: &Field) -> Result<Vec<f64>, GeneratorError> {
        self.field_to_buffer(field)
    }
}

/// Squared l1 penalty on the parameters: value `(sum |theta_k|)^2` and its
/// gradient `2 (sum |theta_k|) sign(theta)` with `sign(0) = 0`.
pub fn l1sq_penalty(theta: &[f64]) -> (f64, Vec<f64>) {
    let total: f64 = theta.iter().map(|v| v.abs()).sum();
    let grad = theta
        .iter()
        .map(|&v| {
            if v > 0.0 {
                2.0 * total
            } else if v < 0.0 {
                -2.0 * total
            } else {
                0.0
            }
        })
        .collect();
    (total * total, grad)
}

// ---------------------------------------------------------------------------
// Layer kernels. Forward and backward iterate the same (input, weight,
// output) index triples, which keeps the reverse pass an exact transpose of
// the forward pass.
// ---------------------------------------------------------------------------

fn layer_forward(
    layer: &LayerSpec,
    weights: &[f64],
    bias: &[f64],
    input: &[f64],
    in_shape: (usize, usize, usize),
    out: &mut [f64],
) {
    match layer.kind {
        LayerKind::Dense { .. } => dense_forward(weights, bias, input, out),
        LayerKind::Conv { kernel } => conv_forward(
            weights,
            bias,
            input,
            in_shape,
            layer.out_channels,
            kernel,
            out,
        ),
        LayerKind::TransposedConv { kernel, stride } => tconv_forward(
            weights,
            bias,
            input,
            in_shape,
            layer.out_channels,
            kernel,
            stride,
            out,
        ),
        LayerKind::UpsampleConv { kernel } => {
            let (c, h, w) = in_shape;
            let up = upsample2(input, c, h, w);
            conv_forward(
                weights,
                bias,
                &up,
                (c, 2 * h, 2 * w),
                layer.out_channels,
                kernel,
                out,
            )
        }
    }
}

fn layer_backward(
    layer: &LayerSpec,
    weights: &[f64],
    input: &[f64],
    in_shape: (usize, usize, usize),
    d_out: &[f64],
    d_in: &mut [f64],
    d_params: &mut [f64],
) {
    let w_count = layer.weight_count();
    let (d_w, d_b) = d_params.split_at_mut(w_count);
    match layer.kind {
        LayerKind::Dense { .. } => dense_backward(weights, input, d_out, d_in, d_w, d_b),
        LayerKind::Conv { kernel } => conv_backward(
            weights,
            input,
            in_shape,
            layer.out_channels,
            kernel,
            d_out,
            d_in,
            d_w,
            d_b,
        ),
        LayerKind::TransposedConv { kernel, stride } => tconv_backward(
            weights,
            input,
            in_shape,
            layer.out_channels,
            kernel,
            stride,
            d_out,
            d_in,
            d_w,
            d_b,
        ),
        LayerKind::UpsampleConv { kernel } => {
            let (c, h, w) = in_shape;
            let up = upsample2(input, c, h, w);
            let mut d_up = vec![0.0; up.len()];
            conv_backward(
                weights,
                &up,
                (c, 2 * h, 2 * w),
                layer.out_channels,
                kernel,
                d_out,
                &mut d_up,
                d_w,
                d_b,
            );
            downsample2_adjoint(&d_up, c, h, w, d_in);
        }
    }
}

fn dense_forward(weights: &[f64], bias: &[f64], input: &[f64], out: &mut [f64]) {
    let in_dim = input.len();
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = &weights[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias[o];
        for (wv, iv) in row.iter().zip(input.iter()) {
            acc += wv * iv;
        }
        *out_v = acc;
    }
}

fn dense_backward(
    weights: &[f64],
    input: &[f64],
    d_out: &[f64],
    d_in: &mut [f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
) {
    let in_dim = input.len();
    for (o, &u) in d_out.iter().enumerate() {
        d_b[o] += u;
        let row = &weights[o * in_dim..(o + 1) * in_dim];
        let d_row = &mut d_w[o * in_dim..(o + 1) * in_dim];
        for k in 0..in_dim {
            d_in[k] += row[k] * u;
            d_row[k] += input[k] * u;
        }
    }
}

/// Valid x-range so that `x + dx - pad` stays inside `[0, width)`.
#[inline]
fn same_range(width: usize, pad: usize, d: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (width + pad).saturating_sub(d).min(width);
    (lo, hi.max(lo))
}

fn conv_forward(
    weights: &[f64],
    bias: &[f64],
    input: &[f64],
    in_shape: (usize, usize, usize),
    out_c: usize,
    kernel: usize,
    out: &mut [f64],
) {
    let (in_c, h, w) = in_shape;
    let pad = (kernel - 1) / 2;
    let plane = h * w;
    for o in 0..out_c {
        out[o * plane..(o + 1) * plane].fill(bias[o]);
    }
    for o in 0..out_c {
        for i in 0..in_c {
            for dy in 0..kernel {
                let (y_lo, y_hi) = same_range(h, pad, dy);
                for dx in 0..kernel {
                    let wv = weights[((o * in_c + i) * kernel + dy) * kernel + dx];
                    let (x_lo, x_hi) = same_range(w, pad, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let yy = y + dy - pad;
                        let in_row = &input[(i * h + yy) * w..][..w];
                        let out_row = &mut out[(o * h + y) * w..][..w];
                        let src = &in_row[x_lo + dx - pad..x_hi + dx - pad];
                        let dst = &mut out_row[x_lo..x_hi];
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    weights: &[f64],
    input: &[f64],
    in_shape: (usize, usize, usize),
    out_c: usize,
    kernel: usize,
    d_out: &[f64],
    d_in: &mut [f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
) {
    let (in_c, h, w) = in_shape;
    let pad = (kernel - 1) / 2;
    let plane = h * w;
    for o in 0..out_c {
        d_b[o] += d_out[o * plane..(o + 1) * plane].iter().sum::<f64>();
    }
    for o in 0..out_c {
        for i in 0..in_c {
            for dy in 0..kernel {
                let (y_lo, y_hi) = same_range(h, pad, dy);
                for dx in 0..kernel {
                    let widx = ((o * in_c + i) * kernel + dy) * kernel + dx;
                    let wv = weights[widx];
                    let (x_lo, x_hi) = same_range(w, pad, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let mut w_acc = 0.0;
                    for y in y_lo..y_hi {
                        let yy = y + dy - pad;
                        let u_row = &d_out[(o * h + y) * w..][x_lo..x_hi];
                        let in_row = &input[(i * h + yy) * w..][x_lo + dx - pad..x_hi + dx - pad];
                        let di_row =
                            &mut d_in[(i * h + yy) * w..][x_lo + dx - pad..x_hi + dx - pad];
                        for ((u, s), d) in u_row.iter().zip(in_row.iter()).zip(di_row.iter_mut()) {
                            w_acc += u * s;
                            *d += wv * u;
                        }
                    }
                    d_w[widx] += w_acc;
                }
            }
        }
    }
}

/// Input index range whose scaled position lands inside the output.
#[inline]
fn tconv_range(in_len: usize, out_len: usize, stride: usize, pad: usize, d: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = (pad as i64 - d as i64 + s - 1).div_euclid(s).max(0);
    let hi = (((out_len - 1 + pad) as i64 - d as i64).div_euclid(s) + 1)
        .clamp(0, in_len as i64);
    (lo as usize, (hi as usize).max(lo as usize))
}

#[allow(clippy::too_many_arguments)]
fn tconv_forward(
    weights: &[f64],
    bias: &[f64],
    input: &[f64],
    in_shape: (usize, usize, usize),
    out_c: usize,
    kernel: usize,
    stride: usize,
    out: &mut [f64],
) {
    let (in_c, h, w) = in_shape;
    let (oh, ow) = (h * stride, w * stride);
    let pad = (kernel - stride) / 2;
    let plane = oh * ow;
    for o in 0..out_c {
        out[o * plane..(o + 1) * plane].fill(bias[o]);
    }
    for o in 0..out_c {
        for i in 0..in_c {
            for dy in 0..kernel {
                let (yi_lo, yi_hi) = tconv_range(h, oh, stride, pad, dy);
                for dx in 0..kernel {
                    let wv = weights[((o * in_c + i) * kernel + dy) * kernel + dx];
                    let (xi_lo, xi_hi) = tconv_range(w, ow, stride, pad, dx);
                    if xi_lo >= xi_hi {
                        continue;
                    }
                    for yi in yi_lo..yi_hi {
                        let yo = yi * stride + dy - pad;
                        let in_row = &input[(i * h + yi) * w..][..w];
                        let out_row = &mut out[(o * oh + yo) * ow..][..ow];
                        let mut xo = xi_lo * stride + dx - pad;
                        for &iv in &in_row[xi_lo..xi_hi] {
                            out_row[xo] += wv * iv;
                            xo += stride;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tconv_backward(
    weights: &[f64],
    input: &[f64],
    in_shape: (usize, usize, usize),
    out_c: usize,
    kernel: usize,
    stride: usize,
    d_out: &[f64],
    d_in: &mut [f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
) {
    let (in_c, h, w) = in_shape;
    let (oh, ow) = (h * stride, w * stride);
    let pad = (kernel - stride) / 2;
    let plane = oh * ow;
    for o in 0..out_c {
        d_b[o] += d_out[o * plane..(o + 1) * plane].iter().sum::<f64>();
    }
    for o in 0..out_c {
        for i in 0..in_c {
            for dy in 0..kernel {
                let (yi_lo, yi_hi) = tconv_range(h, oh, stride, pad, dy);
                for dx in 0..kernel {
                    let widx = ((o * in_c + i) * kernel + dy) * kernel + dx;
                    let wv = weights[widx];
                    let (xi_lo, xi_hi) = tconv_range(w, ow, stride, pad, dx);
                    if xi_lo >= xi_hi {
                        continue;
                    }
                    let mut w_acc = 0.0;
                    for yi in yi_lo..yi_hi {
                        let yo = yi * stride + dy - pad;
                        let in_row = &input[(i * h + yi) * w..][..w];
                        let di_row = &mut d_in[(i * h + yi) * w..][..w];
                        let u_row = &d_out[(o * oh + yo) * ow..][..ow];
                        let mut xo = xi_lo * stride + dx - pad;
                        for xi in xi_lo..xi_hi {
                            let u = u_row[xo];
                            w_acc += in_row[xi] * u;
                            di_row[xi] += wv * u;
                            xo += stride;
                        }
                    }
                    d_w[widx] += w_acc;
                }
            }
        }
    }
}

fn upsample2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let in_row = &input[(ch * h + y / 2) * w..][..w];
            let out_row = &mut out[(ch * oh + y) * ow..][..ow];
            for x in 0..ow {
                out_row[x] = in_row[x / 2];
            }
        }
    }
    out
}

fn downsample2_adjoint(d_up: &[f64], c: usize, h: usize, w: usize, d_in: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..oh {
            let up_row = &d_up[(ch * oh + y) * ow..][..ow];
            let in_row = &mut d_in[(ch * h + y / 2) * w..][..w];
            for x in 0..ow {
                in_row[x / 2] += up_row[x];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Three-layer generator for 28x28 single-channel images, latent dimension 2.
pub fn mnist_preset(seed: u64) -> GeneratorNetwork {
    let layers = vec![
        LayerSpec {
            kind: LayerKind::Dense { out_h: 7, out_w: 7 },
            in_channels: 2,
            out_channels: 8,
            activation: Activation::LeakyRectifier(LEAKY_SLOPE),
        },
        LayerSpec {
            kind: LayerKind::TransposedConv { kernel: 4, stride: 2 },
            in_channels: 8,
            out_channels: 8,
            activation: Activation::LeakyRectifier(LEAKY_SLOPE),
        },
        LayerSpec {
            kind: LayerKind::TransposedConv { kernel: 4, stride: 2 },
            in_channels: 8,
            out_channels: 1,
            activation: Activation::Tanh,
        },
    ];
    GeneratorNetwork::new(layers, 2, 1, seed).expect("preset is valid")
}

/// Ten-layer generator emitting `n_slice` two-channel slices of `h x w`.
///
/// Channel widths are scaled so the parameter count is about six times the
/// output volume size. Spatial size must be a multiple of 16 (four 2x
/// upsampling stages from a dense seed grid).
pub fn mri_preset(
    latent_dim: usize,
    height: usize,
    width: usize,
    n_slice: usize,
    seed: u64,
) -> Result<GeneratorNetwork, GeneratorError> {
    if height % 16 != 0 || width % 16 != 0 {
        return Err(GeneratorError::BadLayer(format!(
            "spatial size {height}x{width} must be a multiple of 16"
        )));
    }
    if latent_dim == 0 || n_slice == 0 {
        return Err(GeneratorError::BadLayer(
            "latent dimension and slice count must be positive".into(),
        ));
    }
    let out_channels = 2 * n_slice;
    let volume = (out_channels * height * width) as f64;
    let multiplier = (volume / 8192.0).sqrt().max(0.35);
    let base = [40.0, 28.0, 20.0, 14.0, 10.0];
    let ch: Vec<usize> = base
        .iter()
        .map(|&b| ((b * multiplier).round() as usize).max(4))
        .collect();
    let leaky = Activation::LeakyRectifier(LEAKY_SLOPE);
    let mut layers = vec![LayerSpec {
        kind: LayerKind::Dense {
            out_h: height / 16,
            out_w: width / 16,
        },
        in_channels: latent_dim,
        out_channels: ch[0],
        activation: leaky,
    }];
    for stage in 0..4 {
        layers.push(LayerSpec {
            kind: LayerKind::TransposedConv { kernel: 4, stride: 2 },
            in_channels: ch[stage],
            out_channels: ch[stage + 1],
            activation: leaky,
        });
        let conv_out = if stage == 3 { ch[4] } else { ch[stage + 1] };
        layers.push(LayerSpec {
            kind: LayerKind::Conv { kernel: 3 },
            in_channels: ch[stage + 1],
            out_channels: conv_out,
            activation: leaky,
        });
    }
    layers.push(LayerSpec {
        kind: LayerKind::Conv { kernel: 3 },
        in_channels: ch[4],
        out_channels: out_channels,
        activation: Activation::Tanh,
    });
    GeneratorNetwork::new(layers, latent_dim, n_slice, seed)
}
