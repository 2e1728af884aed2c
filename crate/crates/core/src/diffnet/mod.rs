//! A small reverse-mode differentiable layer stack.
//!
//! A [`Network`] is a straight line of [`LayerSpec`]s with at most one
//! [`LayerSpec::ConcatChannels`] junction, where a second ("side") input is
//! appended along the channel axis. That is enough to express a conditional
//! generator (`concat(z, y) -> ...`) and a conditional discriminator
//! (`concat(image, label planes) -> ...`).
//!
//! [`Network::forward`] returns the output together with a [`Tape`] holding
//! every intermediate activation; one call to [`Tape::backward`] (or
//! [`Tape::backward_inputs`]) turns an upstream gradient into gradients for
//! the inputs and, optionally, for every parameter.

mod gradcheck;
mod kernels;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{finite_difference_gradient, max_relative_error};
use kernels::ConvGeom;

/// LeakyReLU slope used unless a spec says otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `y = W x + b`, weight `[outputs, inputs]`. Input must be rank 1.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Strided convolution, weight `[out_channels, in_channels, k, k]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Fractionally-strided convolution, weight `[in_channels, out_channels, k, k]`.
    /// `output_size` is the expected `(height, width)`, checked against
    /// `(in - 1) * stride - 2 * padding + kernel`.
    TransposedConv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_size: [usize; 2],
    },
    Relu,
    LeakyRelu {
        #[serde(default = "default_slope")]
        slope: f64,
    },
    Tanh,
    Sigmoid,
    Reshape {
        shape: Vec<usize>,
    },
    /// Appends the side input (of shape `side`) along axis 0.
    ConcatChannels {
        side: Vec<usize>,
    },
    /// Per-channel `scale * x + shift` over axis 0, without batch statistics.
    AffineNorm {
        channels: usize,
    },
}

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

impl LayerSpec {
    pub fn leaky_relu() -> Self {
        LayerSpec::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::TransposedConv2d { .. } => "transposed_conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::ConcatChannels { .. } => "concat_channels",
            LayerSpec::AffineNorm { .. } => "affine_norm",
        }
    }

    /// Parameter tensors owned by this layer as `(suffix, shape)`.
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                vec![("weight", vec![outputs, inputs]), ("bias", vec![outputs])]
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![in_channels, out_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::AffineNorm { channels } => {
                vec![("scale", vec![channels]), ("shift", vec![channels])]
            }
            _ => Vec::new(),
        }
    }

    /// Output shape for a given input shape, or the reason it is rejected.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let numel: usize = input.iter().product();
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return Err(format!("dense expects input [{inputs}], got {input:?}"));
                }
                if *outputs == 0 {
                    return Err("dense with zero outputs".into());
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = expect_chw(input)?;
                if c != *in_channels {
                    return Err(format!("conv2d expects {in_channels} channels, got {c}"));
                }
                if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                    return Err("conv2d with zero kernel, stride, or channels".into());
                }
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(format!(
                        "conv2d kernel {kernel} larger than padded input {h}x{w}"
                    ));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![*out_channels, oh, ow])
            }
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_size,
            } => {
                let [c, h, w] = expect_chw(input)?;
                if c != *in_channels {
                    return Err(format!(
                        "transposed_conv2d expects {in_channels} channels, got {c}"
                    ));
                }
                if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                    return Err("transposed_conv2d with zero kernel, stride, or channels".into());
                }
                let extent = |n: usize| ((n - 1) * stride + kernel).checked_sub(2 * padding);
                match (extent(h), extent(w)) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 && [oh, ow] == *output_size => {
                        Ok(vec![*out_channels, oh, ow])
                    }
                    (oh, ow) => Err(format!(
                        "transposed_conv2d produces {oh:?}x{ow:?} from {h}x{w}, spec expects {output_size:?}"
                    )),
                }
            }
            LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::LeakyRelu { slope } => {
                if !slope.is_finite() {
                    return Err("leaky_relu slope must be finite".into());
                }
                Ok(input.to_vec())
            }
            LayerSpec::Reshape { shape } => {
                if shape.contains(&0) || shape.iter().product::<usize>() != numel {
                    return Err(format!("cannot reshape {input:?} to {shape:?}"));
                }
                Ok(shape.clone())
            }
            LayerSpec::ConcatChannels { side } => {
                if side.len() != input.len() || side[1..] != input[1..] || side[0] == 0 {
                    return Err(format!(
                        "side input {side:?} does not match trailing extents of {input:?}"
                    ));
                }
                let mut out = input.to_vec();
                out[0] += side[0];
                Ok(out)
            }
            LayerSpec::AffineNorm { channels } => {
                if input.first() != Some(channels) {
                    return Err(format!(
                        "affine_norm over {channels} channels, input {input:?}"
                    ));
                }
                Ok(input.to_vec())
            }
        }
    }

    fn conv_geom(&self, input: &[usize], output: &[usize]) -> ConvGeom {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            }
            | LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => ConvGeom {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                in_hw: (input[1], input[2]),
                out_hw: (output[1], output[2]),
            },
            _ => unreachable!("conv_geom on {}", self.name()),
        }
    }
}

fn expect_chw(input: &[usize]) -> std::result::Result<[usize; 3], String> {
    <[usize; 3]>::try_from(input)
        .map_err(|_| format!("expected a [channels, height, width] input, got {input:?}"))
}

/// Ordered, uniquely named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidSpec(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// `self += factor * other`; layouts must agree.
    pub fn add_scaled(&mut self, other: &ParameterSet, factor: f64) {
        assert_eq!(
            self.entries.len(),
            other.entries.len(),
            "parameter layout mismatch"
        );
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += factor * y;
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

/// A validated layer stack with known shapes at every boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output.
    shapes: Vec<Vec<usize>>,
    /// Index of the first parameter tensor of each layer.
    param_offsets: Vec<Option<usize>>,
    param_layout: Vec<(String, Vec<usize>)>,
    side_shape: Option<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "bad input shape {input_shape:?}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::InvalidSpec("network has no layers".into()));
        }
        let mut shapes = vec![input_shape.to_vec()];
        let mut param_offsets = Vec::with_capacity(layers.len());
        let mut param_layout = Vec::new();
        let mut side_shape = None;
        for (i, layer) in layers.iter().enumerate() {
            if let LayerSpec::ConcatChannels { side } = layer {
                if side_shape.is_some() {
                    return Err(Error::Layer {
                        layer: i,
                        reason: "only one concat_channels junction is allowed".into(),
                    });
                }
                side_shape = Some(side.clone());
            }
            let out = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|reason| Error::Layer { layer: i, reason })?;
            let owned = layer.param_shapes();
            if owned.is_empty() {
                param_offsets.push(None);
            } else {
                param_offsets.push(Some(param_layout.len()));
                for (suffix, shape) in owned {
                    param_layout.push((format!("{i}.{suffix}"), shape));
                }
            }
            shapes.push(out);
        }
        Ok(Network {
            layers,
            shapes,
            param_offsets,
            param_layout,
            side_shape,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    /// Shape flowing out of every layer, in order.
    pub fn layer_output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes[1..]
    }

    pub fn side_shape(&self) -> Option<&[usize]> {
        self.side_shape.as_deref()
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn param_layout(&self) -> &[(String, Vec<usize>)] {
        &self.param_layout
    }

    pub fn num_params(&self) -> usize {
        self.param_layout
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Weights and biases drawn from `N(0, std²)`; affine-norm scales start
    /// at 1 and shifts at 0.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, std: f64) -> ParameterSet {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut params = ParameterSet::new();
        for (name, shape) in &self.param_layout {
            let n = shape.iter().product();
            let data = if name.ends_with(".scale") {
                vec![1.0; n]
            } else if name.ends_with(".shift") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(rng)).collect()
            };
            params
                .push(
                    name.clone(),
                    Tensor::new(shape.clone(), data).expect("layout shape"),
                )
                .expect("layout names are unique");
        }
        params
    }

    /// Weights drawn from `N(0, gain² / fan_in)` with zero biases, where a
    /// transposed convolution's fan-in is `in_channels · k² / stride²`.
    pub fn init_params_fan_in<R: Rng + ?Sized>(&self, rng: &mut R, gain: f64) -> ParameterSet {
        let mut params = self.init_params(rng, 1.0);
        for (name, t) in params.iter_mut() {
            let (layer, kind) = name
                .split_once('.')
                .expect("parameter names are layer.kind");
            let layer: usize = layer.parse().expect("layer index");
            let fan_in = match &self.layers[layer] {
                LayerSpec::Dense { inputs, .. } => *inputs as f64,
                LayerSpec::Conv2d {
                    in_channels,
                    kernel,
                    ..
                } => (in_channels * kernel * kernel) as f64,
                LayerSpec::TransposedConv2d {
                    in_channels,
                    kernel,
                    stride,
                    ..
                } => (in_channels * kernel * kernel) as f64 / (stride * stride) as f64,
                _ => continue,
            };
            match kind {
                "weight" => t
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v *= gain / fan_in.sqrt()),
                "bias" => t.data_mut().fill(0.0),
                _ => {}
            }
        }
        params
    }

    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        if params.len() != self.param_layout.len() {
            return Err(Error::Shape(format!(
                "network has {} parameter tensors, parameter set has {}",
                self.param_layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in self.param_layout.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Evaluates the stack and records a single-use tape.
    pub fn forward<'a>(
        &'a self,
        params: &'a ParameterSet,
        input: &Tensor,
        side: Option<&Tensor>,
    ) -> Result<(Tensor, Tape<'a>)> {
        let acts = self.run(params, input, side, true)?;
        let output = Tensor::new(self.output_shape().to_vec(), acts.last().unwrap().clone())?;
        Ok((
            output,
            Tape {
                net: self,
                params,
                acts,
                consumed: false,
            },
        ))
    }

    /// Forward evaluation without keeping intermediates.
    pub fn eval(
        &self,
        params: &ParameterSet,
        input: &Tensor,
        side: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut acts = self.run(params, input, side, false)?;
        Tensor::new(self.output_shape().to_vec(), acts.pop().unwrap())
    }

    fn run(
        &self,
        params: &ParameterSet,
        input: &Tensor,
        side: Option<&Tensor>,
        keep: bool,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_params(params)?;
        input.ensure_shape(self.input_shape(), "network input")?;
        match (&self.side_shape, side) {
            (Some(expected), Some(s)) => s.ensure_shape(expected, "side input")?,
            (Some(expected), None) => {
                return Err(Error::Shape(format!(
                    "missing side input of shape {expected:?}"
                )))
            }
            (None, Some(_)) => {
                return Err(Error::Shape(
                    "side input given to a network without a junction".into(),
                ))
            }
            (None, None) => {}
        }
        let mut acts: Vec<Vec<f64>> =
            Vec::with_capacity(if keep { self.layers.len() + 1 } else { 2 });
        acts.push(input.data().to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let out_len: usize = self.shapes[i + 1].iter().product();
            let p = |k: usize| params.tensor(self.param_offsets[i].unwrap() + k).data();
            let y = match layer {
                LayerSpec::Dense { .. } => {
                    let mut y = vec![0.0; out_len];
                    kernels::dense_forward(p(0), p(1), x, &mut y);
                    y
                }
                LayerSpec::Conv2d { .. } => {
                    let mut y = vec![0.0; out_len];
                    let g = layer.conv_geom(&self.shapes[i], &self.shapes[i + 1]);
                    kernels::conv_forward(&g, p(0), p(1), x, &mut y);
                    y
                }
                LayerSpec::TransposedConv2d { .. } => {
                    let mut y = vec![0.0; out_len];
                    let g = layer.conv_geom(&self.shapes[i], &self.shapes[i + 1]);
                    kernels::tconv_forward(&g, p(0), p(1), x, &mut y);
                    y
                }
                LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                LayerSpec::LeakyRelu { slope } => x
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { slope * v })
                    .collect(),
                LayerSpec::Tanh => x.iter().map(|v| v.tanh()).collect(),
                LayerSpec::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
                LayerSpec::Reshape { .. } => x.clone(),
                LayerSpec::ConcatChannels { .. } => {
                    let mut y = Vec::with_capacity(out_len);
                    y.extend_from_slice(x);
                    y.extend_from_slice(side.expect("validated above").data());
                    y
                }
                LayerSpec::AffineNorm { channels } => {
                    let (scale, shift) = (p(0), p(1));
                    let per = x.len() / channels;
                    x.iter()
                        .enumerate()
                        .map(|(j, &v)| scale[j / per] * v + shift[j / per])
                        .collect()
                }
            };
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: i });
            }
            if !keep {
                acts.clear();
            }
            acts.push(y);
        }
        Ok(acts)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradients with respect to the primary and side inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradients {
    pub input: Tensor,
    pub side: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub inputs: InputGradients,
    pub params: ParameterSet,
}

/// Activations recorded by one forward pass. Consumed by the first backward
/// call; a second call fails with [`Error::TapeConsumed`].
#[derive(Debug)]
pub struct Tape<'a> {
    net: &'a Network,
    params: &'a ParameterSet,
    acts: Vec<Vec<f64>>,
    consumed: bool,
}

impl Tape<'_> {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Gradients of `<output, upstream>` with respect to inputs and parameters.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Gradients> {
        let (inputs, params) = self.propagate(upstream, true)?;
        Ok(Gradients {
            inputs,
            params: params.expect("requested"),
        })
    }

    /// Like [`Tape::backward`] but skips the parameter gradients.
    pub fn backward_inputs(&mut self, upstream: &Tensor) -> Result<InputGradients> {
        Ok(self.propagate(upstream, false)?.0)
    }

    fn propagate(
        &mut self,
        upstream: &Tensor,
        want_params: bool,
    ) -> Result<(InputGradients, Option<ParameterSet>)> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        upstream.ensure_shape(self.net.output_shape(), "upstream gradient")?;
        self.consumed = true;
        let net = self.net;
        let params = self.params;
        let acts = std::mem::take(&mut self.acts);
        let mut pgrads = want_params.then(|| params.zeros_like());
        let mut side_grad = None;
        let mut g = upstream.data().to_vec();
        for (i, layer) in net.layers.iter().enumerate().rev() {
            let x = &acts[i];
            let y = &acts[i + 1];
            let offset = net.param_offsets[i];
            let p = |k: usize| params.tensor(offset.unwrap() + k).data();
            g = match layer {
                LayerSpec::Dense { .. } => {
                    let mut gx = vec![0.0; x.len()];
                    let pg = pgrads.as_mut().map(|pg| split_pair(pg, offset.unwrap()));
                    kernels::dense_backward(p(0), x, &g, &mut gx, pg);
                    gx
                }
                LayerSpec::Conv2d { .. } => {
                    let mut gx = vec![0.0; x.len()];
                    let geom = layer.conv_geom(&net.shapes[i], &net.shapes[i + 1]);
                    let pg = pgrads.as_mut().map(|pg| split_pair(pg, offset.unwrap()));
                    kernels::conv_backward(&geom, p(0), x, &g, &mut gx, pg);
                    gx
                }
                LayerSpec::TransposedConv2d { .. } => {
                    let mut gx = vec![0.0; x.len()];
                    let geom = layer.conv_geom(&net.shapes[i], &net.shapes[i + 1]);
                    let pg = pgrads.as_mut().map(|pg| split_pair(pg, offset.unwrap()));
                    kernels::tconv_backward(&geom, p(0), x, &g, &mut gx, pg);
                    gx
                }
                LayerSpec::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect(),
                LayerSpec::LeakyRelu { slope } => g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { slope * gv })
                    .collect(),
                LayerSpec::Tanh => g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                    .collect(),
                LayerSpec::Sigmoid => g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                    .collect(),
                LayerSpec::Reshape { .. } => g,
                LayerSpec::ConcatChannels { side } => {
                    let side_part = g.split_off(x.len());
                    side_grad = Some(Tensor::new(side.clone(), side_part)?);
                    g
                }
                LayerSpec::AffineNorm { channels } => {
                    let scale = p(0);
                    let per = x.len() / channels;
                    if let Some(pg) = pgrads.as_mut() {
                        let (gs, gb) = split_pair(pg, offset.unwrap());
                        for (j, (&gv, &xv)) in g.iter().zip(x).enumerate() {
                            gs[j / per] += gv * xv;
                            gb[j / per] += gv;
                        }
                    }
                    g.iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * scale[j / per])
                        .collect()
                }
            };
        }
        let input = Tensor::new(net.input_shape().to_vec(), g)?;
        Ok((
            InputGradients {
                input,
                side: side_grad,
            },
            pgrads,
        ))
    }
}

/// Mutable views of the two consecutive tensors starting at `index`.
fn split_pair(params: &mut ParameterSet, index: usize) -> (&mut [f64], &mut [f64]) {
    let (head, tail) = params.entries.split_at_mut(index + 1);
    (head[index].1.data_mut(), tail[0].1.data_mut())
}

#[cfg(test)]
mod tests;
