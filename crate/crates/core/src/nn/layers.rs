//! Parameterized building blocks: linear projections, convolutions, and
//! layer normalization.
//!
//! A layer owns only the [`ParamId`]s of its weights; the values live in the
//! shared [`ParamStore`]. Construction draws initial weights from the given
//! RNG (uniform Kaiming scheme, bound `sqrt(6 / fan_in)`), so a seeded RNG
//! makes the whole model reproducible. Biases start at zero; normalization
//! starts as the identity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::graph::{Graph, NodeId, Pad};
use crate::nn::store::{ParamId, ParamStore};
use crate::nn::tensor::{sc, Scalar, Tensor};

/// Shared epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn kaiming_uniform<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<F> = (0..numel)
        .map(|_| sc::<F>((rng.gen::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Fully connected map over the trailing dimension: `[..., d_in] -> [..., d_out]`.
#[derive(Debug)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(&format!("{name}.weight"), kaiming_uniform(rng, &[d_in, d_out], d_in));
        let bias = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias, d_in, d_out }
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// Applies the projection to the trailing dimension of any-rank input.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let rows = g.value(x).len() / self.d_in;
        let flat = g.reshape(x, &[rows, self.d_in])?;
        let w = g.param(self.weight)?;
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let bn = g.param(b)?;
            y = g.add_bias(y, bn)?;
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(self.d_out);
        g.reshape(y, &out_shape)
    }
}

/// 2-D convolution layer over `[h, w, c]` feature maps.
#[derive(Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    dilation: usize,
    pad: Pad,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        dilation: usize,
        pad: Pad,
        bias: bool,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let weight = store.add(
            &format!("{name}.weight"),
            kaiming_uniform(rng, &[kernel, kernel, c_in, c_out], fan_in),
        );
        let bias = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self { weight, bias, stride, dilation, pad }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight)?;
        let mut y = g.conv2d(x, w, self.stride, self.dilation, self.pad)?;
        if let Some(b) = self.bias {
            let bn = g.param(b)?;
            y = g.add_bias(y, bn)?;
        }
        Ok(y)
    }
}

/// Per-channel convolution (stride 1, same padding).
#[derive(Debug)]
pub struct DepthwiseConv2d {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl DepthwiseConv2d {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kernel: usize,
        channels: usize,
        bias: bool,
    ) -> Self {
        let fan_in = kernel * kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            kaiming_uniform(rng, &[kernel, kernel, channels], fan_in),
        );
        let bias = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[channels])));
        Self { weight, bias }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight)?;
        let mut y = g.depthwise_conv2d(x, w)?;
        if let Some(b) = self.bias {
            let bn = g.param(b)?;
            y = g.add_bias(y, bn)?;
        }
        Ok(y)
    }
}

/// Layer normalization over the trailing dimension with learnable scale and
/// shift (initialized to the identity).
#[derive(Debug)]
pub struct LayerNorm {
    scale: ParamId,
    shift: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let scale = store.add(&format!("{name}.scale"), Tensor::full(&[channels], F::one()));
        let shift = store.add(&format!("{name}.shift"), Tensor::zeros(&[channels]));
        Self { scale, shift, eps: LAYER_NORM_EPS }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(self.scale)?;
        let beta = g.param(self.shift)?;
        g.layer_norm(x, gamma, beta, sc(self.eps))
    }
}
