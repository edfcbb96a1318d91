//! Parameterized layers shared by the backbone, the adapters and the gate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{ParamId, ParamStore, Result, Scalar, Tensor, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    Conv,
    Transposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            kind: ConvKind::Conv,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            output_padding: 0,
        }
    }

    /// Transposed convolution that multiplies spatial size by `stride`.
    pub fn upsample(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            kind: ConvKind::Transposed,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            output_padding: stride - 1,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        match self.kind {
            ConvKind::Conv => [self.out_channels, self.in_channels, self.kernel, self.kernel],
            ConvKind::Transposed => [self.in_channels, self.out_channels, self.kernel, self.kernel],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel + self.out_channels
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        use crate::tensor::{conv2d_out_dim, tconv2d_out_dim};
        match self.kind {
            ConvKind::Conv => Some((
                conv2d_out_dim(h, self.kernel, self.stride, self.padding)?,
                conv2d_out_dim(w, self.kernel, self.stride, self.padding)?,
            )),
            ConvKind::Transposed => Some((
                tconv2d_out_dim(h, self.kernel, self.stride, self.padding, self.output_padding)?,
                tconv2d_out_dim(w, self.kernel, self.stride, self.padding, self.output_padding)?,
            )),
        }
    }
}

/// How fresh layer weights are drawn. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    Gaussian { std: f64 },
    /// Uniform weights with variance `2 / fan_in`, where `fan_in` counts
    /// the inputs feeding one output.
    He,
}

pub(crate) fn init_tensor<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zero => vec![T::zero(); n],
        Init::Gaussian { std } => {
            let normal = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| T::of(normal.sample(rng))).collect()
        }
        Init::He => {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
        }
    };
    Tensor::new(shape, data).expect("shape matches generated data")
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = match spec.kind {
            ConvKind::Conv => spec.in_channels * spec.kernel * spec.kernel,
            // each output of a strided transposed conv sees 1/stride^2 of the taps
            ConvKind::Transposed => (spec.in_channels * spec.kernel * spec.kernel / (spec.stride * spec.stride)).max(1),
        };
        let w = init_tensor(&spec.weight_shape(), fan_in, init, rng);
        let b = Tensor::zeros(&[spec.out_channels]);
        let weight = store.add(format!("{name}.weight"), w, trainable)?;
        let bias = store.add(format!("{name}.bias"), b, trainable)?;
        Ok(ConvLayer { spec, weight, bias })
    }

    /// Re-binds a layer to tensors already present in `store`.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str, spec: ConvSpec) -> Option<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let bias = store.id(&format!("{name}.bias"))?;
        (store.tensor(weight).shape() == spec.weight_shape()
            && store.tensor(bias).shape() == [spec.out_channels])
            .then_some(ConvLayer { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        match self.spec.kind {
            ConvKind::Conv => g.conv2d(x, w, b, self.spec.stride, self.spec.padding),
            ConvKind::Transposed => {
                g.conv_transpose2d(x, w, b, self.spec.stride, self.spec.padding, self.spec.output_padding)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = init_tensor(&[out_features, in_features], in_features, init, rng);
        let b = Tensor::zeros(&[out_features]);
        let weight = store.add(format!("{name}.weight"), w, true)?;
        let bias = store.add(format!("{name}.bias"), b, true)?;
        Ok(LinearLayer { in_features, out_features, weight, bias })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str, in_features: usize, out_features: usize) -> Option<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let bias = store.id(&format!("{name}.bias"))?;
        (store.tensor(weight).shape() == [out_features, in_features]
            && store.tensor(bias).shape() == [out_features])
            .then_some(LinearLayer { in_features, out_features, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }

    pub fn parameter_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}
