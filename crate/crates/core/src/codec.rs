//! The source-domain autoencoder: analysis transform, uniform quantizer,
//! per-channel factorized Gaussian entropy model and synthesis transform.
//!
//! The synthesis transform exposes plugging points where an
//! [`AdapterContext`](crate::adapters::AdapterContext) adds blended
//! residual adapter outputs to the frozen layer outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterContext;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{ConvLayer, ConvSpec, Init};
use crate::tensor::{gaussian_bin_mass, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// RD trade-off weights indexed by quality.
pub const LAMBDA_LADDER: [f64; 4] = [0.0018, 0.0067, 0.013, 0.0483];

/// Floor applied to symbol likelihoods before taking the logarithm.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Lower bound re-applied to entropy-model scales after every update.
pub const SCALE_LOWER_BOUND: f32 = 1e-6;

/// Total spatial downsampling of the analysis transform.
pub const DOWNSAMPLE: usize = 16;

pub const MIN_SIDE: usize = 64;

pub(crate) const LEAKY_SLOPE: f64 = 0.01;

pub const NAMESPACE: &str = "backbone.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Latent channels (M).
    pub latent_channels: usize,
    /// Hidden channels (N).
    pub hidden_channels: usize,
    pub lambda_rd: f64,
    pub quality_index: u8,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig::for_quality(0, 32, 64).expect("quality 0 exists")
    }
}

impl CodecConfig {
    pub fn for_quality(quality_index: u8, latent_channels: usize, hidden_channels: usize) -> Result<Self> {
        let lambda_rd = *LAMBDA_LADDER
            .get(quality_index as usize)
            .ok_or_else(|| Error::Config(format!("quality index {quality_index} outside 0..{}", LAMBDA_LADDER.len())))?;
        let c = CodecConfig { latent_channels, hidden_channels, lambda_rd, quality_index };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rd > 0.0 && self.lambda_rd.is_finite()) {
            return Err(Error::Config(format!("lambda_rd must be positive, got {}", self.lambda_rd)));
        }
        if self.latent_channels < 8 || self.hidden_channels < 8 {
            return Err(Error::Config(format!(
                "channel counts must be >= 8 (M = {}, N = {})",
                self.latent_channels, self.hidden_channels
            )));
        }
        Ok(())
    }
}

/// `M x h x w` feature map, unquantized (`y`) or integer-valued (`y_hat`).
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub quantized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive Uniform(-0.5, 0.5) noise.
    Train,
    /// Round half away from zero.
    Eval,
}

impl Latent {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, quantized: bool) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::Codec(format!("expected a [1, M, h, w] latent, got {s:?}")));
        }
        Ok(Latent {
            channels: s[1],
            height: s[2],
            width: s[3],
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            quantized,
        })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("latent dims match data")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Quantizes `y`. Train mode draws one uniform offset per element from `rng`.
pub fn quantize<R: Rng>(y: &Latent, mode: QuantMode, rng: &mut R) -> Result<Latent> {
    if y.quantized {
        return Err(Error::Codec("latent is already quantized".into()));
    }
    let data = match mode {
        QuantMode::Eval => y.data.iter().map(|v| v.round()).collect(),
        QuantMode::Train => y.data.iter().map(|v| v + rng.gen_range(-0.5f32..0.5)).collect(),
    };
    Ok(Latent { data, quantized: mode == QuantMode::Eval, ..y.clone() })
}

/// Uniform(-0.5, 0.5) noise of the given shape.
pub fn uniform_noise<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-0.5f64..0.5))).collect();
    Tensor::new(shape, data).expect("noise shape")
}

/// Per-channel discretized Gaussian prior over latent symbols.
#[derive(Debug, Clone)]
pub struct EntropyModel {
    pub mean: ParamId,
    pub scale: ParamId,
}

impl EntropyModel {
    pub fn means<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<f64> {
        store.tensor(self.mean).data().iter().map(|v| v.as_f64()).collect()
    }

    pub fn scales<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<f64> {
        store.tensor(self.scale).data().iter().map(|v| v.as_f64()).collect()
    }

    pub fn clamp_scales<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let lb = T::of(SCALE_LOWER_BOUND as f64);
        for s in store.tensor_mut(self.scale).data_mut() {
            if *s < lb || s.is_nan() {
                *s = lb;
            }
        }
    }

    /// Floored likelihood of symbol `v` in channel `c`.
    pub fn likelihood<T: Scalar>(&self, store: &ParamStore<T>, c: usize, v: f64) -> f64 {
        let mean = store.tensor(self.mean).data()[c].as_f64();
        let scale = store.tensor(self.scale).data()[c].as_f64();
        gaussian_bin_mass(v, mean, scale).max(LIKELIHOOD_FLOOR)
    }

    /// Estimated bits for each channel of `y_hat`.
    pub fn channel_rates<T: Scalar>(&self, store: &ParamStore<T>, y_hat: &Latent) -> Result<Vec<f64>> {
        let means = self.means(store);
        let scales = self.scales(store);
        if means.len() != y_hat.channels {
            return Err(Error::Codec(format!(
                "latent has {} channels, entropy model {}",
                y_hat.channels,
                means.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| **s <= 0.0) {
            return Err(Error::Codec(format!("entropy model has non-positive scale {s}")));
        }
        Ok((0..y_hat.channels)
            .map(|c| {
                y_hat
                    .channel(c)
                    .iter()
                    .map(|&v| -gaussian_bin_mass(v as f64, means[c], scales[c]).max(LIKELIHOOD_FLOOR).log2())
                    .sum()
            })
            .collect())
    }

    /// Estimated total bits of `y_hat`.
    pub fn rate_bits<T: Scalar>(&self, store: &ParamStore<T>, y_hat: &Latent) -> Result<f64> {
        Ok(self.channel_rates(store, y_hat)?.iter().sum())
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub name: &'static str,
    pub conv: ConvLayer,
    pub activation: bool,
}

/// Names and shapes of the backbone layers for a given config.
fn encoder_specs(c: &CodecConfig) -> [(&'static str, ConvSpec); 4] {
    let (m, n) = (c.latent_channels, c.hidden_channels);
    [
        ("enc.0", ConvSpec::conv(3, n, 5, 2)),
        ("enc.1", ConvSpec::conv(n, n, 5, 2)),
        ("enc.2", ConvSpec::conv(n, n, 5, 2)),
        ("enc.3", ConvSpec::conv(n, m, 5, 2)),
    ]
}

fn decoder_specs(c: &CodecConfig) -> [(&'static str, ConvSpec, bool); 5] {
    let (m, n) = (c.latent_channels, c.hidden_channels);
    [
        ("dec.up0", ConvSpec::upsample(m, n, 3, 2), true),
        ("dec.block", ConvSpec::conv(n, n, 3, 1), true),
        ("dec.up1", ConvSpec::upsample(n, n, 3, 2), true),
        ("dec.up2", ConvSpec::upsample(n, n, 3, 2), true),
        ("dec.up3", ConvSpec::upsample(n, 3, 3, 2), false),
    ]
}

/// Index of the decoder layer whose output is plugging point P0 (the second
/// decoder block).
pub const P0_LAYER: usize = 1;

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: CodecConfig,
    pub encoder: Vec<ConvLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub entropy: EntropyModel,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, config: CodecConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::new();
        for (name, spec) in encoder_specs(&config) {
            encoder.push(ConvLayer::new(store, &format!("{NAMESPACE}{name}"), spec, Init::He, true, rng)?);
        }
        let mut decoder = Vec::new();
        for (name, spec, activation) in decoder_specs(&config) {
            let conv = ConvLayer::new(store, &format!("{NAMESPACE}{name}"), spec, Init::He, true, rng)?;
            decoder.push(DecoderLayer { name, conv, activation });
        }
        let m = config.latent_channels;
        let mean = store.add(format!("{NAMESPACE}entropy.mean"), Tensor::zeros(&[m]), true)?;
        let scale = store.add(format!("{NAMESPACE}entropy.scale"), Tensor::full(&[m], T::one()), true)?;
        Ok(Backbone { config, encoder, decoder, entropy: EntropyModel { mean, scale } })
    }

    /// Rebuilds the layer handles over tensors loaded from a checkpoint.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let missing = |name: &str| Error::Checkpoint(format!("missing or mis-shaped backbone tensor {name}"));
        let mut encoder = Vec::new();
        for (name, spec) in encoder_specs(&config) {
            let full = format!("{NAMESPACE}{name}");
            encoder.push(ConvLayer::bind(store, &full, spec).ok_or_else(|| missing(&full))?);
        }
        let mut decoder = Vec::new();
        for (name, spec, activation) in decoder_specs(&config) {
            let full = format!("{NAMESPACE}{name}");
            let conv = ConvLayer::bind(store, &full, spec).ok_or_else(|| missing(&full))?;
            decoder.push(DecoderLayer { name, conv, activation });
        }
        let m = config.latent_channels;
        let find = |n: &str| {
            let full = format!("{NAMESPACE}{n}");
            store.id(&full).filter(|id| store.tensor(*id).shape() == [m]).ok_or_else(|| missing(&full))
        };
        let entropy = EntropyModel { mean: find("entropy.mean")?, scale: find("entropy.scale")? };
        Ok(Backbone { config, encoder, decoder, entropy })
    }

    pub fn encoder_parameter_count(&self) -> usize {
        self.encoder.iter().map(|l| l.spec.parameter_count()).sum()
    }

    pub fn decoder_parameter_count(&self) -> usize {
        self.decoder.iter().map(|l| l.conv.spec.parameter_count()).sum()
    }

    /// `g_a`: `[N, 3, H, W]` -> `[N, M, H/16, W/16]`.
    pub fn analysis<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i != last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    /// `g_s`, optionally with blended adapters at the plugging points. The
    /// output is not clamped.
    pub fn synthesis<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        y_hat: Var,
        adapters: Option<&AdapterContext<'_>>,
    ) -> Result<Var> {
        let m = self.config.latent_channels;
        let shape = g.value(y_hat).shape();
        if shape.len() != 4 || shape[1] != m {
            return Err(Error::Codec(format!("decoder expects {m} latent channels, got shape {shape:?}")));
        }
        let mut h = y_hat;
        for (i, layer) in self.decoder.iter().enumerate() {
            let input = h;
            h = layer.conv.forward(g, store, input)?;
            if layer.activation {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
            if let Some(ctx) = adapters {
                if let Some(site) = ctx.bank.layout.site_of_layer(i) {
                    h = ctx.bank.blend(g, store, input, h, ctx.v, site)?;
                }
            }
        }
        Ok(h)
    }

    /// Shape of each decoder layer's input and output for a latent of
    /// `h x w`, as `(in_channels, in_h, in_w, out_channels, out_h, out_w)`.
    pub fn decoder_shapes(&self, h: usize, w: usize) -> Vec<[usize; 6]> {
        let mut shapes = Vec::new();
        let (mut ch, mut hh, mut ww) = (self.config.latent_channels, h, w);
        for layer in &self.decoder {
            let (oh, ow) = layer.conv.spec.out_hw(hh, ww).unwrap_or((0, 0));
            shapes.push([ch, hh, ww, layer.conv.spec.out_channels, oh, ow]);
            (ch, hh, ww) = (layer.conv.spec.out_channels, oh, ow);
        }
        shapes
    }
}

/// `lambda * MSE * 255^2 + bits / pixels`.
pub fn rd_loss(x: &Image, x_hat: &Image, rate_bits: f64, lambda_rd: f64) -> Result<f64> {
    if x.height() != x_hat.height() || x.width() != x_hat.width() {
        return Err(Error::Codec(format!(
            "rd_loss shape mismatch: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            x_hat.height(),
            x_hat.width()
        )));
    }
    let mse = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / x.data().len() as f64;
    Ok(lambda_rd * mse * 255.0 * 255.0 + rate_bits / x.num_pixels() as f64)
}
