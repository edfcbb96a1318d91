//! A backbone plus, optionally, an adapter bank and gate sharing one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterBank, AdapterContext, AdapterLayout, BankInit};
use crate::bitstream::{self, channel_tables, DecodeLimits, RangeCoderTable, StreamError, StreamHeader};
use crate::codec::{self, quantize, Backbone, CodecConfig, Latent, QuantMode, DOWNSAMPLE, MIN_SIDE};
use crate::error::{Error, Result};
use crate::gate::{self, distributions, DomainDistribution, Gate, GateConfig};
use crate::image::{image_from_tensor, Image};
use crate::policy::{apply_policy, PolicyKind};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};

/// Which latent the gate reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateInput {
    /// The encoder output `y`, before rounding.
    #[default]
    Unquantized,
    /// The rounded latent `y_hat`.
    Quantized,
}

/// Structural description of an adaptation, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationMeta {
    pub k: usize,
    pub layout: AdapterLayout,
    pub gate: GateConfig,
    pub gate_input: GateInput,
    /// Policy the adapters were trained with.
    pub policy: PolicyKind,
    /// Domain names by label; index 0 is the source domain.
    pub domains: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Adaptation {
    pub meta: AdaptationMeta,
    pub bank: AdapterBank,
    pub gate: Gate,
}

#[derive(Debug, Clone)]
pub struct LicModel<T = f32> {
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub adaptation: Option<Adaptation>,
}

/// A coded image together with what the encoder saw.
#[derive(Debug, Clone)]
pub struct Compressed {
    pub bytes: Vec<u8>,
    pub analysis: Analysis,
    /// Blend weights written to the stream, after the policy.
    pub v_written: Option<DomainDistribution>,
}

#[derive(Debug, Clone)]
pub struct Decompressed {
    pub image: Image,
    pub header: StreamHeader,
    /// Weights used for blending, if adapters were applied.
    pub v_used: Option<DomainDistribution>,
    /// Fallbacks taken while decoding, also sent to the log.
    pub warnings: Vec<String>,
}

/// Encoder-side products for one image.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub y: Latent,
    pub y_hat: Latent,
    /// Gate output, present when the model carries adapters.
    pub v: Option<DomainDistribution>,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> LicModel<T> {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config, &mut rng)?;
        Ok(LicModel { store, backbone, adaptation: None })
    }

    /// Adds a fresh adapter bank and gate and freezes the backbone.
    pub fn attach_adapters(&mut self, meta: AdaptationMeta, init: BankInit, seed: u64) -> Result<()> {
        if self.adaptation.is_some() {
            return Err(Error::Config("model already carries adapters".into()));
        }
        if meta.gate.k != meta.k {
            return Err(Error::Config(format!("gate K = {} but bank K = {}", meta.gate.k, meta.k)));
        }
        if meta.domains.len() != meta.k + 1 {
            return Err(Error::Config(format!("{} domain names for K = {}", meta.domains.len(), meta.k)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = AdapterBank::init(&mut self.store, &self.backbone, meta.k, meta.layout, init, &mut rng)?;
        let gate = Gate::new(&mut self.store, self.backbone.config.latent_channels, meta.gate, &mut rng)?;
        self.adaptation = Some(Adaptation { meta, bank, gate });
        self.freeze_backbone();
        Ok(())
    }

    pub fn freeze_backbone(&mut self) {
        self.store.set_trainable_prefix(codec::NAMESPACE, false);
    }

    pub fn k(&self) -> Option<usize> {
        self.adaptation.as_ref().map(|a| a.meta.k)
    }

    pub fn backbone_hash(&self) -> [u8; 32] {
        self.store.hash_prefix(codec::NAMESPACE)
    }

    pub fn adapter_parameter_count(&self) -> usize {
        self.store.count_prefix(adapters::NAMESPACE)
    }

    pub fn gate_parameter_count(&self) -> usize {
        self.store.count_prefix(gate::NAMESPACE)
    }

    pub fn cast<U: Scalar>(&self) -> LicModel<U> {
        LicModel { store: self.store.cast(), backbone: self.backbone.clone(), adaptation: self.adaptation.clone() }
    }

    /// Copy without adapters or gate, as an older decoder would see it.
    pub fn backbone_only(&self) -> LicModel<T> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            if p.name.starts_with(codec::NAMESPACE) {
                store.add(p.name.clone(), p.tensor.clone(), true).expect("names unique in source store");
            }
        }
        let backbone = Backbone::bind(&store, self.backbone.config).expect("same tensors as source");
        LicModel { store, backbone, adaptation: None }
    }
}

impl LicModel<f32> {
    /// Pads, encodes and rounds `img`, and runs the gate if present.
    pub fn analyze(&self, img: &Image) -> Result<Analysis> {
        let padded = img.pad_reflect(DOWNSAMPLE, MIN_SIDE);
        let mut g = Graph::<f32>::new();
        let x = g.input(padded.to_tensor());
        let y = self.backbone.analysis(&mut g, &self.store, x)?;
        g.check_finite().map_err(|e| Error::Codec(format!("encoder produced non-finite activations ({e})")))?;
        let y_lat = Latent::from_tensor(g.value(y), false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y_hat = quantize(&y_lat, QuantMode::Eval, &mut rng)?;
        let v = match &self.adaptation {
            Some(a) => {
                let input = match a.meta.gate_input {
                    GateInput::Unquantized => y,
                    GateInput::Quantized => g.input(y_hat.to_tensor()),
                };
                let out = a.gate.forward(&mut g, &self.store, input)?;
                distributions(g.value(out.v))?.pop()
            }
            None => None,
        };
        Ok(Analysis { y: y_lat, y_hat, v, height: img.height(), width: img.width() })
    }

    /// Decodes `y_hat`, blending adapters with `v` when both are available,
    /// and crops to `height x width`.
    pub fn reconstruct(
        &self,
        y_hat: &Latent,
        v: Option<&DomainDistribution>,
        height: usize,
        width: usize,
    ) -> Result<Image> {
        if !y_hat.quantized {
            return Err(Error::Codec("decoder input must be quantized".into()));
        }
        let mut g = Graph::<f32>::new();
        let yv = g.input(y_hat.to_tensor());
        let out = match (&self.adaptation, v) {
            (Some(a), Some(v)) => {
                if v.len() != a.meta.k + 1 {
                    return Err(Error::Compat(format!(
                        "distribution has {} entries, model has {} domains",
                        v.len(),
                        a.meta.k + 1
                    )));
                }
                let vt = Tensor::new(&[1, v.len()], v.as_slice().iter().map(|&p| p as f32).collect())?;
                let vv = g.input(vt);
                let ctx = AdapterContext { bank: &a.bank, v: vv };
                self.backbone.synthesis(&mut g, &self.store, yv, Some(&ctx))?
            }
            _ => self.backbone.synthesis(&mut g, &self.store, yv, None)?,
        };
        g.check_finite().map_err(|e| Error::Codec(format!("decoder produced non-finite output ({e})")))?;
        let full = image_from_tensor(g.value(out), 0)?;
        if height > full.height() || width > full.width() {
            return Err(Error::Codec(format!(
                "requested {height}x{width} crop of a {}x{} reconstruction",
                full.height(),
                full.width()
            )));
        }
        full.crop(0, 0, height, width)
    }

    pub fn coder_tables(&self) -> Result<Vec<RangeCoderTable>> {
        let e = &self.backbone.entropy;
        Ok(channel_tables(&e.means(&self.store), &e.scales(&self.store))?)
    }

    /// Encodes `img`. With adapters, the gate output passes through `policy`
    /// and is written to the stream; `label` is only read by the oracle
    /// policy. A model without adapters writes a K = 0 stream.
    pub fn compress(&self, img: &Image, policy: PolicyKind, label: Option<usize>) -> Result<Compressed> {
        if img.height() > u16::MAX as usize || img.width() > u16::MAX as usize {
            return Err(Error::Data(format!("{}x{} image exceeds the stream's 16-bit dimensions", img.height(), img.width())));
        }
        let analysis = self.analyze(img)?;
        let v_written = match &analysis.v {
            Some(v) => Some(apply_policy(v, label, policy)?),
            None => None,
        };
        let header = StreamHeader {
            height: img.height() as u16,
            width: img.width() as u16,
            quality: self.backbone.config.quality_index,
            k: self.k().unwrap_or(0) as u8,
            policy,
        };
        let bytes = bitstream::encode_stream(header, &analysis.y_hat, v_written.as_ref(), &self.coder_tables()?)?;
        Ok(Compressed { bytes, analysis, v_written })
    }

    /// Decodes a stream. A stream with blend weights decodes with the
    /// backbone alone, plus a warning, when the model has no adapters, or
    /// when `force_backbone` is set and the model's K differs from the
    /// stream's; without `force_backbone` that K mismatch is an error.
    pub fn decompress(&self, bytes: &[u8], limits: DecodeLimits, force_backbone: bool) -> Result<Decompressed> {
        let raw = bitstream::parse_stream(bytes, limits)?;
        let q = self.backbone.config.quality_index;
        if raw.header.quality != q {
            return Err(StreamError::Mismatch(format!("stream quality {} but model quality {q}", raw.header.quality)).into());
        }
        let decoded = bitstream::decode_stream(bytes, &self.coder_tables()?, limits)?;
        let header = decoded.header;
        let mut warnings = Vec::new();
        let v_used = match (decoded.v, self.k()) {
            (None, _) => None,
            (Some(_), None) => {
                warnings.push(format!(
                    "stream carries weights for K = {} target domains but the checkpoint has no adapters; \
                     decoding with the backbone only",
                    header.k
                ));
                None
            }
            (Some(v), Some(k)) if k == header.k as usize => Some(v),
            (Some(_), Some(k)) => {
                let msg = format!("stream has K = {} but the checkpoint has K = {k}", header.k);
                if !force_backbone {
                    return Err(Error::Compat(msg));
                }
                warnings.push(format!("{msg}; decoding with the backbone only"));
                None
            }
        };
        for w in &warnings {
            log::warn!("{w}");
        }
        let image = self.reconstruct(&decoded.y_hat, v_used.as_ref(), header.height as usize, header.width as usize)?;
        Ok(Decompressed { image, header, v_used, warnings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_one, SyntheticKind};
    use crate::error::ErrorKind;

    fn meta(k: usize) -> AdaptationMeta {
        AdaptationMeta {
            k,
            layout: AdapterLayout::default(),
            gate: GateConfig { conv_channels: 4, pool_kernel: 2, adaptive_out: 2, k },
            gate_input: GateInput::Unquantized,
            policy: PolicyKind::Proposed,
            domains: (0..=k).map(|i| format!("d{i}")).collect(),
        }
    }

    fn models() -> (LicModel<f32>, LicModel<f32>) {
        let plain = LicModel::<f32>::new(CodecConfig::for_quality(1, 8, 8).unwrap(), 7).unwrap();
        let mut adapted = plain.clone();
        adapted.attach_adapters(meta(2), BankInit::Gaussian(crate::adapters::INIT_STD), 1).unwrap();
        (plain, adapted)
    }

    #[test]
    fn stream_round_trip_matches_direct_reconstruction() {
        let (plain, adapted) = models();
        let img = synthesize_one(SyntheticKind::LineSketch, 0, 70, 90, 0).unwrap();
        for policy in PolicyKind::ALL {
            let c = adapted.compress(&img, policy, Some(1)).unwrap();
            let d = adapted.decompress(&c.bytes, DecodeLimits::default(), false).unwrap();
            assert!(d.warnings.is_empty());
            assert_eq!((d.image.height(), d.image.width()), (70, 90));
            let direct = adapted.reconstruct(&c.analysis.y_hat, d.v_used.as_ref(), 70, 90).unwrap();
            assert_eq!(direct.data(), d.image.data());
            let written = c.v_written.unwrap();
            for (a, b) in written.as_slice().iter().zip(d.v_used.unwrap().as_slice()) {
                assert!((a - b).abs() <= 1.0 / 65535.0);
            }
        }
        let c = plain.compress(&img, PolicyKind::Proposed, None).unwrap();
        assert_eq!(c.bytes[11], 0, "K byte");
        let d = plain.decompress(&c.bytes, DecodeLimits::default(), false).unwrap();
        assert!(d.v_used.is_none() && d.warnings.is_empty());
    }

    #[test]
    fn adapter_free_and_mismatched_decoders() {
        let (plain, adapted) = models();
        let img = synthesize_one(SyntheticKind::FlatRegions, 0, 64, 64, 0).unwrap();
        let c = adapted.compress(&img, PolicyKind::Proposed, None).unwrap();

        let d = plain.decompress(&c.bytes, DecodeLimits::default(), false).unwrap();
        assert_eq!(d.warnings.len(), 1);
        let backbone = plain.reconstruct(&c.analysis.y_hat, None, 64, 64).unwrap();
        assert_eq!(d.image.data(), backbone.data());

        let mut other = plain.clone();
        other.attach_adapters(meta(3), BankInit::Gaussian(crate::adapters::INIT_STD), 1).unwrap();
        let e = other.decompress(&c.bytes, DecodeLimits::default(), false).unwrap_err();
        assert_eq!(e.kind(), ErrorKind::Compat);
        let d = other.decompress(&c.bytes, DecodeLimits::default(), true).unwrap();
        assert_eq!(d.warnings.len(), 1);
        assert_eq!(d.image.data(), backbone.data());

        let q2 = LicModel::<f32>::new(CodecConfig::for_quality(2, 8, 8).unwrap(), 7).unwrap();
        let e = q2.decompress(&c.bytes, DecodeLimits::default(), true).unwrap_err();
        assert_eq!(e.kind(), ErrorKind::Compat);
    }

    #[test]
    fn zero_bank_reconstructs_like_the_backbone() {
        let plain = LicModel::<f32>::new(CodecConfig::for_quality(0, 8, 8).unwrap(), 2).unwrap();
        let mut zero = plain.clone();
        zero.attach_adapters(meta(2), BankInit::Zero, 3).unwrap();
        let img = synthesize_one(SyntheticKind::SmoothTexture, 0, 64, 64, 1).unwrap();
        let a = zero.analyze(&img).unwrap();
        let blended = zero.reconstruct(&a.y_hat, a.v.as_ref(), 64, 64).unwrap();
        let base = plain.reconstruct(&a.y_hat, None, 64, 64).unwrap();
        assert_eq!(blended.data(), base.data());
    }
}
