//! Learned image compression with per-domain decoder adapters.
//!
//! A small factorized-prior autoencoder is pretrained on a source domain.
//! Residual adapters, one triple per domain, are then plugged beside
//! selected decoder layers and blended by the weights of a gate network
//! that classifies the latent. Only adapters and gate are trained in the
//! second stage, so the encoder, the entropy model and therefore the
//! bitstream of the pretrained codec stay untouched.

pub mod adapters;
pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gate;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod tensor;
pub mod train;

pub use adapters::{AdapterBank, AdapterLayout, BankInit};
pub use bitstream::{DecodeLimits, StreamError};
pub use checkpoint::Checkpoint;
pub use codec::{Backbone, CodecConfig, Latent, QuantMode};
pub use config::RunConfig;
pub use data::{DomainDataset, Split, SyntheticKind};
pub use error::{Error, ErrorKind, Result};
pub use gate::{DomainDistribution, Gate, GateConfig};
pub use eval::{ParameterCounts, Report};
pub use image::Image;
pub use metrics::{BdResult, BdVariant, RDCurve, RDPoint};
pub use model::{AdaptationMeta, Compressed, Decompressed, GateInput, LicModel};
pub use policy::{apply_policy, PolicyKind};
pub use train::{MetricRecord, MseScale, RunState, TrainConfig};
