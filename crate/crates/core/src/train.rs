//! Two training stages: rate-distortion pretraining of the backbone, and
//! joint adapter and gate training on all domains with the backbone frozen.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterContext};
use crate::codec::{self, uniform_noise, LIKELIHOOD_FLOOR};
use crate::data::{epoch_batches, Split};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::model::{GateInput, LicModel};
use crate::optim::{Adam, PlateauScheduler};
use crate::policy::{policy_weights, PolicyKind};
use crate::tensor::{Gradients, Graph, Tensor, TensorError, Var};

/// Pixel scale of the distortion term in the adapter objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MseScale {
    /// Pixels in `[0, 1]`.
    #[default]
    Unit,
    /// Pixels in `[0, 255]`.
    Byte,
}

impl MseScale {
    pub fn factor(self) -> f64 {
        match self {
            MseScale::Unit => 1.0,
            MseScale::Byte => 255.0 * 255.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the distortion term in the adapter objective.
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub crop_size: usize,
    pub augment: bool,
    pub mse_scale: MseScale,
    /// Learning rate of adapter parameters during stage B when it differs
    /// from `lr` (which then drives the gate). Schedule changes scale both.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.5,
            lr: 1e-4,
            batch_size: 8,
            epochs: 30,
            patience: 15,
            seed: 0,
            crop_size: 64,
            augment: true,
            mse_scale: MseScale::Unit,
            adapter_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if let Some(a) = self.adapter_lr {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("adapter_lr must be positive, got {a}"));
            }
        }
        if self.patience < 1 {
            return bad("patience must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.crop_size < codec::MIN_SIDE || !self.crop_size.is_multiple_of(codec::DOWNSAMPLE) {
            return bad(format!("crop_size must be a multiple of 16 and >= 64, got {}", self.crop_size));
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Mean squared error on `[0, 1]` pixels.
    pub mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bpp: Option<f64>,
    pub lr: f64,
}

pub fn to_ndjson(records: &[MetricRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
}

pub fn write_metric_log(path: impl AsRef<Path>, records: &[MetricRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_ndjson(records)).map_err(|e| Error::io(path, e))
}

/// Everything needed to continue a run after the last completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub epoch: usize,
    pub adam: Adam,
    pub scheduler: PlateauScheduler,
    pub log: Vec<MetricRecord>,
}

impl RunState {
    pub fn new(cfg: &TrainConfig) -> Self {
        RunState { epoch: 0, adam: Adam::new(cfg.lr), scheduler: PlateauScheduler::new(cfg.patience), log: Vec::new() }
    }

    pub fn lr(&self) -> f64 {
        self.adam.lr
    }

    /// Last record of `split`.
    pub fn last(&self, split: Split) -> Option<&MetricRecord> {
        self.log.iter().rev().find(|r| r.split == split)
    }
}

/// Per-epoch generator: the same `(seed, epoch)` always yields the same
/// batches and noise, so resumed runs replay exactly.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64 + 1);
    r
}

fn diverged(epoch: usize, e: impl std::fmt::Display) -> Error {
    Error::Divergence { epoch, detail: e.to_string() }
}

/// Center `crop x crop` windows of images at least that large.
fn center_crops(images: &[Image], crop: usize) -> Result<Vec<Image>> {
    images
        .iter()
        .map(|img| {
            if img.height() < crop || img.width() < crop {
                return Err(Error::Config(format!("crop {crop} larger than {}x{} image", img.height(), img.width())));
            }
            img.crop((img.height() - crop) / 2, (img.width() - crop) / 2, crop, crop)
        })
        .collect()
}

// ---------------------------------------------------------------- stage A

/// Terms of the relaxed rate-distortion objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct RdTerms {
    pub loss: Var,
    pub mse: Var,
    pub bits: Var,
}

/// `lambda * 255^2 * MSE + bits / pixels` with additive-noise quantization
/// when `noise` is given and rounding otherwise.
pub fn rd_objective(
    g: &mut Graph<f32>,
    model: &LicModel<f32>,
    x: Var,
    noise: Option<Tensor<f32>>,
) -> Result<RdTerms> {
    let b = &model.backbone;
    let store = &model.store;
    let y = b.analysis(g, store, x)?;
    let y_q = match noise {
        Some(n) => {
            let nv = g.input(n);
            g.add(y, nv)?
        }
        None => g.input(g.value(y).map(f32::round)),
    };
    let x_hat = b.synthesis(g, store, y_q, None)?;
    let mse = g.mse(x_hat, x)?;
    let mean = g.param(store, b.entropy.mean);
    let scale = g.param(store, b.entropy.scale);
    let bits = g.gaussian_rate(y_q, mean, scale, LIKELIHOOD_FLOOR)?;
    let s = g.value(x).shape();
    let pixels = (s[0] * s[2] * s[3]) as f64;
    let d = g.scale(mse, b.config.lambda_rd * 255.0 * 255.0);
    let r = g.scale(bits, 1.0 / pixels);
    let loss = g.add(d, r)?;
    Ok(RdTerms { loss, mse, bits })
}

/// Runs stage A from `state` (or scratch) until `cfg.epochs` epochs are
/// complete. `val` drives the plateau schedule; the training loss is used
/// when it is empty.
pub fn pretrain_backbone(
    model: &mut LicModel<f32>,
    train: &[Image],
    val: &[Image],
    cfg: &TrainConfig,
    state: Option<RunState>,
) -> Result<RunState> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("pretraining needs at least one source image".into()));
    }
    let mut state = state.unwrap_or_else(|| RunState::new(cfg));
    let val_crops = center_crops(val, cfg.crop_size)?;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let batches = epoch_batches(train, cfg.batch_size, cfg.crop_size, cfg.augment, &mut rng)?;
        let (mut loss_sum, mut mse_sum, mut bits_sum, mut pixels, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for batch in batches {
            let bs = batch.labels.len();
            let mut g = Graph::new();
            let x = g.input(batch.images);
            let latent_shape = [bs, model.backbone.config.latent_channels, cfg.crop_size / 16, cfg.crop_size / 16];
            let noise: Tensor<f32> = uniform_noise(&latent_shape, &mut rng);
            let t = rd_objective(&mut g, model, x, Some(noise))?;
            let loss = g.value(t.loss).item() as f64;
            if !loss.is_finite() {
                return Err(diverged(epoch, format!("non-finite RD loss {loss}")));
            }
            let grads = g.backward(t.loss, &model.store).map_err(|e| diverged(epoch, e))?;
            state.adam.step(&mut model.store, &grads);
            model.backbone.entropy.clamp_scales(&mut model.store);
            loss_sum += loss * bs as f64;
            mse_sum += g.value(t.mse).item() as f64 * bs as f64;
            bits_sum += g.value(t.bits).item() as f64;
            pixels += (bs * cfg.crop_size * cfg.crop_size) as f64;
            n += bs;
        }
        let lr = state.lr();
        let train_loss = loss_sum / n as f64;
        state.log.push(MetricRecord {
            stage: "pretrain".into(),
            epoch,
            split: Split::Train,
            loss: train_loss,
            mse: mse_sum / n as f64,
            ce: None,
            gate_acc: None,
            bpp: Some(bits_sum / pixels),
            lr,
        });
        let monitored = if val_crops.is_empty() {
            train_loss
        } else {
            let rec = evaluate_rd(model, &val_crops, cfg.batch_size, epoch, lr)?;
            let l = rec.loss;
            state.log.push(rec);
            l
        };
        state.adam.lr = state.scheduler.observe(monitored, lr);
        state.epoch = epoch;
        log::info!("pretrain epoch {epoch}: train loss {train_loss:.5}, monitored {monitored:.5}, lr {lr:.2e}");
    }
    Ok(state)
}

/// Rounded-latent RD loss over fixed images.
pub fn evaluate_rd(model: &LicModel<f32>, images: &[Image], batch_size: usize, epoch: usize, lr: f64) -> Result<MetricRecord> {
    let (mut loss_sum, mut mse_sum, mut bits_sum, mut pixels) = (0.0, 0.0, 0.0, 0.0);
    for chunk in images.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let x = g.input(batch_tensor(chunk)?);
        let t = rd_objective(&mut g, model, x, None)?;
        loss_sum += g.value(t.loss).item() as f64 * chunk.len() as f64;
        mse_sum += g.value(t.mse).item() as f64 * chunk.len() as f64;
        bits_sum += g.value(t.bits).item() as f64;
        pixels += chunk.iter().map(|i| i.num_pixels()).sum::<usize>() as f64;
    }
    let n = images.len() as f64;
    Ok(MetricRecord {
        stage: "pretrain".into(),
        epoch,
        split: Split::Val,
        loss: loss_sum / n,
        mse: mse_sum / n,
        ce: None,
        gate_acc: None,
        bpp: Some(bits_sum / pixels),
        lr,
    })
}

// ---------------------------------------------------------------- stage B

/// `gamma * MSE(x, x_hat) + CE(label, softmax(logits))` for one image.
pub fn adapter_loss(x: &Image, x_hat: &Image, logits: &[f64], label: usize, gamma: f64, scale: MseScale) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Tensor(TensorError::Contract {
            op: "adapter_loss",
            detail: format!("label {label} outside [0, {})", logits.len()),
        }));
    }
    if x.height() != x_hat.height() || x.width() != x_hat.width() {
        return Err(Error::Data("adapter_loss shape mismatch".into()));
    }
    let mse = x.data().iter().zip(x_hat.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>()
        / x.data().len() as f64;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(gamma * mse * scale.factor() + (lse - logits[label]))
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterTerms {
    pub loss: Var,
    /// MSE on `[0, 1]` pixels, before scaling.
    pub mse: Var,
    pub ce: Var,
    pub logits: Var,
    pub v: Var,
    pub x_hat: Var,
}

/// Stage-B objective on a labeled batch. The decoder sees the rounded
/// latent, the gate sees the latent selected by the model's [`GateInput`],
/// and the blend weights follow `policy`.
pub fn adapter_objective<S: crate::tensor::Scalar>(
    g: &mut Graph<S>,
    model: &LicModel<S>,
    x: Var,
    labels: &[usize],
    gamma: f64,
    scale: MseScale,
    policy: PolicyKind,
) -> Result<AdapterTerms> {
    let a = model.adaptation.as_ref().ok_or_else(|| Error::Config("model has no adapters to train".into()))?;
    let store = &model.store;
    let y = model.backbone.analysis(g, store, x)?;
    let y_hat = g.input(g.value(y).map(|v| v.round()));
    let gate_in = match a.meta.gate_input {
        GateInput::Unquantized => y,
        GateInput::Quantized => y_hat,
    };
    let out = a.gate.forward(g, store, gate_in)?;
    let w = policy_weights(g, out.v, Some(labels), policy)?;
    let ctx = AdapterContext { bank: &a.bank, v: w };
    let x_hat = model.backbone.synthesis(g, store, y_hat, Some(&ctx))?;
    let mse = g.mse(x_hat, x)?;
    let ce = g.cross_entropy(out.logits, labels)?;
    let d = g.scale(mse, gamma * scale.factor());
    let loss = g.add(d, ce)?;
    Ok(AdapterTerms { loss, mse, ce, logits: out.logits, v: out.v, x_hat })
}

fn argmax_hits(v: &Tensor<f32>, labels: &[usize]) -> usize {
    let c = v.shape()[1];
    v.data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best == l
        })
        .count()
}

fn assert_frozen(model: &LicModel<f32>, grads: &Gradients<f32>) -> Result<()> {
    for id in model.store.ids_with_prefix(codec::NAMESPACE) {
        if grads.param(id).data().iter().any(|&v| v != 0.0) {
            return Err(Error::Codec(format!("frozen parameter {} received a gradient", model.store.get(id).name)));
        }
    }
    Ok(())
}

/// Runs stage B until `cfg.epochs` epochs are complete. Only adapter and
/// gate tensors change; the backbone hash is checked at the end.
pub fn train_adapters(
    model: &mut LicModel<f32>,
    train: &[Image],
    val: &[Image],
    cfg: &TrainConfig,
    policy: PolicyKind,
    state: Option<RunState>,
) -> Result<RunState> {
    cfg.validate()?;
    let k = model.k().ok_or_else(|| Error::Config("model has no adapters to train".into()))?;
    for label in 0..=k {
        if !train.iter().any(|i| i.domain_label == Some(label)) {
            return Err(Error::Config(format!("training set has no images of domain {label}")));
        }
    }
    if let Some(bad) = train.iter().chain(val).find(|i| i.domain_label.is_none_or(|l| l > k)) {
        return Err(Error::Config(format!("image label {:?} outside [0, {k}]", bad.domain_label)));
    }
    model.freeze_backbone();
    let before = model.backbone_hash();
    let mut state = state.unwrap_or_else(|| RunState::new(cfg));
    let val_crops = center_crops(val, cfg.crop_size)?;
    let adapter_ratio = cfg.adapter_lr.map_or(1.0, |a| a / cfg.lr);
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let batches = epoch_batches(train, cfg.batch_size, cfg.crop_size, cfg.augment, &mut rng)?;
        let (mut loss_sum, mut mse_sum, mut ce_sum, mut hits, mut n) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for batch in batches {
            let bs = batch.labels.len();
            let mut g = Graph::new();
            let x = g.input(batch.images);
            let t = adapter_objective(&mut g, model, x, &batch.labels, cfg.gamma, cfg.mse_scale, policy)?;
            let loss = g.value(t.loss).item() as f64;
            if !loss.is_finite() {
                return Err(diverged(epoch, format!("non-finite adapter loss {loss}")));
            }
            let grads = g.backward(t.loss, &model.store).map_err(|e| diverged(epoch, e))?;
            assert_frozen(model, &grads)?;
            state.adam.step_scaled(&mut model.store, &grads, |name| {
                if name.starts_with(adapters::NAMESPACE) {
                    adapter_ratio
                } else {
                    1.0
                }
            });
            loss_sum += loss * bs as f64;
            mse_sum += g.value(t.mse).item() as f64 * bs as f64;
            ce_sum += g.value(t.ce).item() as f64 * bs as f64;
            hits += argmax_hits(g.value(t.v), &batch.labels);
            n += bs;
        }
        let lr = state.lr();
        let nf = n as f64;
        let mse = mse_sum / nf;
        let ce = ce_sum / nf;
        state.log.push(MetricRecord {
            stage: "adapt".into(),
            epoch,
            split: Split::Train,
            // reported loss is recomposed from its averaged terms
            loss: cfg.gamma * cfg.mse_scale.factor() * mse + ce,
            mse,
            ce: Some(ce),
            gate_acc: Some(hits as f64 / nf),
            bpp: None,
            lr,
        });
        debug_assert!((loss_sum / nf - state.log.last().unwrap().loss).abs() < 1e-3);
        let monitored = if val_crops.is_empty() {
            loss_sum / nf
        } else {
            let rec = evaluate_adapters(model, &val_crops, cfg, policy, epoch, lr)?;
            let l = rec.loss;
            state.log.push(rec);
            l
        };
        state.adam.lr = state.scheduler.observe(monitored, lr);
        state.epoch = epoch;
        log::info!("adapt epoch {epoch}: monitored {monitored:.5}, lr {lr:.2e}");
    }
    if model.backbone_hash() != before {
        return Err(Error::Codec("backbone parameters changed during adapter training".into()));
    }
    Ok(state)
}

/// Stage-B loss and gate accuracy over fixed labeled images.
pub fn evaluate_adapters(
    model: &LicModel<f32>,
    images: &[Image],
    cfg: &TrainConfig,
    policy: PolicyKind,
    epoch: usize,
    lr: f64,
) -> Result<MetricRecord> {
    let (mut mse_sum, mut ce_sum, mut hits) = (0.0, 0.0, 0usize);
    for chunk in images.chunks(cfg.batch_size.max(1)) {
        let labels: Vec<usize> = chunk.iter().map(|i| i.domain_label.unwrap_or(0)).collect();
        let mut g = Graph::new();
        let x = g.input(batch_tensor(chunk)?);
        let t = adapter_objective(&mut g, model, x, &labels, cfg.gamma, cfg.mse_scale, policy)?;
        mse_sum += g.value(t.mse).item() as f64 * chunk.len() as f64;
        ce_sum += g.value(t.ce).item() as f64 * chunk.len() as f64;
        hits += argmax_hits(g.value(t.v), &labels);
    }
    let n = images.len() as f64;
    let (mse, ce) = (mse_sum / n, ce_sum / n);
    Ok(MetricRecord {
        stage: "adapt".into(),
        epoch,
        split: Split::Val,
        loss: cfg.gamma * cfg.mse_scale.factor() * mse + ce,
        mse,
        ce: Some(ce),
        gate_acc: Some(hits as f64 / n),
        bpp: None,
        lr,
    })
}
