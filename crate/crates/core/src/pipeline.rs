//! The two training stages and evaluation wired to a [`RunConfig`], one
//! model per quality index.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::adapters::BankInit;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{DomainDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{eval_sets, evaluate_model, Report};
use crate::image::Image;
use crate::model::LicModel;
use crate::train::{pretrain_backbone, train_adapters, write_metric_log, RunState};

/// A trained model and the state of the run that produced it.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: LicModel<f32>,
    pub state: RunState,
}

fn images_of(ds: &DomainDataset, label: Option<usize>, split: Split) -> Result<Vec<Image>> {
    ds.items
        .iter()
        .filter(|i| i.split == split && label.is_none_or(|l| i.label == l))
        .map(|i| i.load())
        .collect()
}

/// Model initialization seed for one quality.
pub fn init_seed(cfg: &RunConfig, quality: u8) -> u64 {
    cfg.seed.wrapping_mul(1_000_003).wrapping_add(quality as u64)
}

/// Stage A on the source domain (label 0) at one quality, from scratch or
/// from the backbone of `warm` (another quality's checkpoint).
pub fn pretrain_quality(
    cfg: &RunConfig,
    ds: &DomainDataset,
    quality: u8,
    warm: Option<&LicModel<f32>>,
) -> Result<Trained> {
    let train = images_of(ds, Some(0), Split::Train)?;
    let val = images_of(ds, Some(0), Split::Val)?;
    if train.is_empty() {
        return Err(Error::Config(format!("source domain {:?} has no training images", ds.domains[0])));
    }
    let codec = cfg.backbone.codec(quality)?;
    let mut tc = cfg.pretrain.clone();
    let mut model = match warm {
        None => LicModel::new(codec, init_seed(cfg, quality))?,
        Some(w) => {
            if w.adaptation.is_some() {
                return Err(Error::Config("warm start needs a backbone-only checkpoint".into()));
            }
            let c = &w.backbone.config;
            if (c.latent_channels, c.hidden_channels) != (codec.latent_channels, codec.hidden_channels) {
                return Err(Error::Compat(format!(
                    "warm-start checkpoint has M={} N={}, config wants M={} N={}",
                    c.latent_channels, c.hidden_channels, codec.latent_channels, codec.hidden_channels
                )));
            }
            tc.epochs = cfg.backbone.warm_start_epochs.unwrap_or(tc.epochs);
            let mut m = w.clone();
            m.backbone.config = codec;
            m
        }
    };
    let state = pretrain_backbone(&mut model, &train, &val, &tc, None)?;
    Ok(Trained { model, state })
}

/// Pretrains every configured quality, following the warm-start order.
/// Results come back sorted by quality.
pub fn pretrain_all(cfg: &RunConfig, ds: &DomainDataset, mut on_done: impl FnMut(&Trained)) -> Result<Vec<Trained>> {
    let mut done: BTreeMap<u8, Trained> = BTreeMap::new();
    for (q, from) in cfg.backbone.pretrain_order() {
        let warm = from.map(|f| &done[&f].model);
        let t = pretrain_quality(cfg, ds, q, warm)?;
        on_done(&t);
        done.insert(q, t);
    }
    Ok(done.into_values().collect())
}

/// Stage B on every domain, starting from a pretrained backbone.
pub fn adapt_quality(cfg: &RunConfig, ds: &DomainDataset, pretrained: &LicModel<f32>) -> Result<Trained> {
    if pretrained.adaptation.is_some() {
        return Err(Error::Config("backbone checkpoint already carries adapters".into()));
    }
    let meta = cfg.adapter.meta(&ds.domains)?;
    let mut model = pretrained.clone();
    let q = model.backbone.config.quality_index;
    model.attach_adapters(meta, BankInit::Gaussian(cfg.adapter.init_std), init_seed(cfg, q) ^ 0xada)?;
    let train = images_of(ds, None, Split::Train)?;
    let val = images_of(ds, None, Split::Val)?;
    let state = train_adapters(&mut model, &train, &val, &cfg.adapt, cfg.adapter.policy, None)?;
    Ok(Trained { model, state })
}

/// Evaluates one model per quality on the test split.
pub fn evaluate(cfg: &RunConfig, ds: &DomainDataset, models: &[LicModel<f32>]) -> Result<Report> {
    let test = images_of(ds, None, Split::Test)?;
    let sets = eval_sets(&ds.domains, test, cfg.eval.max_images);
    evaluate_model(models, &sets, &cfg.eval.policies, cfg.eval.variant)
}

pub fn backbone_path(dir: &Path, quality: u8) -> PathBuf {
    dir.join(format!("backbone_q{quality}.safetensors"))
}

pub fn adapted_path(dir: &Path, quality: u8) -> PathBuf {
    dir.join(format!("adapted_q{quality}.safetensors"))
}

/// Saves the checkpoint (with resumable state) and its metric log.
pub fn save_trained(path: &Path, t: &Trained, extra: &BTreeMap<String, String>) -> Result<()> {
    checkpoint::save(path, &t.model, Some(&t.state), extra)?;
    write_metric_log(path.with_extension("ndjson"), &t.state.log)
}
