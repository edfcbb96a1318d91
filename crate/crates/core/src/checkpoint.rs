//! Checkpoints: named little-endian f32 tensors in a safetensors container,
//! with the codec config, adaptation layout and optional training state
//! carried as JSON metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::adapters::BankInit;
use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::model::{AdaptationMeta, LicModel};
use crate::optim::{Adam, AdamConfig, PlateauScheduler};
use crate::tensor::Tensor;
use crate::train::{MetricRecord, RunState};

pub const FORMAT_VERSION: u32 = 1;

const KEY_VERSION: &str = "format_version";
const KEY_CONFIG: &str = "codec_config";
const KEY_ADAPTATION: &str = "adaptation";
const KEY_RUN: &str = "run_state";
const KEY_EXTRA: &str = "extra";

#[derive(Serialize, Deserialize)]
struct RunMeta {
    epoch: usize,
    lr: f64,
    t: u64,
    adam: AdamConfig,
    scheduler: PlateauScheduler,
    log: Vec<MetricRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: LicModel<f32>,
    /// Present when saved mid-training.
    pub run: Option<RunState>,
    /// Free-form string annotations.
    pub extra: BTreeMap<String, String>,
}

fn to_le_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn to_bytes(model: &LicModel<f32>, run: Option<&RunState>, extra: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec(), to_le_bytes(p.tensor.data())))
        .collect();
    let mut meta = HashMap::new();
    meta.insert(KEY_VERSION.to_string(), FORMAT_VERSION.to_string());
    meta.insert(KEY_CONFIG.to_string(), serde_json::to_string(&model.backbone.config).map_err(ckpt_err)?);
    if let Some(a) = &model.adaptation {
        meta.insert(KEY_ADAPTATION.to_string(), serde_json::to_string(&a.meta).map_err(ckpt_err)?);
    }
    if let Some(run) = run {
        for (name, t) in run.adam.state_tensors(&model.store) {
            named.push((name, t.shape().to_vec(), to_le_bytes(t.data())));
        }
        let rm = RunMeta {
            epoch: run.epoch,
            lr: run.adam.lr,
            t: run.adam.t,
            adam: run.adam.config,
            scheduler: run.scheduler.clone(),
            log: run.log.clone(),
        };
        meta.insert(KEY_RUN.to_string(), serde_json::to_string(&rm).map_err(ckpt_err)?);
    }
    if !extra.is_empty() {
        meta.insert(KEY_EXTRA.to_string(), serde_json::to_string(extra).map_err(ckpt_err)?);
    }
    let views = named
        .iter()
        .map(|(n, s, d)| Ok((n.as_str(), TensorView::new(Dtype::F32, s.clone(), d).map_err(ckpt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &Some(meta)).map_err(ckpt_err)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(ckpt_err)?;
    let meta = header.metadata().clone().unwrap_or_default();
    let version: u32 = meta
        .get(KEY_VERSION)
        .ok_or_else(|| ckpt_err("missing format_version"))?
        .parse()
        .map_err(ckpt_err)?;
    if version != FORMAT_VERSION {
        return Err(Error::Compat(format!("checkpoint format {version}, expected {FORMAT_VERSION}")));
    }
    let config: CodecConfig =
        serde_json::from_str(meta.get(KEY_CONFIG).ok_or_else(|| ckpt_err("missing codec_config"))?).map_err(ckpt_err)?;
    config.validate()?;
    let adaptation: Option<AdaptationMeta> =
        meta.get(KEY_ADAPTATION).map(|s| serde_json::from_str(s)).transpose().map_err(ckpt_err)?;
    let run_meta: Option<RunMeta> = meta.get(KEY_RUN).map(|s| serde_json::from_str(s)).transpose().map_err(ckpt_err)?;
    let extra: BTreeMap<String, String> =
        meta.get(KEY_EXTRA).map(|s| serde_json::from_str(s)).transpose().map_err(ckpt_err)?.unwrap_or_default();

    let st = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(ckpt_err(format!("tensor {name} has dtype {:?}, expected F32", view.dtype())));
        }
        let data: Vec<f32> =
            view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
        tensors.insert(name, Tensor::new(view.shape(), data).map_err(ckpt_err)?);
    }

    // Rebuild the same structure a fresh model would have, then overwrite
    // every parameter, so ids and ordering match the saved model.
    let mut model = LicModel::<f32>::new(config, 0)?;
    if let Some(meta) = adaptation {
        model.attach_adapters(meta, BankInit::Zero, 0)?;
    }
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let t = tensors.remove(&name).ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
        if t.shape() != model.store.tensor(id).shape() {
            return Err(ckpt_err(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                model.store.tensor(id).shape()
            )));
        }
        *model.store.tensor_mut(id) = t;
    }
    let run = match run_meta {
        Some(rm) => {
            let mut adam = Adam::restore(rm.lr, rm.t, &model.store, &tensors)?;
            adam.config = rm.adam;
            tensors.retain(|k, _| !k.starts_with("optim."));
            Some(RunState { epoch: rm.epoch, adam, scheduler: rm.scheduler, log: rm.log })
        }
        None => None,
    };
    if let Some(name) = tensors.keys().next() {
        return Err(ckpt_err(format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint { model, run, extra })
}

pub fn save(
    path: impl AsRef<Path>,
    model: &LicModel<f32>,
    run: Option<&RunState>,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, run, extra)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterLayout;
    use crate::data::{synthesize_one, SyntheticKind};
    use crate::gate::GateConfig;
    use crate::image::Image;
    use crate::model::GateInput;
    use crate::policy::PolicyKind;
    use crate::train::{pretrain_backbone, train_adapters, TrainConfig};

    fn adapted() -> LicModel<f32> {
        let mut m = LicModel::<f32>::new(CodecConfig::for_quality(2, 8, 8).unwrap(), 3).unwrap();
        let meta = AdaptationMeta {
            k: 2,
            layout: AdapterLayout::LastThree,
            gate: GateConfig { conv_channels: 4, pool_kernel: 2, adaptive_out: 2, k: 2 },
            gate_input: GateInput::Quantized,
            policy: PolicyKind::Top1,
            domains: vec!["natural".into(), "sketch".into(), "comic".into()],
        };
        m.attach_adapters(meta, BankInit::Gaussian(crate::adapters::INIT_STD), 4).unwrap();
        m
    }

    fn same_params(a: &LicModel<f32>, b: &LicModel<f32>) {
        assert_eq!(a.store.len(), b.store.len());
        for ((ia, pa), (ib, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(ia, ib);
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.trainable, pb.trainable, "{}", pa.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&pa.tensor), bits(&pb.tensor), "{}", pa.name);
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = adapted();
        let mut extra = BTreeMap::new();
        extra.insert("note".to_string(), "x".to_string());
        let back = from_bytes(&to_bytes(&m, None, &extra).unwrap()).unwrap();
        same_params(&m, &back.model);
        assert_eq!(back.model.adaptation.unwrap().meta, m.adaptation.unwrap().meta);
        assert_eq!(back.extra, extra);
        assert!(back.run.is_none());

        let plain = LicModel::<f32>::new(CodecConfig::for_quality(0, 8, 8).unwrap(), 5).unwrap();
        let back = from_bytes(&to_bytes(&plain, None, &BTreeMap::new()).unwrap()).unwrap();
        same_params(&plain, &back.model);
        assert!(back.model.adaptation.is_none());
        assert_eq!(back.model.backbone.config, plain.backbone.config);
    }

    #[test]
    fn resume_reproduces_the_next_epoch() {
        let mut train: Vec<Image> = Vec::new();
        for (label, kind) in SyntheticKind::ALL.iter().enumerate() {
            train.extend((0..2).map(|i| synthesize_one(*kind, 1, 64, 64, i).unwrap().with_label(label)));
        }
        let cfg = TrainConfig { epochs: 2, batch_size: 3, lr: 1e-3, ..TrainConfig::default() };
        let one = TrainConfig { epochs: 1, ..cfg.clone() };

        let mut straight = adapted();
        let full = train_adapters(&mut straight, &train, &[], &cfg, PolicyKind::Proposed, None).unwrap();

        let mut first = adapted();
        let state = train_adapters(&mut first, &train, &[], &one, PolicyKind::Proposed, None).unwrap();
        let bytes = to_bytes(&first, Some(&state), &BTreeMap::new()).unwrap();
        let mut ck = from_bytes(&bytes).unwrap();
        assert_eq!(ck.run.as_ref(), Some(&state));
        let resumed = train_adapters(&mut ck.model, &train, &[], &cfg, PolicyKind::Proposed, ck.run).unwrap();
        assert_eq!(resumed.log.len(), full.log.len());
        for (a, b) in resumed.log.iter().zip(&full.log) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "epoch {}", a.epoch);
        }
        same_params(&straight, &ck.model);

        let mut pre = LicModel::<f32>::new(CodecConfig::for_quality(0, 8, 8).unwrap(), 5).unwrap();
        let s = pretrain_backbone(&mut pre, &train, &[], &one, None).unwrap();
        let ck = from_bytes(&to_bytes(&pre, Some(&s), &BTreeMap::new()).unwrap()).unwrap();
        assert_eq!(ck.run.unwrap(), s);
    }

    #[test]
    fn malformed_checkpoints_are_rejected() {
        assert!(matches!(from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
        let m = adapted();
        let bytes = to_bytes(&m, None, &BTreeMap::new()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 10]).is_err());
        // drop the adaptation metadata: adapter tensors become unexpected
        let views: Vec<(String, Tensor<f32>)> =
            m.store.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect();
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> =
            views.iter().map(|(n, t)| (n.clone(), t.shape().to_vec(), to_le_bytes(t.data()))).collect();
        let mut meta = HashMap::new();
        meta.insert(KEY_VERSION.to_string(), "1".to_string());
        meta.insert(KEY_CONFIG.to_string(), serde_json::to_string(&m.backbone.config).unwrap());
        let tv: Vec<_> =
            raw.iter().map(|(n, s, d)| (n.as_str(), TensorView::new(Dtype::F32, s.clone(), d).unwrap())).collect();
        let b = safetensors::serialize(tv, &Some(meta.clone())).unwrap();
        assert!(matches!(from_bytes(&b), Err(Error::Checkpoint(_))));
        meta.insert(KEY_VERSION.to_string(), "9".to_string());
        let tv: Vec<_> =
            raw.iter().map(|(n, s, d)| (n.as_str(), TensorView::new(Dtype::F32, s.clone(), d).unwrap())).collect();
        let b = safetensors::serialize(tv, &Some(meta)).unwrap();
        assert!(matches!(from_bytes(&b), Err(Error::Compat(_))));
    }
}
