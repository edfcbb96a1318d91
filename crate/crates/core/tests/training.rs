//! Training-run oracles on the desk preset. Gate accuracy after stage B is
//! checked by the acceptance suite, which trains the full desk pipeline.

use std::sync::OnceLock;

use licda_core::codec::uniform_noise;
use licda_core::data::epoch_batches;
use licda_core::metrics::psnr;
use licda_core::optim::Adam;
use licda_core::pipeline::pretrain_quality;
use licda_core::tensor::Graph;
use licda_core::train::{epoch_rng, rd_objective};
use licda_core::{DomainDataset, Image, LicModel, PolicyKind, RunConfig, Split};

const QUALITY: u8 = 2;

fn desk() -> &'static (RunConfig, DomainDataset) {
    static CELL: OnceLock<(RunConfig, DomainDataset)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = RunConfig::desk();
        cfg.pretrain.epochs = 30;
        let ds = cfg.data.build(cfg.seed).unwrap();
        (cfg, ds)
    })
}

fn source_images(split: Split) -> Vec<Image> {
    let (_, ds) = desk();
    ds.domain_split(0, split).iter().map(|i| i.load().unwrap()).collect()
}

/// 30 epochs of stage A from scratch, shared by the tests below.
fn pretrained() -> &'static (LicModel<f32>, Vec<f64>) {
    static CELL: OnceLock<(LicModel<f32>, Vec<f64>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let (cfg, ds) = desk();
        let t = pretrain_quality(cfg, ds, QUALITY, None).unwrap();
        let losses = t.state.log.iter().filter(|r| r.split == Split::Train).map(|r| r.loss).collect();
        (t.model, losses)
    })
}

#[test]
fn first_hundred_steps_decrease_the_loss() {
    let (cfg, _) = desk();
    let train = source_images(Split::Train);
    let tc = &cfg.pretrain;
    let mut model = LicModel::<f32>::new(cfg.backbone.codec(QUALITY).unwrap(), 1).unwrap();
    let mut adam = Adam::new(tc.lr);
    let mut losses = Vec::new();
    let mut epoch = 0;
    while losses.len() < 100 {
        epoch += 1;
        let mut rng = epoch_rng(tc.seed, epoch);
        for batch in epoch_batches(&train, tc.batch_size, tc.crop_size, tc.augment, &mut rng).unwrap() {
            let bs = batch.labels.len();
            let mut g = Graph::new();
            let x = g.input(batch.images);
            let noise = uniform_noise(&[bs, 32, tc.crop_size / 16, tc.crop_size / 16], &mut rng);
            let t = rd_objective(&mut g, &model, x, Some(noise)).unwrap();
            losses.push(g.value(t.loss).item() as f64);
            let grads = g.backward(t.loss, &model.store).unwrap();
            adam.step(&mut model.store, &grads);
            model.backbone.entropy.clamp_scales(&mut model.store);
        }
    }
    // Single minibatch losses are noisy, so compare means of 10-step windows.
    let windows: Vec<f64> = losses[..100].chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] < pair[0], "window means not decreasing: {windows:?}");
    }
}

#[test]
fn thirty_epochs_cut_the_rd_loss_by_thirty_percent() {
    let (_, losses) = pretrained();
    assert_eq!(losses.len(), 30);
    let drop = 1.0 - losses[29] / losses[0];
    assert!(drop >= 0.3, "loss {} -> {} ({:.1}% drop)", losses[0], losses[29], 100.0 * drop);
}

#[test]
fn pretrained_backbone_beats_the_mean_color_image() {
    let (model, _) = pretrained();
    let test = source_images(Split::Test);
    let (mut codec, mut flat) = (0.0, 0.0);
    for img in &test {
        let c = model.compress(img, PolicyKind::Proposed, None).unwrap();
        let d = model.decompress(&c.bytes, Default::default(), false).unwrap();
        codec += psnr(img, &d.image).unwrap();
        flat += psnr(img, &Image::filled(img.height(), img.width(), img.mean_color())).unwrap();
    }
    let n = test.len() as f64;
    assert!(codec / n > flat / n, "codec {:.3} dB vs mean color {:.3} dB", codec / n, flat / n);
}
