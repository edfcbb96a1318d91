//! Fixtures shared by the benches: untrained desk-sized models and a
//! synthetic test image. Timings do not depend on the weights.

use licda_core::data::synthesize_one;
use licda_core::{CodecConfig, Image, LicModel, RunConfig, SyntheticKind};

/// Desk-preset backbone at quality 2, with adapters and gate when `adapted`.
pub fn desk_model(adapted: bool) -> LicModel<f32> {
    let cfg = RunConfig::desk();
    let codec = CodecConfig::for_quality(2, cfg.backbone.latent_channels, cfg.backbone.hidden_channels).unwrap();
    let mut model = LicModel::new(codec, 11).unwrap();
    if adapted {
        let meta = cfg.adapter.meta(&cfg.data.domains).unwrap();
        model.attach_adapters(meta, licda_core::BankInit::Gaussian(cfg.adapter.init_std), 12).unwrap();
    }
    model
}

pub fn sketch_image(height: usize, width: usize) -> Image {
    synthesize_one(SyntheticKind::LineSketch, 5, height, width, 0).unwrap()
}
