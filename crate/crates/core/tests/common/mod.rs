#![allow(dead_code)]

use rfshapelet::backbone::BackboneConfig;
use rfshapelet::embedder::EmbedderConfig;
use rfshapelet::model::ModelConfig;
use rfshapelet::signal::{DomainRole, IqFrame};
use rfshapelet::synth::{make_device_fleet, synth_frame, ChannelProfile, SimParams};

/// Small model config that keeps forward passes cheap.
pub fn tiny(classes: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            layer_count: 1,
            d_h: 16,
            head_count: 2,
            ff_width: 32,
            ..BackboneConfig::default()
        },
        embedder: EmbedderConfig {
            hidden_channels: 8,
            ..EmbedderConfig::default()
        },
        d_l: 8,
        classes,
        ..ModelConfig::default()
    }
}

/// `n` clean frames cycling through `classes` devices.
pub fn frames(classes: usize, n: usize, seed: u64) -> Vec<IqFrame> {
    let fleet = make_device_fleet(classes, 1.0, 1).unwrap();
    let ch = ChannelProfile::ideal("clean", DomainRole::Source);
    (0..n)
        .map(|i| {
            let mut f = synth_frame(&fleet[i % classes], &ch, seed.wrapping_add(i as u64), &SimParams::default()).unwrap();
            f.device = i % classes;
            f
        })
        .collect()
}
