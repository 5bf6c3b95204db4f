#![allow(dead_code)]

use omrn::data::{generate_synthetic, SynthConfig, SyntheticSet};
use omrn::localizer::{LocalizerConfig, DEFAULT_WIDTHS};
use omrn::model::{ModelConfig, ModelDims, ModelParams, SampleInput};
use omrn::training::init_params;

/// Gradient-check scale: N=6, K=4, M=8, T=3, all widths 16, H=3.
pub fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_samples: 1,
        frames: 6,
        regions: 4,
        objects: 3,
        feature_dim: 16,
        word_dim: 16,
        num_classes: 7,
        sentence_len: Some(8),
        noise_std: 0.1,
        seed,
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        dims: ModelDims {
            region_dim: 16,
            word_dim: 16,
            feat: 16,
            attn: 16,
            hidden: 16,
        },
        localizer: LocalizerConfig {
            widths: vec![3, 5, 7],
            ..Default::default()
        },
        ..Default::default()
    }
}

/// A smaller model for quick gradient tests.
pub fn small_model(region_dim: usize, word_dim: usize) -> ModelConfig {
    ModelConfig {
        dims: ModelDims {
            region_dim,
            word_dim,
            feat: 6,
            attn: 5,
            hidden: 3,
        },
        localizer: LocalizerConfig {
            widths: vec![3, 5, 7],
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Training scale used for the overfitting runs.
pub fn desk_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_samples: 4,
        frames: 12,
        regions: 5,
        objects: 3,
        feature_dim: 16,
        word_dim: 16,
        seed,
        ..Default::default()
    }
}

pub fn desk_model() -> ModelConfig {
    ModelConfig {
        dims: ModelDims {
            region_dim: 16,
            word_dim: 16,
            feat: 32,
            attn: 32,
            hidden: 16,
        },
        localizer: LocalizerConfig {
            widths: DEFAULT_WIDTHS.to_vec(),
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn inputs(set: &SyntheticSet, cfg: &ModelConfig) -> Vec<SampleInput<f64>> {
    set.samples
        .iter()
        .map(|s| SampleInput::new(s, cfg).unwrap())
        .collect()
}

pub fn synth_inputs(synth: &SynthConfig, cfg: &ModelConfig) -> (SyntheticSet, Vec<SampleInput<f64>>) {
    let set = generate_synthetic(synth).unwrap();
    let inputs = inputs(&set, cfg);
    (set, inputs)
}

pub fn random_params(cfg: &ModelConfig, seed: u64, scale: f64) -> ModelParams<f64> {
    let template = ModelParams::<f64>::zeros(&cfg.dims, cfg.localizer.widths.len());
    init_params(&template, seed, scale)
}
