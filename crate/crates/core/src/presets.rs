//! Named model and training configurations.

use crate::model::{ModelConfig, NoiseModel};
use crate::train::TrainConfig;
use crate::variational::PriorMode;

/// Plate inversion: displacement in, Young's modulus out.
pub fn plate_model() -> ModelConfig {
    ModelConfig {
        dim: 2,
        latent_dim: 25,
        message_passes: 5,
        out_dim: 1,
        mlp_layers: 3,
        decoder_depth: 2,
        decoder_width: 75,
        prior_mode: PriorMode::Mixture,
        noise_model: NoiseModel::Quadrature,
        prior_pi: 0.5,
        prior_sigma1: (-1.0f64).exp(),
        prior_sigma2: (-2.0f64).exp(),
        rho_init: -5.0,
        noise_init: 0.1,
        output_scale: 1.0,
    }
}

pub fn plate_train() -> TrainConfig {
    TrainConfig {
        epochs: 4500,
        n_batch: 2,
        lr: 1e-3,
        decay: 0.98,
        decay_every: 700,
        clip_norm: 10.0,
        seed: 0,
    }
}

/// Plate schedule shortened for a single-core desk run.
pub fn plate_desk_train() -> TrainConfig {
    TrainConfig {
        epochs: 1500,
        ..plate_train()
    }
}

/// Beam load localization: displacement in, nodal load vector out.
///
/// The target is zero except at one node, and a per-node variance head
/// learns to explain that spike as noise instead of fitting it, so the
/// likelihood uses the shared noise level only.
pub fn beam_model() -> ModelConfig {
    ModelConfig {
        latent_dim: 12,
        message_passes: 4,
        out_dim: 2,
        decoder_width: 40,
        noise_model: NoiseModel::GlobalOnly,
        output_scale: 10.0,
        ..plate_model()
    }
}

pub fn beam_train() -> TrainConfig {
    TrainConfig {
        epochs: 5000,
        decay_every: 1000,
        ..plate_train()
    }
}

pub fn beam_desk_train() -> TrainConfig {
    TrainConfig {
        epochs: 300,
        ..beam_train()
    }
}

/// 300 epochs of the plate model, for quick end-to-end checks.
pub fn smoke_train() -> TrainConfig {
    TrainConfig {
        epochs: 300,
        ..plate_train()
    }
}

pub fn model_preset(name: &str) -> Option<ModelConfig> {
    match name {
        "plate" | "plate-desk" | "smoke" => Some(plate_model()),
        "beam" | "beam-desk" => Some(beam_model()),
        _ => None,
    }
}

pub fn train_preset(name: &str) -> Option<TrainConfig> {
    match name {
        "plate" => Some(plate_train()),
        "plate-desk" => Some(plate_desk_train()),
        "beam" => Some(beam_train()),
        "beam-desk" => Some(beam_desk_train()),
        "smoke" => Some(smoke_train()),
        _ => None,
    }
}
