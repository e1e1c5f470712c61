//! Ready-made architectures and training setups for MNIST-style experiments.

use crate::error::{Error, Result};
use crate::nn::LayerSpec;
use crate::routing::RouterSpec;
use crate::train::{Precision, TrainConfig, TrainMode};
use crate::trellis::{BlockSpec, TrellisConfig};

const MNIST_SHAPE: [usize; 3] = [1, 28, 28];

fn conv_block(channels: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::conv(channels, 5), LayerSpec::Relu, LayerSpec::MaxPool2d]
}

fn mnist_router() -> RouterSpec {
    RouterSpec { transform: vec![LayerSpec::Flatten, LayerSpec::dense(16), LayerSpec::Relu] }
}

/// LeNet-style trellis with the given unit counts: conv(20) | conv(15) | dense(25), head dense(10).
pub fn mnist_lenet_trellis(units: [usize; 3]) -> TrellisConfig {
    TrellisConfig {
        input_shape: MNIST_SHAPE.to_vec(),
        num_classes: 10,
        blocks: vec![
            BlockSpec { units: units[0], layers: conv_block(20), router: Some(mnist_router()) },
            BlockSpec { units: units[1], layers: conv_block(15), router: Some(mnist_router()) },
            BlockSpec {
                units: units[2],
                layers: vec![LayerSpec::Flatten, LayerSpec::dense(25), LayerSpec::Relu],
                router: None,
            },
        ],
        head: vec![LayerSpec::dense(10)],
    }
}

/// Unconditional LeNet as a single-block network.
pub fn mnist_lenet_plain(conv2: usize, hidden: usize) -> TrellisConfig {
    let mut layers = conv_block(20);
    layers.extend(conv_block(conv2));
    layers.extend([LayerSpec::Flatten, LayerSpec::dense(hidden), LayerSpec::Relu]);
    TrellisConfig {
        input_shape: MNIST_SHAPE.to_vec(),
        num_classes: 10,
        blocks: vec![BlockSpec { units: 1, layers, router: None }],
        head: vec![LayerSpec::dense(10)],
    }
}

pub fn mnist_thick() -> TrellisConfig {
    mnist_lenet_plain(50, 500)
}

pub fn mnist_slim() -> TrellisConfig {
    mnist_lenet_plain(15, 25)
}

pub fn mnist_cigt_124() -> TrellisConfig {
    mnist_lenet_trellis([1, 2, 4])
}

/// Default MNIST training setup: batch 125, momentum 0.9, λ_balance 2.
pub fn mnist_training(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 125,
        lr_initial: 0.01,
        lr_schedule: Vec::new(),
        momentum: 0.9,
        weight_decay: 5e-4,
        lambda_ig: 1.0,
        lambda_balance: 2.0,
        tau_initial: 25.0,
        tau_min: 1.0,
        tau_decay: 0.9999,
        warmup_epochs: 0,
        mode: TrainMode::Ig,
        seed,
        eval_every: 1,
        precision: Precision::F32,
    }
}

/// Fashion-MNIST variant of the trellis: dropout 0.3 before the head.
pub fn fashion_cigt_124() -> TrellisConfig {
    let mut config = mnist_cigt_124();
    config.head.insert(0, LayerSpec::Dropout { p: 0.3 });
    config
}

pub fn fashion_training(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 125,
        lr_schedule: vec![(27_000, 0.5), (42_000, 0.5), (52_000, 0.1)],
        lambda_ig: 0.7,
        warmup_epochs: 25,
        ..mnist_training(125, seed)
    }
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: &[&str] = &[
    "mnist-cigt-124",
    "mnist-random",
    "mnist-cigt-111",
    "mnist-slim",
    "mnist-thick",
    "fashion-cigt-124",
];

/// Model and training configuration of a named preset.
pub fn preset(name: &str) -> Result<(TrellisConfig, TrainConfig)> {
    let train = mnist_training(100, 0);
    Ok(match name {
        "mnist-cigt-124" => (mnist_cigt_124(), train),
        "mnist-random" => (mnist_cigt_124(), TrainConfig { mode: TrainMode::Random, ..train }),
        "mnist-cigt-111" => (mnist_lenet_trellis([1, 1, 1]), TrainConfig { lambda_ig: 0.0, ..train }),
        "mnist-slim" => (mnist_slim(), TrainConfig { lambda_ig: 0.0, ..train }),
        "mnist-thick" => (mnist_thick(), TrainConfig { lambda_ig: 0.0, ..train }),
        "fashion-cigt-124" => (fashion_cigt_124(), fashion_training(0)),
        other => {
            return Err(Error::Config(format!(
                "preset: unknown name {other:?} (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    })
}
