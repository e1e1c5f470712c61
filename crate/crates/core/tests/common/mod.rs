#![allow(dead_code)]

pub mod gradcases;

use cigt::nn::LayerSpec;
use cigt::routing::RouterSpec;
use cigt::trellis::{BlockSpec, TrellisConfig};
use cigt::{Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Check every input's gradient of `Σ op(inputs) ⊙ weights`. Returns the worst relative error.
pub fn check_op(
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    op: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false).unwrap()).collect();
        let out = op(&mut tape, &vars);
        let w = tape.constant(weights.clone()).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true).unwrap()).collect();
    let out = op(&mut tape, &vars);
    assert_eq!(tape.value(out).shape(), weights.shape(), "weights must match the op output");
    let w = tape.constant(weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (j, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map_or(vec![0.0; inputs[j].len()], |g| g.data().to_vec());
        let numeric = numeric_grad(&inputs[j], |probe| {
            let mut xs = inputs.to_vec();
            xs[j] = probe.clone();
            eval(&xs)
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Small two-routed-block trellis on 6×6 single-channel inputs with 3 classes.
pub fn tiny_trellis(units: [usize; 3]) -> TrellisConfig {
    let router = || Some(RouterSpec { transform: vec![LayerSpec::Flatten, LayerSpec::dense(4), LayerSpec::Relu] });
    TrellisConfig {
        input_shape: vec![1, 6, 6],
        num_classes: 3,
        blocks: vec![
            BlockSpec { units: units[0], layers: vec![LayerSpec::conv(2, 3), LayerSpec::Relu, LayerSpec::MaxPool2d], router: router() },
            BlockSpec { units: units[1], layers: vec![LayerSpec::conv(3, 3), LayerSpec::Relu, LayerSpec::MaxPool2d], router: router() },
            BlockSpec { units: units[2], layers: vec![LayerSpec::Flatten, LayerSpec::dense(5), LayerSpec::Relu], router: None },
        ],
        head: vec![LayerSpec::dense(3)],
    }
}

/// Noisy synthetic 6×6 images whose bright row encodes the class (3 classes).
pub fn synthetic_dataset(n: usize, seed: u64) -> cigt::data::LabeledDataset {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 36);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 3;
        for r in 0..6 {
            for _ in 0..6 {
                let base = if r / 2 == y { 0.8 } else { 0.1 };
                data.push((base + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0));
            }
        }
        labels.push(y);
    }
    let images = Tensor::new(&[n, 1, 6, 6], data).unwrap();
    cigt::data::LabeledDataset::new(images, labels, cigt::data::Split::Train, 3).unwrap()
}

pub fn tiny_train_config(epochs: usize, seed: u64) -> cigt::train::TrainConfig {
    cigt::train::TrainConfig {
        epochs,
        batch_size: 16,
        lr_initial: 0.05,
        weight_decay: 1e-3,
        seed,
        precision: cigt::train::Precision::F64,
        ..cigt::presets::mnist_training(epochs, seed)
    }
}
