//! Routers and the information-gain objective that trains them.
//!
//! A router maps the output of the F unit a sample just traversed to a
//! temperatured softmax over the next block's units. Its training signal is
//! the balanced information gain between labels and routing decisions,
//! estimated on each minibatch:
//!
//! ```text
//! IG = H[p(y)] + λ_balance·H[p(Z)] − H[p(y, Z)]
//! ```
//!
//! All entropies use the natural log with `0·log 0 = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Binding, LayerKind, LayerParams, LayerSpec, ParamStore, Stack};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

const SUM_TOLERANCE: f64 = 1e-6;

/// Shannon entropy (nats) of a non-negative weight vector, `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Joint distribution `p(y = c, Z = k)` stored row-major as `[classes, units]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    classes: usize,
    units: usize,
    data: Vec<f64>,
}

impl Joint {
    pub fn new(classes: usize, units: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * units || classes == 0 || units == 0 {
            return Err(Error::input(format!(
                "joint of {classes}x{units} needs {} entries, got {}",
                classes * units,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::input(format!("joint has a negative or non-finite entry {bad}")));
        }
        let total: f64 = data.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::input(format!("joint entries sum to {total}, not 1")));
        }
        Ok(Joint { classes, units, data })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn get(&self, class: usize, unit: usize) -> f64 {
        self.data[class * self.units + unit]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `p(y)`.
    pub fn class_marginal(&self) -> Vec<f64> {
        self.data.chunks(self.units).map(|r| r.iter().sum()).collect()
    }

    /// `p(Z)`.
    pub fn unit_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.units];
        for row in self.data.chunks(self.units) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }
}

/// `p(y=c, Z=k) = (1/B)·Σ_i 1[y_i = c]·probs[i,k]` from row-major `[B,K]` routing rows.
pub fn joint_from_rows(probs: &[f64], units: usize, labels: &[usize], classes: usize) -> Result<Joint> {
    if labels.is_empty() {
        return Err(Error::input("joint distribution of an empty batch"));
    }
    if probs.len() != labels.len() * units {
        return Err(Error::input(format!(
            "{} routing rows of width {units} expected, got {} values",
            labels.len(),
            probs.len()
        )));
    }
    let mut data = vec![0.0; classes * units];
    for (row, &y) in probs.chunks(units).zip(labels) {
        if y >= classes {
            return Err(Error::input(format!("label {y} out of range for {classes} classes")));
        }
        for (k, &p) in row.iter().enumerate() {
            data[y * units + k] += p;
        }
    }
    let inv = 1.0 / labels.len() as f64;
    data.iter_mut().for_each(|v| *v *= inv);
    Joint::new(classes, units, data)
}

/// Empirical joint of a batch's routing distributions and labels.
pub fn joint_distribution<T: Element>(
    dist: &RoutingDistribution<T>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Joint> {
    joint_from_rows(&dist.probs.to_f64_vec(), dist.units(), labels, num_classes)
}

/// Balanced information gain `H[p(y)] + λ·H[p(Z)] − H[p(y,Z)]`.
pub fn information_gain(joint: &Joint, lambda_balance: f64) -> Result<f64> {
    if !(lambda_balance >= 1.0) || !lambda_balance.is_finite() {
        return Err(Error::config(format!("lambda_balance must be >= 1, got {lambda_balance}")));
    }
    Ok(entropy(&joint.class_marginal()) + lambda_balance * entropy(&joint.unit_marginal())
        - entropy(joint.as_slice()))
}

/// Unbalanced information gain in its conditional form `H[p(y)] − E_Z[H[p(y|Z)]]`.
pub fn conditional_information_gain(joint: &Joint) -> f64 {
    let pz = joint.unit_marginal();
    let mut expected = 0.0;
    for (k, &mass) in pz.iter().enumerate() {
        if mass <= 0.0 {
            continue;
        }
        let cond: Vec<f64> = (0..joint.classes()).map(|c| joint.get(c, k) / mass).collect();
        expected += mass * entropy(&cond);
    }
    entropy(&joint.class_marginal()) - expected
}

/// Per-sample categorical distributions `p(Z_l | x)` as `[B, K]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDistribution<T> {
    probs: Tensor<T>,
}

impl<T: Element> RoutingDistribution<T> {
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        if probs.shape().len() != 2 || probs.shape()[1] == 0 {
            return Err(Error::input(format!("routing rows must be [B,K], got {:?}", probs.shape())));
        }
        let k = probs.shape()[1];
        for (i, row) in probs.data().chunks(k).enumerate() {
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            let in_range = row.iter().all(|v| (0.0..=1.0).contains(&v.as_f64()));
            if !in_range || (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::input(format!("routing row {i} is not a distribution (sum {sum})")));
            }
        }
        Ok(RoutingDistribution { probs })
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn rows(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let k = self.units();
        &self.probs.data()[i * k..(i + 1) * k]
    }

    /// Mean routing row, i.e. the batch estimate of `p(Z)`.
    pub fn marginal(&self) -> Vec<f64> {
        let k = self.units();
        let mut out = vec![0.0; k];
        for row in self.probs.data().chunks(k) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v.as_f64();
            }
        }
        let n = self.rows().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Draw one unit per row from its categorical distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        sample_route(self, rng)
    }

    pub fn argmax(&self) -> Vec<usize> {
        argmax_route(self)
    }
}

/// One categorical draw per row. Single-unit rows consume no randomness.
pub fn sample_route<T: Element, R: Rng + ?Sized>(dist: &RoutingDistribution<T>, rng: &mut R) -> Vec<usize> {
    let k = dist.units();
    if k == 1 {
        return vec![0; dist.rows()];
    }
    (0..dist.rows())
        .map(|i| {
            let row = dist.row(i);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last_positive = 0;
            for (j, p) in row.iter().enumerate() {
                let p = p.as_f64();
                if p > 0.0 {
                    last_positive = j;
                }
                acc += p;
                if u < acc {
                    return j;
                }
            }
            last_positive
        })
        .collect()
}

/// Per-row argmax, lowest index on ties.
pub fn argmax_route<T: Element>(dist: &RoutingDistribution<T>) -> Vec<usize> {
    (0..dist.rows())
        .map(|i| {
            let row = dist.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Uniform unit draws, one per sample. Single-unit blocks consume no randomness.
pub fn uniform_route<R: Rng + ?Sized>(rows: usize, units: usize, rng: &mut R) -> Vec<usize> {
    if units == 1 {
        return vec![0; rows];
    }
    (0..rows).map(|_| rng.gen_range(0..units)).collect()
}

/// Router specification: feature transform applied before the routing hyperplanes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSpec {
    pub transform: Vec<LayerSpec>,
}

/// An H unit: feature transform `h(x)`, hyperplanes `{w_k, b_k}` and temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterState {
    pub transform: Stack,
    pub hyperplanes: LayerParams,
    pub temperature: f64,
}

impl RouterState {
    pub fn build<T: Element, R: Rng + ?Sized>(
        spec: &RouterSpec,
        input_shape: &[usize],
        fan_out: usize,
        name: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if fan_out == 0 {
            return Err(Error::config(format!("router {name} has no units to route to")));
        }
        let transform = Stack::build(&spec.transform, input_shape, &format!("{name}.transform"), false, store, rng)?;
        let fan_in = match transform.output_shape.as_slice() {
            [d] => *d,
            other => {
                return Err(Error::config(format!(
                    "router {name} features must be flat, transform produces {other:?}"
                )))
            }
        };
        let hyperplanes = LayerParams::init(
            LayerKind::Dense { fan_in, fan_out },
            &format!("{name}.hyperplanes"),
            false,
            store,
            rng,
        );
        Ok(RouterState { transform, hyperplanes, temperature: 1.0 })
    }

    pub fn fan_out(&self) -> usize {
        self.hyperplanes.kind.bias_len()
    }

    /// Router features `h(x)` for a batch of F-unit outputs.
    pub fn features<T: Element, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding<'_, T>,
        input: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.transform.forward(tape, bind, input, training, rng)
    }

    /// `softmax((w_k·h + b_k)/τ)` over the next block's units.
    pub fn routing_softmax<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding<'_, T>,
        features: Var,
    ) -> Result<Var> {
        let logits = self.hyperplanes.forward(tape, bind, features)?;
        tape.softmax(logits, self.temperature)
    }
}

/// Route `features` through `router`, record the balanced IG of the resulting
/// distribution and backpropagate `−λ_IG·IG`. Returns the IG value; gradients for
/// the router parameters and for `features` (when it requires them) are left on the tape.
#[allow(clippy::too_many_arguments)]
pub fn ig_loss_with_grad<T: Element>(
    tape: &mut Tape<T>,
    bind: &mut Binding<'_, T>,
    router: &RouterState,
    features: Var,
    labels: &[usize],
    num_classes: usize,
    lambda_ig: f64,
    lambda_balance: f64,
) -> Result<f64> {
    let probs = router.routing_softmax(tape, bind, features)?;
    let ig = tape.information_gain(probs, labels, num_classes, lambda_balance)?;
    let value = tape.value(ig).data()[0].as_f64();
    let loss = tape.scale(ig, -lambda_ig)?;
    tape.backward(loss)?;
    Ok(value)
}
