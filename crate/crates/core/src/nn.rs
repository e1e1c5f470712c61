//! Layer specifications, parameter storage and stacked layer execution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Padding, Tape, Var};
use crate::tensor::{Element, Tensor};

/// Declarative description of one layer in a unit, router or head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "same_padding")]
        padding: Padding,
    },
    Dense {
        units: usize,
    },
    Relu,
    MaxPool2d,
    GlobalAvgPool,
    Flatten,
    Dropout {
        p: f64,
    },
}

fn same_padding() -> Padding {
    Padding::Same
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d { out_channels, kernel, padding: Padding::Same }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units }
    }

    /// Per-sample output shape (no batch axis) for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { out_channels, kernel, padding } => {
                let [_, h, w] = spatial(input, "conv2d")?;
                let pad = padding.amount(kernel)?;
                let oh = (h + 2 * pad).checked_sub(kernel).map(|v| v + 1);
                let ow = (w + 2 * pad).checked_sub(kernel).map(|v| v + 1);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if out_channels > 0 => Ok(vec![out_channels, oh, ow]),
                    _ => Err(Error::config(format!("conv2d k={kernel} does not fit input {input:?}"))),
                }
            }
            LayerSpec::Dense { units } => {
                if input.len() != 1 {
                    return Err(Error::config(format!(
                        "dense layer needs a flat input, got {input:?} (add a flatten layer)"
                    )));
                }
                if units == 0 {
                    return Err(Error::config("dense layer with zero units"));
                }
                Ok(vec![units])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::config(format!("dropout probability must be in [0,1), got {p}")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool2d => {
                let [c, h, w] = spatial(input, "max_pool2d")?;
                Ok(vec![c, h.div_ceil(2), w.div_ceil(2)])
            }
            LayerSpec::GlobalAvgPool => {
                let [c, _, _] = spatial(input, "global_avg_pool")?;
                Ok(vec![c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn spatial(input: &[usize], what: &str) -> Result<[usize; 3]> {
    match *input {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::config(format!("{what} needs a [C,H,W] input, got {input:?}"))),
    }
}

/// Shape of every intermediate output of a layer list, starting from `input`.
pub fn infer_shapes(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input.to_vec();
    for layer in layers {
        cur = layer.output_shape(&cur)?;
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether weight decay applies (router parameters are exempt).
    pub decay: bool,
}

/// Flat, ordered collection of every trainable tensor in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `Σ ½·‖θ‖²` over decayed parameters.
    pub fn half_sq_norm_decayed(&self) -> f64 {
        0.5 * self.params.iter().filter(|p| p.decay).map(|p| p.value.sum_sq()).sum::<f64>()
    }
}

/// Lazily records parameters onto a tape as leaves, one leaf per parameter per pass.
pub struct Binding<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Element> Binding<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Binding { store, vars: vec![None; store.len()], trainable }
    }

    pub fn var(&mut self, tape: &mut Tape<T>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let v = tape.leaf(self.store.get(id).value.clone(), self.trainable)?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn into_vars(self) -> Vec<Option<Var>> {
        self.vars
    }
}

/// Gradients for every parameter of a store; parameters not reached are `None`.
pub fn collect_grads<T: Element>(tape: &Tape<T>, vars: &[Option<Var>]) -> Vec<Option<Tensor<T>>> {
    vars.iter().map(|v| v.and_then(|v| tape.grad(v))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, padding: Padding },
    Dense { fan_in: usize, fan_out: usize },
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![out_channels, in_channels, kernel, kernel]
            }
            LayerKind::Dense { fan_in, fan_out } => vec![fan_in, fan_out],
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Conv2d { out_channels, .. } => out_channels,
            LayerKind::Dense { fan_out, .. } => fan_out,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerKind::Dense { fan_in, .. } => fan_in,
        }
    }
}

/// A parameterised layer: its hyperparameters plus handles into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerParams {
    /// Allocate Kaiming-uniform weights (bound `sqrt(6/fan_in)`) and zero biases.
    pub fn init<T: Element, R: Rng + ?Sized>(
        kind: LayerKind,
        name: &str,
        decay: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let shape = kind.weight_shape();
        let bound = (6.0 / kind.fan_in() as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(&shape, data).expect("weight shape matches its data"),
            decay,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[kind.bias_len()]), decay);
        LayerParams { kind, weight, bias }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, bind: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let w = bind.var(tape, self.weight)?;
        let b = bind.var(tape, self.bias)?;
        match self.kind {
            LayerKind::Conv2d { padding, .. } => tape.conv2d(x, w, b, padding),
            LayerKind::Dense { .. } => tape.dense(x, w, b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Layer {
    Affine(LayerParams),
    Relu,
    MaxPool2d,
    GlobalAvgPool,
    Flatten,
    Dropout(f64),
}

/// A compiled sequence of layers with known input and output shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl Stack {
    pub fn build<T: Element, R: Rng + ?Sized>(
        specs: &[LayerSpec],
        input_shape: &[usize],
        name: &str,
        decay: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            let next = spec.output_shape(&shape)?;
            let layer = match *spec {
                LayerSpec::Conv2d { out_channels, kernel, padding } => {
                    let kind = LayerKind::Conv2d { in_channels: shape[0], out_channels, kernel, padding };
                    Layer::Affine(LayerParams::init(kind, &format!("{name}.{i}"), decay, store, rng))
                }
                LayerSpec::Dense { units } => {
                    let kind = LayerKind::Dense { fan_in: shape[0], fan_out: units };
                    Layer::Affine(LayerParams::init(kind, &format!("{name}.{i}"), decay, store, rng))
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2d => Layer::MaxPool2d,
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dropout { p } => Layer::Dropout(p),
            };
            layers.push(layer);
            shape = next;
        }
        Ok(Stack { layers, input_shape: input_shape.to_vec(), output_shape: shape })
    }

    pub fn forward<T: Element, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding<'_, T>,
        mut x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = match layer {
                Layer::Affine(p) => p.forward(tape, bind, x)?,
                Layer::Relu => tape.relu(x)?,
                Layer::MaxPool2d => tape.maxpool2d(x)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Flatten => tape.flatten(x)?,
                Layer::Dropout(p) => tape.dropout(x, *p, training, rng)?,
            };
        }
        Ok(x)
    }

    pub fn affine_layers(&self) -> impl Iterator<Item = &LayerParams> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Affine(p) => Some(p),
            _ => None,
        })
    }
}
